//! Multi-scale endpoint-error loss, momentum descent, and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::flow::{FlowField, FlowPyramid, PYRAMID_SCALES};
use crate::image::Image;
use crate::model::{forward, Ablation, Model, ModelConfig, Prepared};
use crate::params::{ParamStore, Session};
use crate::synth::Triplet;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Level weight base: level `k` of `N` is weighted by `α^(N−1−k)`.
    pub alpha: f64,
    pub levels: usize,
    /// Global gradient-norm bound; `None` leaves gradients untouched.
    pub clip_norm: Option<f64>,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub divisor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            lr_decay: 0.985,
            momentum: 0.9,
            alpha: 0.9,
            levels: PYRAMID_SCALES.len(),
            clip_norm: None,
            max_steps: None,
            seed: 0,
            ablation: Ablation::full(),
            divisor: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1), got {}", self.alpha);
        contract!(
            self.levels == PYRAMID_SCALES.len(),
            "loss levels {} must equal the pyramid depth {}",
            self.levels,
            PYRAMID_SCALES.len()
        );
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be finite and >= 0");
        contract!(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr decay must lie in (0, 1]");
        contract!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        if let Some(c) = self.clip_norm {
            contract!(c > 0.0, "clip norm must be positive");
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// The model variant selected by `ablation` and `divisor`, on top of `base`.
pub fn apply_ablation(base: &ModelConfig, ablation: Ablation, divisor: usize) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        divisor,
        ablation,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Per-level weights `α^(N−1−k)`, largest at the finest level.
pub fn level_weights(alpha: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| alpha.powi((n - 1 - k) as i32)).collect()
}

fn check_levels(n: usize, targets: &[FlowField], preds: usize) -> Result<()> {
    contract!(
        preds == n && targets.len() == n,
        "loss expects {n} levels, got {preds} predictions and {} targets",
        targets.len()
    );
    Ok(())
}

/// Graph form of the loss. Returns the total and each unweighted level term
/// `Σ_c |pred − gt| / (h·w)`.
pub fn multiscale_epe_graph(g: &mut Graph, levels: &[Var], targets: &[FlowField], alpha: f64) -> Result<(Var, Vec<Var>)> {
    let n = levels.len();
    check_levels(n, targets, n)?;
    let weights = level_weights(alpha, n);
    let mut terms = Vec::with_capacity(n);
    let mut total: Option<Var> = None;
    for ((&p, t), wk) in levels.iter().zip(targets).zip(weights) {
        contract!(
            g.shape(p) == t.data.shape(),
            "prediction {:?} and target {:?} differ at scale 1/{}",
            g.shape(p),
            t.data.shape(),
            t.scale
        );
        let gt = g.constant(t.data.clone());
        let d = g.sub(p, gt)?;
        let a = g.abs(d)?;
        let s = g.sum(a)?;
        let term = g.scale(s, 1.0 / (t.height() * t.width()) as f64)?;
        let weighted = g.scale(term, wk)?;
        total = Some(match total {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
        terms.push(term);
    }
    Ok((total.expect("at least one level"), terms))
}

/// Weighted multi-scale L1 endpoint loss of `pred` against `gt_full`
/// downscaled to each level. Returns the total and the per-level terms.
pub fn multiscale_epe_loss(pred: &FlowPyramid, gt_full: &FlowField, alpha: f64, n: usize) -> Result<(f64, Vec<f64>)> {
    let targets = gt_full.pyramid_targets()?;
    check_levels(n, &targets, pred.levels.len())?;
    let mut g = Graph::new();
    let levels: Vec<Var> = pred.levels.iter().map(|f| g.constant(f.data.clone())).collect();
    let (total, terms) = multiscale_epe_graph(&mut g, &levels, &targets, alpha)?;
    Ok((g.value(total).item(), terms.iter().map(|&t| g.value(t).item()).collect()))
}

/// Decomposed inputs and per-level targets of one training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: Prepared,
    pub targets: Vec<FlowField>,
    pub gt: FlowField,
}

impl TrainSample {
    /// The network matches the warped thermal grid against the visible image.
    pub fn from_triplet(t: &Triplet, cfg: &ModelConfig) -> Result<Self> {
        Self::new(&t.visible, &t.warped_thermal, &t.gt_flow, cfg)
    }

    pub fn new(visible: &Image, warped_thermal: &Image, gt: &FlowField, cfg: &ModelConfig) -> Result<Self> {
        contract!(
            gt.height() == visible.height() && gt.width() == visible.width(),
            "flow {}x{} does not match the {}x{} images",
            gt.height(),
            gt.width(),
            visible.height(),
            visible.width()
        );
        contract!(
            gt.height().is_multiple_of(32) && gt.width().is_multiple_of(32),
            "training images must have sides divisible by 32, got {}x{}",
            gt.height(),
            gt.width()
        );
        Ok(Self {
            input: Prepared::new(visible, warped_thermal, &cfg.decompose)?,
            targets: gt.pyramid_targets()?,
            gt: gt.clone(),
        })
    }
}

/// Heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    pub velocity: BTreeMap<String, Tensor>,
}

impl Momentum {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, mu: f64) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            contract!(g.shape() == p.shape(), "gradient of `{name}` has the wrong shape");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Outcome of one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    /// Unweighted level terms, coarsest first, averaged over the batch.
    pub levels: Vec<f64>,
    pub grad_norm: f64,
}

fn numeric_context(e: Error, what: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
        other => other,
    }
}

/// Loss and parameter gradients for one sample.
fn sample_grads(model: &Model, x: &TrainSample, alpha: f64) -> Result<(f64, Vec<f64>, BTreeMap<String, Tensor>)> {
    let mut s = Session::new(&model.params, true);
    let out = forward(&mut s, &model.config, &x.input).map_err(|e| numeric_context(e, "forward pass"))?;
    let levels = out.decode.levels;
    check_levels(levels.len(), &x.targets, levels.len())?;
    let (total, terms) = match multiscale_epe_graph(&mut s.g, &levels, &x.targets, alpha) {
        Ok(v) => v,
        Err(Error::Numeric(m)) => {
            let dump: Vec<String> = levels
                .iter()
                .zip(&x.targets)
                .map(|(&p, t)| {
                    let d: f64 = s.g.value(p).data().iter().zip(t.data.data()).map(|(a, b)| (a - b).abs()).sum();
                    format!("1/{}: {}", t.scale, d / (t.height() * t.width()) as f64)
                })
                .collect();
            return Err(Error::Numeric(format!("non-finite loss ({m}); per-level losses [{}]", dump.join(", "))));
        }
        Err(e) => return Err(e),
    };
    let loss = s.g.value(total).item();
    let terms = terms.iter().map(|&t| s.g.value(t).item()).collect();
    s.g.backward(total).map_err(|e| numeric_context(e, "backward pass"))?;
    Ok((loss, terms, s.grads()))
}

/// Forward, loss, backward and one momentum update over a batch; the loss
/// and gradients are batch means.
pub fn train_step(
    model: &mut Model,
    batch: &[&TrainSample],
    opt: &mut Momentum,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    contract!(!batch.is_empty(), "empty training batch");
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut levels = vec![0.0; cfg.levels];
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for x in batch {
        let (l, terms, g) = sample_grads(model, x, cfg.alpha)?;
        loss += l / n;
        for (acc, t) in levels.iter_mut().zip(terms) {
            *acc += t / n;
        }
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    for t in grads.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm; per-level losses {levels:?}")));
    }
    if let Some(c) = cfg.clip_norm {
        if grad_norm > c {
            let f = c / grad_norm;
            grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= f));
        }
    }
    opt.step(&mut model.params, &grads, lr, cfg.momentum)?;
    Ok(StepReport { loss, levels, grad_norm })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub levels: Vec<f64>,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

/// Runs the epoch loop: a seeded shuffle per epoch, fixed-size batches (the
/// last may be short), and learning-rate decay between epochs. Each update
/// is appended to `log` as a JSON line. Returns the per-step reports.
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    contract!(!samples.is_empty(), "no training samples");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Momentum::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut reports = Vec::new();
    let start = Instant::now();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at_epoch(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| reports.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = train_step(model, &batch, &mut opt, lr, cfg)
                .map_err(|e| numeric_context(e, &format!("step {}", reports.len())))?;
            if let Some(w) = log.as_deref_mut() {
                let rec = LogRecord {
                    step: reports.len(),
                    epoch,
                    lr,
                    loss: r.loss,
                    levels: r.levels.clone(),
                    grad_norm: r.grad_norm,
                    wall_ms: start.elapsed().as_millis(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            reports.push(r);
        }
    }
    Ok(reports)
}

/// Mean full-resolution endpoint error of the model over `samples`.
pub fn evaluate_aepe(model: &Model, samples: &[TrainSample]) -> Result<f64> {
    contract!(!samples.is_empty(), "no samples to evaluate");
    let mut total = 0.0;
    for x in samples {
        let pyr = model.predict_prepared(&x.input)?;
        total += crate::metrics::aepe(pyr.finest(), &x.gt)?;
    }
    Ok(total / samples.len() as f64)
}
