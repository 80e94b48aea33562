//! The five subcommands, each a function of a resolved [`RunConfig`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thermalign::dataset::{self, Dataset, Manifest, Split, SynthPlan};
use thermalign::flow::FlowField;
use thermalign::image::{Image, Modality};
use thermalign::metrics::{self, paired_ttest, MetricsReport, TTest};
use thermalign::model::{Model, ModelConfig};
use thermalign::params::ParamStore;
use thermalign::synth::warp_image;
use thermalign::train::{train, TrainSample};
use thermalign::{Error, Result};

use crate::config::RunConfig;
use crate::viz;

pub const METRICS_FILE: &str = "metrics.json";

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Contract(format!("no {what} given (flag or [paths] entry)")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Runs `f` over `items` on `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                scope.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == k)
                        .map(|(i, x)| (i, f(x)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<(usize, R)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    })
}

#[derive(Debug, Serialize)]
pub struct SynthOutcome {
    pub written: usize,
    pub failed: Vec<(String, String)>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Builds a manifest (from `paths.source` or procedural scenes) and writes
/// the dataset to `paths.out`. Fails with a data error only when nothing
/// could be written.
pub fn synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    let out = require(&cfg.paths.out, "output directory")?;
    let plan = SynthPlan {
        seed: cfg.seed,
        kind: cfg.synth.kind,
        magnitude: cfg.synth.magnitude,
        ranges: cfg.synth.ranges,
        test_fraction: cfg.synth.test_fraction,
    };
    let (manifest, skipped) = match &cfg.paths.source {
        Some(src) => Manifest::from_aligned_dir(&plan, src)?,
        None => (
            Manifest::procedural(&plan, cfg.synth.count, cfg.synth.height, cfg.synth.width)?,
            Vec::new(),
        ),
    };
    let summary = dataset::synthesize(&manifest, out, cfg.workers)?;
    cfg.write_into(out)?;
    let outcome = SynthOutcome {
        written: summary.written.len(),
        failed: summary.failed,
        skipped,
    };
    if outcome.written == 0 {
        let mut reasons: Vec<String> = outcome.failed.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        reasons.extend(outcome.skipped.iter().map(|(p, e)| format!("{}: {e}", p.display())));
        return Err(Error::Data {
            path: cfg.paths.source.clone().unwrap_or_else(|| out.to_path_buf()),
            reason: format!("no pair could be synthesized [{}]", reasons.join("; ")),
        });
    }
    Ok(outcome)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub samples: usize,
    pub final_loss: f64,
}

/// Trains on the training split of `paths.dataset`; writes `model.ckpt`,
/// `train.jsonl` and `config.toml` into `paths.out`.
pub fn train_cmd(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = Dataset::open(require(&cfg.paths.dataset, "dataset")?)?;
    let out = require(&cfg.paths.out, "output directory")?;
    let mcfg = cfg.model_config()?;
    let samples = ds
        .entries(Some(Split::Train))
        .map(|e| {
            let p = ds.load_pair(e)?;
            TrainSample::new(&p.visible, &p.thermal, &p.gt, &mcfg)
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Data {
            path: ds.root.clone(),
            reason: "dataset has no training pairs".into(),
        });
    }
    cfg.write_into(out)?;
    let mut model = Model::new(mcfg, cfg.train.seed)?;
    let mut log = BufWriter::new(File::create(out.join("train.jsonl"))?);
    let reports = train(&mut model, &samples, &cfg.train, Some(&mut log))?;
    drop(log);
    model.save(out.join("model.ckpt"))?;
    let outcome = TrainOutcome {
        steps: reports.len(),
        samples: samples.len(),
        final_loss: reports.last().map_or(f64::NAN, |r| r.loss),
    };
    write_json(&out.join("train_summary.json"), &outcome)?;
    Ok(outcome)
}

/// Loads a checkpoint. With `expected`, the weights must match that
/// configuration; otherwise the configuration stored in the file is used.
pub fn load_model(path: &Path, expected: Option<ModelConfig>) -> Result<Model> {
    match expected {
        None => Model::load(path),
        Some(config) => {
            let (params, _) = ParamStore::load(path)?;
            let model = Model { config, params };
            model.check_schema()?;
            Ok(model)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Latency {
    pub height: usize,
    pub width: usize,
    pub latency_ms: f64,
    pub fps: f64,
}

/// Registers one pair: `flow.flo`, `warped.png`, `side_by_side.png`,
/// `checkerboard.png` and `latency.json` in `paths.out`.
pub fn register(cfg: &RunConfig, visible: &Path, thermal: &Path, expected: Option<ModelConfig>) -> Result<Latency> {
    let out = require(&cfg.paths.out, "output directory")?;
    let model = load_model(require(&cfg.paths.checkpoint, "checkpoint")?, expected)?;
    let v = Image::load(visible, Modality::Visible)?;
    let t = Image::load(thermal, Modality::Thermal)?;
    if v.tensor().shape() != t.tensor().shape() {
        return Err(Error::Data {
            path: thermal.to_path_buf(),
            reason: "visible and thermal sizes differ".into(),
        });
    }
    let start = Instant::now();
    let flow = model.register(&v, &t)?;
    let secs = start.elapsed().as_secs_f64();
    fs::create_dir_all(out)?;
    cfg.write_into(out)?;
    flow.save(out.join("flow.flo"))?;
    let warped = warp_image(&v, &flow)?;
    warped.save_png8(out.join("warped.png"))?;
    viz::side_by_side(&warped, &t)?.save_png8(out.join("side_by_side.png"))?;
    viz::checkerboard(&warped, &t, 16)?.save_png8(out.join("checkerboard.png"))?;
    let lat = Latency {
        height: v.height(),
        width: v.width(),
        latency_ms: secs * 1e3,
        fps: 1.0 / secs.max(1e-12),
    };
    write_json(&out.join("latency.json"), &lat)?;
    Ok(lat)
}

/// What produces the evaluated flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Checkpoint,
    ZeroFlow,
    GroundTruth,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalFile {
    pub aggregate: Option<MetricsReport>,
    pub pairs: Vec<MetricsReport>,
    pub skipped: Vec<(String, String)>,
}

/// Scores every pair of `split` in `paths.dataset`; writes `metrics.json`
/// and, if enabled, `errors/<id>.png` heatmaps of `‖pred − gt‖`.
pub fn eval(cfg: &RunConfig, predictor: Predictor, split: Option<Split>, expected: Option<ModelConfig>) -> Result<EvalFile> {
    let ds = Dataset::open(require(&cfg.paths.dataset, "dataset")?)?;
    let out = require(&cfg.paths.out, "output directory")?;
    let model = match predictor {
        Predictor::Checkpoint => Some(load_model(require(&cfg.paths.checkpoint, "checkpoint")?, expected)?),
        _ => None,
    };
    fs::create_dir_all(out)?;
    cfg.write_into(out)?;
    let fp = cfg.fingerprint();
    if cfg.eval.error_maps {
        fs::create_dir_all(out.join("errors"))?;
    }
    let entries: Vec<_> = ds.entries(split).cloned().collect();
    let results = parallel_map(&entries, cfg.workers, |e| -> Result<MetricsReport> {
        let p = ds.load_pair(e)?;
        let pred = match (&model, predictor) {
            (Some(m), _) => m.register(&p.visible, &p.thermal)?,
            (None, Predictor::GroundTruth) => p.gt.clone(),
            (None, _) => FlowField::zeros(p.gt.height(), p.gt.width()),
        };
        let warped_pred = warp_image(&p.visible, &pred)?;
        let warped_gt = warp_image(&p.visible, &p.gt)?;
        let r = MetricsReport::evaluate(
            &e.id,
            &pred,
            &p.gt,
            &warped_pred,
            &warped_gt,
            &p.thermal,
            &cfg.eval.thresholds,
            &fp,
        )?;
        if cfg.eval.error_maps {
            let err = metrics::endpoint_errors(&pred, &p.gt)?;
            viz::heatmap(&err, p.gt.height(), p.gt.width(), cfg.eval.error_map_max)?
                .save_png8(out.join("errors").join(format!("{}.png", e.id)))?;
        }
        Ok(r)
    });
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(r) => pairs.push(r),
            Err(err @ (Error::Data { .. } | Error::Io(_) | Error::Image(_))) => skipped.push((e.id.clone(), err.to_string())),
            Err(err) => return Err(err),
        }
    }
    let aggregate = if pairs.is_empty() {
        None
    } else {
        Some(MetricsReport::aggregate("aggregate", &pairs)?)
    };
    let file = EvalFile {
        aggregate,
        pairs,
        skipped,
    };
    write_json(&out.join(METRICS_FILE), &file)?;
    if file.pairs.is_empty() {
        return Err(Error::Data {
            path: ds.root.clone(),
            reason: "no pair could be evaluated".into(),
        });
    }
    Ok(file)
}

fn load_eval(path: &Path) -> Result<EvalFile> {
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::Data {
        path: file.clone(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: file,
        reason: e.to_string(),
    })
}

/// Per-metric paired t-tests between two result sets, matched by pair id.
#[derive(Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub n_pairs: usize,
    pub tests: BTreeMap<String, TTest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub results: MetricsReport,
    pub compare: Option<MetricsReport>,
    pub comparison: Option<Comparison>,
}

fn scalar_metrics(r: &MetricsReport) -> Vec<(String, f64)> {
    let mut v = vec![
        ("aepe".to_string(), r.aepe),
        ("cc".to_string(), r.cc),
        ("ncc".to_string(), r.ncc),
        ("mi".to_string(), r.mi),
        ("psnr".to_string(), r.psnr),
        ("scd".to_string(), r.scd),
        ("ssim".to_string(), r.ssim),
    ];
    v.extend(r.pck.iter().map(|(k, &p)| (format!("pck@{k}"), p)));
    v
}

pub fn compare(a: &EvalFile, b: &EvalFile) -> Result<Comparison> {
    let index: BTreeMap<&str, &MetricsReport> = b.pairs.iter().map(|r| (r.id.as_str(), r)).collect();
    let matched: Vec<(&MetricsReport, &MetricsReport)> = a
        .pairs
        .iter()
        .filter_map(|r| index.get(r.id.as_str()).map(|o| (r, *o)))
        .collect();
    let mut tests = BTreeMap::new();
    if let Some((first, _)) = matched.first() {
        for (k, (name, _)) in scalar_metrics(first).into_iter().enumerate() {
            let xs: Vec<f64> = matched.iter().map(|(r, _)| scalar_metrics(r)[k].1).collect();
            let ys: Vec<f64> = matched.iter().map(|(_, o)| scalar_metrics(o)[k].1).collect();
            tests.insert(name, paired_ttest(&xs, &ys)?);
        }
    }
    Ok(Comparison {
        n_pairs: matched.len(),
        tests,
    })
}

fn table_row(name: &str, r: &MetricsReport) -> String {
    let pck: Vec<String> = r.pck.values().map(|p| format!("{p:.2}")).collect();
    format!(
        "| {name} | {} | {:.4} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.4} | {:.4} |",
        r.n_samples,
        r.aepe,
        pck.join(" / "),
        r.cc,
        r.ncc,
        r.mi,
        r.psnr,
        r.scd,
        r.ssim
    )
}

/// Summarizes one evaluation (and optionally compares it with another)
/// into `report.json` and `report.md`.
pub fn report(cfg: &RunConfig, results: &Path, other: Option<&Path>) -> Result<Report> {
    let out = require(&cfg.paths.out, "output directory")?;
    let a = load_eval(results)?;
    let agg = |e: &EvalFile, p: &Path| {
        e.aggregate.clone().ok_or_else(|| Error::Data {
            path: p.to_path_buf(),
            reason: "result set has no evaluated pairs".into(),
        })
    };
    let results_agg = agg(&a, results)?;
    let (compare_agg, comparison) = match other {
        Some(o) => {
            let b = load_eval(o)?;
            (Some(agg(&b, o)?), Some(compare(&a, &b)?))
        }
        None => (None, None),
    };
    let rep = Report {
        results: results_agg,
        compare: compare_agg,
        comparison,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &rep)?;
    let thresholds: Vec<&str> = rep.results.pck.keys().map(String::as_str).collect();
    let mut md = String::from("# Registration report\n\n");
    md.push_str(&format!(
        "| set | n | AEPE (px) | PCK % @ {} px | CC | NCC | MI (bits) | PSNR (dB) | SCD | SSIM |\n",
        thresholds.join(" / ")
    ));
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    md.push_str(&table_row(&results.display().to_string(), &rep.results));
    md.push('\n');
    if let (Some(c), Some(o)) = (&rep.compare, other) {
        md.push_str(&table_row(&o.display().to_string(), c));
        md.push('\n');
    }
    if let Some(cmp) = &rep.comparison {
        md.push_str(&format!("\n## Paired t-tests ({} matched pairs)\n\n", cmp.n_pairs));
        md.push_str("| metric | mean diff | t | p (two-sided) | note |\n|---|---|---|---|---|\n");
        for (name, t) in &cmp.tests {
            let note = if t.degenerate { "zero-variance differences" } else { "" };
            md.push_str(&format!(
                "| {name} | {:.6} | {:.4} | {:.4e} | {note} |\n",
                t.mean_diff, t.t, t.p
            ));
        }
    }
    fs::write(out.join("report.md"), md)?;
    Ok(rep)
}
