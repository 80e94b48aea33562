//! Module-level gradient checks shared by the integration and acceptance suites.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thermalign::correspondence::{self, CorrespondencePair, Stream};
use thermalign::encoders::{self, FeatureMap};
use thermalign::flow::{self, FlowField};
use thermalign::model::{self, ModelConfig, Prepared};
use thermalign::params::{gradcheck_session, ParamStore, Session};
use thermalign::tensor::{GradCheck, Graph, Tensor, Var};
use thermalign::train::multiscale_epe_graph;
use thermalign::Result;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A fixed random linear functional of `x`, so every output entry matters.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(x), seed));
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn init_store<F>(seed: u64, f: F) -> ParamStore
where
    F: Fn(&mut Session) -> Result<()>,
{
    let mut s = Session::init(seed);
    f(&mut s).expect("init pass");
    s.into_store().expect("init session")
}

fn fm(var: Var, scale: usize) -> FeatureMap {
    FeatureMap { var, scale }
}

/// Toy configuration for gradient checks (channels ÷ 8).
pub fn toy() -> ModelConfig {
    ModelConfig::toy(8)
}

/// Detail and base encoders on 32×32 inputs, with infusion.
pub fn encoders_check(max_per_tensor: Option<usize>) -> GradCheck {
    let cfg = toy();
    let run = |s: &mut Session, v: &[Var]| -> Result<Var> {
        let lfe = encoders::lfe_forward(s, &cfg, v[0])?;
        let phi = encoders::gsce_forward(s, &cfg, v[1], [Some(lfe.quarter), Some(lfe.eighth)])?;
        let a = probe(&mut s.g, lfe.eighth.var, 11)?;
        let b = probe(&mut s.g, phi.var, 12)?;
        s.g.add(a, b)
    };
    let inputs = [random(&[3, 32, 32], 1), random(&[3, 32, 32], 2)];
    let store = init_store(3, |s| {
        let v: Vec<Var> = inputs.iter().map(|t| s.g.constant(t.clone())).collect();
        run(s, &v).map(|_| ())
    });
    gradcheck_session(&store, &inputs, run, STEP, TOL, max_per_tensor).expect("encoder gradcheck")
}

/// Convolutional and attention correspondence branches on 1/8 features of a
/// 32×32 input.
pub fn correspondence_check(max_per_tensor: Option<usize>) -> GradCheck {
    let cfg = toy();
    let c = cfg.stage_dims()[1];
    let run = |s: &mut Session, v: &[Var]| -> Result<Var> {
        let (f_v, f_t, phi_v, phi_t) = (fm(v[0], 8), fm(v[1], 8), fm(v[2], 8), fm(v[3], 8));
        let l = correspondence::lcce_forward(s, &cfg, f_v, f_t)?;
        let p = correspondence::gcce_forward(s, &cfg, phi_v, phi_t, f_v, f_t, Some(&l))?;
        let mut total = probe(&mut s.g, l.pair.v_to_t.var, 21)?;
        for (x, seed) in [(l.pair.t_to_v.var, 22), (p.v_to_t.var, 23), (p.t_to_v.var, 24)] {
            let y = probe(&mut s.g, x, seed)?;
            total = s.g.add(total, y)?;
        }
        Ok(total)
    };
    let inputs: Vec<Tensor> = (0..4).map(|i| random(&[c, 4, 4], 30 + i)).collect();
    let store = init_store(4, |s| {
        let v: Vec<Var> = inputs.iter().map(|t| s.g.constant(t.clone())).collect();
        run(s, &v).map(|_| ())
    });
    gradcheck_session(&store, &inputs, run, STEP, TOL, max_per_tensor).expect("correspondence gradcheck")
}

/// Matching, merge and all refinement blocks from 2×2 correspondence maps.
pub fn decode_check(max_per_tensor: Option<usize>) -> GradCheck {
    let cfg = toy();
    let c = cfg.corr_dims()[1];
    let run = |s: &mut Session, v: &[Var]| -> Result<Var> {
        let hf = CorrespondencePair { v_to_t: fm(v[0], 32), t_to_v: fm(v[1], 32), stream: Stream::Hf };
        let lf = CorrespondencePair { v_to_t: fm(v[2], 32), t_to_v: fm(v[3], 32), stream: Stream::Lf };
        let d = flow::decode(s, &cfg, &hf, &lf)?;
        let mut total = probe(&mut s.g, d.merged, 40)?;
        for (k, &l) in d.levels.iter().enumerate() {
            let y = probe(&mut s.g, l, 41 + k as u64)?;
            total = s.g.add(total, y)?;
        }
        Ok(total)
    };
    let inputs: Vec<Tensor> = (0..4).map(|i| random(&[c, 2, 2], 50 + i)).collect();
    let mut store = init_store(5, |s| {
        let v: Vec<Var> = inputs.iter().map(|t| s.g.constant(t.clone())).collect();
        run(s, &v).map(|_| ())
    });
    // The last convolution of each block starts at zero, which would hide
    // the hidden layers from the check.
    for (name, t) in store.iter_mut() {
        if name.ends_with(".c3.w") || name.ends_with(".c3.b") {
            *t = random(t.shape(), 60);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    gradcheck_session(&store, &inputs, run, STEP, TOL, max_per_tensor).expect("decode gradcheck")
}

/// Multi-scale loss over a random five-level pyramid for a 32×32 field.
pub fn loss_check() -> GradCheck {
    let gt = FlowField::new(Tensor::uniform(&[2, 32, 32], -3.0, 3.0, &mut ChaCha8Rng::seed_from_u64(70)), 1).unwrap();
    let targets = gt.pyramid_targets().unwrap();
    let inputs: Vec<Tensor> = targets
        .iter()
        .enumerate()
        .map(|(k, t)| random(t.data.shape(), 80 + k as u64))
        .collect();
    thermalign::tensor::gradcheck_many(
        |g, v| multiscale_epe_graph(g, v, &targets, 0.9).map(|(l, _)| l),
        &inputs,
        STEP,
        TOL,
        None,
    )
    .expect("loss gradcheck")
}

/// The assembled network on a 32×32 pair, against every parameter.
pub fn model_check(max_per_tensor: Option<usize>) -> GradCheck {
    let cfg = toy();
    let m = model::Model::new(cfg.clone(), 6).unwrap();
    let x = Prepared {
        hf_v: random(&[3, 32, 32], 90),
        lf_v: random(&[3, 32, 32], 91),
        hf_t: random(&[3, 32, 32], 92),
        lf_t: random(&[3, 32, 32], 93),
    };
    let run = |s: &mut Session, _: &[Var]| -> Result<Var> {
        let out = model::forward(s, &cfg, &x)?;
        let mut total = probe(&mut s.g, out.phi_v.var, 94)?;
        for (k, &l) in out.decode.levels.iter().enumerate() {
            let y = probe(&mut s.g, l, 95 + k as u64)?;
            total = s.g.add(total, y)?;
        }
        Ok(total)
    };
    gradcheck_session(&m.params, &[], run, STEP, TOL, max_per_tensor).expect("model gradcheck")
}
