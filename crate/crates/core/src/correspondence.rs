//! Cross-correspondence stage: a convolutional branch over channel-concatenated
//! detail features and a cross-attention branch over fused base/detail
//! features, each producing one map per matching direction at 1/32.

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, GSCE_PATCHES};
use crate::error::{contract, Result};
use crate::model::ModelConfig;
use crate::nn::{self, PatchGeom};
use crate::params::Session;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Hf,
    Lf,
}

/// Correspondence features for both directions at the same scale.
///
/// `v_to_t` is computed with the visible features first and `t_to_v` with
/// the thermal features first.
#[derive(Clone, Copy, Debug)]
pub struct CorrespondencePair {
    pub v_to_t: FeatureMap,
    pub t_to_v: FeatureMap,
    pub stream: Stream,
}

/// Convolutional correspondence features: the 1/16 intermediates (used for
/// infusion into the attention branch) and the final 1/32 pair.
#[derive(Clone, Copy, Debug)]
pub struct LcceOutput {
    pub mid: [FeatureMap; 2],
    pub pair: CorrespondencePair,
}

/// Both attention stages use 4×4/2 overlapping embeddings.
pub const GCCE_PATCH: PatchGeom = GSCE_PATCHES[1];

fn check_eighth(s: &Session, a: FeatureMap, b: FeatureMap, what: &str) -> Result<()> {
    contract!(
        a.scale == 8 && b.scale == 8,
        "{what} expects 1/8 inputs, got 1/{} and 1/{}",
        a.scale,
        b.scale
    );
    contract!(
        s.g.shape(a.var) == s.g.shape(b.var),
        "{what}: input shapes {:?} and {:?} differ",
        s.g.shape(a.var),
        s.g.shape(b.var)
    );
    Ok(())
}

/// `[F_v‖F_t]` and `[F_t‖F_v]` pass through the same two strided-conv
/// stages (192 channels at 1/16, 384 at 1/32 before the divisor).
pub fn lcce_forward(s: &mut Session, cfg: &ModelConfig, f_v: FeatureMap, f_t: FeatureMap) -> Result<LcceOutput> {
    check_eighth(s, f_v, f_t, "lcce")?;
    let [d1, d2] = cfg.corr_dims();
    let vt = s.g.concat(&[f_v.var, f_t.var])?;
    let tv = s.g.concat(&[f_t.var, f_v.var])?;
    let vt1 = nn::conv_stage(s, "lcce.s1", vt, d1, 2, 2)?;
    let tv1 = nn::conv_stage(s, "lcce.s1", tv, d1, 2, 2)?;
    let vt2 = nn::conv_stage(s, "lcce.s2", vt1, d2, 2, 2)?;
    let tv2 = nn::conv_stage(s, "lcce.s2", tv1, d2, 2, 2)?;
    Ok(LcceOutput {
        mid: [
            FeatureMap { var: vt1, scale: 16 },
            FeatureMap { var: tv1, scale: 16 },
        ],
        pair: CorrespondencePair {
            v_to_t: FeatureMap { var: vt2, scale: 32 },
            t_to_v: FeatureMap { var: tv2, scale: 32 },
            stream: Stream::Hf,
        },
    })
}

/// Each modality's `[Φ‖F]` is embedded and downsampled; queries from one
/// modality attend to pooled tokens of the other. Convolutional
/// correspondence features, when given, are infused at each stage
/// (`v_to_t` into the visible stream, `t_to_v` into the thermal stream).
pub fn gcce_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    phi_v: FeatureMap,
    phi_t: FeatureMap,
    f_v: FeatureMap,
    f_t: FeatureMap,
    lcce: Option<&LcceOutput>,
) -> Result<CorrespondencePair> {
    check_eighth(s, phi_v, phi_t, "gcce")?;
    check_eighth(s, f_v, f_t, "gcce")?;
    check_eighth(s, phi_v, f_v, "gcce")?;
    let dims = cfg.corr_dims();
    let mut u = s.g.concat(&[phi_v.var, f_v.var])?;
    let mut v = s.g.concat(&[phi_t.var, f_t.var])?;
    for (i, &c) in dims.iter().enumerate() {
        let name = format!("gcce.s{}", i + 1);
        let (inf_u, inf_v) = match lcce {
            Some(l) if i == 0 => (Some(l.mid[0].var), Some(l.mid[1].var)),
            Some(l) => (Some(l.pair.v_to_t.var), Some(l.pair.t_to_v.var)),
            None => (None, None),
        };
        let eu = nn::embed(s, &name, u, inf_u, c, GCCE_PATCH)?;
        let ev = nn::embed(s, &name, v, inf_v, c, GCCE_PATCH)?;
        let attn = format!("{name}.attn");
        u = nn::attention_block(s, &attn, eu, ev, &cfg.gcce_ratios[i], cfg.heads)?;
        v = nn::attention_block(s, &attn, ev, eu, &cfg.gcce_ratios[i], cfg.heads)?;
    }
    Ok(CorrespondencePair {
        v_to_t: FeatureMap { var: u, scale: 32 },
        t_to_v: FeatureMap { var: v, scale: 32 },
        stream: Stream::Lf,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn feature(s: &mut Session, t: &Tensor) -> FeatureMap {
        FeatureMap { var: s.g.constant(t.clone()), scale: 8 }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn lcce_shapes_and_symmetry() {
        let cfg = ModelConfig::toy(8);
        let x = random(&[12, 8, 12], 1);
        let mut s = Session::init(3);
        let (a, b) = (feature(&mut s, &x), feature(&mut s, &x));
        let out = lcce_forward(&mut s, &cfg, a, b).unwrap();
        assert_eq!(s.g.shape(out.mid[0].var), &[24, 4, 6]);
        assert_eq!(s.g.shape(out.pair.v_to_t.var), &[48, 2, 3]);
        assert_eq!(
            s.g.value(out.pair.v_to_t.var).data(),
            s.g.value(out.pair.t_to_v.var).data()
        );
    }

    #[test]
    fn swapping_modalities_swaps_outputs() {
        let cfg = ModelConfig::toy(8);
        let (xv, xt) = (random(&[12, 8, 8], 1), random(&[12, 8, 8], 2));
        let (pv, pt) = (random(&[12, 8, 8], 3), random(&[12, 8, 8], 4));
        let run = |s: &mut Session, swap: bool| {
            let (fv, ft) = if swap { (&xt, &xv) } else { (&xv, &xt) };
            let (gv, gt) = if swap { (&pt, &pv) } else { (&pv, &pt) };
            let (fv, ft, gv, gt) = (feature(s, fv), feature(s, ft), feature(s, gv), feature(s, gt));
            let l = lcce_forward(s, &cfg, fv, ft).unwrap();
            let g = gcce_forward(s, &cfg, gv, gt, fv, ft, Some(&l)).unwrap();
            (l.pair, g)
        };
        let mut init = Session::init(7);
        run(&mut init, false);
        let store = init.into_store().unwrap();
        let mut s = Session::new(&store, false);
        let (l0, g0) = run(&mut s, false);
        let (l1, g1) = run(&mut s, true);
        let val = |v: FeatureMap| s.g.value(v.var).data().to_vec();
        assert_eq!(val(l0.v_to_t), val(l1.t_to_v));
        assert_eq!(val(l0.t_to_v), val(l1.v_to_t));
        assert_eq!(val(g0.v_to_t), val(g1.t_to_v));
        assert_eq!(val(g0.t_to_v), val(g1.v_to_t));
        assert_eq!(s.g.shape(g0.v_to_t.var), &[48, 2, 2]);
    }

    #[test]
    fn identical_inputs_give_identical_directions() {
        let cfg = ModelConfig::toy(8);
        let f = random(&[12, 8, 12], 5);
        let p = random(&[12, 8, 12], 6);
        let mut s = Session::init(9);
        let (fv, ft, pv, pt) = (feature(&mut s, &f), feature(&mut s, &f), feature(&mut s, &p), feature(&mut s, &p));
        let g = gcce_forward(&mut s, &cfg, pv, pt, fv, ft, None).unwrap();
        assert_eq!(s.g.value(g.v_to_t.var).data(), s.g.value(g.t_to_v.var).data());
        assert_eq!(g.stream, Stream::Lf);
    }

    #[test]
    fn wrong_scale_is_rejected() {
        let cfg = ModelConfig::toy(8);
        let mut s = Session::init(0);
        let a = feature(&mut s, &Tensor::zeros(&[12, 8, 8]));
        let b = FeatureMap { scale: 16, ..a };
        assert!(lcce_forward(&mut s, &cfg, a, b).is_err());
        let c = feature(&mut s, &Tensor::zeros(&[12, 4, 8]));
        assert!(lcce_forward(&mut s, &cfg, a, c).is_err());
    }
}
