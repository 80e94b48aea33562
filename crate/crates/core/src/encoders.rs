//! Self-correlation stage: a convolutional encoder on the detail layer and a
//! pyramid-pooling transformer on the base layer, with detail features
//! infused into the base stream at every stage.

use crate::error::{contract, Result};
use crate::model::ModelConfig;
use crate::nn::{self, PatchGeom};
use crate::params::Session;
use crate::tensor::Var;

/// A feature map inside a forward graph; `scale` is the downsampling
/// denominator relative to the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub scale: usize,
}

/// Both stage outputs of the detail encoder.
#[derive(Clone, Copy, Debug)]
pub struct LfeFeatures {
    pub quarter: FeatureMap,
    pub eighth: FeatureMap,
}

/// First stage: non-overlapping 4×4 patches down to 1/4. The second stage
/// halves again to reach 1/8.
pub const LFE_STAGES: [(usize, usize); 2] = [(4, 4), (2, 2)];

/// Overlapping patch embeddings: 7×7/4 to reach 1/4 from the input, then
/// 4×4/2 to reach 1/8.
pub const GSCE_PATCHES: [PatchGeom; 2] = [
    PatchGeom { kernel: 7, stride: 4, pad: 3 },
    PatchGeom { kernel: 4, stride: 2, pad: 1 },
];

pub(crate) fn check_input(s: &Session, x: Var, what: &str) -> Result<()> {
    let shape = s.g.shape(x);
    contract!(
        shape.len() == 3 && shape[0] == 3,
        "{what} input must be (3,H,W), got {shape:?}"
    );
    contract!(
        shape[1].is_multiple_of(32) && shape[2].is_multiple_of(32),
        "{what} input {}x{} must have sides divisible by 32",
        shape[1],
        shape[2]
    );
    Ok(())
}

/// Detail-layer encoder: two strided-conv stages to 48 channels at 1/4 and
/// 96 channels at 1/8 (before the channel divisor).
pub fn lfe_forward(s: &mut Session, cfg: &ModelConfig, hf: Var) -> Result<LfeFeatures> {
    check_input(s, hf, "lfe")?;
    let [c1, c2] = cfg.stage_dims();
    let (k1, s1) = LFE_STAGES[0];
    let (k2, s2) = LFE_STAGES[1];
    let quarter = nn::conv_stage(s, "lfe.s1", hf, c1, k1, s1)?;
    let eighth = nn::conv_stage(s, "lfe.s2", quarter, c2, k2, s2)?;
    Ok(LfeFeatures {
        quarter: FeatureMap { var: quarter, scale: 4 },
        eighth: FeatureMap { var: eighth, scale: 8 },
    })
}

/// Pyramid pooling: each ratio `r` pools the map to `r×r`, cells from all
/// levels are concatenated and linearly projected. Returns `(N_tok, C)`.
pub fn ppm_forward(s: &mut Session, name: &str, x: Var, ratios: &[usize]) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    contract!(shape.len() == 3, "ppm input must be (C,h,w)");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for &r in ratios {
        contract!(r >= 1 && r <= h.min(w), "ppm ratio {r} exceeds feature side {}", h.min(w));
    }
    let grids: Vec<_> = ratios.iter().map(|&r| (r, r)).collect();
    let tokens = nn::pool_tokens(s, x, &grids)?;
    let tokens = nn::token_linear(s, name, tokens, c)?;
    s.g.transpose(tokens)
}

/// Base-layer transformer: per stage, overlapping patch embedding, detail
/// infusion, attention of every token against pooled tokens of the same map,
/// norm, and an inverted-bottleneck feed-forward.
///
/// `infused[i]` must match stage `i`'s output resolution (1/4, then 1/8);
/// `None` skips that infusion.
pub fn gsce_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    lf: Var,
    infused: [Option<FeatureMap>; 2],
) -> Result<FeatureMap> {
    check_input(s, lf, "gsce")?;
    let dims = cfg.stage_dims();
    let mut t = lf;
    for (i, (&c, inf)) in dims.iter().zip(infused).enumerate() {
        let scale = 4 << i;
        if let Some(f) = inf {
            contract!(
                f.scale == scale,
                "gsce stage {} expects infusion at 1/{scale}, got 1/{}",
                i + 1,
                f.scale
            );
        }
        let name = format!("gsce.s{}", i + 1);
        t = nn::embed(s, &name, t, inf.map(|f| f.var), c, GSCE_PATCHES[i])?;
        t = nn::attention_block(s, &format!("{name}.attn"), t, t, &cfg.gsce_ratios[i], cfg.heads)?;
    }
    Ok(FeatureMap { var: t, scale: 8 })
}
