//! Building blocks shared by the encoder, correspondence and decoder stages.

use crate::error::{contract, Result};
use crate::params::{Init, Session};
use crate::tensor::Var;

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;
pub const DW_KERNEL: usize = 7;

/// Convolution with a bias, parameters `{name}.w` / `{name}.b`.
pub fn conv(
    s: &mut Session,
    name: &str,
    x: Var,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let cin = s.g.shape(x)[0];
    contract!(cin.is_multiple_of(groups), "{name}: {cin} channels not divisible by {groups} groups");
    let fan_in = cin / groups * k * k;
    let w = s.param(&format!("{name}.w"), &[cout, cin / groups, k, k], Init::FanIn(fan_in))?;
    let b = s.param(&format!("{name}.b"), &[cout], Init::FanIn(fan_in))?;
    s.g.conv2d(x, w, Some(b), stride, pad, groups)
}

/// 3×3 convolution whose weights and bias start at zero.
pub fn conv3_zero(s: &mut Session, name: &str, x: Var, cout: usize) -> Result<Var> {
    let cin = s.g.shape(x)[0];
    let w = s.param(&format!("{name}.w"), &[cout, cin, 3, 3], Init::Zeros)?;
    let b = s.param(&format!("{name}.b"), &[cout], Init::Zeros)?;
    s.g.conv2d(x, w, Some(b), 1, 1, 1)
}

pub fn pointwise(s: &mut Session, name: &str, x: Var, cout: usize) -> Result<Var> {
    conv(s, name, x, cout, 1, 1, 0, 1)
}

/// Channel layer norm with `{name}.g` / `{name}.b`.
pub fn norm(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let c = s.g.shape(x)[0];
    let g = s.param(&format!("{name}.g"), &[c], Init::Ones)?;
    let b = s.param(&format!("{name}.b"), &[c], Init::Zeros)?;
    s.g.layer_norm(x, g, b, LN_EPS)
}

/// Pointwise projection of a `(C, N)` token matrix.
pub fn token_linear(s: &mut Session, name: &str, tokens: Var, cout: usize) -> Result<Var> {
    let (c, n) = (s.g.shape(tokens)[0], s.g.shape(tokens)[1]);
    let as_map = s.g.reshape(tokens, &[c, n, 1])?;
    let y = pointwise(s, name, as_map, cout)?;
    s.g.reshape(y, &[cout, n])
}

/// Strided convolution → depth-wise 7×7 → norm → linear → GELU → linear, with
/// a residual around everything after the strided convolution.
pub fn conv_stage(s: &mut Session, name: &str, x: Var, cout: usize, k: usize, stride: usize) -> Result<Var> {
    let down = conv(s, &format!("{name}.down"), x, cout, k, stride, 0, 1)?;
    let y = conv(s, &format!("{name}.dw"), down, cout, DW_KERNEL, 1, DW_KERNEL / 2, cout)?;
    let y = norm(s, &format!("{name}.norm"), y)?;
    let y = pointwise(s, &format!("{name}.fc1"), y, MLP_RATIO * cout)?;
    let y = s.g.gelu(y)?;
    let y = pointwise(s, &format!("{name}.fc2"), y, cout)?;
    s.g.add(down, y)
}

/// Overlapping patch embedding followed by norm, plus an optional additive
/// infusion from a same-resolution feature map after a 1×1 projection.
pub fn embed(
    s: &mut Session,
    name: &str,
    x: Var,
    infusion: Option<Var>,
    cout: usize,
    geom: PatchGeom,
) -> Result<Var> {
    let t = conv(s, &format!("{name}.embed"), x, cout, geom.kernel, geom.stride, geom.pad, 1)?;
    let t = norm(s, &format!("{name}.embed_norm"), t)?;
    match infusion {
        Some(f) => {
            contract!(
                s.g.shape(f)[1..] == s.g.shape(t)[1..],
                "{name}: infusion {:?} does not match embedded tokens {:?}",
                s.g.shape(f),
                s.g.shape(t)
            );
            let p = pointwise(s, &format!("{name}.infuse"), f, cout)?;
            s.g.add(t, p)
        }
        None => Ok(t),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Pools a `(C,h,w)` map to each `(rows, cols)` grid and concatenates the
/// flattened cells into a `(C, Σ rows·cols)` token matrix.
pub fn pool_tokens(s: &mut Session, x: Var, grids: &[(usize, usize)]) -> Result<Var> {
    contract!(!grids.is_empty(), "pyramid pooling needs at least one level");
    let c = s.g.shape(x)[0];
    let mut levels = Vec::with_capacity(grids.len());
    for &(rh, rw) in grids {
        let p = s.g.avg_pool2d(x, rh, rw)?;
        let p = s.g.reshape(p, &[c, rh * rw])?;
        levels.push(s.g.transpose(p)?);
    }
    let stacked = s.g.concat(&levels)?;
    s.g.transpose(stacked)
}

/// Square pooling grids, each side clamped to the feature map so that the
/// same ratios serve any input size.
pub fn clamped_grids(ratios: &[usize], h: usize, w: usize) -> Vec<(usize, usize)> {
    ratios.iter().map(|&r| (r.min(h), r.min(w))).collect()
}

/// Multi-head scaled dot-product attention on token matrices:
/// `q: (C, N)`, `k, v: (C, M)` → `(C, N)`. Also returns each head's
/// `(N, M)` attention map.
pub fn attention(s: &mut Session, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let c = s.g.shape(q)[0];
    contract!(heads > 0 && c.is_multiple_of(heads), "{c} channels not divisible by {heads} heads");
    contract!(
        s.g.shape(k) == s.g.shape(v) && s.g.shape(k)[0] == c,
        "attention: key {:?} / value {:?} incompatible with query {:?}",
        s.g.shape(k),
        s.g.shape(v),
        s.g.shape(q)
    );
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            s.g.narrow(q, h * d, d)?,
            s.g.narrow(k, h * d, d)?,
            s.g.narrow(v, h * d, d)?,
        );
        let qt = s.g.transpose(qh)?;
        let logits = s.g.matmul(qt, kh)?;
        let logits = s.g.scale(logits, scale)?;
        let a = s.g.softmax(logits, 1)?;
        let at = s.g.transpose(a)?;
        outs.push(s.g.matmul(vh, at)?);
        maps.push(a);
    }
    let out = s.g.concat(&outs)?;
    Ok((out, maps))
}

/// Attention block on a `(C,h,w)` query map against pooled tokens from
/// `kv_map`, followed by norm and an inverted-bottleneck feed-forward.
pub fn attention_block(
    s: &mut Session,
    name: &str,
    q_map: Var,
    kv_map: Var,
    ratios: &[usize],
    heads: usize,
) -> Result<Var> {
    let shape = s.g.shape(q_map).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let kv_shape = s.g.shape(kv_map).to_vec();
    let grids = clamped_grids(ratios, kv_shape[1], kv_shape[2]);
    let pooled = pool_tokens(s, kv_map, &grids)?;
    let pooled = token_linear(s, &format!("{name}.pool_proj"), pooled, c)?;
    let k = token_linear(s, &format!("{name}.k"), pooled, c)?;
    let v = token_linear(s, &format!("{name}.v"), pooled, c)?;
    let q_tokens = s.g.reshape(q_map, &[c, h * w])?;
    let q = token_linear(s, &format!("{name}.q"), q_tokens, c)?;
    let (att, _) = attention(s, q, k, v, heads)?;
    let att = token_linear(s, &format!("{name}.out"), att, c)?;
    let att = s.g.reshape(att, &[c, h, w])?;
    let t = s.g.add(q_map, att)?;
    let u = norm(s, &format!("{name}.norm"), t)?;
    let e = pointwise(s, &format!("{name}.irb_expand"), u, MLP_RATIO * c)?;
    let e = conv(s, &format!("{name}.irb_dw"), e, MLP_RATIO * c, DW_KERNEL, 1, DW_KERNEL / 2, MLP_RATIO * c)?;
    let e = s.g.gelu(e)?;
    let e = pointwise(s, &format!("{name}.irb_project"), e, c)?;
    s.g.add(u, e)
}

/// Stand-in for a disabled stage: average-pool by `factor`, then 1×1 project.
pub fn pass_through(s: &mut Session, name: &str, x: Var, cout: usize, factor: usize) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    contract!(
        shape[1].is_multiple_of(factor) && shape[2].is_multiple_of(factor),
        "{name}: {}x{} not divisible by {factor}",
        shape[1],
        shape[2]
    );
    let p = s.g.avg_pool2d(x, shape[1] / factor, shape[2] / factor)?;
    pointwise(s, name, p, cout)
}
