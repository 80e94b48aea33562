//! Flow fields, the global soft-argmax matching layer, refinement blocks,
//! and Middlebury `.flo` I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::correspondence::CorrespondencePair;
use crate::error::{contract, Error, Result};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{Init, Session};
use crate::tensor::{Graph, Tensor, Var};

pub const FLO_MAGIC: f32 = 202021.25;
pub const PYRAMID_SCALES: [usize; 5] = [16, 8, 4, 2, 1];

/// Per-pixel displacement `(u, v)` in pixels at `1/scale` of the input.
/// Channel 0 is horizontal, channel 1 vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub data: Tensor,
    pub scale: usize,
}

impl FlowField {
    pub fn new(data: Tensor, scale: usize) -> Result<Self> {
        contract!(
            data.ndim() == 3 && data.shape()[0] == 2,
            "flow must be (2,h,w), got {:?}",
            data.shape()
        );
        contract!(data.is_finite(), "flow contains non-finite values");
        contract!(scale >= 1, "flow scale must be >= 1");
        Ok(Self { data, scale })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
            scale: 1,
        }
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        let n = h * w;
        Self {
            data: Tensor::from_fn(&[2, h, w], |i| if i < n { u } else { v }),
            scale: 1,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self) -> &[f64] {
        &self.data.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f64] {
        &self.data.data()[self.height() * self.width()..]
    }

    /// Halves resolution by 2×2 area means and halves displacements.
    pub fn downscale2(&self) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        contract!(h % 2 == 0 && w % 2 == 0, "cannot halve a {h}x{w} flow");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data.data();
        let out = Tensor::from_fn(&[2, oh, ow], |i| {
            let (c, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
            let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
            (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 8.0
        });
        Ok(Self {
            data: out,
            scale: self.scale * 2,
        })
    }

    /// Ground truth matched to each decoder level `[16, 8, 4, 2, 1]`.
    pub fn pyramid_targets(&self) -> Result<Vec<FlowField>> {
        contract!(self.scale == 1, "targets are built from a full-resolution flow");
        let mut levels = vec![self.clone()];
        for _ in 0..4 {
            let next = levels.last().expect("non-empty").downscale2()?;
            levels.push(next);
        }
        levels.reverse();
        Ok(levels)
    }

    /// Writes Middlebury `.flo`: magic, width, height, then interleaved
    /// little-endian `f32` `(u, v)` in row-major order.
    pub fn write_flo(&self, mut w: impl Write) -> Result<()> {
        let (h, wd) = (self.height(), self.width());
        let mut buf = Vec::with_capacity(12 + 8 * h * wd);
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(wd as i32).to_le_bytes());
        buf.extend_from_slice(&(h as i32).to_le_bytes());
        for (u, v) in self.u().iter().zip(self.v()) {
            buf.extend_from_slice(&(*u as f32).to_le_bytes());
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_flo(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| b.try_into().expect("4 bytes"))
                .ok_or_else(|| Error::Schema("truncated .flo data".into()))
        };
        if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
            return Err(Error::Schema("not a .flo file (bad magic)".into()));
        }
        let (w, h) = (i32::from_le_bytes(word(1)?), i32::from_le_bytes(word(2)?));
        if w <= 0 || h <= 0 {
            return Err(Error::Schema(format!(".flo declares invalid size {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        if bytes.len() != 12 + 8 * w * h {
            return Err(Error::Schema(format!(
                ".flo payload is {} bytes, expected {} for {w}x{h}",
                bytes.len() - 12,
                8 * w * h
            )));
        }
        let n = w * h;
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            data[i] = f64::from(f32::from_le_bytes(word(3 + 2 * i)?));
            data[n + i] = f64::from(f32::from_le_bytes(word(4 + 2 * i)?));
        }
        Self::new(Tensor::new(&[2, h, w], data)?, 1)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_flo(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_flo(bytes.as_slice()).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Decoder outputs at scales `[16, 8, 4, 2, 1]`.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    pub levels: Vec<FlowField>,
}

impl FlowPyramid {
    pub fn finest(&self) -> &FlowField {
        self.levels.last().expect("pyramid has five levels")
    }

    pub fn scales(&self) -> Vec<usize> {
        self.levels.iter().map(|f| f.scale).collect()
    }
}

/// Pixel coordinates `(x, y)` of a `h×w` grid as an `(h·w, 2)` matrix.
fn coord_matrix(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let p = i / 2;
        if i % 2 == 0 {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// Soft-argmax matching distribution for every position of `a` over all
/// positions of `b`: `softmax_j(a_i·b_j / temperature)` as an `(N, N)` map.
pub fn matching_distribution(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    contract!(temperature > 0.0, "matching temperature must be positive");
    contract!(
        g.shape(a) == g.shape(b) && g.shape(a).len() == 3,
        "matching layer needs equal (C,h,w) inputs, got {:?} and {:?}",
        g.shape(a),
        g.shape(b)
    );
    let s = g.shape(a).to_vec();
    let n = s[1] * s[2];
    let am = g.reshape(a, &[s[0], n])?;
    let bm = g.reshape(b, &[s[0], n])?;
    let at = g.transpose(am)?;
    let corr = g.matmul(at, bm)?;
    let logits = g.scale(corr, 1.0 / temperature)?;
    g.softmax(logits, 1)
}

/// Expected displacement under the matching distribution:
/// `flow(i) = Σ_j p(j|i)·(coord_j − coord_i)`, as a `(2,h,w)` field.
pub fn matching_layer(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (h, w) = (s[1], s[2]);
    let p = matching_distribution(g, a, b, temperature)?;
    let coords = g.constant(coord_matrix(h, w));
    let expected = g.matmul(p, coords)?;
    let disp = g.sub(expected, coords)?;
    let disp = g.transpose(disp)?;
    g.reshape(disp, &[2, h, w])
}

/// Default temperature `√C` for `C`-channel features.
pub fn default_temperature(channels: usize) -> f64 {
    (channels as f64).sqrt()
}

/// `w[0]·hf + w[1]·lf` with a learnable pair `merge.w` initialized to 0.5/0.5.
pub fn merge_flows(s: &mut Session, hf: Var, lf: Var) -> Result<Var> {
    contract!(
        s.g.shape(hf) == s.g.shape(lf),
        "merge: flow shapes {:?} and {:?} differ",
        s.g.shape(hf),
        s.g.shape(lf)
    );
    let w = s.param("merge.w", &[2], Init::Fill(0.5))?;
    let (w0, w1) = (s.g.index(w, 0)?, s.g.index(w, 1)?);
    let a = s.g.scale_by(hf, w0)?;
    let b = s.g.scale_by(lf, w1)?;
    s.g.add(a, b)
}

/// Bilinear 2× upsampling (half-pixel centers, border clamp) with
/// displacements doubled.
pub fn upsample_flow(g: &mut Graph, flow: Var) -> Result<Var> {
    let s = g.shape(flow).to_vec();
    contract!(s.len() == 3 && s[0] == 2, "flow must be (2,h,w), got {s:?}");
    let (oh, ow) = (2 * s[1], 2 * s[2]);
    let n = oh * ow;
    let coords = Tensor::from_fn(&[2, oh, ow], |i| {
        let p = i % n;
        let v = if i < n { p % ow } else { p / ow };
        (v as f64 + 0.5) / 2.0 - 0.5
    });
    let coords = g.constant(coords);
    let up = g.grid_sample(flow, coords)?;
    g.scale(up, 2.0)
}

/// Upsample, then three 3×3 convolutions (2→hidden→hidden→2, GELU between)
/// added back onto the upsampled flow. The last convolution starts at zero.
pub fn frb_forward(s: &mut Session, name: &str, flow: Var, hidden: usize) -> Result<Var> {
    let up = upsample_flow(&mut s.g, flow)?;
    let y = nn::conv(s, &format!("{name}.c1"), up, hidden, 3, 1, 1, 1)?;
    let y = s.g.gelu(y)?;
    let y = nn::conv(s, &format!("{name}.c2"), y, hidden, 3, 1, 1, 1)?;
    let y = s.g.gelu(y)?;
    let y = nn::conv3_zero(s, &format!("{name}.c3"), y, 2)?;
    s.g.add(up, y)
}

/// Graph-level decoder outputs.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub hf_flow: Var,
    pub lf_flow: Var,
    pub merged: Var,
    /// Five refined flows at scales `[16, 8, 4, 2, 1]`.
    pub levels: Vec<Var>,
}

/// Matching on each stream in the reference direction (thermal-grid queries
/// against visible features), merge, then five refinement blocks.
pub fn decode(
    s: &mut Session,
    cfg: &ModelConfig,
    hf_pair: &CorrespondencePair,
    lf_pair: &CorrespondencePair,
) -> Result<DecodeOutput> {
    for p in [hf_pair, lf_pair] {
        contract!(
            p.v_to_t.scale == 32 && p.t_to_v.scale == 32,
            "decoder expects 1/32 correspondence features"
        );
    }
    let temp = default_temperature(s.g.shape(hf_pair.t_to_v.var)[0]);
    let hf_flow = matching_layer(&mut s.g, hf_pair.t_to_v.var, hf_pair.v_to_t.var, temp)?;
    let temp = default_temperature(s.g.shape(lf_pair.t_to_v.var)[0]);
    let lf_flow = matching_layer(&mut s.g, lf_pair.t_to_v.var, lf_pair.v_to_t.var, temp)?;
    let merged = merge_flows(s, hf_flow, lf_flow)?;
    let mut f = merged;
    let mut levels = Vec::with_capacity(PYRAMID_SCALES.len());
    for k in 0..PYRAMID_SCALES.len() {
        f = frb_forward(s, &format!("frb{k}"), f, cfg.frb_hidden())?;
        levels.push(f);
    }
    Ok(DecodeOutput {
        hf_flow,
        lf_flow,
        merged,
        levels,
    })
}

/// Mean endpoint distance between the reference-direction flow and the
/// reverse-direction flow sampled at the matched positions. Zero for a
/// perfectly consistent pair of 1/32 flows.
pub fn consistency_error(forward: &FlowField, backward: &FlowField) -> Result<f64> {
    contract!(
        forward.data.shape() == backward.data.shape(),
        "consistency needs equal flow shapes"
    );
    let (h, w) = (forward.height(), forward.width());
    let mut g = Graph::new();
    let bwd = g.constant(backward.data.clone());
    let coords = Tensor::from_fn(&[2, h, w], |i| {
        let p = i % (h * w);
        let base = if i < h * w { (p % w) as f64 } else { (p / w) as f64 };
        base + forward.data.data()[i]
    });
    let c = g.constant(coords);
    let sampled = g.grid_sample(bwd, c)?;
    let sv = g.value(sampled).data();
    let n = h * w;
    let total: f64 = (0..n)
        .map(|i| {
            let du = forward.u()[i] + sv[i];
            let dv = forward.v()[i] + sv[n + i];
            (du * du + dv * dv).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}
