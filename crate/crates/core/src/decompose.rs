//! Guided-filter split of an image into a smooth base layer and a signed detail layer.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub radius: usize,
    pub eps: f64,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            radius: 8,
            eps: 1e-3,
        }
    }
}

/// Low-frequency base (`lf`) and high-frequency residual (`hf = img − lf`).
#[derive(Clone, Debug)]
pub struct FrequencyPair {
    pub lf: Image,
    pub hf: Tensor,
}

/// Mean over the `(2r+1)²` window clipped to the image, via a summed-area table.
pub fn box_mean(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
                + sat[y0 * stride + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Single-plane guided filter: `q = mean(a)·guide + mean(b)` with
/// `a = cov(guide, src) / (var(guide) + eps)` and `b = mean(src) − a·mean(guide)`.
pub fn guided_filter_plane(guide: &[f64], src: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let mean_i = box_mean(guide, h, w, r);
    let mean_p = box_mean(src, h, w, r);
    let ii: Vec<f64> = guide.iter().map(|v| v * v).collect();
    let ip: Vec<f64> = guide.iter().zip(src).map(|(a, b)| a * b).collect();
    let corr_ii = box_mean(&ii, h, w, r);
    let corr_ip = box_mean(&ip, h, w, r);
    let n = h * w;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..n {
        let var = corr_ii[k] - mean_i[k] * mean_i[k];
        let cov = corr_ip[k] - mean_i[k] * mean_p[k];
        a[k] = cov / (var + eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    (0..n).map(|k| mean_a[k] * guide[k] + mean_b[k]).collect()
}

/// Per-channel guided filter of `src` steered by the matching channel of `guide`.
pub fn guided_filter(guide: &Image, src: &Image, radius: usize, eps: f64) -> Result<Image> {
    contract!(radius >= 1, "guided filter radius must be >= 1");
    contract!(eps > 0.0, "guided filter eps must be positive");
    contract!(
        guide.tensor().shape() == src.tensor().shape(),
        "guide {:?} and source {:?} differ in shape",
        guide.tensor().shape(),
        src.tensor().shape()
    );
    let (h, w) = (src.height(), src.width());
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        out.extend(guided_filter_plane(guide.plane(c), src.plane(c), h, w, radius, eps));
    }
    Image::new(Tensor::new(&[3, h, w], out)?, src.modality())
}

/// Self-guided split; `lf + hf` reproduces `img` to rounding.
pub fn decompose(img: &Image, cfg: &DecomposeConfig) -> Result<FrequencyPair> {
    let lf = guided_filter(img, img, cfg.radius, cfg.eps)?;
    let hf_data = img
        .tensor()
        .data()
        .iter()
        .zip(lf.tensor().data())
        .map(|(x, l)| x - l)
        .collect();
    let hf = Tensor::new(img.tensor().shape(), hf_data)?;
    Ok(FrequencyPair { lf, hf })
}

/// Detail layer shifted by 0.5 for display.
pub fn hf_preview(hf: &Tensor) -> Result<Image> {
    let shifted = Tensor::new(hf.shape(), hf.data().iter().map(|v| v + 0.5).collect())?;
    Image::new(shifted, crate::image::Modality::Visible)
}
