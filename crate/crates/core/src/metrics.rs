//! Flow accuracy (endpoint error, PCK), image similarity (CC, NCC, MI, PSNR,
//! SCD, SSIM), paired t-tests, and report records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decompose::box_mean;
use crate::error::{contract, Result};
use crate::flow::FlowField;
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
pub const NCC_RADIUS: usize = 4;
pub const MI_BINS: usize = 256;

fn check_flows(pred: &FlowField, gt: &FlowField) -> Result<()> {
    contract!(
        pred.data.shape() == gt.data.shape(),
        "flow shapes {:?} and {:?} differ",
        pred.data.shape(),
        gt.data.shape()
    );
    Ok(())
}

/// Per-pixel endpoint errors `‖pred − gt‖₂`.
pub fn endpoint_errors(pred: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
    check_flows(pred, gt)?;
    Ok(pred
        .u()
        .iter()
        .zip(pred.v())
        .zip(gt.u().iter().zip(gt.v()))
        .map(|((pu, pv), (gu, gv))| (pu - gu).hypot(pv - gv))
        .collect())
}

/// Average endpoint error in pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let e = endpoint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of pixels with endpoint error `≤ t` for each threshold.
pub fn pck(pred: &FlowField, gt: &FlowField, thresholds: &[f64]) -> Result<Vec<f64>> {
    contract!(thresholds.iter().all(|&t| t > 0.0), "PCK thresholds must be positive");
    let e = endpoint_errors(pred, gt)?;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * e.iter().filter(|&&x| x <= t).count() as f64 / e.len() as f64)
        .collect())
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Mean zero-normalized cross-correlation over `(2r+1)²` windows of the
/// luma images; windows flat in either image are skipped.
pub fn local_ncc(a: &[f64], b: &[f64], h: usize, w: usize, r: usize) -> f64 {
    let ma = box_mean(a, h, w, r);
    let mb = box_mean(b, h, w, r);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let saa = box_mean(&prod(a, a), h, w, r);
    let sbb = box_mean(&prod(b, b), h, w, r);
    let sab = box_mean(&prod(a, b), h, w, r);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..h * w {
        let va = saa[i] - ma[i] * ma[i];
        let vb = sbb[i] - mb[i] * mb[i];
        if va > 1e-12 && vb > 1e-12 {
            total += ((sab[i] - ma[i] * mb[i]) / (va * vb).sqrt()).clamp(-1.0, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * MI_BINS as f64) as usize).min(MI_BINS - 1)
}

fn entropy_bits(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy (bits) of the 256-bin histogram of `a`.
pub fn histogram_entropy(a: &[f64]) -> f64 {
    let mut hist = vec![0usize; MI_BINS];
    for &v in a {
        hist[bin(v)] += 1;
    }
    entropy_bits(hist.into_iter(), a.len() as f64)
}

/// Mutual information (bits) from the 256×256 joint histogram.
pub fn mutual_information(a: &[f64], b: &[f64]) -> f64 {
    let mut joint = vec![0usize; MI_BINS * MI_BINS];
    let mut ha = vec![0usize; MI_BINS];
    let mut hb = vec![0usize; MI_BINS];
    for (&x, &y) in a.iter().zip(b) {
        let (i, j) = (bin(x), bin(y));
        joint[i * MI_BINS + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let n = a.len() as f64;
    entropy_bits(ha.into_iter(), n) + entropy_bits(hb.into_iter(), n) - entropy_bits(joint.into_iter(), n)
}

/// PSNR in dB for peak 1, capped at 99 (identical images).
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering with a 1-D kernel.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one plane: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid region only.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (saa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (sbb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (sab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / (oh * ow) as f64
}

/// Image-similarity scores between a prediction and its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub cc: f64,
    pub ncc: f64,
    pub mi: f64,
    pub psnr: f64,
    pub scd: f64,
    pub ssim: f64,
    /// Names of scores that were undefined and reported as 0.
    pub undefined: Vec<String>,
}

/// CC, NCC, MI, PSNR, SCD and SSIM of `pred` against `gt`. `aux` (the
/// reference thermal image) is the second source for SCD:
/// `SCD = r(pred − aux, gt) + r(pred − gt, aux)`.
pub fn image_similarity(pred: &Image, gt: &Image, aux: &Image) -> Result<Similarity> {
    contract!(
        pred.tensor().shape() == gt.tensor().shape() && gt.tensor().shape() == aux.tensor().shape(),
        "image_similarity needs equal shapes"
    );
    let (h, w) = (gt.height(), gt.width());
    contract!(h >= 11 && w >= 11, "images must be at least 11x11 for SSIM");
    let (p, g, a) = (pred.tensor().data(), gt.tensor().data(), aux.tensor().data());
    let mut undefined = Vec::new();
    let cc = pearson(p, g).unwrap_or_else(|| {
        undefined.push("cc".to_string());
        0.0
    });
    let (pg, gg) = (pred.gray(), gt.gray());
    let ncc = local_ncc(&pg, &gg, h, w, NCC_RADIUS);
    let mi = mutual_information(&pg, &gg);
    let d_aux: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
    let d_gt: Vec<f64> = p.iter().zip(g).map(|(x, y)| x - y).collect();
    let scd = match (pearson(&d_aux, g), pearson(&d_gt, a)) {
        (Some(x), Some(y)) => x + y,
        (x, y) => {
            undefined.push("scd".to_string());
            x.unwrap_or(0.0) + y.unwrap_or(0.0)
        }
    };
    let ssim = (0..3)
        .map(|c| ssim_plane(pred.plane(c), gt.plane(c), h, w))
        .sum::<f64>()
        / 3.0;
    Ok(Similarity {
        cc,
        ncc,
        mi,
        psnr: psnr(p, g),
        scd,
        ssim,
        undefined,
    })
}

/// Two-sided paired t-test result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub mean_diff: f64,
    /// Set when the differences have zero variance (t is undefined).
    pub degenerate: bool,
}

/// Continued fraction for the regularized incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `dof`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    contract!(a.len() == b.len(), "paired samples differ in length");
    contract!(a.len() >= 2, "paired t-test needs at least two pairs");
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = a.len() - 1;
    let sd = var.sqrt();
    if !(sd > 1e-15 * mean.abs().max(1.0)) {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            dof,
            mean_diff: mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / n.sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided(t, dof as f64),
        dof,
        mean_diff: mean,
        degenerate: false,
    })
}

/// Scores for one evaluated pair, or the mean over many.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub aepe: f64,
    /// Threshold (px, as written) → percent.
    pub pck: BTreeMap<String, f64>,
    pub cc: f64,
    pub ncc: f64,
    pub mi: f64,
    pub psnr: f64,
    pub scd: f64,
    pub ssim: f64,
    pub n_samples: usize,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

impl MetricsReport {
    /// Scores a predicted flow against ground truth, together with the
    /// visible image warped by each flow (the similarity inputs).
    pub fn evaluate(
        id: &str,
        pred: &FlowField,
        gt: &FlowField,
        warped_pred: &Image,
        warped_gt: &Image,
        thermal: &Image,
        thresholds: &[f64],
        fingerprint: &str,
    ) -> Result<Self> {
        let ae = aepe(pred, gt)?;
        let pk = pck(pred, gt, thresholds)?;
        let sim = image_similarity(warped_pred, warped_gt, thermal)?;
        Ok(Self {
            id: id.to_string(),
            aepe: ae,
            pck: thresholds.iter().map(|&t| threshold_key(t)).zip(pk).collect(),
            cc: sim.cc,
            ncc: sim.ncc,
            mi: sim.mi,
            psnr: sim.psnr,
            scd: sim.scd,
            ssim: sim.ssim,
            n_samples: 1,
            config_fingerprint: fingerprint.to_string(),
            flags: sim.undefined.into_iter().map(|m| format!("{m} undefined")).collect(),
        })
    }

    /// Sample-weighted mean of several reports.
    pub fn aggregate(id: &str, reports: &[MetricsReport]) -> Result<Self> {
        contract!(!reports.is_empty(), "nothing to aggregate");
        let n: usize = reports.iter().map(|r| r.n_samples).sum();
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| {
            reports.iter().map(|r| f(r) * r.n_samples as f64).sum::<f64>() / n as f64
        };
        let mut pck = BTreeMap::new();
        for key in reports[0].pck.keys() {
            pck.insert(key.clone(), mean(&|r| r.pck.get(key).copied().unwrap_or(0.0)));
        }
        let mut flags: Vec<String> = reports.iter().flat_map(|r| r.flags.iter().cloned()).collect();
        flags.sort();
        flags.dedup();
        Ok(Self {
            id: id.to_string(),
            aepe: mean(&|r| r.aepe),
            pck,
            cc: mean(&|r| r.cc),
            ncc: mean(&|r| r.ncc),
            mi: mean(&|r| r.mi),
            psnr: mean(&|r| r.psnr),
            scd: mean(&|r| r.scd),
            ssim: mean(&|r| r.ssim),
            n_samples: n,
            config_fingerprint: reports[0].config_fingerprint.clone(),
            flags,
        })
    }
}

/// 64-bit FNV-1a digest as hex, used to tag reports with their configuration.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    use super::*;
    use crate::image::Modality;
    use crate::tensor::Tensor;

    fn flow(h: usize, w: usize, f: impl Fn(usize) -> f64) -> FlowField {
        FlowField::new(Tensor::from_fn(&[2, h, w], f), 1).unwrap()
    }

    fn image(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Image {
        Image::new(Tensor::from_fn(&[3, h, w], f), Modality::Visible).unwrap()
    }

    #[test]
    fn aepe_three_four_five() {
        let gt = FlowField::zeros(4, 4);
        assert_eq!(aepe(&FlowField::constant(4, 4, 3.0, 4.0), &gt).unwrap(), 5.0);
        assert_eq!(aepe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn aepe_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = FlowField::new(Tensor::randn(&[2, 8, 8], 3.0, &mut rng), 1).unwrap();
        let b = FlowField::new(Tensor::randn(&[2, 8, 8], 3.0, &mut rng), 1).unwrap();
        let mut s = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let du = a.data.at(&[0, y, x]) - b.data.at(&[0, y, x]);
                let dv = a.data.at(&[1, y, x]) - b.data.at(&[1, y, x]);
                s += (du * du + dv * dv).sqrt();
            }
        }
        assert!((aepe(&a, &b).unwrap() - s / 64.0).abs() < 1e-12);
    }

    #[test]
    fn pck_step_placement_and_counting() {
        let gt = FlowField::zeros(4, 4);
        assert_eq!(pck(&gt, &gt, &[1.0, 3.0, 5.0]).unwrap(), vec![100.0; 3]);
        let two = FlowField::constant(4, 4, 2.0, 0.0);
        assert_eq!(pck(&two, &gt, &[1.0, 3.0, 5.0]).unwrap(), vec![0.0, 100.0, 100.0]);
        let half = flow(4, 4, |i| if i < 8 { 10.0 } else { 0.0 });
        assert_eq!(pck(&half, &gt, &[1.0, 3.0, 5.0]).unwrap(), vec![50.0; 3]);
        assert!(pck(&gt, &gt, &[0.0]).is_err());
    }

    #[test]
    fn identical_images_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = image(24, 24, |_| rng.gen());
        let aux = image(24, 24, |i| (i % 7) as f64 / 7.0);
        let s = image_similarity(&x, &x, &aux).unwrap();
        assert!((s.cc - 1.0).abs() < 1e-12);
        assert!((s.ssim - 1.0).abs() < 1e-12);
        assert!((s.ncc - 1.0).abs() < 1e-9);
        assert_eq!(s.psnr, PSNR_CAP);
        assert!((s.mi - histogram_entropy(&x.gray())).abs() < 1e-9);
    }

    #[test]
    fn inverted_image_is_anticorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = image(16, 16, |_| rng.gen());
        let inv = Image::new(
            Tensor::new(x.tensor().shape(), x.tensor().data().iter().map(|v| 1.0 - v).collect()).unwrap(),
            Modality::Visible,
        )
        .unwrap();
        let s = image_similarity(&inv, &x, &x).unwrap();
        assert!((s.cc + 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_intensity_change_keeps_cc_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = image(16, 16, |_| rng.gen());
        let y = Image::new(
            Tensor::new(x.tensor().shape(), x.tensor().data().iter().map(|v| 0.5 * v + 0.1).collect()).unwrap(),
            Modality::Visible,
        )
        .unwrap();
        assert!((pearson(y.tensor().data(), x.tensor().data()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_prediction_flags_cc() {
        let x = image(12, 12, |i| (i % 5) as f64 / 5.0);
        let c = Image::constant(12, 12, 0.5, Modality::Visible);
        let s = image_similarity(&c, &x, &x).unwrap();
        assert_eq!(s.cc, 0.0);
        assert!(s.undefined.contains(&"cc".to_string()));
    }

    #[test]
    fn independent_noise_is_uncorrelated_with_low_mi() {
        // The plug-in estimator on 16k samples over 65k cells carries a
        // positive bias of roughly 2.2 bits for independent inputs, against
        // about 8 bits of self-information.
        let (mut mi, mut self_mi) = (0.0, 0.0);
        let seeds = 100;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..128 * 128).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..128 * 128).map(|_| rng.gen()).collect();
            assert!(pearson(&a, &b).unwrap().abs() <= 0.05);
            mi += mutual_information(&a, &b);
            self_mi += mutual_information(&a, &a);
        }
        let (mi, self_mi) = (mi / seeds as f64, self_mi / seeds as f64);
        assert!(mi > 0.0 && mi < 2.5, "{mi}");
        assert!(self_mi > 7.9, "{self_mi}");
    }

    #[test]
    fn ttest_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 2.0, 4.0, 4.0, 6.0];
        let r = paired_ttest(&a, &b).unwrap();
        // d = [-1, 0, -1, 0, -1]: mean -0.6, sample sd √0.3, t = -0.6 / (√0.3/√5).
        assert!((r.t - -(-6.0f64).abs().sqrt()).abs() < 1e-9);
        assert_eq!(r.dof, 4);
        let oracle = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, 4.0).unwrap().cdf(r.t.abs()));
        assert!((r.p - oracle).abs() < 1e-9, "{} vs {oracle}", r.p);
        assert!(!r.degenerate);
    }

    #[test]
    fn degenerate_ttests_are_flagged() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_ttest(&a, &a).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 1.0, true));
        let r = paired_ttest(&[2.0; 4], &[1.0; 4]).unwrap();
        assert!(r.degenerate);
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn t_tail_matches_independent_oracle() {
        for &dof in &[1.0, 2.0, 4.0, 9.0, 30.0, 200.0] {
            let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
            for &t in &[0.0, 0.3, 1.0, 2.2, 5.0, 12.0] {
                let oracle = 2.0 * (1.0 - dist.cdf(t));
                let got = student_t_two_sided(t, dof);
                assert!((got - oracle).abs() < 1e-10, "dof {dof} t {t}: {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn aggregate_averages_and_fingerprint_is_stable() {
        let mut a = MetricsReport {
            id: "a".into(),
            aepe: 1.0,
            pck: [("1".to_string(), 50.0)].into_iter().collect(),
            cc: 0.5,
            ncc: 0.5,
            mi: 1.0,
            psnr: 20.0,
            scd: 0.0,
            ssim: 0.5,
            n_samples: 1,
            config_fingerprint: fingerprint(b"cfg"),
            flags: vec![],
        };
        let mut b = a.clone();
        b.aepe = 3.0;
        b.pck.insert("1".into(), 100.0);
        a.flags.push("cc undefined".into());
        let m = MetricsReport::aggregate("all", &[a, b]).unwrap();
        assert_eq!(m.aepe, 2.0);
        assert_eq!(m.pck["1"], 75.0);
        assert_eq!(m.n_samples, 2);
        assert_eq!(m.flags, vec!["cc undefined".to_string()]);
        assert_eq!(fingerprint(b"cfg"), fingerprint(b"cfg"));
        assert_ne!(fingerprint(b"cfg"), fingerprint(b"cfh"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pck_is_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = FlowField::new(Tensor::randn(&[2, 6, 6], 4.0, &mut rng), 1).unwrap();
            let gt = FlowField::zeros(6, 6);
            let p = pck(&a, &gt, &[0.5, 1.0, 2.0, 4.0, 8.0, 1e9]).unwrap();
            prop_assert!(p.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(p[5], 100.0);
        }

        #[test]
        fn aepe_is_translation_covariant(seed in 0u64..1000, cx in -5.0f64..5.0, cy in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[2, 5, 5], 2.0, &mut rng);
            let b = Tensor::randn(&[2, 5, 5], 2.0, &mut rng);
            let shift = |t: &Tensor| FlowField::new(Tensor::from_fn(&[2, 5, 5], |i| t.data()[i] + if i < 25 { cx } else { cy }), 1).unwrap();
            let (fa, fb) = (FlowField::new(a.clone(), 1).unwrap(), FlowField::new(b, 1).unwrap());
            let base = aepe(&fa, &fb).unwrap();
            let moved = aepe(&shift(&fa.data), &shift(&fb.data)).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            prop_assert!((aepe(&shift(&a), &fa).unwrap() - cx.hypot(cy)).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
            let (x, y) = (ssim_plane(&a, &b, 16, 16), ssim_plane(&b, &a, 16, 16));
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1.0..1.0).contains(&x));
        }
    }
}
