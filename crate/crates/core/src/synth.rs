//! Random geometric misalignment: affine, homography and thin-plate-spline
//! transforms, their dense flows, warping, and a procedural aligned scene
//! generator for training data.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::box_mean;
use crate::error::{contract, Error, Result};
use crate::flow::FlowField;
use crate::image::{Image, Modality};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    #[serde(alias = "aff")]
    Affine,
    #[serde(alias = "hg")]
    Homography,
    Tps,
}

/// Kind selector that may also draw the kind at random.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindChoice {
    #[serde(alias = "aff")]
    Affine,
    #[serde(alias = "hg")]
    Homography,
    Tps,
    Mixed,
}

impl KindChoice {
    pub fn resolve(self, rng: &mut impl Rng) -> TransformKind {
        match self {
            KindChoice::Affine => TransformKind::Affine,
            KindChoice::Homography => TransformKind::Homography,
            KindChoice::Tps => TransformKind::Tps,
            KindChoice::Mixed => [TransformKind::Affine, TransformKind::Homography, TransformKind::Tps]
                [rng.gen_range(0..3)],
        }
    }
}

impl std::str::FromStr for KindChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aff" | "affine" => Ok(KindChoice::Affine),
            "hg" | "homography" => Ok(KindChoice::Homography),
            "tps" => Ok(KindChoice::Tps),
            "mixed" => Ok(KindChoice::Mixed),
            other => Err(Error::Contract(format!("unknown transform kind `{other}`"))),
        }
    }
}

/// Sampling ranges at magnitude 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRanges {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    /// Fraction of `min(H, W)`.
    pub translation: f64,
    /// Corner displacement as a fraction of the image side.
    pub corner: f64,
    /// Control-point displacement as a fraction of the image side.
    pub tps_displacement: f64,
    pub tps_grid: usize,
    pub tps_lambda: f64,
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale: 0.15,
            shear_deg: 5.0,
            translation: 0.1,
            corner: 0.12,
            tps_displacement: 0.08,
            tps_grid: 4,
            tps_lambda: 1e-6,
        }
    }
}

/// A map `T` from reference (warped) pixel coordinates into the source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformSpec {
    Affine {
        matrix: [[f64; 3]; 2],
    },
    Homography {
        matrix: [[f64; 3]; 3],
    },
    Tps {
        /// Control points in the reference grid.
        source: Vec<[f64; 2]>,
        /// Where each control point lands in the source image.
        target: Vec<[f64; 2]>,
        lambda: f64,
    },
}

/// Evaluator with any linear solve done once.
enum Mapper {
    Affine([[f64; 3]; 2]),
    Homography(Matrix3<f64>),
    Tps {
        centers: Vec<[f64; 2]>,
        weights: DMatrix<f64>,
    },
}

/// Thin-plate radial basis `r² log r`, written in terms of `r²`.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl Mapper {
    fn apply(&self, x: f64, y: f64) -> [f64; 2] {
        match self {
            Mapper::Affine(m) => [
                m[0][0] * x + m[0][1] * y + m[0][2],
                m[1][0] * x + m[1][1] * y + m[1][2],
            ],
            Mapper::Homography(h) => {
                let d = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
                [
                    (h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) / d,
                    (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) / d,
                ]
            }
            Mapper::Tps { centers, weights } => {
                let n = centers.len();
                let mut out = [0.0; 2];
                for (d, o) in out.iter_mut().enumerate() {
                    let mut v = weights[(n, d)] + weights[(n + 1, d)] * x + weights[(n + 2, d)] * y;
                    for (i, c) in centers.iter().enumerate() {
                        let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                        v += weights[(i, d)] * tps_kernel(r2);
                    }
                    *o = v;
                }
                out
            }
        }
    }
}

/// Regularized thin-plate fit: `[K + λI, P; Pᵀ, 0] [w; a] = [target; 0]`.
fn fit_tps(source: &[[f64; 2]], target: &[[f64; 2]], lambda: f64) -> Result<DMatrix<f64>> {
    let n = source.len();
    contract!(n >= 3 && target.len() == n, "thin-plate spline needs >= 3 matched control points");
    let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
    let mut b = DMatrix::<f64>::zeros(n + 3, 2);
    for i in 0..n {
        for j in 0..n {
            let r2 = (source[i][0] - source[j][0]).powi(2) + (source[i][1] - source[j][1]).powi(2);
            a[(i, j)] = tps_kernel(r2);
        }
        a[(i, i)] += lambda;
        let p = [1.0, source[i][0], source[i][1]];
        for k in 0..3 {
            a[(i, n + k)] = p[k];
            a[(n + k, i)] = p[k];
        }
        b[(i, 0)] = target[i][0];
        b[(i, 1)] = target[i][1];
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("thin-plate spline system is singular".into()))
}

/// Direct linear transform for the homography taking `src[i]` to `dst[i]`
/// with `h33 = 1`.
pub fn fit_homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<[[f64; 3]; 3]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("degenerate homography correspondences".into()))?;
    Ok([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::Affine { .. } => TransformKind::Affine,
            TransformSpec::Homography { .. } => TransformKind::Homography,
            TransformSpec::Tps { .. } => TransformKind::Tps,
        }
    }

    pub fn identity(kind: TransformKind, h: usize, w: usize, ranges: &SynthRanges) -> Self {
        match kind {
            TransformKind::Affine => TransformSpec::Affine {
                matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            },
            TransformKind::Homography => TransformSpec::Homography {
                matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            },
            TransformKind::Tps => {
                let source = tps_grid(h, w, ranges.tps_grid);
                TransformSpec::Tps {
                    target: source.clone(),
                    source,
                    lambda: ranges.tps_lambda,
                }
            }
        }
    }

    fn mapper(&self) -> Result<Mapper> {
        Ok(match self {
            TransformSpec::Affine { matrix } => Mapper::Affine(*matrix),
            TransformSpec::Homography { matrix } => Mapper::Homography(Matrix3::from_fn(|r, c| matrix[r][c])),
            TransformSpec::Tps { source, target, lambda } => Mapper::Tps {
                centers: source.clone(),
                weights: fit_tps(source, target, *lambda)?,
            },
        })
    }

    /// `T(x, y)` for a single point.
    pub fn apply(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        Ok(self.mapper()?.apply(x, y))
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self {
            TransformSpec::Affine { matrix: m } => {
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                contract!(det.abs() > 1e-8, "affine matrix is singular (det {det})");
            }
            TransformSpec::Homography { matrix } => {
                let det = Matrix3::from_fn(|r, c| matrix[r][c]).determinant();
                contract!(det.abs() > 1e-8, "homography is singular (det {det})");
                let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
                for (x, y) in [(0.0, 0.0), (xm, 0.0), (xm, ym), (0.0, ym)] {
                    let d = matrix[2][0] * x + matrix[2][1] * y + matrix[2][2];
                    contract!(d > 1e-8, "homography sends the image across the horizon");
                }
            }
            TransformSpec::Tps { source, .. } => {
                let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
                contract!(
                    source.iter().all(|p| (0.0..=xm).contains(&p[0]) && (0.0..=ym).contains(&p[1])),
                    "thin-plate control points must lie inside the image"
                );
            }
        }
        Ok(())
    }
}

/// Evenly spaced `k×k` control points spanning the image.
pub fn tps_grid(h: usize, w: usize, k: usize) -> Vec<[f64; 2]> {
    let step = |len: usize, i: usize| (len - 1) as f64 * i as f64 / (k - 1) as f64;
    (0..k)
        .flat_map(|j| (0..k).map(move |i| [step(w, i), step(h, j)]))
        .collect()
}

fn sym(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

fn draw(kind: TransformKind, m: f64, h: usize, w: usize, r: &SynthRanges, rng: &mut impl Rng) -> Result<TransformSpec> {
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    Ok(match kind {
        TransformKind::Affine => {
            let theta = sym(rng, r.rotation_deg * m).to_radians();
            let s = 1.0 + sym(rng, r.scale * m);
            let shear = sym(rng, r.shear_deg * m).to_radians();
            let tb = r.translation * hf.min(wf) * m;
            let (tx, ty) = (sym(rng, tb), sym(rng, tb));
            let (c, sn, k) = (theta.cos(), theta.sin(), shear.tan());
            // s · R(θ) · [[1, tan φ], [0, 1]]
            let a = [[s * c, s * (c * k - sn)], [s * sn, s * (sn * k + c)]];
            let bx = cx + tx - a[0][0] * cx - a[0][1] * cy;
            let by = cy + ty - a[1][0] * cx - a[1][1] * cy;
            TransformSpec::Affine {
                matrix: [[a[0][0], a[0][1], bx], [a[1][0], a[1][1], by]],
            }
        }
        TransformKind::Homography => {
            let (xm, ym) = (wf - 1.0, hf - 1.0);
            let src = [[0.0, 0.0], [xm, 0.0], [xm, ym], [0.0, ym]];
            let mut dst = src;
            for p in &mut dst {
                p[0] += sym(rng, r.corner * m * wf);
                p[1] += sym(rng, r.corner * m * hf);
            }
            TransformSpec::Homography {
                matrix: fit_homography(&src, &dst)?,
            }
        }
        TransformKind::Tps => {
            let source = tps_grid(h, w, r.tps_grid);
            let target = source
                .iter()
                .map(|p| {
                    [
                        p[0] + sym(rng, r.tps_displacement * m * wf),
                        p[1] + sym(rng, r.tps_displacement * m * hf),
                    ]
                })
                .collect();
            TransformSpec::Tps {
                source,
                target,
                lambda: r.tps_lambda,
            }
        }
    })
}

/// Draws a random transform of `kind` whose strength scales with
/// `magnitude ∈ [0, 1]`; degenerate draws are retried up to 10 times.
pub fn sample_transform(
    kind: TransformKind,
    magnitude: f64,
    h: usize,
    w: usize,
    ranges: &SynthRanges,
    rng: &mut impl Rng,
) -> Result<TransformSpec> {
    contract!((0.0..=1.0).contains(&magnitude), "magnitude {magnitude} outside [0, 1]");
    contract!(h >= 2 && w >= 2, "image must be at least 2x2");
    contract!(ranges.tps_grid >= 2, "thin-plate grid needs at least 2x2 points");
    let mut last = None;
    for _ in 0..10 {
        match draw(kind, magnitude, h, w, ranges, rng).and_then(|s| s.validate(h, w).map(|_| s)) {
            Ok(spec) => return Ok(spec),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Numeric(format!(
        "no valid {kind:?} transform after 10 attempts: {}",
        last.expect("at least one attempt")
    )))
}

/// `flow(p) = T(p) − p` on the `h×w` reference grid.
pub fn transform_to_flow(spec: &TransformSpec, h: usize, w: usize) -> Result<FlowField> {
    let mapper = spec.mapper()?;
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let [tx, ty] = mapper.apply(x as f64, y as f64);
            data[y * w + x] = tx - x as f64;
            data[n + y * w + x] = ty - y as f64;
        }
    }
    FlowField::new(Tensor::new(&[2, h, w], data)?, 1)
}

/// `out(p) = img(p + flow(p))`, bilinear with border clamp.
pub fn warp_image(img: &Image, flow: &FlowField) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    contract!(
        flow.height() == h && flow.width() == w,
        "flow {}x{} does not match image {h}x{w}",
        flow.height(),
        flow.width()
    );
    let n = h * w;
    let fd = flow.data.data();
    let coords: Vec<f64> = (0..2 * n)
        .map(|i| {
            let p = i % n;
            let base = if i < n { (p % w) as f64 } else { (p / w) as f64 };
            base + fd[i]
        })
        .collect();
    let out = kernels::grid_sample_forward(img.tensor().data(), 3, h, w, &coords, n);
    Image::new(Tensor::new(&[3, h, w], out)?, img.modality())
}

/// Visible image, thermal image warped by a random transform, and the flow
/// that carries the visible image onto the warped thermal grid.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub visible: Image,
    pub warped_thermal: Image,
    pub gt_flow: FlowField,
    pub spec: TransformSpec,
    pub seed: u64,
    pub magnitude: f64,
}

/// Builds a triplet from an aligned pair; a pure function of its arguments.
pub fn generate_triplet(
    visible: &Image,
    thermal: &Image,
    kind: KindChoice,
    magnitude: f64,
    ranges: &SynthRanges,
    seed: u64,
) -> Result<Triplet> {
    contract!(
        visible.tensor().shape() == thermal.tensor().shape(),
        "aligned pair must share a size"
    );
    let (h, w) = (visible.height(), visible.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kind.resolve(&mut rng);
    let spec = sample_transform(kind, magnitude, h, w, ranges, &mut rng)?;
    let gt_flow = transform_to_flow(&spec, h, w)?;
    let warped_thermal = warp_image(thermal, &gt_flow)?;
    Ok(Triplet {
        visible: visible.clone(),
        warped_thermal,
        gt_flow,
        spec,
        seed,
        magnitude,
    })
}

/// An aligned visible/thermal pair of random shapes. Every shape gets an
/// independent color and temperature, so edges coincide across modalities
/// while intensities are unrelated; the visible image carries extra texture
/// and noise, the thermal image is slightly blurred.
pub fn procedural_pair(h: usize, w: usize, seed: u64) -> Result<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut vis = vec![0.0; 3 * n];
    let mut th = vec![0.0; n];
    let bg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let bg_t: f64 = rng.gen();
    for c in 0..3 {
        vis[c * n..(c + 1) * n].fill(bg[c]);
    }
    th.fill(bg_t);
    let (wf, hf) = (w as f64, h as f64);
    let shapes = rng.gen_range(6..12);
    for _ in 0..shapes {
        let (cx, cy) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let (rx, ry) = (rng.gen_range(4.0..(wf / 4.0).max(4.5)), rng.gen_range(4.0..(hf / 4.0).max(4.5)));
        let ellipse = rng.gen_bool(0.5);
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let temp: f64 = rng.gen();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if ellipse {
                    dx * dx + dy * dy < 1.0
                } else {
                    dx.abs() < 1.0 && dy.abs() < 1.0
                };
                if inside {
                    for c in 0..3 {
                        vis[c * n + y * w + x] = color[c];
                    }
                    th[y * w + x] = temp;
                }
            }
        }
    }
    let (fx, fy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    for y in 0..h {
        for x in 0..w {
            let tex = 0.05 * (x as f64 * fx).sin() * (y as f64 * fy).cos();
            for c in 0..3 {
                let noise = 0.02 * crate::tensor::sample_normal(&mut rng);
                vis[c * n + y * w + x] += tex + noise;
            }
        }
    }
    let th = box_mean(&th, h, w, 1);
    let visible = Image::new(Tensor::new(&[3, h, w], vis)?, Modality::Visible)?;
    let thermal = Image::new(Tensor::new(&[1, h, w], th)?, Modality::Thermal)?;
    Ok((visible, thermal))
}
