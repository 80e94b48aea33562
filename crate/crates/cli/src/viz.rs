//! Composite and heatmap images written by `register` and `eval`.

use thermalign::image::{Image, Modality};
use thermalign::tensor::Tensor;
use thermalign::Result;

/// `a` and `b` next to each other.
pub fn side_by_side(a: &Image, b: &Image) -> Result<Image> {
    let (h, w) = (a.height(), a.width());
    let t = Tensor::from_fn(&[3, h, 2 * w], |i| {
        let (c, y, x) = (i / (h * 2 * w), (i / (2 * w)) % h, i % (2 * w));
        if x < w {
            a.tensor().at(&[c, y, x])
        } else {
            b.tensor().at(&[c, y, x - w])
        }
    });
    Image::new(t, Modality::Visible)
}

/// Alternating `block`-pixel tiles of `a` and `b`.
pub fn checkerboard(a: &Image, b: &Image, block: usize) -> Result<Image> {
    let (h, w) = (a.height(), a.width());
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let src = if (y / block + x / block).is_multiple_of(2) { a } else { b };
        src.tensor().at(&[c, y, x])
    });
    Image::new(t, Modality::Visible)
}

/// Black → red → yellow → white ramp for `v` in `[0, 1]`.
fn hot(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    [v.min(1.0), (v - 1.0).clamp(0.0, 1.0), (v - 2.0).clamp(0.0, 1.0)]
}

/// Per-pixel values scaled by `max` into a heat ramp.
pub fn heatmap(values: &[f64], h: usize, w: usize, max: f64) -> Result<Image> {
    let n = h * w;
    let t = Tensor::from_fn(&[3, h, w], |i| hot(values[i % n] / max)[i / n]);
    Image::new(t, Modality::Visible)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composites_pick_the_right_sources() {
        let a = Image::constant(4, 4, 0.2, Modality::Visible);
        let b = Image::constant(4, 4, 0.8, Modality::Thermal);
        let s = side_by_side(&a, &b).unwrap();
        assert_eq!((s.height(), s.width()), (4, 8));
        assert_eq!(s.tensor().at(&[0, 0, 0]), 0.2);
        assert_eq!(s.tensor().at(&[2, 3, 7]), 0.8);
        let c = checkerboard(&a, &b, 2).unwrap();
        assert_eq!(c.tensor().at(&[0, 0, 0]), 0.2);
        assert_eq!(c.tensor().at(&[0, 0, 2]), 0.8);
        assert_eq!(c.tensor().at(&[0, 2, 2]), 0.2);
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(hot(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(hot(1.0), [1.0, 1.0, 1.0]);
        assert_eq!(hot(7.0), [1.0, 1.0, 1.0]);
        let m = heatmap(&[0.0, 10.0], 1, 2, 10.0).unwrap();
        assert_eq!(m.tensor().at(&[1, 0, 1]), 1.0);
    }
}
