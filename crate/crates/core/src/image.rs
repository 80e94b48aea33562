//! Three-channel floating-point images and PNG I/O.

use std::fmt;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Thermal,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visible => "visible",
            Modality::Thermal => "thermal",
        })
    }
}

/// A `(3, H, W)` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
    modality: Modality,
}

impl Image {
    /// Wraps a `(3,H,W)` or `(1,H,W)` tensor; values are clamped into `[0,1]`
    /// and single-channel data is replicated to three channels.
    pub fn new(data: Tensor, modality: Modality) -> Result<Self> {
        let shape = data.shape().to_vec();
        contract!(
            shape.len() == 3 && (shape[0] == 3 || shape[0] == 1),
            "image tensor must be (3,H,W) or (1,H,W), got {shape:?}"
        );
        contract!(data.is_finite(), "image contains non-finite values");
        let (h, w) = (shape[1], shape[2]);
        let mut values: Vec<f64> = data.into_data();
        if shape[0] == 1 {
            values = values.repeat(3);
        }
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            data: Tensor::new(&[3, h, w], values)?,
            modality,
        })
    }

    pub fn constant(h: usize, w: usize, value: f64, modality: Modality) -> Self {
        Self {
            data: Tensor::full(&[3, h, w], value.clamp(0.0, 1.0)),
            modality,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[c * n..(c + 1) * n]
    }

    /// ITU-R BT.601 luma.
    pub fn gray(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Loads an 8- or 16-bit PNG; gray images are replicated to three channels.
    pub fn load(path: impl AsRef<Path>, modality: Modality) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_dynamic(img, modality))
    }

    pub fn from_dynamic(img: DynamicImage, modality: Modality) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let mut data = vec![0.0; 3 * h * w];
        let n = h * w;
        if sixteen {
            let rgb = img.into_rgb16();
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = f64::from(px[c]) / 65535.0;
                }
            }
        } else {
            let rgb = img.into_rgb8();
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = f64::from(px[c]) / 255.0;
                }
            }
        }
        Self {
            data: Tensor::new(&[3, h, w], data).expect("shape from decoded image"),
            modality,
        }
    }

    pub fn to_rgb16(&self) -> ImageBuffer<Rgb<u16>, Vec<u16>> {
        let (h, w) = (self.height(), self.width());
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|c| (self.plane(c)[i] * 65535.0).round() as u16))
        })
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let (h, w) = (self.height(), self.width());
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|c| (self.plane(c)[i] * 255.0).round() as u8))
        })
    }

    /// Writes a 16-bit RGB PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb16().save(path)?;
        Ok(())
    }

    /// Writes an 8-bit RGB PNG (used for visualizations).
    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}
