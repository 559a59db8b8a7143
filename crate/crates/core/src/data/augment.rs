//! Image to tensor conversion: resizing, training-time random crops and
//! flips, and per-channel normalization.

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::ImageRecord;
use crate::error::{Error, Result};

/// Per-channel `(x - mean) / std` on values scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Statistics of the ImageNet training set, used by pretrained backbones.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
    /// Maps `[0, 1]` onto `[-1, 1]`.
    pub const SYMMETRIC: Normalization = Normalization {
        mean: [0.5; 3],
        std: [0.5; 3],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, unit: &Array3<f64>) -> Array3<f64> {
        let mut out = unit.clone();
        for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(2)).enumerate() {
            plane.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn denormalize(&self, normalized: &Array3<f64>) -> Array3<f64> {
        let mut out = normalized.clone();
        for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(2)).enumerate() {
            plane.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }
}

/// `height x width x 3` tensor with values in `[0, 1]`.
pub fn to_unit_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("rgb buffer shape")
}

/// Mirror along the width axis.
pub fn flip_horizontal(tensor: &Array3<f64>) -> Array3<f64> {
    let mut out = tensor.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        img.clone()
    } else {
        imageops::resize(img, width, height, FilterType::Triangle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Random choices made for one training image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Accepted area fraction, or `None` when every attempt failed and the
    /// full image is used.
    pub scale: Option<f64>,
    pub aspect: Option<f64>,
    pub crop: CropWindow,
    pub flip: bool,
}

/// Resize, crop, flip and normalize settings shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePipeline {
    pub height: u32,
    pub width: u32,
    /// Crop area as a fraction of the resized image.
    pub scale_range: (f64, f64),
    /// Crop height / width.
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub max_crop_attempts: usize,
    pub normalization: Normalization,
}

impl Default for ImagePipeline {
    fn default() -> Self {
        Self {
            height: 256,
            width: 128,
            scale_range: (0.64, 1.0),
            aspect_range: (2.0, 3.0),
            flip_prob: 0.5,
            max_crop_attempts: 10,
            normalization: Normalization::IMAGENET,
        }
    }
}

impl ImagePipeline {
    pub fn with_size(height: u32, width: u32, normalization: Normalization) -> Self {
        Self {
            height,
            width,
            normalization,
            ..Self::default()
        }
    }

    /// Crop size for an area fraction and height/width ratio, if it fits.
    pub fn crop_size(&self, scale: f64, aspect: f64) -> Option<(u32, u32)> {
        let area = scale * (self.height as f64) * (self.width as f64);
        let h = (area * aspect).sqrt().round() as u32;
        let w = (area / aspect).sqrt().round() as u32;
        (h >= 1 && w >= 1 && h <= self.height && w <= self.width).then_some((h, w))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let full = CropWindow {
            x: 0,
            y: 0,
            width: self.width,
            height: self.height,
        };
        let mut chosen = None;
        for _ in 0..self.max_crop_attempts {
            let scale = rng.random_range(self.scale_range.0..=self.scale_range.1);
            let aspect = rng.random_range(self.aspect_range.0..=self.aspect_range.1);
            if let Some((h, w)) = self.crop_size(scale, aspect) {
                let y = rng.random_range(0..=self.height - h);
                let x = rng.random_range(0..=self.width - w);
                chosen = Some((
                    scale,
                    aspect,
                    CropWindow {
                        x,
                        y,
                        width: w,
                        height: h,
                    },
                ));
                break;
            }
        }
        let flip = rng.random_bool(self.flip_prob);
        match chosen {
            Some((scale, aspect, crop)) => AugmentDraw {
                scale: Some(scale),
                aspect: Some(aspect),
                crop,
                flip,
            },
            None => AugmentDraw {
                scale: None,
                aspect: None,
                crop: full,
                flip,
            },
        }
    }

    /// Applies a draw to an image of any size; the result is `height x width x 3`.
    pub fn apply(&self, img: &RgbImage, draw: &AugmentDraw) -> Array3<f64> {
        let base = resize(img, self.width, self.height);
        let c = draw.crop;
        let patch = imageops::crop_imm(&base, c.x, c.y, c.width, c.height).to_image();
        let mut unit = to_unit_tensor(&resize(&patch, self.width, self.height));
        if draw.flip {
            unit = flip_horizontal(&unit);
        }
        self.normalization.normalize(&unit)
    }

    pub fn augment<R: Rng + ?Sized>(&self, img: &RgbImage, rng: &mut R) -> Array3<f64> {
        let draw = self.draw(rng);
        self.apply(img, &draw)
    }

    /// The image at network input size, before normalization.
    pub fn resized(&self, img: &RgbImage) -> RgbImage {
        resize(img, self.width, self.height)
    }

    /// Deterministic resize and normalize.
    pub fn preprocess(&self, img: &RgbImage) -> Array3<f64> {
        self.normalization
            .normalize(&to_unit_tensor(&resize(img, self.width, self.height)))
    }
}

pub fn augment_train_image<R: Rng + ?Sized>(
    record: &ImageRecord,
    pipeline: &ImagePipeline,
    rng: &mut R,
) -> Result<Array3<f64>> {
    Ok(pipeline.augment(&*record.load()?, rng))
}

pub fn preprocess_eval_image(
    record: &ImageRecord,
    pipeline: &ImagePipeline,
) -> Result<Array3<f64>> {
    Ok(pipeline.preprocess(&*record.load()?))
}

/// True when every element is finite.
pub fn all_finite(t: &Array3<f64>) -> bool {
    Zip::from(t).all(|v| v.is_finite())
}
