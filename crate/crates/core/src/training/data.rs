//! Image/tensor conversion and paired jitter.

use image::{Rgb, RgbImage};
use polypgan_tensor::ops::nearest_resize_to;
use polypgan_tensor::Tensor;
use rand::Rng;

use crate::conditioning::ConditionedImage;
use crate::error::{Error, Result};

/// Conditioned input `x` (1 channel) and target `y` (3 channels), both in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: Tensor,
    pub y: Tensor,
}

impl TrainingPair {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        let (xs, ys) = (x.dims(), y.dims());
        if xs[0] != 1 || ys[0] != 1 || xs[2..] != ys[2..] {
            return Err(Error::ExtentMismatch {
                op: "training pair",
                left: (xs[3], xs[2]),
                right: (ys[3], ys[2]),
            });
        }
        if x.data().iter().chain(y.data()).any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("training pair", "values must lie in [-1, 1]"));
        }
        Ok(TrainingPair { x, y })
    }

    pub fn from_images(x: &ConditionedImage, y: &RgbImage) -> Result<Self> {
        Self::new(conditioned_to_tensor(x), rgb_to_tensor(y))
    }

    pub fn extent(&self) -> usize {
        self.x.dims()[2]
    }
}

/// Off pixels map to -1, on pixels to +1.
pub fn conditioned_to_tensor(x: &ConditionedImage) -> Tensor {
    let m = x.pixels();
    let (w, h) = m.dims();
    let data = m.data().iter().map(|&v| if v != 0 { 1.0 } else { -1.0 }).collect();
    Tensor::from_vec([1, 1, h, w], data).expect("mask buffer matches its extent")
}

/// `v / 127.5 - 1`, channel-planar.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p[c] as f32 / 127.5 - 1.0);
        }
    }
    t
}

/// Inverse of [`rgb_to_tensor`], rounding and clamping to 8 bits. A single
/// channel is replicated to gray.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [_, c, h, w] = t.dims();
    if c != 1 && c != 3 {
        return Err(Error::invalid("image tensor", format!("{c} channels")));
    }
    let to_u8 = |v: f32| (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(t.at(0, ch.min(c - 1), y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    }))
}

/// Intermediate extent for jitter: `round(ratio * extent)`.
pub fn jitter_extent(extent: usize, ratio: f64) -> usize {
    (ratio * extent as f64).round() as usize
}

/// Crops both tensors of a pair at the same offset.
pub fn crop_pair(pair: &TrainingPair, top: usize, left: usize, extent: usize) -> Result<TrainingPair> {
    Ok(TrainingPair {
        x: pair.x.crop(top, left, extent, extent)?,
        y: pair.y.crop(top, left, extent, extent)?,
    })
}

/// Nearest-resizes both images to the jitter extent and crops back at one
/// shared random offset.
pub fn jitter<R: Rng + ?Sized>(pair: &TrainingPair, ratio: f64, rng: &mut R) -> Result<TrainingPair> {
    if !(ratio > 1.0) {
        return Err(Error::invalid("jitter ratio", format!("{ratio} must exceed 1")));
    }
    let s = pair.extent();
    let big = jitter_extent(s, ratio);
    let enlarged = TrainingPair {
        x: nearest_resize_to(&pair.x, big, big)?,
        y: nearest_resize_to(&pair.y, big, big)?,
    };
    let top = rng.gen_range(0..=big - s);
    let left = rng.gen_range(0..=big - s);
    crop_pair(&enlarged, top, left, s)
}
