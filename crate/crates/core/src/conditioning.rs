//! Generator input construction: Canny edges of a frame with the polyp mask
//! painted solid on top.

use image::{GrayImage, Luma, RgbImage};

use crate::canny::{canny, CannyParams};
use crate::error::Result;
use crate::mask::BinaryMask;

/// Binary generator input. Every on-pixel is an edge pixel or a mask pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionedImage(BinaryMask);

impl ConditionedImage {
    /// Wraps an already-combined binary image, e.g. one read back from disk.
    pub fn from_binary(pixels: BinaryMask) -> Self {
        ConditionedImage(pixels)
    }

    pub fn pixels(&self) -> &BinaryMask {
        &self.0
    }

    pub fn into_pixels(self) -> BinaryMask {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Luma with weights 0.299/0.587/0.114, rounded to nearest.
pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let [r, g, b] = rgb.get_pixel(x, y).0;
        let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        Luma([luma.round().clamp(0.0, 255.0) as u8])
    })
}

/// Mask pixels are on; elsewhere the edge value shows through.
pub fn combine(edges: &BinaryMask, polyp_mask: &BinaryMask) -> Result<ConditionedImage> {
    edges.check_same_extent(polyp_mask, "combine")?;
    Ok(ConditionedImage(edges.union(polyp_mask)?))
}

/// Returns `(combine(canny(gray(frame)), mask), frame)`.
pub fn make_training_pair(
    frame: &RgbImage,
    polyp_mask: &BinaryMask,
    params: &CannyParams,
) -> Result<(ConditionedImage, RgbImage)> {
    let edges = canny(&to_grayscale(frame), params)?;
    Ok((combine(&edges, polyp_mask)?, frame.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn luma_examples() {
        let px = |c: [u8; 3]| to_grayscale(&RgbImage::from_pixel(1, 1, Rgb(c))).get_pixel(0, 0).0[0];
        assert_eq!(px([255, 255, 255]), 255);
        assert_eq!(px([255, 0, 0]), 76);
        for v in [0u8, 1, 77, 128, 254] {
            assert_eq!(px([v, v, v]), v);
        }
    }

    #[test]
    fn combine_edge_cases() {
        let edges = BinaryMask::from_fn(6, 6, |x, y| x == y);
        assert_eq!(combine(&edges, &BinaryMask::new(6, 6)).unwrap().pixels(), &edges);
        assert_eq!(
            combine(&edges, &BinaryMask::full(6, 6)).unwrap().pixels(),
            &BinaryMask::full(6, 6)
        );
        assert!(combine(&edges, &BinaryMask::new(5, 6)).is_err());
    }

    #[test]
    fn constant_frame_with_empty_mask() {
        let frame = RgbImage::from_pixel(16, 16, Rgb([90, 40, 30]));
        let (cond, out) =
            make_training_pair(&frame, &BinaryMask::new(16, 16), &CannyParams::default()).unwrap();
        assert!(cond.pixels().is_empty());
        assert_eq!(out, frame);
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(0u8..=1, 64).prop_map(|v| BinaryMask::from_vec(8, 8, v).unwrap())
    }

    proptest! {
        #[test]
        fn combine_is_union(e in mask_strategy(), m in mask_strategy()) {
            let c = combine(&e, &m).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    prop_assert_eq!(c.pixels().get(x, y), e.get(x, y) || m.get(x, y));
                }
            }
            // absorption
            prop_assert_eq!(combine(c.pixels(), &m).unwrap(), c);
        }

        #[test]
        fn combine_is_monotone(e in mask_strategy(), m in mask_strategy(), extra in mask_strategy()) {
            let base = combine(&e, &m).unwrap();
            let bigger_e = combine(&e.union(&extra).unwrap(), &m).unwrap();
            let bigger_m = combine(&e, &m.union(&extra).unwrap()).unwrap();
            for (i, &v) in base.pixels().data().iter().enumerate() {
                prop_assert!(v <= bigger_e.pixels().data()[i]);
                prop_assert!(v <= bigger_m.pixels().data()[i]);
            }
        }

        #[test]
        fn mask_pixels_always_on(seed in any::<u64>(), m in mask_strategy()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frame = RgbImage::from_fn(8, 8, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
            let (cond, _) = make_training_pair(&frame, &m, &CannyParams::default()).unwrap();
            for (x, y) in m.on_pixels() {
                prop_assert!(cond.pixels().get(x, y));
            }
        }
    }
}
