//! Strictly binary images: polyp masks, edge maps and conditioned inputs.

use image::GrayImage;

use crate::error::{Error, Result};

/// Tight inclusive pixel bounds of a set of on-pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBounds {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

impl PixelBounds {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

/// Row-major `{0, 1}` raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    /// Rejects wrong lengths and any value outside `{0, 1}`.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "mask",
                format!("{} values for a {width}x{height} canvas", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("mask", format!("non-binary value {v}")));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask { width, height, data }
    }

    /// Pixels above 127 are on, so both 0/1 and 0/255 encodings load correctly.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| (v > 127) as u8).collect();
        BinaryMask {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// 0/255 encoding.
    pub fn to_gray(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("length checked")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    /// Out-of-canvas reads are off.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn on_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    pub fn bounds(&self) -> Option<PixelBounds> {
        let mut it = self.on_pixels();
        let (x, y) = it.next()?;
        let mut b = PixelBounds {
            x_min: x,
            x_max: x,
            y_min: y,
            y_max: y,
        };
        for (x, y) in it {
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_extent(other, "union")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn check_same_extent(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ExtentMismatch {
                op,
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    /// 8-connected components, each returned as its own mask, ordered by
    /// the raster position of their first pixel.
    pub fn components(&self) -> Vec<BinaryMask> {
        let (labels, count) = self.label_components();
        let mut out = vec![BinaryMask::new(self.width, self.height); count];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].data[i] = 1;
            }
        }
        out
    }

    /// Per-pixel labels (0 = background, 1..=count) and the component count.
    pub fn label_components(&self) -> (Vec<u32>, usize) {
        let (w, h) = (self.width, self.height);
        let mut labels = vec![0u32; w * h];
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if self.data[start] == 0 || labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if self.data[j] != 0 && labels[j] == 0 {
                            labels[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        (labels, next as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_values() {
        assert!(BinaryMask::from_vec(2, 1, vec![0, 2]).is_err());
        assert!(BinaryMask::from_vec(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn gray_round_trip() {
        let m = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        assert_eq!(BinaryMask::from_gray(&m.to_gray()), m);
    }

    #[test]
    fn bounds_span_all_blobs() {
        let mut m = BinaryMask::new(10, 8);
        m.set(1, 2, true);
        m.set(7, 6, true);
        let b = m.bounds().unwrap();
        assert_eq!((b.x_min, b.x_max, b.y_min, b.y_max), (1, 7, 2, 6));
        assert!(BinaryMask::new(3, 3).bounds().is_none());
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(m.components().len(), 1);
        let two = BinaryMask::from_fn(5, 1, |x, _| x == 0 || x == 4);
        let parts = two.components();
        assert_eq!(parts.len(), 2);
        assert!(parts[0].get(0, 0) && parts[1].get(4, 0));
    }
}
