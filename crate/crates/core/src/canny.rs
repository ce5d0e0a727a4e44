//! Four-stage Canny edge detector.
//!
//! Smoothing and Sobel run in fixed-point integers: the Gaussian is quantized
//! to integer taps, so every intermediate value is exact. Mirror-symmetric
//! inputs therefore produce exactly equal magnitudes on both sides of a step,
//! and the suppression tie-break decides which side keeps the edge.

use image::GrayImage;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Gaussian taps are scaled so they sum to roughly this value.
const TAP_SCALE: f64 = 4096.0;
const TAN_22_5: f64 = 0.414_213_562_373_095_1;
const TAN_67_5: f64 = 2.414_213_562_373_095;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thresholds {
    /// Gradient magnitude units (Sobel response on 0..=255 intensities).
    Absolute { low: f64, high: f64 },
    /// Fractions of the largest magnitude in the image.
    Relative { low: f64, high: f64 },
}

impl Thresholds {
    fn pair(&self) -> (f64, f64) {
        match *self {
            Thresholds::Absolute { low, high } | Thresholds::Relative { low, high } => (low, high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub thresholds: Thresholds,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.4,
            thresholds: Thresholds::Relative { low: 0.1, high: 0.3 },
        }
    }
}

/// Gradient field after smoothing, magnitudes in 0..=255 intensity units.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<i64>,
    pub gy: Vec<i64>,
    /// Divide `gx`/`gy` by this to get Sobel response in intensity units.
    pub scale: f64,
}

impl Gradients {
    pub fn magnitude(&self, i: usize) -> f64 {
        (self.magnitude_sq(i) as f64).sqrt() / self.scale
    }

    fn magnitude_sq(&self, i: usize) -> i128 {
        let (x, y) = (self.gx[i] as i128, self.gy[i] as i128);
        x * x + y * y
    }
}

/// Reflect-101 index: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_taps(sigma: f64) -> Vec<i64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total * TAP_SCALE).round() as i64).collect()
}

fn convolve_rows(src: &[i64], w: usize, h: usize, taps: &[i64]) -> Vec<i64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    out
}

fn convolve_cols(src: &[i64], w: usize, h: usize, taps: &[i64]) -> Vec<i64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Gaussian smoothing followed by Sobel, reflect-101 borders throughout.
pub fn gradients(image: &GrayImage, sigma: f64) -> Result<Gradients> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("canny sigma", format!("{sigma} is not positive")));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 3 || h < 3 {
        return Err(Error::invalid("canny input", format!("{w}x{h} is smaller than 3x3")));
    }
    let taps = gaussian_taps(sigma);
    let tap_sum: i64 = taps.iter().sum();
    let src: Vec<i64> = image.as_raw().iter().map(|&v| v as i64).collect();
    let smooth = convolve_cols(&convolve_rows(&src, w, h, &taps), w, h, &taps);
    let at = |x: isize, y: isize| smooth[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0; w * h];
    let mut gy = vec![0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    Ok(Gradients {
        width: w,
        height: h,
        gx,
        gy,
        scale: (tap_sum * tap_sum) as f64,
    })
}

/// Neighbour offsets across the edge for the quantized gradient orientation.
/// The first offset is the "lower" side (compared strictly), the second the
/// "upper" side (compared with `>=`), so a two-pixel plateau keeps exactly one.
fn across(gx: i64, gy: i64) -> [(isize, isize); 2] {
    let (ax, ay) = (gx.abs() as f64, gy.abs() as f64);
    if ay <= TAN_22_5 * ax {
        [(-1, 0), (1, 0)]
    } else if ay >= TAN_67_5 * ax {
        [(0, -1), (0, 1)]
    } else if (gx > 0) == (gy > 0) {
        [(-1, -1), (1, 1)]
    } else {
        [(-1, 1), (1, -1)]
    }
}

/// Thin ridges: keeps pixels that are local maxima across the edge.
/// Returns squared magnitudes with suppressed pixels zeroed.
pub fn non_maximum_suppression(g: &Gradients) -> Vec<i128> {
    let (w, h) = (g.width, g.height);
    let mag: Vec<i128> = (0..w * h).map(|i| g.magnitude_sq(i)).collect();
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0 {
                continue;
            }
            let [lo, hi] = across(g.gx[i], g.gy[i]);
            let (x, y) = (x as isize, y as isize);
            if m > at(x + lo.0, y + lo.1) && m >= at(x + hi.0, y + hi.1) {
                out[i] = m;
            }
        }
    }
    out
}

/// Double threshold on squared magnitudes, then 8-connected growth from strong pixels.
pub fn hysteresis(thin: &[i128], w: usize, h: usize, low_sq: i128, high_sq: i128) -> BinaryMask {
    let mut edges = BinaryMask::new(w, h);
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0 && m >= high_sq {
            edges.set(i % w, i / w, true);
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if thin[j] > 0 && thin[j] >= low_sq && !edges.get(nx as usize, ny as usize) {
                    edges.set(nx as usize, ny as usize, true);
                    stack.push(j);
                }
            }
        }
    }
    edges
}

/// Canny edge map of an 8-bit image.
pub fn canny(image: &GrayImage, params: &CannyParams) -> Result<BinaryMask> {
    let (low, high) = params.thresholds.pair();
    if !(low < high) || low < 0.0 {
        return Err(Error::invalid(
            "canny thresholds",
            format!("need 0 <= low < high, got low {low}, high {high}"),
        ));
    }
    let g = gradients(image, params.sigma)?;
    let thin = non_maximum_suppression(&g);
    // thresholds move into the exact squared-integer domain
    let unit = match params.thresholds {
        Thresholds::Absolute { .. } => g.scale,
        Thresholds::Relative { .. } => thin.iter().copied().max().map_or(0.0, |m| (m as f64).sqrt()),
    };
    let to_sq = |t: f64| {
        let v = t * unit;
        (v * v).ceil() as i128
    };
    Ok(hysteresis(&thin, g.width, g.height, to_sq(low), to_sq(high)))
}
