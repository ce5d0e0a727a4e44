//! Procedural colonoscopy-like frames: smooth value-noise mucosa with a
//! vignette, and optionally a brightened elliptical polyp with a specular spot.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::manifest::{DatasetEntry, DatasetManifest};
use crate::mask::BinaryMask;
use crate::seed::rng_for;

/// Minimum gap between the polyp ellipse and the canvas border.
pub const POLYP_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f64,
    /// Darkening at the corners, 0 = none.
    pub vignette: f64,
    /// Seed for the noise lattice.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolypParams {
    pub center: (f64, f64),
    /// Semi-axes along the rotated x and y directions.
    pub axes: (f64, f64),
    pub angle: f64,
    /// Additive brightening at the ellipse centre, in 8-bit units.
    pub lift: f64,
    /// Specular spot position relative to the centre, as fractions of the axes.
    pub specular_offset: (f64, f64),
    pub specular_radius: f64,
}

impl PolypParams {
    /// Half-extents of the axis-aligned box around the rotated ellipse.
    pub fn half_extents(&self) -> (f64, f64) {
        let (a, b) = self.axes;
        let (s, c) = self.angle.sin_cos();
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }

    /// Ellipse equation value; `<= 1` inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)
    }

    fn specular_center(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let u = self.specular_offset.0 * self.axes.0;
        let v = self.specular_offset.1 * self.axes.1;
        (self.center.0 + u * c - v * s, self.center.1 + u * s + v * c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub extent: usize,
    pub seed: u64,
    pub background: BackgroundParams,
    pub polyp: Option<PolypParams>,
}

impl SceneSpec {
    /// Draws a scene; polyp axes lie in [extent/10, extent/5].
    pub fn sample(extent: usize, seed: u64, with_polyp: bool) -> Result<Self> {
        if extent < 32 {
            return Err(Error::invalid("scene", format!("extent {extent} is below 32")));
        }
        let mut rng = rng_for(seed, "scene", 0);
        let s = extent as f64;
        let background = BackgroundParams {
            octaves: 3,
            cell: s / rng.gen_range(2.0..3.5),
            vignette: rng.gen_range(0.25..0.45),
            noise_seed: rng.gen(),
        };
        let polyp = with_polyp.then(|| {
            let axes = (rng.gen_range(s / 10.0..=s / 5.0), rng.gen_range(s / 10.0..=s / 5.0));
            let angle = rng.gen_range(0.0..PI);
            let mut p = PolypParams {
                center: (0.0, 0.0),
                axes,
                angle,
                lift: rng.gen_range(45.0..70.0),
                specular_offset: (rng.gen_range(-0.45..0.45), rng.gen_range(-0.45..-0.1)),
                specular_radius: rng.gen_range(0.15..0.25) * axes.0.min(axes.1),
            };
            let (hx, hy) = p.half_extents();
            let pad = POLYP_MARGIN + 1.0;
            p.center = (
                rng.gen_range(hx + pad..=s - 1.0 - hx - pad),
                rng.gen_range(hy + pad..=s - 1.0 - hy - pad),
            );
            p
        });
        Ok(SceneSpec {
            extent,
            seed,
            background,
            polyp,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.polyp {
            let (hx, hy) = p.half_extents();
            let hi = self.extent as f64 - 1.0 - POLYP_MARGIN;
            let (cx, cy) = p.center;
            if !(p.axes.0 > 0.0 && p.axes.1 > 0.0)
                || cx - hx < POLYP_MARGIN
                || cy - hy < POLYP_MARGIN
                || cx + hx > hi
                || cy + hy > hi
            {
                return Err(Error::invalid(
                    "scene",
                    format!("polyp ellipse at ({cx:.1}, {cy:.1}) breaks the {POLYP_MARGIN} px margin"),
                ));
            }
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise normalized to [0, 1].
fn value_noise(extent: usize, bg: &BackgroundParams) -> Vec<f64> {
    let mut rng = rng_for(bg.noise_seed, "noise", 0);
    let mut field = vec![0.0; extent * extent];
    let mut amplitude = 1.0;
    let mut cell = bg.cell;
    for _ in 0..bg.octaves {
        let n = (extent as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        for y in 0..extent {
            for x in 0..extent {
                let (fx, fy) = (x as f64 / cell, y as f64 / cell);
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
                let l = |i: usize, j: usize| lattice[j * n + i];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                field[y * extent + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        amplitude *= 0.5;
        cell /= 2.0;
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    field.iter().map(|v| (v - lo) / span).collect()
}

/// Image and polyp mask for a scene; normal scenes get an empty mask.
pub fn render(spec: &SceneSpec) -> Result<(RgbImage, BinaryMask)> {
    spec.validate()?;
    let n = spec.extent;
    let c = (n as f64 - 1.0) / 2.0;
    let r_max = c * 2f64.sqrt();
    // vignette before normalization, so every frame spans the full tonal ramp
    let mut tone = value_noise(n, &spec.background);
    for (i, t) in tone.iter_mut().enumerate() {
        let (x, y) = ((i % n) as f64, (i / n) as f64);
        let r = ((x - c).powi(2) + (y - c).powi(2)).sqrt() / r_max;
        *t *= 1.0 - spec.background.vignette * r * r;
    }
    let lo = tone.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tone.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mask = match &spec.polyp {
        Some(p) => BinaryMask::from_fn(n, n, |x, y| p.level(x as f64, y as f64) <= 1.0),
        None => BinaryMask::new(n, n),
    };
    let img = RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let v = (tone[y as usize * n + x as usize] - lo) / span;
        let mut rgb = [100.0 + 140.0 * v, 45.0 + 110.0 * v, 35.0 + 85.0 * v];
        if let Some(p) = &spec.polyp {
            let level = p.level(xf, yf);
            if level <= 1.0 {
                // dome shading: strongest lift at the centre
                let dome = p.lift * (0.55 + 0.45 * (1.0 - level));
                rgb = [rgb[0] + dome, rgb[1] + 0.8 * dome, rgb[2] + 0.7 * dome];
                let (sx, sy) = p.specular_center();
                if (xf - sx).powi(2) + (yf - sy).powi(2) <= p.specular_radius.powi(2) {
                    rgb = [250.0, 248.0, 240.0];
                }
            }
        }
        Rgb(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    Ok((img, mask))
}

/// Writes `n_polyp` polyp frames and `n_normal` normal frames under `out`
/// (`images/`, `masks/`, `manifest.json`) and returns the manifest.
pub fn make_dataset(n_polyp: usize, n_normal: usize, extent: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if extent < 32 {
        return Err(Error::invalid("dataset", format!("extent {extent} is below 32")));
    }
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = DatasetManifest::new(extent, seed);
    let jobs = (0..n_polyp)
        .map(|i| (format!("polyp_{i:04}"), "polyp", i, true))
        .chain((0..n_normal).map(|i| (format!("normal_{i:04}"), "normal", i, false)));
    for (id, stream, i, with_polyp) in jobs {
        let spec = SceneSpec::sample(extent, crate::seed::derive_seed(seed, stream, i as u64), with_polyp)?;
        let (img, mask) = render(&spec)?;
        let image_rel = format!("images/{id}.png");
        imageio::write_rgb(&out.join(&image_rel), &img)?;
        let mask_rel = if with_polyp {
            let rel = format!("masks/{id}.png");
            imageio::write_mask(&out.join(&rel), &mask)?;
            Some(rel)
        } else {
            None
        };
        manifest.entries.push(DatasetEntry {
            id: id.clone(),
            image: image_rel,
            mask: mask_rel,
            conditioned: None,
            source: id,
            transforms: Vec::new(),
            params: Some(serde_json::to_value(&spec).map_err(|e| Error::invalid("scene", e.to_string()))?),
        });
    }
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}
