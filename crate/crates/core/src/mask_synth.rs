//! Synthetic polyp masks from randomized homographies, and the
//! rotation/flip/zoom augmentation recipe.

use image::{imageops, GrayImage, Rgb, RgbImage};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Closed interval `[lo, hi]`; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn check(&self, what: &'static str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::invalid(what, format!("empty range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Sampling ranges; translation and corner jitter are fractions of the extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub rotation_deg: Interval,
    pub scale: Interval,
    pub translation_frac: Interval,
    pub corner_jitter_frac: Interval,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            rotation_deg: Interval::new(-180.0, 180.0),
            scale: Interval::new(0.7, 1.3),
            translation_frac: Interval::new(-0.25, 0.25),
            corner_jitter_frac: Interval::new(-0.1, 0.1),
        }
    }
}

impl ParamRanges {
    /// Every draw is the identity transform.
    pub fn identity() -> Self {
        ParamRanges {
            rotation_deg: Interval::point(0.0),
            scale: Interval::point(1.0),
            translation_frac: Interval::point(0.0),
            corner_jitter_frac: Interval::point(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.check("rotation range")?;
        self.scale.check("scale range")?;
        self.translation_frac.check("translation range")?;
        self.corner_jitter_frac.check("corner jitter range")?;
        if self.scale.lo <= 0.0 {
            return Err(Error::invalid("scale range", "scale must stay positive"));
        }
        Ok(())
    }
}

/// One warp: rotation and scale about the canvas centre, translation, then a
/// perspective pull of the four canvas corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    /// Displacement of the corners (top-left, top-right, bottom-right, bottom-left).
    pub corner_offsets: [(f64, f64); 4],
    pub seed: Option<u64>,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            corner_offsets: [(0.0, 0.0); 4],
            seed: None,
        }
    }

    pub fn rotation(deg: f64) -> Self {
        TransformParams {
            rotation_deg: deg,
            ..Self::identity()
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        TransformParams {
            translation: (dx, dy),
            ..Self::identity()
        }
    }
}

/// Uniform draws from `ranges` using a generator seeded with `seed`.
pub fn sample_params(seed: u64, ranges: &ParamRanges, width: usize, height: usize) -> Result<TransformParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let rotation_deg = ranges.rotation_deg.draw(&mut rng);
    let scale = ranges.scale.draw(&mut rng);
    let translation = (
        ranges.translation_frac.draw(&mut rng) * w,
        ranges.translation_frac.draw(&mut rng) * h,
    );
    let mut corner_offsets = [(0.0, 0.0); 4];
    for c in corner_offsets.iter_mut() {
        *c = (
            ranges.corner_jitter_frac.draw(&mut rng) * w,
            ranges.corner_jitter_frac.draw(&mut rng) * h,
        );
    }
    Ok(TransformParams {
        rotation_deg,
        scale,
        translation,
        corner_offsets,
        seed: Some(seed),
    })
}

fn apply(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    (v.x, v.y, v.z)
}

/// Homography taking four source points onto four destination points.
fn four_point(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Strictly convex with non-negligible area, in either winding.
fn is_convex(q: &[(f64, f64); 4], min_area: f64) -> bool {
    let mut sign = 0.0;
    let mut area = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
        area += a.0 * b.1 - b.0 * a.1;
    }
    (area / 2.0).abs() > min_area
}

/// Forward homography for `params` on a `width`×`height` canvas, pixel centres
/// at integer coordinates.
pub fn homography(params: &TransformParams, width: usize, height: usize) -> Result<Matrix3<f64>> {
    if !(params.scale > 0.0 && params.scale.is_finite()) {
        return Err(Error::invalid("transform", format!("scale {} is not positive", params.scale)));
    }
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (s, c) = params.rotation_deg.to_radians().sin_cos();
    let k = params.scale;
    let (tx, ty) = params.translation;
    // x' = c + t + kR(x - c)
    let affine = Matrix3::new(
        k * c, -k * s, cx + tx - k * (c * cx - s * cy),
        k * s, k * c, cy + ty - k * (s * cx + c * cy),
        0.0, 0.0, 1.0,
    );
    if params.corner_offsets.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0) {
        return Ok(affine);
    }
    let (r, b) = (width as f64 - 1.0, height as f64 - 1.0);
    let corners = [(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)];
    let mut src = [(0.0, 0.0); 4];
    let mut dst = [(0.0, 0.0); 4];
    for i in 0..4 {
        let (x, y, _) = apply(&affine, corners[i].0, corners[i].1);
        src[i] = (x, y);
        dst[i] = (x + params.corner_offsets[i].0, y + params.corner_offsets[i].1);
    }
    let degenerate = || Error::invalid("transform", "perspective quad is degenerate or not convex");
    if !is_convex(&dst, 1e-6 * r.max(1.0) * b.max(1.0)) {
        return Err(degenerate());
    }
    let persp = four_point(&src, &dst).ok_or_else(degenerate)?;
    Ok(persp * affine)
}

/// Inverse-mapped nearest-neighbour warp; out-of-canvas samples are 0.
pub fn warp_mask(mask: &BinaryMask, params: &TransformParams) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    let forward = homography(params, w, h)?;
    let inverse = forward
        .try_inverse()
        .ok_or_else(|| Error::invalid("transform", "homography is not invertible"))?;
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy, sw) = apply(&inverse, x as f64, y as f64);
        if sw <= 0.0 {
            return false;
        }
        mask.get_signed((sx / sw).round() as isize, (sy / sw).round() as isize)
    }))
}

/// Acceptance test for synthesized masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskValidity {
    /// Minimum on-pixel count as a fraction of the canvas.
    pub min_area_fraction: f64,
    /// Minimum gap in pixels between the bounding box and every border.
    pub margin: usize,
}

impl Default for MaskValidity {
    fn default() -> Self {
        MaskValidity {
            min_area_fraction: 0.005,
            margin: 2,
        }
    }
}

pub fn validate_mask(mask: &BinaryMask, validity: &MaskValidity) -> bool {
    let (w, h) = mask.dims();
    let Some(b) = mask.bounds() else {
        return false;
    };
    let m = validity.margin;
    mask.area() as f64 >= validity.min_area_fraction * (w * h) as f64
        && b.x_min >= m
        && b.y_min >= m
        && b.x_max + m < w
        && b.y_max + m < h
}

pub const MAX_SYNTH_ATTEMPTS: usize = 20;

#[derive(Debug, Clone)]
pub struct SynthesizedMask {
    pub mask: BinaryMask,
    pub source_index: usize,
    pub params: TransformParams,
    pub attempts: usize,
}

/// Picks a pool mask uniformly and warps it until the result validates.
pub fn synth_mask(
    pool: &[(String, BinaryMask)],
    ranges: &ParamRanges,
    validity: &MaskValidity,
    rng: &mut impl Rng,
) -> Result<SynthesizedMask> {
    if pool.is_empty() {
        return Err(Error::invalid("mask pool", "no training masks to draw from"));
    }
    let source_index = rng.gen_range(0..pool.len());
    let (name, source) = &pool[source_index];
    let (w, h) = source.dims();
    for attempt in 1..=MAX_SYNTH_ATTEMPTS {
        let params = sample_params(rng.gen(), ranges, w, h)?;
        let mask = match warp_mask(source, &params) {
            Ok(m) => m,
            Err(Error::Invalid { what: "transform", .. }) => continue,
            Err(e) => return Err(e),
        };
        if validate_mask(&mask, validity) {
            return Ok(SynthesizedMask {
                mask,
                source_index,
                params,
                attempts: attempt,
            });
        }
    }
    Err(Error::invalid(
        "synthetic mask",
        format!("no valid warp of {name} in {MAX_SYNTH_ATTEMPTS} attempts"),
    ))
}

/// Exact pixel-grid transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    Identity,
    Rotate90,
    Rotate180,
    Rotate270,
    FlipHorizontal,
    FlipVertical,
}

impl Geometry {
    pub fn tag(&self) -> &'static str {
        match self {
            Geometry::Identity => "orig",
            Geometry::Rotate90 => "rot90",
            Geometry::Rotate180 => "rot180",
            Geometry::Rotate270 => "rot270",
            Geometry::FlipHorizontal => "fliph",
            Geometry::FlipVertical => "flipv",
        }
    }

    fn apply<P: image::Pixel + 'static>(
        &self,
        img: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    ) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
        match self {
            Geometry::Identity => img.clone(),
            Geometry::Rotate90 => imageops::rotate90(img),
            Geometry::Rotate180 => imageops::rotate180(img),
            Geometry::Rotate270 => imageops::rotate270(img),
            Geometry::FlipHorizontal => imageops::flip_horizontal(img),
            Geometry::FlipVertical => imageops::flip_vertical(img),
        }
    }

    pub fn apply_rgb(&self, img: &RgbImage) -> RgbImage {
        self.apply(img)
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        BinaryMask::from_gray(&self.apply::<image::Luma<u8>>(&mask.to_gray()))
    }
}

/// Rotations, flips and zoom-out factors; the original and a zoom of 1.0 are implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub rotations: Vec<u32>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub zoom_factors: Vec<f64>,
}

impl Default for AugmentationRecipe {
    fn default() -> Self {
        AugmentationRecipe {
            rotations: vec![90, 180, 270],
            flip_horizontal: true,
            flip_vertical: true,
            zoom_factors: vec![0.9, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub geometry: Geometry,
    pub zoom: f64,
}

impl Variant {
    pub fn tag(&self) -> String {
        if self.zoom == 1.0 {
            self.geometry.tag().to_string()
        } else {
            format!("{}_z{:02}", self.geometry.tag(), (self.zoom * 100.0).round() as u32)
        }
    }
}

impl AugmentationRecipe {
    /// Original only.
    pub fn none() -> Self {
        AugmentationRecipe {
            rotations: Vec::new(),
            flip_horizontal: false,
            flip_vertical: false,
            zoom_factors: Vec::new(),
        }
    }

    /// Enumeration order: geometry (original, rotations, flips) outer, zoom inner.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut geometries = vec![Geometry::Identity];
        for &deg in &self.rotations {
            geometries.push(match deg {
                90 => Geometry::Rotate90,
                180 => Geometry::Rotate180,
                270 => Geometry::Rotate270,
                other => {
                    return Err(Error::invalid("augmentation", format!("rotation {other} is not a multiple of 90")))
                }
            });
        }
        if self.flip_horizontal {
            geometries.push(Geometry::FlipHorizontal);
        }
        if self.flip_vertical {
            geometries.push(Geometry::FlipVertical);
        }
        for &z in &self.zoom_factors {
            if !(z > 0.0 && z <= 1.0) {
                return Err(Error::invalid("augmentation", format!("zoom-out factor {z} outside (0, 1]")));
            }
        }
        let zooms: Vec<f64> = std::iter::once(1.0).chain(self.zoom_factors.iter().copied()).collect();
        Ok(geometries
            .into_iter()
            .flat_map(|geometry| zooms.iter().map(move |&zoom| Variant { geometry, zoom }))
            .collect())
    }
}

/// Source coordinate (in pixel-centre units) feeding output pixel `x` when
/// content is scaled by `factor` about the centre.
fn zoom_source(x: usize, extent: usize, factor: f64) -> f64 {
    let half = extent as f64 / 2.0;
    (x as f64 + 0.5 - half) / factor + half - 0.5
}

/// Content scaled to `factor` of the extent, centred, zero padded; bilinear.
pub fn zoom_out_rgb(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let inside = |s: f64, n: usize| s >= -0.5 && s < n as f64 - 0.5;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = zoom_source(x as usize, w, factor);
        let sy = zoom_source(y as usize, h, factor);
        if !inside(sx, w) || !inside(sy, h) {
            return Rgb([0, 0, 0]);
        }
        let (sx, sy) = (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64));
        let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w as u32 - 1), (y0 + 1).min(h as u32 - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let mut out = [0u8; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let p = |x: u32, y: u32| img.get_pixel(x, y).0[ch] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *o = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Same geometry as [`zoom_out_rgb`], nearest sampling.
pub fn zoom_out_mask(mask: &BinaryMask, factor: f64) -> BinaryMask {
    if factor == 1.0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        let sx = zoom_source(x, w, factor).round();
        let sy = zoom_source(y, h, factor).round();
        mask.get_signed(sx as isize, sy as isize)
    })
}

#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub source_index: usize,
    pub variant: Variant,
}

/// Every recipe variant of every pair, pairs outer.
pub fn augment_dataset(pairs: &[(RgbImage, BinaryMask)], recipe: &AugmentationRecipe) -> Result<Vec<AugmentedPair>> {
    let variants = recipe.variants()?;
    let mut out = Vec::with_capacity(pairs.len() * variants.len());
    for (i, (image, mask)) in pairs.iter().enumerate() {
        let dims = (image.width() as usize, image.height() as usize);
        if dims != mask.dims() {
            return Err(Error::ExtentMismatch {
                op: "augment_dataset",
                left: dims,
                right: mask.dims(),
            });
        }
        for v in &variants {
            out.push(AugmentedPair {
                image: zoom_out_rgb(&v.geometry.apply_rgb(image), v.zoom),
                mask: zoom_out_mask(&v.geometry.apply_mask(mask), v.zoom),
                source_index: i,
                variant: *v,
            });
        }
    }
    Ok(out)
}

/// Gray mask as an RGB image, handy for alignment checks.
pub fn mask_as_rgb(mask: &BinaryMask) -> RgbImage {
    let g: GrayImage = mask.to_gray();
    image::DynamicImage::ImageLuma8(g).to_rgb8()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - 13.0, y as f64 - 11.0);
            dx * dx / 30.0 + dy * dy / 12.0 <= 1.0 || (x == 16 && y < 9 && y > 5)
        })
    }

    #[test]
    fn identity_warp_is_exact() {
        let m = blob(32, 28);
        assert_eq!(warp_mask(&m, &TransformParams::identity()).unwrap(), m);
    }

    #[test]
    fn quarter_turn_has_order_four() {
        let m = blob(32, 32);
        let mut r = m.clone();
        for _ in 0..4 {
            r = warp_mask(&r, &TransformParams::rotation(90.0)).unwrap();
            assert_eq!(r.area(), m.area());
        }
        assert_eq!(r, m);
    }

    #[test]
    fn translation_round_trip() {
        let m = blob(32, 28);
        let b = m.bounds().unwrap();
        assert!(b.x_min >= 6 && b.y_min >= 6 && b.x_max + 6 < 32 && b.y_max + 6 < 28);
        let t = warp_mask(&m, &TransformParams::translation(5.0, -3.0)).unwrap();
        assert_ne!(t, m);
        assert_eq!(warp_mask(&t, &TransformParams::translation(-5.0, 3.0)).unwrap(), m);
    }

    #[test]
    fn degenerate_quad_rejected() {
        let mut p = TransformParams::identity();
        // drag the top-left corner past the bottom-right one
        p.corner_offsets[0] = (40.0, 40.0);
        assert!(warp_mask(&blob(32, 32), &p).is_err());
        let mut q = TransformParams::identity();
        q.scale = 0.0;
        assert!(warp_mask(&blob(32, 32), &q).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_bounded() {
        let r = ParamRanges::default();
        assert_eq!(sample_params(9, &r, 64, 64).unwrap(), sample_params(9, &r, 64, 64).unwrap());
        let scales: Vec<f64> = (0..1000).map(|s| sample_params(s, &r, 64, 64).unwrap().scale).collect();
        let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.7 && hi <= 1.3);
        assert!(lo < 0.72 && hi > 1.28, "draws should cover the range: {lo} {hi}");

        let pinned = ParamRanges {
            rotation_deg: Interval::point(30.0),
            scale: Interval::point(0.9),
            translation_frac: Interval::point(0.125),
            corner_jitter_frac: Interval::point(0.0),
        };
        let p = sample_params(1, &pinned, 64, 32).unwrap();
        assert_eq!((p.rotation_deg, p.scale, p.translation), (30.0, 0.9, (8.0, 4.0)));

        let empty = ParamRanges {
            scale: Interval::new(1.2, 0.8),
            ..ParamRanges::default()
        };
        assert!(sample_params(1, &empty, 64, 64).is_err());
    }

    #[test]
    fn validity_examples() {
        let v = MaskValidity::default();
        assert!(!validate_mask(&BinaryMask::new(64, 64), &v));
        assert!(!validate_mask(&BinaryMask::full(64, 64), &v));
        // radius 8 disk: area ~201 >= 0.005 * 4096, bbox 24..=40 clear of the margin
        let disk = BinaryMask::from_fn(64, 64, |x, y| {
            (x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2) <= 64.0
        });
        assert!(validate_mask(&disk, &v));
    }

    #[test]
    fn single_mask_pool_with_identity_ranges() {
        let m = blob(32, 28);
        let pool = vec![("only".to_string(), m.clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = synth_mask(&pool, &ParamRanges::identity(), &MaskValidity::default(), &mut rng).unwrap();
        assert_eq!(s.mask, m);
        assert_eq!(s.attempts, 1);
    }

    #[test]
    fn unreachable_validity_names_the_source() {
        let pool = vec![("edge_case.png".to_string(), BinaryMask::full(16, 16))];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = synth_mask(&pool, &ParamRanges::identity(), &MaskValidity::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("edge_case.png"));
    }

    #[test]
    fn recipe_enumerates_eighteen_variants() {
        let v = AugmentationRecipe::default().variants().unwrap();
        assert_eq!(v.len(), 18);
        assert_eq!(v[0].tag(), "orig");
        assert_eq!(v[1].tag(), "orig_z90");
        assert_eq!(v[17].tag(), "flipv_z80");
        assert_eq!(AugmentationRecipe::none().variants().unwrap().len(), 1);
    }

    #[test]
    fn zoom_out_shrinks_towards_centre() {
        let m = BinaryMask::full(20, 20);
        let z = zoom_out_mask(&m, 0.8);
        let b = z.bounds().unwrap();
        assert_eq!((b.x_min, b.x_max, b.y_min, b.y_max), (2, 17, 2, 17));
        let img = zoom_out_rgb(&mask_as_rgb(&m), 0.8);
        assert_eq!(img.get_pixel(1, 10).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(10, 10).0, [255, 255, 255]);
    }
}
