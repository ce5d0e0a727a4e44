//! Forward kernels for the non-convolutional operations.
//!
//! These are plain functions on [`Tensor`]s; [`crate::Graph`] wraps them and
//! records what the backward pass needs.

use rand::Rng;

use crate::error::{expect_dim, Result, TensorError};
use crate::tensor::Tensor;

/// Nearest-neighbour enlargement: every pixel becomes a `factor x factor` block.
pub fn nearest_resize(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(TensorError::invalid("nearest_resize", "factor must be >= 1"));
    }
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let row = &s[(y / factor) * w..(y / factor + 1) * w];
            for (x, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[x / factor];
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize to an arbitrary extent (`src = floor(dst * in / out)`).
pub fn nearest_resize_to(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::invalid("nearest_resize_to", "target extent must be positive"));
    }
    let [n, c, h, w] = input.dims();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                for x in 0..out_w {
                    let sx = x * w / out_w;
                    out.set(b, ch, y, x, input.at(b, ch, sy, sx));
                }
            }
        }
    }
    Ok(out)
}

/// Averages non-overlapping `factor x factor` blocks.
pub fn area_downscale(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(TensorError::invalid(
            "area_downscale",
            format!("factor {factor} must divide the {h}x{w} extent"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let norm = 1.0 / (factor * factor) as f64;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += input.at(b, ch, y * factor + dy, x * factor + dx) as f64;
                        }
                    }
                    out.set(b, ch, y, x, (acc * norm) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Per-(sample, channel) statistics saved by [`instance_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    /// Standardized input `(x - mean) / sqrt(var + eps)`.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per (sample, channel), row-major.
    pub inv_std: Vec<f32>,
}

/// Instance normalization with per-channel affine parameters.
///
/// `gamma` and `beta` hold one value per channel (any shape with `c` elements).
pub fn instance_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, NormStats)> {
    let [n, c, h, w] = input.dims();
    expect_dim("instance_norm", "gamma length", c, gamma.numel())?;
    expect_dim("instance_norm", "beta length", c, beta.numel())?;
    if h * w == 0 {
        return Err(TensorError::invalid("instance_norm", "empty spatial extent"));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::invalid("instance_norm", "eps must be positive"));
    }
    let plane = h * w;
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let idx = (b * c + ch) * plane;
            let xs = &input.data()[idx..idx + plane];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std.push(istd as f32);
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            let xn = &mut normalized.data_mut()[idx..idx + plane];
            for (dst, &v) in xn.iter_mut().zip(xs) {
                *dst = ((v as f64 - mean) * istd) as f32;
            }
            let ys = &mut out.data_mut()[idx..idx + plane];
            for (dst, &v) in ys.iter_mut().zip(&normalized.data()[idx..idx + plane]) {
                *dst = g * v + bt;
            }
        }
    }
    Ok((out, NormStats { normalized, inv_std }))
}

pub fn elu(input: &Tensor, alpha: f32) -> Tensor {
    input.map(|v| elu_scalar(v, alpha))
}

#[inline]
pub fn elu_scalar(v: f32, alpha: f32) -> f32 {
    if v >= 0.0 {
        v
    } else {
        alpha * v.exp_m1()
    }
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f32, rng: &mut R) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::invalid(
            "dropout",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
        .collect())
}

/// Dropout applied to a tensor. Evaluation mode (`training == false`) and
/// `rate == 0` return the input unchanged.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f32,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    let mask = dropout_mask(if training { input.numel() } else { 0 }, rate, rng)?;
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let data = input.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::from_vec(input.shape(), data)
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.dims();
    for t in inputs {
        let [tn, _, th, tw] = t.dims();
        expect_dim("concat_channels", "batch", n, tn)?;
        expect_dim("concat_channels", "height", h, th)?;
        expect_dim("concat_channels", "width", w, tw)?;
    }
    let total: usize = inputs.iter().map(|t| t.shape().channels()).sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape().channels();
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resize_block_replicates() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = nearest_resize(&x, 2).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), expected.as_slice());
        assert_eq!(nearest_resize(&x, 1).unwrap(), x);
        assert!(nearest_resize(&x, 0).is_err());
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let x = Tensor::full([2, 3, 3, 5], 0.25);
        let y = nearest_resize(&x, 2).unwrap();
        assert_eq!(y.dims(), [2, 3, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 1, 16, 16], 3.0, &mut rng).map(|v| v + 5.0);
        let (y, _) = instance_norm(&x, &Tensor::ones([1, 1, 1, 1]), &Tensor::zeros([1, 1, 1, 1]), 1e-5)
            .unwrap();
        let n = y.numel() as f64;
        let mean = y.sum() / n;
        let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn instance_norm_degenerate_cases() {
        let x = Tensor::full([1, 2, 4, 4], 7.0);
        let (y, _) = instance_norm(&x, &Tensor::ones([1, 2, 1, 1]), &Tensor::zeros([1, 2, 1, 1]), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let beta = Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.5]).unwrap();
        let (y, _) = instance_norm(&x, &Tensor::zeros([1, 2, 1, 1]), &beta, 1e-5).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.5));
        assert!(y.data()[16..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu_scalar(0.0, 1.0), 0.0);
        assert_eq!(elu_scalar(1.0, 1.0), 1.0);
        // alpha * (e^-1 - 1)
        assert!((elu_scalar(-1.0, 1.0) - (-0.632_120_56)).abs() < 1e-6);
    }

    #[test]
    fn dropout_rate_and_scale() {
        let x = Tensor::ones([1, 1, 100, 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = dropout(&x, 0.5, &mut rng, true).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&zeros), "zero fraction {zeros}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));

        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(dropout(&x, 0.5, &mut rng2, true).unwrap(), y);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 3, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), [1, 5, 2, 2]);
        assert_eq!(y.channel_slice(0, 2).unwrap(), a);
        assert_eq!(y.channel_slice(2, 3).unwrap(), b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::zeros([1, 1, 3, 2]);
        assert!(concat_channels(&[&a, &bad]).unwrap_err().to_string().contains("height"));
    }

    #[test]
    fn area_downscale_averages_blocks() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(area_downscale(&x, 2).unwrap().item(), 3.0);
        assert!(area_downscale(&x, 3).is_err());
    }
}
