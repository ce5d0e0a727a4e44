//! Adversarial and reconstruction objectives as graph nodes.

use polypgan_tensor::ops::area_downscale;
use polypgan_tensor::{Graph, NodeId, Tensor};

use crate::error::{Error, Result};

/// Scores are clamped to `[LOSS_EPS, 1 - LOSS_EPS]` before taking logs.
pub const LOSS_EPS: f32 = 1e-7;

/// `-mean log(real) - mean log(1 - fake)` and the number of clamped scores.
pub fn d_loss(g: &mut Graph, real: NodeId, fake: NodeId) -> (NodeId, usize) {
    let (log_real, c1) = g.log_clamped(real, LOSS_EPS, 1.0 - LOSS_EPS);
    let neg_fake = g.scale(fake, -1.0);
    let one_minus = g.add_scalar(neg_fake, 1.0);
    let (log_fake, c2) = g.log_clamped(one_minus, LOSS_EPS, 1.0 - LOSS_EPS);
    let a = g.mean(log_real);
    let b = g.mean(log_fake);
    let sum = g.add(a, b).expect("scalar means share a shape");
    (g.scale(sum, -1.0), c1 + c2)
}

/// Non-saturating generator objective `-mean log(fake)`.
pub fn g_gan_loss(g: &mut Graph, fake: NodeId) -> (NodeId, usize) {
    let (log_fake, c) = g.log_clamped(fake, LOSS_EPS, 1.0 - LOSS_EPS);
    let m = g.mean(log_fake);
    (g.scale(m, -1.0), c)
}

/// Weighted reconstruction terms, smallest head first.
#[derive(Debug, Clone, Copy)]
pub struct ReconTerms {
    pub total: NodeId,
    /// Mean squared error at a quarter of the extent.
    pub l2_quarter: NodeId,
    /// Mean absolute error at half the extent.
    pub l1_half: NodeId,
    /// Mean absolute error at full extent.
    pub l1_full: NodeId,
}

/// Compares the three heads against the target area-averaged to each head's
/// extent. The returned per-scale terms are unweighted.
pub fn recon_loss(g: &mut Graph, heads: [NodeId; 3], target: &Tensor, weights: [f32; 3]) -> Result<ReconTerms> {
    let full = target.dims()[2];
    let mut terms = [heads[0]; 3];
    for (k, (&head, factor)) in heads.iter().zip([4usize, 2, 1]).enumerate() {
        let hs = g.shape(head);
        let t = if factor == 1 { target.clone() } else { area_downscale(target, factor)? };
        if hs.0 != t.dims() || hs.height() * factor != full {
            return Err(Error::ExtentMismatch {
                op: "reconstruction loss",
                left: (hs.width(), hs.height()),
                right: (t.dims()[3], t.dims()[2]),
            });
        }
        let t = g.constant(t);
        let d = g.sub(head, t)?;
        let e = if k == 0 { g.square(d) } else { g.abs(d) };
        terms[k] = g.mean(e);
    }
    let mut total = g.scale(terms[0], weights[0]);
    for k in 1..3 {
        let w = g.scale(terms[k], weights[k]);
        total = g.add(total, w)?;
    }
    Ok(ReconTerms {
        total,
        l2_quarter: terms[0],
        l1_half: terms[1],
        l1_full: terms[2],
    })
}

/// `gan + lambda * recon`.
pub fn total_g_loss(g: &mut Graph, gan: NodeId, recon: NodeId, lambda: f32) -> NodeId {
    let r = g.scale(recon, lambda);
    g.add(gan, r).expect("scalar losses share a shape")
}
