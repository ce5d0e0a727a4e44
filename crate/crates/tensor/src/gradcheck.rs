//! Central finite-difference oracle for checking analytic gradients.
//!
//! The builder closure is re-run from scratch for every perturbed input, so
//! the numeric side only ever sees forward values. Non-scalar outputs are
//! projected onto a fixed random direction and reduced in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Norm-wise relative error per checked input, in input order.
    pub rel_errors: Vec<f64>,
    /// Number of coordinates compared per input.
    pub coords: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f32,
    /// Upper bound on coordinates compared per input; larger inputs are strided.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            max_coords: 256,
            seed: 0x5eed,
        }
    }
}

fn projected(graph: &Graph, out: NodeId, direction: &Option<Tensor>) -> f64 {
    let value = graph.value(out);
    match direction {
        Some(r) => value.dot(r),
        None => value.item() as f64,
    }
}

impl GradCheck {
    /// Compares the tape gradient of `build(inputs)` against central differences
    /// for every input tensor.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let mut graph = Graph::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
        let out = build(&mut graph, &leaves)?;
        let out_shape = graph.shape(out);
        let direction = (out_shape.numel() != 1).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            Tensor::rand_uniform(out_shape, -1.0, 1.0, &mut rng)
        });
        let loss = match &direction {
            Some(r) => {
                let r = graph.constant(r.clone());
                let weighted = graph.mul(out, r)?;
                graph.sum(weighted)
            }
            None => out,
        };
        let analytic = graph.gradients(loss)?;

        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = values.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &leaves)?;
            Ok(projected(&g, out, &direction))
        };

        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut coords = Vec::with_capacity(inputs.len());
        let mut values = inputs.to_vec();
        for (i, leaf) in leaves.iter().enumerate() {
            let zeros = Tensor::zeros(inputs[i].shape());
            let grad = analytic.get(*leaf).unwrap_or(&zeros).clone();
            let n = inputs[i].numel();
            let stride = n.div_ceil(self.max_coords).max(1);
            let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
            let mut count = 0;
            for j in (0..n).step_by(stride) {
                let orig = values[i].data()[j];
                values[i].data_mut()[j] = orig + self.step;
                let plus = eval(&values)?;
                values[i].data_mut()[j] = orig - self.step;
                let minus = eval(&values)?;
                values[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step as f64);
                let a = grad.data()[j] as f64;
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
                count += 1;
            }
            let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
            rel_errors.push(diff2.sqrt() / denom);
            coords.push(count);
        }
        Ok(GradCheckReport { rel_errors, coords })
    }
}

/// [`GradCheck::run`] with default options (`h = 1e-3`).
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    GradCheck::default().run(inputs, build)
}
