use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// A named set of trainable tensors that freeze and thaw together.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Self {
            name: name.into(),
            tensors,
            frozen: false,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Raw little-endian bytes of every member, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.to_vec())
            .flat_map(f64::to_le_bytes)
            .collect()
    }
}

/// One plain SGD step: `θ ← θ − lr·∇θ` for every non-frozen group.
///
/// Frozen groups are never written. Gradients of every group are cleared
/// afterwards, frozen or not.
pub fn sgd_step(groups: &[ParamGroup], lr: f64) {
    for group in groups {
        for t in &group.tensors {
            if !group.frozen && lr != 0.0 {
                if let Some(g) = t.grad() {
                    t.update_data(|data| {
                        data.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
                    });
                }
            }
            t.zero_grad();
        }
    }
}

/// Largest absolute gradient entry across the groups; `None` when no
/// member holds a gradient.
pub fn max_abs_grad(groups: &[ParamGroup]) -> Option<f64> {
    groups
        .iter()
        .flat_map(|g| &g.tensors)
        .filter_map(Tensor::grad)
        .map(|g| g.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .reduce(f64::max)
}

/// Rescales the gradients of the non-frozen groups so their joint
/// Euclidean norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(groups: &[ParamGroup], max_norm: f64) -> f64 {
    let live = || groups.iter().filter(|g| !g.frozen).flat_map(|g| &g.tensors);
    let norm = live()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        live().for_each(|t| t.scale_grad(c));
    }
    norm
}

/// Trainable weight drawn from `uniform(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_param(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(data, shape)
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).expect("consistent shape")
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![1.0; n], shape).expect("consistent shape")
}
