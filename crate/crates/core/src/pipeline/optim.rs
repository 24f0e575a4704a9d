use crate::error::{Error, Result};
use crate::graph::{Gradients, LayerGraph};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// `v ← α·v + (1 − α)·g²`, `p ← p − lr·g / (√v + ε)`.
pub fn rmsprop_update<T: Scalar>(param: &mut [T], grad: &[T], accum: &mut [T], config: &RmsPropConfig) {
    let (alpha, lr, eps) = (T::of(config.alpha), T::of(config.lr), T::of(config.epsilon));
    let keep = T::one() - alpha;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *v = alpha * *v + keep * g * g;
        *p = *p - lr * g / (v.sqrt() + eps);
    }
}

/// Optimizer state for every learnable parameter of a graph.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub steps: u64,
    /// Indexed like the graph's parameter registry; `None` for running statistics.
    accum: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(graph: &LayerGraph<T>, config: RmsPropConfig) -> Self {
        let accum = graph
            .params()
            .iter()
            .map(|p| p.kind.is_learnable().then(|| Tensor::zeros(p.value.shape())))
            .collect();
        RmsProp { config, steps: 0, accum }
    }

    pub fn accumulator(&self, param: usize) -> Option<&Tensor<T>> {
        self.accum.get(param).and_then(Option::as_ref)
    }

    /// Applies one update. Refuses the whole step if any gradient is non-finite.
    pub fn step(&mut self, graph: &mut LayerGraph<T>, grads: &Gradients<T>) -> Result<()> {
        if self.accum.len() != graph.params().len() {
            return Err(Error::Config("optimizer was built for a different graph".into()));
        }
        for (i, p) in graph.params().iter().enumerate() {
            if let Some(g) = grads.param(i) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {}; step refused", p.name)));
                }
            }
        }
        for (i, p) in graph.params_mut().iter_mut().enumerate() {
            let (Some(v), Some(g)) = (self.accum[i].as_mut(), grads.param(i)) else {
                continue;
            };
            rmsprop_update(p.value.data_mut(), g.data(), v.data_mut(), &self.config);
        }
        self.steps += 1;
        Ok(())
    }
}
