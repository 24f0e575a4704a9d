use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`, using the cached batch statistics.
    pub fn update(&mut self, cache: &BatchNormCache<T>, momentum: f64) {
        if cache.mode != NormMode::Train {
            return;
        }
        let m = T::of(momentum);
        let keep = T::one() - m;
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * cache.mean[c];
            self.var[c] = keep * self.var[c] + m * cache.unbiased_var[c];
        }
    }
}

/// What batch-norm backward needs besides the input itself.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mode: NormMode,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub unbiased_var: Vec<T>,
}

fn check_params<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T], epsilon: f64) -> Result<()> {
    let c = input.shape().channels;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "batch-norm over {c} channels got gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("batch-norm epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

/// Pure batch normalization: statistics are reported in the cache, never written back.
pub fn batchnorm_apply<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    mode: NormMode,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    check_params(input, gamma, beta, epsilon)?;
    let s = input.shape();
    if stats.mean.len() != s.channels || stats.var.len() != s.channels {
        return Err(shape_err!(
            "running statistics cover {} channels, input has {}",
            stats.mean.len(),
            s.channels
        ));
    }
    let count = s.batch * s.plane();
    let plane = s.plane();
    let x = input.data();
    let eps = T::of(epsilon);

    let (mean, inv_std, unbiased_var) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::Statistics(format!(
                    "train-mode batch-norm needs at least 2 values per channel, input is {s}"
                )));
            }
            let n = T::of(count as f64);
            let mut mean = vec![T::zero(); s.channels];
            let mut var = vec![T::zero(); s.channels];
            for c in 0..s.channels {
                let mut acc = T::zero();
                for b in 0..s.batch {
                    acc += input.plane(b, c).iter().copied().sum::<T>();
                }
                let mu = acc / n;
                let mut sq = T::zero();
                for b in 0..s.batch {
                    for &v in input.plane(b, c) {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = sq / n;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let bessel = n / T::of((count - 1) as f64);
            let unbiased: Vec<T> = var.iter().map(|&v| v * bessel).collect();
            (mean, inv_std, unbiased)
        }
        NormMode::Eval => (
            stats.mean.clone(),
            stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            Vec::new(),
        ),
    };

    let mut out = Vec::with_capacity(x.len());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            let start = (b * s.channels + c) * plane;
            out.extend(x[start..start + plane].iter().map(|&v| v * scale + shift));
        }
    }
    Ok((
        Tensor::from_vec(s, out)?,
        BatchNormCache {
            mode,
            mean,
            inv_std,
            unbiased_var,
        },
    ))
}

/// Batch normalization that also folds batch statistics into `stats` in train mode.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: NormMode,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let (out, cache) = batchnorm_apply(input, gamma, beta, stats, mode, epsilon)?;
    stats.update(&cache, momentum);
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = input.shape();
    if grad_out.shape() != s {
        return Err(shape_err!(
            "batch-norm grad_out {} does not match input {s}",
            grad_out.shape()
        ));
    }
    if gamma.len() != s.channels || cache.mean.len() != s.channels {
        return Err(shape_err!("batch-norm parameters do not cover {s}"));
    }
    let plane = s.plane();
    let n = T::of((s.batch * plane) as f64);
    let x = input.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); s.channels];
    let mut dbeta = vec![T::zero(); s.channels];
    for c in 0..s.channels {
        let (mu, is) = (cache.mean[c], cache.inv_std[c]);
        for b in 0..s.batch {
            let start = (b * s.channels + c) * plane;
            for i in start..start + plane {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * (x[i] - mu) * is;
            }
        }
    }

    let mut dx = vec![T::zero(); x.len()];
    for c in 0..s.channels {
        let (mu, is) = (cache.mean[c], cache.inv_std[c]);
        let g = gamma[c] * is;
        for b in 0..s.batch {
            let start = (b * s.channels + c) * plane;
            for i in start..start + plane {
                dx[i] = match cache.mode {
                    NormMode::Eval => dy[i] * g,
                    NormMode::Train => {
                        let x_hat = (x[i] - mu) * is;
                        g * (dy[i] - dbeta[c] / n - x_hat * dgamma[c] / n)
                    }
                };
            }
        }
    }
    Ok((Tensor::from_vec(s, dx)?, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform([4, 3, 5, 5], -2.0, 5.0, &mut rng);
        let mut stats = RunningStats::new(3);
        let gamma = vec![1.0; 3];
        let beta = vec![0.0; 3];
        let y = batchnorm_forward(&x, &gamma, &beta, &mut stats, NormMode::Train, 0.1, 1e-5).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.plane(b, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // running stats moved 10% of the way toward the batch statistics
        assert!(stats.mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn running_var_uses_unbiased_estimate() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let mut stats = RunningStats::new(1);
        batchnorm_forward(&x, &[1.0], &[0.0], &mut stats, NormMode::Train, 1.0, 1e-5).unwrap();
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.var[0], 2.0);
    }

    #[test]
    fn eval_identity_statistics() {
        let x = Tensor::<f64>::from_fn([2, 2, 3, 3], |n, c, y, xx| (n + c) as f64 - (y * xx) as f64 * 0.3);
        let stats = RunningStats::new(2);
        let (y, _) = batchnorm_apply(&x, &[1.0, 1.0], &[0.0, 0.0], &stats, NormMode::Eval, 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn too_few_values_in_train_mode() {
        let x = Tensor::<f32>::zeros([1, 2, 1, 1]);
        let stats = RunningStats::new(2);
        let err = batchnorm_apply(&x, &[1.0; 2], &[0.0; 2], &stats, NormMode::Train, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Statistics(_)));
        assert!(batchnorm_apply(&x, &[1.0; 2], &[0.0; 2], &stats, NormMode::Eval, 1e-5).is_ok());
    }

    #[test]
    fn rejects_bad_params() {
        let x = Tensor::<f32>::zeros([2, 2, 2, 2]);
        let stats = RunningStats::new(2);
        assert!(matches!(
            batchnorm_apply(&x, &[1.0; 3], &[0.0; 2], &stats, NormMode::Train, 1e-5),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            batchnorm_apply(&x, &[1.0; 2], &[0.0; 2], &stats, NormMode::Train, 0.0),
            Err(Error::Config(_))
        ));
    }
}
