//! Two-layer MLP block: `Linear -> BatchNorm -> ReLU -> Linear`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::real::Real;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub(crate) fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::lit(v.as_f64())),
            bias: self.bias.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

impl Linear<f32> {
    /// Uniform in `+-1/sqrt(fan_in)` for both weights and bias.
    pub(crate) fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    pub(crate) fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::from_elem(width, T::one()),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::from_elem(width, T::one()),
        }
    }

    fn cast<U: Real>(&self) -> BatchNorm<U> {
        let c = |a: &Array1<T>| a.mapv(|v| U::lit(v.as_f64()));
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
        }
    }
}

/// Activations kept from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    /// post-ReLU hidden activations
    hidden: Array2<T>,
    pub(crate) batch_mean: Array1<T>,
    /// unbiased, as used for the running estimate
    pub(crate) batch_var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub fc1_weight: Array2<T>,
    pub fc1_bias: Array1<T>,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub fc2_weight: Array2<T>,
    pub fc2_bias: Array1<T>,
}

impl<T: Real> MlpGrads<T> {
    /// Same order as [`MlpBlock::params`].
    pub fn tensors(&self) -> [&[T]; 6] {
        [
            self.fc1_weight.as_slice().unwrap(),
            self.fc1_bias.as_slice().unwrap(),
            self.gamma.as_slice().unwrap(),
            self.beta.as_slice().unwrap(),
            self.fc2_weight.as_slice().unwrap(),
            self.fc2_bias.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.fc1_weight.as_slice_mut().unwrap(),
            self.fc1_bias.as_slice_mut().unwrap(),
            self.gamma.as_slice_mut().unwrap(),
            self.beta.as_slice_mut().unwrap(),
            self.fc2_weight.as_slice_mut().unwrap(),
            self.fc2_bias.as_slice_mut().unwrap(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Linear<T>,
}

impl MlpBlock<f32> {
    pub(crate) fn init<R: Rng>(rng: &mut R, dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        Self {
            fc1: Linear::init(rng, dim_in, hidden),
            bn: BatchNorm::identity(hidden),
            fc2: Linear::init(rng, hidden, dim_out),
        }
    }
}

impl<T: Real> MlpBlock<T> {
    pub fn dim_in(&self) -> usize {
        self.fc1.weight.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.weight.nrows()
    }

    pub fn dim_out(&self) -> usize {
        self.fc2.weight.nrows()
    }

    pub(crate) fn cast<U: Real>(&self) -> MlpBlock<U> {
        MlpBlock {
            fc1: self.fc1.cast(),
            bn: self.bn.cast(),
            fc2: self.fc2.cast(),
        }
    }

    /// Trainable tensors: fc1 weight, fc1 bias, bn scale, bn shift, fc2
    /// weight, fc2 bias.
    pub fn params(&self) -> [&[T]; 6] {
        [
            self.fc1.weight.as_slice().unwrap(),
            self.fc1.bias.as_slice().unwrap(),
            self.bn.gamma.as_slice().unwrap(),
            self.bn.beta.as_slice().unwrap(),
            self.fc2.weight.as_slice().unwrap(),
            self.fc2.bias.as_slice().unwrap(),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.fc1.weight.as_slice_mut().unwrap(),
            self.fc1.bias.as_slice_mut().unwrap(),
            self.bn.gamma.as_slice_mut().unwrap(),
            self.bn.beta.as_slice_mut().unwrap(),
            self.fc2.weight.as_slice_mut().unwrap(),
            self.fc2.bias.as_slice_mut().unwrap(),
        ]
    }

    /// Running statistics (mean, variance).
    pub fn buffers(&self) -> [&[T]; 2] {
        [
            self.bn.running_mean.as_slice().unwrap(),
            self.bn.running_var.as_slice().unwrap(),
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut [T]; 2] {
        [
            self.bn.running_mean.as_slice_mut().unwrap(),
            self.bn.running_var.as_slice_mut().unwrap(),
        ]
    }

    pub(crate) fn forward_eval(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let eps = T::lit(BN_EPS);
        let mut h = self.fc1.forward(x);
        let scale: Array1<T> = self
            .bn
            .running_var
            .iter()
            .zip(&self.bn.gamma)
            .map(|(&v, &g)| g / (v + eps).sqrt())
            .collect();
        let shift: Array1<T> = self
            .bn
            .beta
            .iter()
            .zip(&self.bn.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        for mut row in h.rows_mut() {
            for ((v, &s), &t) in row.iter_mut().zip(&scale).zip(&shift) {
                let y = *v * s + t;
                *v = if y > T::zero() { y } else { T::zero() };
            }
        }
        self.fc2.forward(h.view())
    }

    /// Batch-statistics forward. Needs at least two rows.
    pub(crate) fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let n = x.nrows();
        debug_assert!(n >= 2);
        let nt = T::lit(n as f64);
        let eps = T::lit(BN_EPS);
        let z = self.fc1.forward(x);
        let mean = z.mean_axis(Axis(0)).unwrap();
        let centered = &z - &mean;
        let var_biased = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nt;
        let inv_std = var_biased.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let mut hidden = &xhat * &self.bn.gamma;
        hidden += &self.bn.beta;
        hidden.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let y = self.fc2.forward(hidden.view());
        let batch_var = var_biased * (nt / (nt - T::one()));
        (
            y,
            MlpCache {
                input: x.to_owned(),
                xhat,
                inv_std,
                hidden,
                batch_mean: mean,
                batch_var,
            },
        )
    }

    /// Gradient of the block given the upstream gradient `dy` on its output.
    /// Returns parameter gradients and the gradient on the block input.
    pub(crate) fn backward(&self, cache: &MlpCache<T>, dy: ArrayView2<'_, T>) -> (MlpGrads<T>, Array2<T>) {
        let n = T::lit(dy.nrows() as f64);
        let fc2_weight = dy.t().dot(&cache.hidden);
        let fc2_bias = dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&self.fc2.weight);
        // ReLU: hidden is zero exactly where the pre-activation was <= 0
        ndarray::Zip::from(&mut dh)
            .and(&cache.hidden)
            .for_each(|g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
        let gamma = (&dh * &cache.xhat).sum_axis(Axis(0));
        let beta = dh.sum_axis(Axis(0));
        let dxhat = &dh * &self.bn.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dz = dxhat * n;
        dz -= &sum_dxhat;
        dz -= &(&cache.xhat * &sum_dxhat_xhat);
        dz *= &(&cache.inv_std / n);
        let fc1_weight = dz.t().dot(&cache.input);
        let fc1_bias = dz.sum_axis(Axis(0));
        let dx = dz.dot(&self.fc1.weight);
        (
            MlpGrads {
                fc1_weight,
                fc1_bias,
                gamma,
                beta,
                fc2_weight,
                fc2_bias,
            },
            dx,
        )
    }

    pub(crate) fn update_running_stats(&mut self, cache: &MlpCache<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        ndarray::Zip::from(&mut self.bn.running_mean)
            .and(&cache.batch_mean)
            .for_each(|r, &b| *r = keep * *r + m * b);
        ndarray::Zip::from(&mut self.bn.running_var)
            .and(&cache.batch_var)
            .for_each(|r, &b| *r = keep * *r + m * b);
    }
}
