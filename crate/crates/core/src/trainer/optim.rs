use crate::error::{Error, Result};
use crate::model::{RbeGrads, RbeModel};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// State for tensors of the given lengths; betas (0.9, 0.999), eps 1e-8.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn for_model(model: &RbeModel) -> Self {
        Self::new(model.params().iter().map(|p| p.len()))
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f32) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || params.iter().zip(&grads).zip(&self.m).any(|((p, g), s)| p.len() != s.len() || g.len() != s.len())
        {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to global norm `max_norm` when larger. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut RbeGrads<f32>, max_norm: f32) -> f32 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        grads.scale((max_norm as f64 / norm) as f32);
    }
    norm as f32
}

/// `theta_m <- coef * theta_m + (1 - coef) * theta_online`; batch-norm
/// running statistics are copied.
pub fn momentum_update(online: &RbeModel, momentum: &mut RbeModel, coef: f32) -> Result<()> {
    if online.config() != momentum.config() {
        return Err(Error::Config("momentum copy has a different model configuration".into()));
    }
    let keep = 1.0 - coef;
    for (dst, src) in momentum.params_mut().into_iter().zip(online.params()) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = coef * *d + keep * s;
        }
    }
    for (dst, src) in momentum.buffers_mut().into_iter().zip(online.buffers()) {
        dst.copy_from_slice(src);
    }
    Ok(())
}
