//! The recurrent binarization network.
//!
//! ```text
//! b0 = sign(W0(f))
//! for i in 1..=u:
//!     f_hat = l2_normalize(R_{i-1}(b_{i-1}))
//!     r_{i-1} = sign(W_i(f - f_hat))
//!     b_i = b_{i-1} + 2^-i * r_{i-1}
//! ```
//!
//! Every `W` block maps `d -> h -> m` and every `R` block `m -> h -> d`.
//! Gradients pass through `sign` with the straight-through estimator: the
//! upstream gradient is kept where `|x| <= 1` and zeroed elsewhere.

mod checkpoint;
pub(crate) mod code;
mod mlp;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model};
pub use code::RecurrentBinaryCode;
pub use mlp::{BatchNorm, Linear, MlpBlock, MlpCache, MlpGrads};

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RbeConfig {
    /// d
    pub input_dim: usize,
    /// m
    pub code_dim: usize,
    /// u
    pub residual_loops: usize,
    /// h
    pub hidden_dim: usize,
}

impl RbeConfig {
    /// Hidden width defaults to the input dimension.
    pub fn new(input_dim: usize, code_dim: usize, residual_loops: usize) -> Self {
        Self {
            input_dim,
            code_dim,
            residual_loops,
            hidden_dim: input_dim,
        }
    }

    pub fn with_hidden_dim(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn bits_per_dim(&self) -> usize {
        self.residual_loops + 1
    }

    pub fn total_bits(&self) -> usize {
        self.code_dim * self.bits_per_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!("degenerate model shape {self:?}")));
        }
        if self.residual_loops > 15 {
            return Err(Error::invalid("at most 15 residual loops are supported"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; records a tape for [`RbeModel::backward`].
    Train,
    /// Running statistics; rows are independent of each other.
    Eval,
}

/// `sign` forward value and straight-through gradient mask.
pub fn sign_ste<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    x.iter()
        .map(|&v| {
            let s = if v > T::zero() { T::one() } else { -T::one() };
            let mask = if v.abs() <= T::one() { T::one() } else { T::zero() };
            (s, mask)
        })
        .unzip()
}

fn sign_matrix<T: Real>(pre: &Array2<T>) -> Array2<T> {
    pre.mapv(|v| if v > T::zero() { T::one() } else { -T::one() })
}

fn ste_mask_inplace<T: Real>(grad: &mut Array2<T>, pre: &Array2<T>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &x| {
        if x.abs() > T::one() {
            *g = T::zero();
        }
    });
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
fn normalize_rows<T: Real>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    (out, norms)
}

#[derive(Debug, Clone)]
pub struct RbeModel<T = f32> {
    config: RbeConfig,
    binarize: Vec<MlpBlock<T>>,
    reconstruct: Vec<MlpBlock<T>>,
    pub version_tag: String,
    // bumped on every parameter mutation; tapes from older revisions are stale
    revision: u64,
}

impl<T: PartialEq> PartialEq for RbeModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.binarize == other.binarize
            && self.reconstruct == other.reconstruct
            && self.version_tag == other.version_tag
    }
}

/// Everything a train-mode forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    revision: u64,
    binarize: Vec<MlpCache<T>>,
    reconstruct: Vec<MlpCache<T>>,
    pre: Vec<Array2<T>>,
    fhat: Vec<Array2<T>>,
    rec_norm: Vec<Array1<T>>,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `n x m` decoded lattice values `b_u`.
    pub decoded: Array2<T>,
    /// Pre-sign activations per plane, each `n x m`.
    pub pre_activations: Vec<Array2<T>>,
    pub tape: Option<Tape<T>>,
}

impl<T: Real> Forward<T> {
    pub fn len(&self) -> usize {
        self.decoded.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.decoded.nrows() == 0
    }

    /// Code of row `i`.
    pub fn code(&self, i: usize) -> RecurrentBinaryCode {
        let m = self.decoded.ncols();
        RecurrentBinaryCode::from_bit_fn(m, self.pre_activations.len(), |p, j| {
            self.pre_activations[p][[i, j]] > T::zero()
        })
        .expect("shape consistent by construction")
    }

    pub fn codes(&self) -> Vec<RecurrentBinaryCode> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }
}

/// Parameter gradients, block order `W0..Wu, R0..R(u-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbeGrads<T> {
    pub binarize: Vec<MlpGrads<T>>,
    pub reconstruct: Vec<MlpGrads<T>>,
}

impl<T: Real> RbeGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        self.binarize
            .iter()
            .chain(&self.reconstruct)
            .flat_map(|g| g.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.binarize
            .iter_mut()
            .chain(self.reconstruct.iter_mut())
            .flat_map(|g| g.tensors_mut())
            .collect()
    }

    pub fn global_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += factor * y);
        }
    }
}

/// Signs and pre-activations recorded from a forward pass, used to evaluate
/// the straight-through surrogate with the binarization outcomes held fixed.
#[derive(Debug, Clone)]
pub struct FrozenSigns<T> {
    pre: Vec<Array2<T>>,
}

impl<T: Real> FrozenSigns<T> {
    pub fn from_forward(fwd: &Forward<T>) -> Self {
        Self {
            pre: fwd.pre_activations.clone(),
        }
    }
}

impl RbeModel<f32> {
    /// Fresh model with uniform fan-in initialization and identity batch norm.
    pub fn new(config: RbeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, h, u) = (
            config.input_dim,
            config.code_dim,
            config.hidden_dim,
            config.residual_loops,
        );
        let binarize = (0..=u).map(|_| MlpBlock::init(&mut rng, d, h, m)).collect();
        let reconstruct = (0..u).map(|_| MlpBlock::init(&mut rng, m, h, d)).collect();
        Ok(Self {
            config,
            binarize,
            reconstruct,
            version_tag: String::new(),
            revision: 0,
        })
    }

    /// Eval-mode codes for a matrix of float rows.
    pub fn encode_rows(&self, rows: ArrayView2<'_, f32>) -> Result<Vec<RecurrentBinaryCode>> {
        const CHUNK: usize = 2048;
        let mut out = Vec::with_capacity(rows.nrows());
        let mut start = 0;
        while start < rows.nrows() {
            let end = (start + CHUNK).min(rows.nrows());
            let fwd = self.forward(rows.slice(s![start..end, ..]), Mode::Eval)?;
            out.extend(fwd.codes());
            start = end;
        }
        Ok(out)
    }

    pub fn encode_set(&self, set: &EmbeddingSet) -> Result<Vec<RecurrentBinaryCode>> {
        self.encode_rows(set.matrix())
    }

    pub fn encode(&self, f: &[f32]) -> Result<RecurrentBinaryCode> {
        let view = ArrayView2::from_shape((1, f.len()), f)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.encode_rows(view)?.remove(0))
    }
}

impl<T: Real> RbeModel<T> {
    pub fn config(&self) -> &RbeConfig {
        &self.config
    }

    pub fn binarize_blocks(&self) -> &[MlpBlock<T>] {
        &self.binarize
    }

    pub fn reconstruct_blocks(&self) -> &[MlpBlock<T>] {
        &self.reconstruct
    }

    pub(crate) fn from_parts(
        config: RbeConfig,
        binarize: Vec<MlpBlock<T>>,
        reconstruct: Vec<MlpBlock<T>>,
        version_tag: String,
    ) -> Result<Self> {
        config.validate()?;
        let (d, m, h, u) = (
            config.input_dim,
            config.code_dim,
            config.hidden_dim,
            config.residual_loops,
        );
        let ok = binarize.len() == u + 1
            && reconstruct.len() == u
            && binarize
                .iter()
                .all(|b| (b.dim_in(), b.hidden(), b.dim_out()) == (d, h, m))
            && reconstruct
                .iter()
                .all(|b| (b.dim_in(), b.hidden(), b.dim_out()) == (m, h, d));
        if !ok {
            return Err(Error::invalid("block shapes do not match the model config"));
        }
        Ok(Self {
            config,
            binarize,
            reconstruct,
            version_tag,
            revision: 0,
        })
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Real>(&self) -> RbeModel<U> {
        RbeModel {
            config: self.config,
            binarize: self.binarize.iter().map(MlpBlock::cast).collect(),
            reconstruct: self.reconstruct.iter().map(MlpBlock::cast).collect(),
            version_tag: self.version_tag.clone(),
            revision: 0,
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &MlpBlock<T>> {
        self.binarize.iter().chain(&self.reconstruct)
    }

    /// Trainable tensors, block order `W0..Wu, R0..R(u-1)`.
    pub fn params(&self) -> Vec<&[T]> {
        self.blocks().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.revision += 1;
        self.binarize
            .iter_mut()
            .chain(self.reconstruct.iter_mut())
            .flat_map(|b| b.params_mut())
            .collect()
    }

    /// Batch-norm running statistics, same block order as [`params`](Self::params).
    pub fn buffers(&self) -> Vec<&[T]> {
        self.blocks().flat_map(|b| b.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.binarize
            .iter_mut()
            .chain(self.reconstruct.iter_mut())
            .flat_map(|b| b.buffers_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &ArrayView2<'_, T>, mode: Mode) -> Result<()> {
        if input.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: input.ncols(),
            });
        }
        if mode == Mode::Train && input.nrows() < 2 {
            return Err(Error::invalid(
                "train-mode forward needs a batch of at least two rows",
            ));
        }
        Ok(())
    }

    /// Batched forward pass. Train mode uses batch statistics and records a
    /// tape; eval mode uses running statistics.
    pub fn forward(&self, input: ArrayView2<'_, T>, mode: Mode) -> Result<Forward<T>> {
        self.check_input(&input, mode)?;
        Ok(self.run(input, mode, |_, pre| sign_matrix(pre)))
    }

    /// Train-mode forward where each binarization is replaced by the
    /// straight-through surrogate around a recorded outcome:
    /// `s0 + mask(x0) * (x - x0)`. At the recorded point this equals the
    /// real forward pass, and its exact derivative is the STE gradient.
    pub fn forward_surrogate(&self, input: ArrayView2<'_, T>, frozen: &FrozenSigns<T>) -> Result<Forward<T>> {
        self.check_input(&input, Mode::Train)?;
        if frozen.pre.len() != self.config.bits_per_dim()
            || frozen.pre.iter().any(|p| p.dim() != (input.nrows(), self.config.code_dim))
        {
            return Err(Error::invalid("frozen signs do not match the batch"));
        }
        Ok(self.run(input, Mode::Train, |i, pre| {
            let x0 = &frozen.pre[i];
            let mut out = sign_matrix(x0);
            ndarray::Zip::from(&mut out)
                .and(pre)
                .and(x0)
                .for_each(|o, &x, &x0| {
                    if x0.abs() <= T::one() {
                        *o += x - x0;
                    }
                });
            out
        }))
    }

    fn run(
        &self,
        input: ArrayView2<'_, T>,
        mode: Mode,
        binarize: impl Fn(usize, &Array2<T>) -> Array2<T>,
    ) -> Forward<T> {
        let u = self.config.residual_loops;
        let train = mode == Mode::Train;
        let apply = |block: &MlpBlock<T>, x: ArrayView2<'_, T>, caches: &mut Vec<MlpCache<T>>| {
            if train {
                let (y, c) = block.forward_train(x);
                caches.push(c);
                y
            } else {
                block.forward_eval(x)
            }
        };

        let mut w_caches = Vec::new();
        let mut r_caches = Vec::new();
        let mut pre = Vec::with_capacity(u + 1);
        let mut fhats = Vec::new();
        let mut rec_norms = Vec::new();

        let p0 = apply(&self.binarize[0], input, &mut w_caches);
        let mut b = binarize(0, &p0);
        pre.push(p0);
        for i in 1..=u {
            let rec = apply(&self.reconstruct[i - 1], b.view(), &mut r_caches);
            let (fhat, norms) = normalize_rows(&rec);
            let residual = &input - &fhat;
            let pi = apply(&self.binarize[i], residual.view(), &mut w_caches);
            let r = binarize(i, &pi);
            b.scaled_add(T::lit((-(i as f64)).exp2()), &r);
            pre.push(pi);
            if train {
                fhats.push(fhat);
                rec_norms.push(norms);
            }
        }
        let tape = train.then(|| Tape {
            revision: self.revision,
            binarize: w_caches,
            reconstruct: r_caches,
            pre: pre.clone(),
            fhat: fhats,
            rec_norm: rec_norms,
        });
        Forward {
            decoded: b,
            pre_activations: pre,
            tape,
        }
    }

    /// Back-propagates `grad_decoded` (gradient of the loss on `b_u`).
    /// Returns parameter gradients and the gradient on the input rows.
    pub fn backward(&self, tape: &Tape<T>, grad_decoded: ArrayView2<'_, T>) -> Result<(RbeGrads<T>, Array2<T>)> {
        if tape.revision != self.revision {
            return Err(Error::StaleTape);
        }
        let u = self.config.residual_loops;
        let n = grad_decoded.nrows();
        if grad_decoded.ncols() != self.config.code_dim || tape.pre[0].nrows() != n {
            return Err(Error::invalid("gradient shape does not match the tape"));
        }
        let mut gb = grad_decoded.to_owned();
        let mut dx = Array2::<T>::zeros((n, self.config.input_dim));
        let mut w_grads: Vec<Option<MlpGrads<T>>> = vec![None; u + 1];
        let mut r_grads: Vec<Option<MlpGrads<T>>> = vec![None; u];

        for i in (1..=u).rev() {
            let mut g_pre = gb.mapv(|g| g * T::lit((-(i as f64)).exp2()));
            ste_mask_inplace(&mut g_pre, &tape.pre[i]);
            let (gw, d_residual) = self.binarize[i].backward(&tape.binarize[i], g_pre.view());
            w_grads[i] = Some(gw);
            dx += &d_residual;
            // residual = f - f_hat, f_hat = rec / ||rec||
            let fhat = &tape.fhat[i - 1];
            let norms = &tape.rec_norm[i - 1];
            let mut d_rec = -d_residual;
            for ((mut g, f), &nrm) in d_rec.rows_mut().into_iter().zip(fhat.rows()).zip(norms) {
                if nrm > T::zero() {
                    let proj = g.dot(&f);
                    g.scaled_add(-proj, &f);
                    g.mapv_inplace(|v| v / nrm);
                } else {
                    g.fill(T::zero());
                }
            }
            let (gr, d_b) = self.reconstruct[i - 1].backward(&tape.reconstruct[i - 1], d_rec.view());
            r_grads[i - 1] = Some(gr);
            gb += &d_b;
        }
        ste_mask_inplace(&mut gb, &tape.pre[0]);
        let (g0, d0) = self.binarize[0].backward(&tape.binarize[0], gb.view());
        w_grads[0] = Some(g0);
        dx += &d0;

        Ok((
            RbeGrads {
                binarize: w_grads.into_iter().map(Option::unwrap).collect(),
                reconstruct: r_grads.into_iter().map(Option::unwrap).collect(),
            },
            dx,
        ))
    }

    /// Folds the batch statistics of a train-mode tape into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (b, c) in self.binarize.iter_mut().zip(&tape.binarize) {
            b.update_running_stats(c);
        }
        for (b, c) in self.reconstruct.iter_mut().zip(&tape.reconstruct) {
            b.update_running_stats(c);
        }
    }
}
