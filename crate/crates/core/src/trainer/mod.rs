//! Contrastive training of the binarization network.
//!
//! Each step encodes anchors with the online model and positives with a
//! momentum copy, pushes the positive codes into a FIFO queue, mines the
//! hardest queue entries as negatives and minimizes an NCE loss on the
//! decoded codes. The backward-compatible variant adds a second loss whose
//! positives and queue come from a frozen old model.

mod loss;
mod optim;
mod queue;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{contrastive_loss, LossOutput};
pub use optim::{clip_grad_norm, momentum_update, Adam};
pub use queue::{select_hard_negatives, NegativeQueue};

use crate::embstore::{EmbeddingSet, GroundTruth, PairList};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::index::{FlatIndex, Kernel};
use crate::model::{Mode, RbeModel};
use crate::codec::{Geometry, NormMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub temperature: f32,
    pub grad_clip_norm: f32,
    pub queue_len: usize,
    pub hard_top_k: usize,
    pub momentum_coef: f32,
    pub epochs: usize,
    pub seed: u64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Weight of the backward-compatibility term (BC training only).
    pub bc_weight: f32,
    /// Anchors scored for `recall@10_val` after each epoch; 0 disables.
    pub val_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.02,
            temperature: 0.07,
            grad_clip_norm: 5.0,
            queue_len: 4096,
            hard_top_k: 64,
            momentum_coef: 0.999,
            epochs: 10,
            seed: 0,
            cosine_decay: false,
            bc_weight: 1.0,
            val_queries: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "batch_size",
        "learning_rate",
        "temperature",
        "grad_clip_norm",
        "queue_len",
        "hard_top_k",
        "momentum_coef",
        "epochs",
        "seed",
        "cosine_decay",
        "bc_weight",
        "val_queries",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key.trim() {
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "queue_len" => self.queue_len = parse(key, value)?,
            "hard_top_k" => self.hard_top_k = parse(key, value)?,
            "momentum_coef" => self.momentum_coef = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "cosine_decay" => self.cosine_decay = parse(key, value)?,
            "bc_weight" => self.bc_weight = parse(key, value)?,
            "val_queries" => self.val_queries = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key as a `key=value` line, in [`Self::KEYS`] order.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "temperature={}", self.temperature);
        let _ = writeln!(s, "grad_clip_norm={}", self.grad_clip_norm);
        let _ = writeln!(s, "queue_len={}", self.queue_len);
        let _ = writeln!(s, "hard_top_k={}", self.hard_top_k);
        let _ = writeln!(s, "momentum_coef={}", self.momentum_coef);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "cosine_decay={}", self.cosine_decay);
        let _ = writeln!(s, "bc_weight={}", self.bc_weight);
        let _ = writeln!(s, "val_queries={}", self.val_queries);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (batch statistics)".into());
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum_coef) {
            return fail(format!("momentum_coef must be in [0, 1), got {}", self.momentum_coef));
        }
        if !(self.bc_weight.is_finite() && self.bc_weight >= 0.0) {
            return fail(format!("bc_weight must be non-negative, got {}", self.bc_weight));
        }
        if self.queue_len == 0 || !self.queue_len.is_multiple_of(self.batch_size) {
            return fail(format!(
                "queue_len {} is not a positive multiple of batch_size {}",
                self.queue_len, self.batch_size
            ));
        }
        if self.hard_top_k == 0 || self.hard_top_k > self.queue_len {
            return fail(format!("hard_top_k {} outside 1..={}", self.hard_top_k, self.queue_len));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f32 {
        if !self.cosine_decay || total == 0 {
            return self.learning_rate;
        }
        let t = step as f64 / total as f64;
        (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

/// One row of the training report.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepReport {
    pub step: usize,
    pub loss: f64,
    /// 0 outside backward-compatible training.
    pub bc_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub queue_fill: usize,
    pub recall_at_10_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RbeModel,
    /// Epoch means; `step` is the last step of the epoch.
    pub epochs: Vec<TrainStepReport>,
    pub steps: Vec<TrainStepReport>,
}

pub const REPORT_COLUMNS: &str = "step,loss,bc_loss,grad_norm,queue_fill,recall@10_val";

/// Report CSV: the configuration as `# key=value` lines, then one row per
/// epoch.
pub fn report_csv(cfg: &TrainConfig, rows: &[TrainStepReport]) -> String {
    let mut s = String::new();
    for line in cfg.to_kv_text().lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(s, "{REPORT_COLUMNS}");
    for r in rows {
        let recall = r.recall_at_10_val.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{},{}",
            r.step, r.loss, r.bc_loss, r.grad_norm, r.queue_fill, recall
        );
    }
    s
}

/// Writes [`report_csv`], or appends its rows when `path` already has a
/// header.
pub fn write_report_csv(path: impl AsRef<Path>, cfg: &TrainConfig, rows: &[TrainStepReport]) -> Result<()> {
    let path = path.as_ref();
    let full = report_csv(cfg, rows);
    let text = match std::fs::read_to_string(path) {
        Ok(existing) if existing.lines().any(|l| l == REPORT_COLUMNS) => {
            let body: String = full
                .lines()
                .skip_while(|l| *l != REPORT_COLUMNS)
                .skip(1)
                .map(|l| format!("{l}\n"))
                .collect();
            existing + &body
        }
        _ => full,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Contrastive training with momentum positives and hard negatives from the
/// queue.
pub fn train(model: &RbeModel, data: &EmbeddingSet, pairs: &PairList, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, None, data, pairs, cfg)
}

/// Trains `new_model` on `data` (new backbone features) with the added
/// compatibility loss against the frozen `old_model`, which encodes the
/// positives from `old_data` (old backbone features, same ids).
pub fn train_backward_compatible(
    new_model: &RbeModel,
    old_model: &RbeModel,
    data: &EmbeddingSet,
    old_data: &EmbeddingSet,
    pairs: &PairList,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if old_model.config().code_dim != new_model.config().code_dim {
        return Err(Error::Config(format!(
            "old model code_dim {} differs from new {}",
            old_model.config().code_dim,
            new_model.config().code_dim
        )));
    }
    if old_data.dim() != old_model.config().input_dim {
        return Err(Error::DimensionMismatch {
            expected: old_model.config().input_dim,
            got: old_data.dim(),
        });
    }
    pairs.validate(data, old_data)?;
    let bc = Compat {
        model: old_model,
        rows: old_data.id_index(),
        data: old_data,
    };
    run(new_model, Some(bc), data, pairs, cfg)
}

struct Compat<'a> {
    model: &'a RbeModel,
    data: &'a EmbeddingSet,
    rows: HashMap<u64, usize>,
}

fn gather(set: &EmbeddingSet, rows: &HashMap<u64, usize>, ids: &[u64]) -> Array2<f32> {
    let mut out = Array2::zeros((ids.len(), set.dim()));
    for (mut dst, id) in out.rows_mut().into_iter().zip(ids) {
        dst.as_slice_mut().unwrap().copy_from_slice(set.row(rows[id]));
    }
    out
}

fn run(
    model: &RbeModel,
    bc: Option<Compat<'_>>,
    data: &EmbeddingSet,
    pairs: &PairList,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    pairs.validate(data, data)?;
    let config = *model.config();
    if data.dim() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            got: data.dim(),
        });
    }
    let mut online = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: online,
            epochs: Vec::new(),
            steps: Vec::new(),
        });
    }
    let bs = cfg.batch_size;
    let per_epoch = pairs.len() / bs;
    if per_epoch == 0 {
        return Err(Error::Config(format!("{} pairs do not fill one batch of {bs}", pairs.len())));
    }
    let total_steps = per_epoch * cfg.epochs;
    let rows = data.id_index();
    let groups = pairs.groups();
    let m = config.code_dim;

    let mut momentum = online.clone();
    let mut adam = Adam::for_model(&online);
    let mut queue = NegativeQueue::new(cfg.queue_len, m);
    let mut bc_queue = NegativeQueue::new(if bc.is_some() { cfg.queue_len } else { 0 }, m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let tau = cfg.temperature;

    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks_exact(bs).enumerate() {
            let a_ids: Vec<u64> = batch.iter().map(|&i| pairs.pairs[i].0).collect();
            let p_ids: Vec<u64> = batch.iter().map(|&i| pairs.pairs[i].1).collect();
            let a_groups: Vec<u64> = a_ids.iter().map(|id| groups[id]).collect();
            let p_groups: Vec<u64> = p_ids.iter().map(|id| groups[id]).collect();

            let fwd = online.forward(gather(data, &rows, &a_ids).view(), Mode::Train)?;
            let tape = fwd.tape.as_ref().expect("train mode records a tape");
            let anchors = fwd.decoded.view();

            let pos = momentum.forward(gather(data, &rows, &p_ids).view(), Mode::Train)?.decoded;
            queue.push_batch(pos.view(), &p_ids, &p_groups);
            let chosen = queue.select_batch(anchors, &a_groups, cfg.hard_top_k);
            let main = contrastive_loss(anchors, pos.view(), queue.buffer(), &chosen, tau)?;
            let mut grad = main.grad;

            let mut bc_loss = 0.0f32;
            if let Some(bc) = &bc {
                let old_pos = bc.model.forward(gather(bc.data, &bc.rows, &p_ids).view(), Mode::Train)?.decoded;
                bc_queue.push_batch(old_pos.view(), &p_ids, &p_groups);
                let chosen = bc_queue.select_batch(anchors, &a_groups, cfg.hard_top_k);
                let extra = contrastive_loss(anchors, old_pos.view(), bc_queue.buffer(), &chosen, tau)?;
                bc_loss = extra.loss;
                grad.scaled_add(cfg.bc_weight, &extra.grad);
            }
            if !main.loss.is_finite() || !bc_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!(
                        "epoch {epoch} batch {b}: loss {} bc_loss {bc_loss}, anchor ids {:?}..{:?}",
                        main.loss,
                        a_ids.first(),
                        a_ids.last()
                    ),
                });
            }

            let (mut grads, _) = online.backward(tape, grad.view())?;
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!(
                        "epoch {epoch} batch {b}: loss {} but gradient norm {grad_norm}, anchor ids {:?}..{:?}",
                        main.loss,
                        a_ids.first(),
                        a_ids.last()
                    ),
                });
            }
            online.update_running_stats(tape);
            adam.step(online.params_mut(), grads.tensors(), cfg.lr_at(step, total_steps))?;
            momentum_update(&online, &mut momentum, cfg.momentum_coef)?;

            steps.push(TrainStepReport {
                step,
                loss: main.loss as f64,
                bc_loss: bc_loss as f64,
                grad_norm: grad_norm as f64,
                queue_fill: queue.len(),
                recall_at_10_val: None,
            });
            step += 1;
        }
        let recent = &steps[steps.len() - per_epoch..];
        let mean = |f: fn(&TrainStepReport) -> f64| recent.iter().map(f).sum::<f64>() / per_epoch as f64;
        let recall = if cfg.val_queries > 0 {
            Some(validation_recall(&online, data, pairs, cfg.val_queries)?)
        } else {
            None
        };
        epochs.push(TrainStepReport {
            step: step - 1,
            loss: mean(|r| r.loss),
            bc_loss: mean(|r| r.bc_loss),
            grad_norm: mean(|r| r.grad_norm),
            queue_fill: queue.len(),
            recall_at_10_val: recall,
        });
    }
    Ok(TrainOutcome {
        model: online,
        epochs,
        steps,
    })
}

/// Leave-one-out Recall@10 of the first `queries` anchors against every
/// row of `data`; relevant items are the rest of the anchor's pair-graph
/// component.
fn validation_recall(model: &RbeModel, data: &EmbeddingSet, pairs: &PairList, queries: usize) -> Result<f64> {
    const K: usize = 10;
    let groups = pairs.groups();
    let mut members: HashMap<u64, Vec<u64>> = HashMap::new();
    for &id in data.ids() {
        if let Some(&g) = groups.get(&id) {
            members.entry(g).or_default().push(id);
        }
    }
    let codes = model.encode_set(data)?;
    let geom = Geometry::of(&codes[0]);
    let index = FlatIndex::build(geom, &codes, data.ids(), NormMode::Exact)?;
    let rows = data.id_index();
    let mut truth = GroundTruth::new();
    let mut results = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &(a, _) in &pairs.pairs {
        if results.len() == queries {
            break;
        }
        if !seen.insert(a) {
            continue;
        }
        let relevant: Vec<u64> = members[&groups[&a]].iter().copied().filter(|&x| x != a).collect();
        if relevant.is_empty() {
            continue;
        }
        truth.insert(a, relevant)?;
        let hits = index.search(&codes[rows[&a]], K + 1, Kernel::Bitwise)?;
        let ids: Vec<u64> = hits.into_iter().map(|n| n.id).filter(|&id| id != a).take(K).collect();
        results.push((a, ids));
    }
    Ok(recall_at_k(&results, &truth, K)?.mean)
}

#[cfg(test)]
mod tests;
