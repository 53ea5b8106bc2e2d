//! Minibatch SGD with heavy-ball momentum and linear learning-rate warmup.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{loss_and_upstream, LossKind};
use crate::nn::{forward, Network};
use crate::rng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs at which the probe hook runs; epoch 0 is the initialization.
    pub checkpoint_epochs: Vec<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 500,
            warmup_epochs: 5,
            warmup_start_factor: 0.1,
            seed: 0,
            loss: LossKind::CrossEntropy,
            checkpoint_epochs: Vec::new(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_start_factor must lie in (0, 1], got {}",
                self.warmup_start_factor
            )));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        if t >= self.warmup_epochs {
            return self.lr;
        }
        let start = self.warmup_start_factor * self.lr;
        start + (self.lr - start) * t as f64 / self.warmup_epochs as f64
    }

    /// Stable identifier of the optimization protocol, including the
    /// momentum formulation.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in "heavy-ball;".bytes().chain(json.bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("heavy-ball-{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub train_err: f64,
    pub train_loss: f64,
    pub test_err: Option<f64>,
    pub test_loss: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Same records with wall time zeroed, for reproducibility comparisons.
    pub fn without_wall_time(&self) -> Self {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.wall_s = 0.0);
        h
    }
}

/// Classification error rate and mean loss. Predictions take the arg-max
/// logit, with ties going to the lowest class index.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, kind: LossKind) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = crate::par::map(ds.len(), |n| -> Result<(bool, T)> {
        let (logits, _) = forward(net, ds.input(n))?;
        let (loss, _) = loss_and_upstream(kind, &logits, ds.target(n))?;
        Ok((argmax(&logits) != ds.label(n), loss))
    });
    let mut wrong = 0usize;
    let mut losses = Vec::with_capacity(ds.len());
    for r in per {
        let (w, l) = r?;
        wrong += w as usize;
        losses.push(l);
    }
    let n = ds.len() as f64;
    Ok((wrong as f64 / n, crate::par::sum_in_order(&losses).to64() / n))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_indices(indices: &[usize], len: usize) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Err(Error::EmptyIndices);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(Error::IndexOutOfRange { index: bad, len });
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    Ok(sorted)
}

/// Mean loss and mean gradient over `indices`, summed in ascending index order.
fn batch_loss_grad<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    indices: &[usize],
    kind: LossKind,
) -> Result<(T, Vec<T>)> {
    let idx = check_indices(indices, ds.len())?;
    let p = net.param_count();
    let scale = T::one() / T::of(idx.len() as f64);
    // The last slot carries the loss so that one reduction yields both.
    let mut acc = crate::par::try_ordered_vec_sum(idx.len(), p + 1, |i, acc: &mut [T]| {
        let n = idx[i];
        let (logits, trace) = forward(net, ds.input(n))?;
        let (loss, up) = loss_and_upstream(kind, &logits, ds.target(n))?;
        crate::nn::grad::accumulate_param_grad(net, &trace, &up, scale, &mut acc[..p]);
        acc[p] += loss * scale;
        Ok::<_, Error>(())
    })?;
    let loss = acc.pop().expect("loss slot");
    Ok((loss, acc))
}

/// Mean per-sample loss gradient over `indices` (duplicates count twice).
pub fn minibatch_gradient<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    indices: &[usize],
    kind: LossKind,
) -> Result<Vec<T>> {
    Ok(batch_loss_grad(net, ds, indices, kind)?.1)
}

/// Called at scheduled epochs with the current network.
pub type ProbeHook<'a, T> = dyn FnMut(usize, &Network<T>) -> Result<()> + 'a;

/// Trains `net` in place. Each epoch visits every sample once, in a fresh
/// seeded permutation when `shuffle` is set; the final partial batch is kept.
pub fn sgd_train<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    hook: &mut ProbeHook<'_, T>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ds in std::iter::once(train).chain(test) {
        if ds.dim() != net.input_dim() || ds.num_classes() != net.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "dataset ({} features, {} classes) does not fit network ({} inputs, {} outputs)",
                ds.dim(),
                ds.num_classes(),
                net.input_dim(),
                net.num_classes()
            )));
        }
    }
    let scheduled = |e: usize| cfg.checkpoint_epochs.contains(&e);
    if scheduled(0) {
        hook(0, net)?;
    }
    let start = Instant::now();
    let momentum = T::of(cfg.momentum);
    let mut velocity = vec![T::zero(); net.param_count()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    for t in 0..cfg.epochs {
        let lr = cfg.lr_at(t);
        let eta = T::of(lr);
        order.sort_unstable();
        if cfg.shuffle {
            order.shuffle(&mut rng::stream(cfg.seed, "shuffle", t as u64));
        }
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = Error::DivergenceAbort { epoch: t + 1, batch: b };
            let (loss, grad) = match batch_loss_grad(net, train, batch, cfg.loss) {
                Err(Error::NonFinite(_)) => return Err(diverged),
                r => r?,
            };
            if !loss.is_finite() || !crate::linalg::all_finite(&grad) {
                return Err(diverged);
            }
            for ((th, v), g) in net.theta_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = momentum * *v - eta * *g;
                *th += *v;
            }
        }
        let diverged = Error::DivergenceAbort { epoch: t + 1, batch: order.len().div_ceil(cfg.batch_size) };
        let (train_err, train_loss) = match evaluate(net, train, cfg.loss) {
            Ok((_, l)) if !l.is_finite() => return Err(diverged),
            Err(Error::NonFinite(_)) => return Err(diverged),
            r => r?,
        };
        let (test_err, test_loss) = match test {
            Some(ds) => {
                let (e, l) = evaluate(net, ds, cfg.loss)?;
                (Some(e), Some(l))
            }
            None => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch: t + 1,
            lr,
            train_err,
            train_loss,
            test_err,
            test_loss,
            wall_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {} lr {lr:.3e} train_err {train_err:.4} train_loss {train_loss:.4e}", t + 1);
        if scheduled(t + 1) {
            hook(t + 1, net)?;
        }
    }
    Ok(history)
}
