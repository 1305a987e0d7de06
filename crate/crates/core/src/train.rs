//! Joint cross-entropy + attention loss, clipped Adam, and the epoch loop.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::LabeledUtterance;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{forward, init_params, MlnetParams, ModelConfig, Variant};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight λ of the attention loss.
    pub attention_loss_weight: f64,
    pub seed: u64,
    /// Decision threshold used for dev scoring.
    pub theta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            epochs: 150,
            clip_lo: -1.0,
            clip_hi: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            attention_loss_weight: 1.0,
            seed: 0,
            theta: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip_lo < self.clip_hi) {
            return bad(format!("clip range [{}, {}] is empty", self.clip_lo, self.clip_hi));
        }
        if !(self.attention_loss_weight >= 0.0) {
            return bad("attention_loss_weight must be >= 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("adam hyper-parameters out of range".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta {} outside [0, 1]", self.theta));
        }
        Ok(())
    }

    fn uses_attention_loss(&self, model: &ModelConfig) -> bool {
        model.variant == Variant::FullAttention && self.attention_loss_weight > 0.0
    }
}

/// `-Σ_t [y_t·ln ŷ_t + (1-y_t)·ln(1-ŷ_t)]` with clamped `ŷ`.
pub fn cross_entropy_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::Shape(format!("{} labels for predictions {shape:?}", labels.len())));
    }
    let y = g.constant(Tensor::new(&shape, labels.iter().map(|&l| T::from_f64(l as f64)).collect())?);
    let not_y = g.constant(Tensor::new(
        &shape,
        labels.iter().map(|&l| T::from_f64(1.0 - l as f64)).collect(),
    )?);
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let log_q = g.log(q)?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both)?;
    g.scale(total, -1.0)
}

/// Index of the largest entry of each row, first on ties.
pub fn row_argmax<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.shape()[0])
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `-Σ_t ln p_{t,k_t}` where `k_t` is the dominant branch of frame `t`.
///
/// The selection is a constant of the step: pass `frozen` to reuse a
/// previous selection, otherwise it is taken from the current `p`.
pub fn attention_loss<T: Real>(g: &mut Graph<T>, p: Var, frozen: Option<&[usize]>) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("attention weights must be T × n, got {shape:?}")));
    }
    let ks = match frozen {
        Some(k) if k.len() == shape[0] => k.to_vec(),
        Some(k) => return Err(Error::Shape(format!("{} frozen indices for {} frames", k.len(), shape[0]))),
        None => row_argmax(g.value(p)),
    };
    let mut onehot = Tensor::zeros(&shape);
    for (t, &k) in ks.iter().enumerate() {
        if k >= shape[1] {
            return Err(Error::InvalidArgument(format!("branch index {k} out of range")));
        }
        onehot.data_mut()[t * shape[1] + k] = T::one();
    }
    let mask = g.constant(onehot);
    let picked = g.mul(p, mask)?;
    let picked = g.sum_axis(picked, 1)?;
    let logs = g.log(picked)?;
    let total = g.sum(logs)?;
    Ok((g.scale(total, -1.0)?, ks))
}

/// Loss terms and parameter gradients of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceLoss<T> {
    pub total: f64,
    pub cross_entropy: f64,
    /// `None` when the attention term is disabled for this model/config.
    pub attention: Option<f64>,
    pub grads: Vec<Tensor<T>>,
}

fn build_loss<T: Real>(
    g: &mut Graph<T>,
    params: &MlnetParams<T>,
    features: &Tensor<T>,
    labels: &[u8],
    cfg: &TrainConfig,
    frozen: Option<&[usize]>,
) -> Result<(Var, Var, Option<Var>, Vec<Var>)> {
    let out = forward(g, params, features)?;
    let ce = cross_entropy_loss(g, out.probs, labels)?;
    let mut att = None;
    let mut total = ce;
    if cfg.uses_attention_loss(params.config()) {
        let a = out.attention.expect("full_attention exposes attention");
        let (l, _) = attention_loss(g, a.p, frozen)?;
        let weighted = g.scale(l, cfg.attention_loss_weight)?;
        total = g.add(ce, weighted)?;
        att = Some(l);
    }
    Ok((total, ce, att, out.params.vars))
}

/// Forward + backward for one utterance.
pub fn utterance_gradients<T: Real>(
    params: &MlnetParams<T>,
    features: &Tensor<T>,
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<UtteranceLoss<T>> {
    let mut g = Graph::new();
    let (total, ce, att, vars) = build_loss(&mut g, params, features, labels, cfg, None)?;
    let mut grads = g.backward(total)?;
    let scalar = |v: Var| g.value(v).data()[0].as_f64();
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(UtteranceLoss {
        total: scalar(total),
        cross_entropy: scalar(ce),
        attention: att.map(scalar),
        grads,
    })
}

/// Total loss of one utterance without building gradients. `frozen` pins
/// the attention-loss branch selection, for finite-difference checks.
pub fn utterance_loss<T: Real>(
    params: &MlnetParams<T>,
    features: &Tensor<T>,
    labels: &[u8],
    cfg: &TrainConfig,
    frozen: Option<&[usize]>,
) -> Result<f64> {
    let mut g = Graph::inference();
    let (total, ..) = build_loss(&mut g, params, features, labels, cfg, frozen)?;
    Ok(g.value(total).data()[0].as_f64())
}

/// Adam moments mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &MlnetParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Clamps each gradient element to `[clip_lo, clip_hi]`, then applies one
/// bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut MlnetParams<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for `{name}` at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lo, hi) = (T::from_f64(cfg.clip_lo), T::from_f64(cfg.clip_hi));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.max(lo).min(hi);
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-frame training loss over the epoch.
    pub train_loss: f64,
    pub dev_f1: f64,
    pub dev_dcf: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.dev_f1, self.dev_dcf
        )
    }
}

pub struct TrainOutcome<T> {
    pub last: MlnetParams<T>,
    pub best: MlnetParams<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model on `train`, scoring `dev` after every epoch.
///
/// With `out_dir`, writes `epoch_{n}.mlnt`, `best.mlnt` (highest dev F1,
/// or lowest training loss when `dev` is empty) and `train.log`.
pub fn train<T: Real>(
    train_set: &[LabeledUtterance],
    dev_set: &[LabeledUtterance],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let has = |c: u8| train_set.iter().any(|u| u.labels.contains(&c));
    if !has(0) || !has(1) {
        return Err(Error::InvalidArgument("training corpus must contain both speech and non-speech frames".into()));
    }
    if let Some(u) = train_set.iter().chain(dev_set).find(|u| u.features.n_mels() != model_cfg.n_mels) {
        return Err(Error::Shape(format!(
            "utterance {} has {} bands, model expects {}",
            u.source_id,
            u.features.n_mels(),
            model_cfg.n_mels
        )));
    }
    let features: Vec<Tensor<T>> = train_set.iter().map(|u| u.features.to_tensor()).collect();
    let total_frames: usize = train_set.iter().map(LabeledUtterance::len).sum();

    let mut params: MlnetParams<T> = init_params(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::new();

    let log_path = out_dir.map(|d| d.join("train.log"));
    if let Some(p) = &log_path {
        std::fs::write(p, "epoch\ttrain_loss\tdev_f1\tdev_dcf\n").map_err(|e| Error::io(p, e))?;
    }

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| utterance_gradients(&params, &features[i], &train_set[i].labels, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut sum = results[0].grads.clone();
            epoch_loss += results[0].total;
            for r in &results[1..] {
                for (acc, g) in sum.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
                epoch_loss += r.total;
            }
            adam_step(&mut params, &sum, &mut state, cfg).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
        }
        let train_loss = epoch_loss / total_frames as f64;
        let (dev_f1, dev_dcf) = if dev_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let rep = evaluate(dev_set, &params, cfg.theta, false)?;
            (rep.macro_avg.f1, rep.macro_avg.dcf)
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            dev_f1,
            dev_dcf,
        };
        on_epoch(&entry);
        log.push(entry);

        let score = if dev_set.is_empty() { -train_loss } else { dev_f1 };
        let improved = score > best.2;
        if improved {
            best = (params.clone(), epoch, score);
        }
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join(format!("epoch_{epoch}.mlnt")), &params)?;
            if improved {
                checkpoint::save(&dir.join("best.mlnt"), &params)?;
            }
        }
        if let Some(p) = &log_path {
            let mut f = OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{entry}").map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(TrainOutcome {
        last: params,
        best: best.0,
        best_epoch: best.1,
        log,
    })
}
