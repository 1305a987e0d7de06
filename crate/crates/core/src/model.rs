//! The multi-receptive-field attention network.
//!
//! For every frame, each branch sees a context window of `2r+1` frames and
//! compresses it with a gated affine unit into a fixed-width vector. A small
//! channel-attention net scores the branches from their average- and
//! max-pooled descriptors, the branch vectors are fused by the normalized
//! scores, and a two-layer bidirectional LSTM with a fully connected head
//! turns the fused sequence into per-frame speech probabilities.
//!
//! The ablation variants share the classifier and differ only in how the
//! per-frame vector is produced; see [`Variant`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const INIT_WEIGHT_RANGE: f64 = 0.05;
pub const INIT_BIAS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Flattened widest window, tanh projection, no gate.
    BilstmBase,
    /// One gated branch at the widest receptive field.
    GatedUnit,
    /// All gated branches, averaged uniformly.
    NonAttention,
    /// All gated branches, fused by channel attention.
    FullAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BilstmBase,
        Variant::GatedUnit,
        Variant::NonAttention,
        Variant::FullAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BilstmBase => "bilstm_base",
            Variant::GatedUnit => "gated_unit",
            Variant::NonAttention => "non_attention",
            Variant::FullAttention => "full_attention",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub receptive_fields: Vec<usize>,
    pub n_mels: usize,
    pub gated_dim: usize,
    pub attn_hidden: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
    pub variant: Variant,
    /// Apply a second sigmoid before normalizing the attention scores.
    pub double_sigmoid: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            receptive_fields: vec![1, 3, 5, 7, 9],
            n_mels: 40,
            gated_dim: 64,
            attn_hidden: 64,
            lstm_hidden: 64,
            lstm_layers: 2,
            fc_hidden: 64,
            variant: Variant::FullAttention,
            double_sigmoid: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.receptive_fields.is_empty() {
            return bad("receptive_fields is empty".into());
        }
        if self.receptive_fields.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("receptive_fields {:?} must be strictly increasing", self.receptive_fields));
        }
        let dims = [
            ("n_mels", self.n_mels),
            ("gated_dim", self.gated_dim),
            ("attn_hidden", self.attn_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("fc_hidden", self.fc_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn max_receptive_field(&self) -> usize {
        *self.receptive_fields.last().expect("validated non-empty")
    }

    /// Frames seen by the widest branch, `2·max(r)+1`.
    pub fn context_window(&self) -> usize {
        2 * self.max_receptive_field() + 1
    }

    /// Receptive fields of the gated branches this variant instantiates.
    pub fn branch_fields(&self) -> Vec<usize> {
        match self.variant {
            Variant::BilstmBase => Vec::new(),
            Variant::GatedUnit => vec![self.max_receptive_field()],
            Variant::NonAttention | Variant::FullAttention => self.receptive_fields.clone(),
        }
    }

    pub fn n_branches(&self) -> usize {
        self.branch_fields().len()
    }

    /// All fields as ordered `key=value` pairs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let rf = self
            .receptive_fields
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("receptive_fields".into(), rf),
            ("n_mels".into(), self.n_mels.to_string()),
            ("gated_dim".into(), self.gated_dim.to_string()),
            ("attn_hidden".into(), self.attn_hidden.to_string()),
            ("lstm_hidden".into(), self.lstm_hidden.to_string()),
            ("lstm_layers".into(), self.lstm_layers.to_string()),
            ("fc_hidden".into(), self.fc_hidden.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("double_sigmoid".into(), self.double_sigmoid.to_string()),
        ]
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            let bad = |e: &dyn fmt::Display| Error::InvalidArgument(format!("config key `{k}` = `{v}`: {e}"));
            let int = || v.parse::<usize>().map_err(|e| bad(&e));
            match k.as_str() {
                "receptive_fields" => {
                    cfg.receptive_fields = v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?
                }
                "n_mels" => cfg.n_mels = int()?,
                "gated_dim" => cfg.gated_dim = int()?,
                "attn_hidden" => cfg.attn_hidden = int()?,
                "lstm_hidden" => cfg.lstm_hidden = int()?,
                "lstm_layers" => cfg.lstm_layers = int()?,
                "fc_hidden" => cfg.fc_hidden = int()?,
                "variant" => cfg.variant = v.parse()?,
                "double_sigmoid" => cfg.double_sigmoid = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::InvalidArgument(format!("unknown model config key `{k}`"))),
            }
            seen.insert(k.as_str());
        }
        if seen.len() != 9 {
            return Err(Error::InvalidArgument("model config block is incomplete".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Name, shape and kind of every parameter, in checkpoint order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| out.push((name, shape, kind));
    let d = cfg.gated_dim;
    if cfg.variant == Variant::BilstmBase {
        push("proj.w".into(), vec![d, cfg.n_mels * cfg.context_window()], Weight);
        push("proj.b".into(), vec![d], Bias);
    }
    for (i, r) in cfg.branch_fields().into_iter().enumerate() {
        let k = cfg.n_mels * (2 * r + 1);
        push(format!("branch{i}.w_f"), vec![d, k], Weight);
        push(format!("branch{i}.b_f"), vec![d], Bias);
        push(format!("branch{i}.w_g"), vec![d, k], Weight);
        push(format!("branch{i}.b_g"), vec![d], Bias);
    }
    if cfg.variant == Variant::FullAttention {
        let n = cfg.n_branches();
        push("attn.w0".into(), vec![cfg.attn_hidden, n], Weight);
        push("attn.b0".into(), vec![cfg.attn_hidden], Bias);
        push("attn.w1".into(), vec![n, cfg.attn_hidden], Weight);
        push("attn.b1".into(), vec![n], Bias);
    }
    let h = cfg.lstm_hidden;
    for layer in 0..cfg.lstm_layers {
        let input = if layer == 0 { d } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            push(format!("lstm.l{layer}.{dir}.w_ih"), vec![4 * h, input], Weight);
            push(format!("lstm.l{layer}.{dir}.w_hh"), vec![4 * h, h], Weight);
            push(format!("lstm.l{layer}.{dir}.b"), vec![4 * h], Bias);
        }
    }
    push("head.w_h".into(), vec![cfg.fc_hidden, 2 * h], Weight);
    push("head.b_h".into(), vec![cfg.fc_hidden], Bias);
    push("head.w_out".into(), vec![1, cfg.fc_hidden], Weight);
    push("head.b_out".into(), vec![1], Bias);
    out
}

/// Every trainable tensor of one model, in [`param_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlnetParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> MlnetParams<T> {
    /// Assembles parameters, checking names and shapes against the layout of `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Shape(format!(
                "{} parameters given, {} expected for {config}",
                named.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{n}` {:?} where `{name}` {shape:?} was expected",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!("parameter `{n}` has non-finite values")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> MlnetParams<U> {
        MlnetParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every tensor to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }
}

/// Graph handles of a parameter set, parallel to [`MlnetParams::tensors`].
pub struct BoundParams {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("model has no parameter `{name}`")))
    }
}

/// Uniform(±0.05) weights and 0.1 biases, deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<MlnetParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = param_layout(cfg)
        .into_iter()
        .map(|(name, shape, kind)| {
            let n: usize = shape.iter().product();
            let data = match kind {
                ParamKind::Bias => vec![T::from_f64(INIT_BIAS); n],
                ParamKind::Weight => (0..n)
                    .map(|_| T::from_f64(rng.random_range(-INIT_WEIGHT_RANGE..INIT_WEIGHT_RANGE)))
                    .collect(),
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    MlnetParams::from_parts(cfg.clone(), named)
}

/// Stacks, for every frame `t`, frames `t-r ..= t+r` into one row
/// (time-major), replicating the first/last frame past the edges.
pub fn context_windows<T: Real>(features: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if features.rank() != 2 {
        return Err(Error::Shape(format!("features must be T×n_mels, got {:?}", features.shape())));
    }
    let (t_len, n_mels) = (features.shape()[0], features.shape()[1]);
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty feature sequence".into()));
    }
    let width = 2 * r + 1;
    let mut out = Vec::with_capacity(t_len * width * n_mels);
    for t in 0..t_len {
        for off in 0..width {
            let src = (t + off).saturating_sub(r).min(t_len - 1);
            out.extend_from_slice(features.row(src));
        }
    }
    Tensor::new(&[t_len, width * n_mels], out)
}

/// `x·wᵀ + b` for `x: T×in`, `w: out×in`, `b: out`.
pub fn affine<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul_nt(x, w)?;
    g.add(xw, b)
}

/// `tanh(x·W_fᵀ + b_f) ⊙ σ(x·W_gᵀ + b_g)`, one row per frame.
pub fn gated_affine<T: Real>(g: &mut Graph<T>, x: Var, w_f: Var, b_f: Var, w_g: Var, b_g: Var) -> Result<Var> {
    let f = affine(g, x, w_f, b_f)?;
    let f = g.tanh(f)?;
    let gate = affine(g, x, w_g, b_g)?;
    let gate = g.sigmoid(gate)?;
    g.mul(f, gate)
}

/// Handles of the shared two-layer attention net.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Raw attention scores, `T × n_branches`.
    pub a: Var,
    /// Normalized branch weights, `T × n_branches`, rows sum to one.
    pub p: Var,
    /// Attention-weighted sum of branch outputs, `T × D`.
    pub fused: Var,
}

/// Channel attention over branch outputs `qs` (each `T × D`).
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    qs: &[Var],
    w: AttentionWeights,
    double_sigmoid: bool,
) -> Result<AttentionOutput> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("attention over zero branches".into()));
    }
    let avg = qs.iter().map(|&q| g.mean_axis(q, 1)).collect::<Result<Vec<_>>>()?;
    let max = qs.iter().map(|&q| g.max_axis(q, 1)).collect::<Result<Vec<_>>>()?;
    let d_avg = g.concat(&avg, 1)?;
    let d_max = g.concat(&max, 1)?;
    let shared = |g: &mut Graph<T>, d: Var| -> Result<Var> {
        let h = affine(g, d, w.w0, w.b0)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        affine(g, h, w.w1, w.b1)
    };
    let o_avg = shared(g, d_avg)?;
    let o_max = shared(g, d_max)?;
    let logits = g.add(o_avg, o_max)?;
    let a = g.sigmoid(logits)?;
    let s = if double_sigmoid { g.sigmoid(a)? } else { a };
    let total = g.sum_axis(s, 1)?;
    let p = g.div(s, total)?;
    let fused = weighted_sum(g, qs, p)?;
    Ok(AttentionOutput { a, p, fused })
}

/// `Σ_i p[:, i] ⊙ q_i` with `p: T × n`.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, qs: &[Var], p: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &q) in qs.iter().enumerate() {
        let w = g.slice(p, 1, i, 1)?;
        let term = g.mul(w, q)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("weighted sum over zero branches".into()))
}

/// Uniform average of the branch outputs.
pub fn uniform_fusion<T: Real>(g: &mut Graph<T>, qs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = qs.split_first() else {
        return Err(Error::InvalidArgument("fusion over zero branches".into()));
    };
    let mut acc = first;
    for &q in rest {
        acc = g.add(acc, q)?;
    }
    g.scale(acc, 1.0 / qs.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

/// One LSTM direction over `x: T × in` with zero initial state; returns `T × H`.
///
/// Gate order in the stacked `4H` rows is input, forget, cell, output.
pub fn lstm_direction<T: Real>(g: &mut Graph<T>, x: Var, w: LstmWeights, reverse: bool) -> Result<Var> {
    let t_len = g.shape(x)[0];
    let h_dim = g.shape(w.w_hh)[1];
    let pre = affine(g, x, w.w_ih, w.b)?;
    let mut outputs = vec![None; t_len];
    let mut state: Option<(Var, Var)> = None;
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut z = g.slice(pre, 0, t, 1)?;
        if let Some((h, _)) = state {
            let rec = g.matmul_nt(h, w.w_hh)?;
            z = g.add(z, rec)?;
        }
        let gates = g.sigmoid(z)?;
        let i = g.slice(gates, 1, 0, h_dim)?;
        let f = g.slice(gates, 1, h_dim, h_dim)?;
        let o = g.slice(gates, 1, 3 * h_dim, h_dim)?;
        let cand = g.slice(z, 1, 2 * h_dim, h_dim)?;
        let cand = g.tanh(cand)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let c_act = g.tanh(c)?;
        let h = g.mul(o, c_act)?;
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|h| h.expect("every step visited")).collect();
    g.concat(&outputs, 0)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    pub w_h: Var,
    pub b_h: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Stacked bidirectional LSTM layers and the FC head; returns `T × 1` probabilities.
pub fn classifier<T: Real>(
    g: &mut Graph<T>,
    m: Var,
    layers: &[(LstmWeights, LstmWeights)],
    head: HeadWeights,
) -> Result<Var> {
    if g.shape(m)[0] == 0 {
        return Err(Error::InvalidArgument("classifier needs at least one frame".into()));
    }
    let mut x = m;
    for &(fwd, bwd) in layers {
        let f = lstm_direction(g, x, fwd, false)?;
        let b = lstm_direction(g, x, bwd, true)?;
        x = g.concat(&[f, b], 1)?;
    }
    let h = affine(g, x, head.w_h, head.b_h)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let logit = affine(g, h, head.w_out, head.b_out)?;
    g.sigmoid(logit)
}

/// Graph outputs of a full forward pass.
pub struct ForwardOutput {
    /// `T × 1` speech probabilities.
    pub probs: Var,
    pub attention: Option<AttentionOutput>,
    pub params: BoundParams,
}

/// Builds the whole network on `g` for features `T × n_mels`.
pub fn forward<T: Real>(g: &mut Graph<T>, params: &MlnetParams<T>, features: &Tensor<T>) -> Result<ForwardOutput> {
    let cfg = params.config();
    if features.rank() != 2 || features.shape()[1] != cfg.n_mels {
        return Err(Error::Shape(format!(
            "features {:?} do not match n_mels = {}",
            features.shape(),
            cfg.n_mels
        )));
    }
    if features.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty feature sequence".into()));
    }
    let bound = params.bind(g);
    let p = |name: &str| bound.var(name);

    let mut attention_out = None;
    let fused = if cfg.variant == Variant::BilstmBase {
        let x = g.constant(context_windows(features, cfg.max_receptive_field())?);
        let z = affine(g, x, p("proj.w")?, p("proj.b")?)?;
        g.tanh(z)?
    } else {
        let mut qs = Vec::new();
        for (i, r) in cfg.branch_fields().into_iter().enumerate() {
            let x = g.constant(context_windows(features, r)?);
            let q = gated_affine(
                g,
                x,
                p(&format!("branch{i}.w_f"))?,
                p(&format!("branch{i}.b_f"))?,
                p(&format!("branch{i}.w_g"))?,
                p(&format!("branch{i}.b_g"))?,
            )?;
            qs.push(q);
        }
        match cfg.variant {
            Variant::FullAttention => {
                let w = AttentionWeights {
                    w0: p("attn.w0")?,
                    b0: p("attn.b0")?,
                    w1: p("attn.w1")?,
                    b1: p("attn.b1")?,
                };
                let out = attention(g, &qs, w, cfg.double_sigmoid)?;
                attention_out = Some(out);
                out.fused
            }
            Variant::NonAttention => uniform_fusion(g, &qs)?,
            _ => qs[0],
        }
    };

    let layers = (0..cfg.lstm_layers)
        .map(|l| {
            let dir = |d: &str| -> Result<LstmWeights> {
                Ok(LstmWeights {
                    w_ih: p(&format!("lstm.l{l}.{d}.w_ih"))?,
                    w_hh: p(&format!("lstm.l{l}.{d}.w_hh"))?,
                    b: p(&format!("lstm.l{l}.{d}.b"))?,
                })
            };
            Ok((dir("fwd")?, dir("bwd")?))
        })
        .collect::<Result<Vec<_>>>()?;
    let head = HeadWeights {
        w_h: p("head.w_h")?,
        b_h: p("head.b_h")?,
        w_out: p("head.w_out")?,
        b_out: p("head.b_out")?,
    };
    let probs = classifier(g, fused, &layers, head)?;
    Ok(ForwardOutput {
        probs,
        attention: attention_out,
        params: bound,
    })
}

/// Raw scores `a_t` and normalized weights `p_t` for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub a: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub(crate) fn from_graph<T: Real>(g: &Graph<T>, out: &AttentionOutput) -> Self {
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            (0..t.shape()[0])
                .map(|i| t.row(i).iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        Self {
            a: rows(out.a),
            p: rows(out.p),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub trace: Option<AttentionTrace>,
}

/// Inference-mode forward pass over a feature matrix `T × n_mels`.
pub fn predict_tensor<T: Real>(params: &MlnetParams<T>, features: &Tensor<T>) -> Result<Prediction> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, features)?;
    Ok(Prediction {
        probs: g.value(out.probs).data().iter().map(|v| v.as_f64()).collect(),
        trace: out.attention.as_ref().map(|a| AttentionTrace::from_graph(&g, a)),
    })
}

/// Per-frame speech probabilities and attention traces for one recording.
pub fn mlnet_forward<T: Real>(features: &FeatureSequence, params: &MlnetParams<T>) -> Result<Prediction> {
    if features.n_mels() != params.config().n_mels {
        return Err(Error::Shape(format!(
            "features have {} bands, model expects {}",
            features.n_mels(),
            params.config().n_mels
        )));
    }
    predict_tensor(params, &features.to_tensor())
}

/// Branch `branch` applied to one `(2r+1) × n_mels` window.
pub fn gated_affine_forward<T: Real>(window: &Tensor<T>, branch: usize, params: &MlnetParams<T>) -> Result<Vec<T>> {
    let cfg = params.config();
    let fields = cfg.branch_fields();
    let r = *fields
        .get(branch)
        .ok_or_else(|| Error::InvalidArgument(format!("model has {} branches, asked for {branch}", fields.len())))?;
    let expected = [2 * r + 1, cfg.n_mels];
    if window.shape() != expected {
        return Err(Error::Shape(format!("window {:?}, branch expects {expected:?}", window.shape())));
    }
    let mut g = Graph::inference();
    let get = |g: &mut Graph<T>, suffix: &str| -> Result<Var> {
        let name = format!("branch{branch}.{suffix}");
        let t = params.get(&name).ok_or_else(|| Error::InvalidArgument(format!("missing `{name}`")))?;
        Ok(g.constant(t.clone()))
    };
    let x = g.constant(Tensor::new(&[1, window.len()], window.data().to_vec())?);
    let (wf, bf, wg, bg) = (get(&mut g, "w_f")?, get(&mut g, "b_f")?, get(&mut g, "w_g")?, get(&mut g, "b_g")?);
    let q = gated_affine(&mut g, x, wf, bf, wg, bg)?;
    Ok(g.value(q).data().to_vec())
}

/// Result of [`attention_forward`] for a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAttention<T> {
    pub a: Vec<T>,
    pub p: Vec<T>,
    pub fused: Vec<T>,
}

/// Attention fusion of one frame's branch outputs `q: n_branches × D`.
pub fn attention_forward<T: Real>(q: &Tensor<T>, params: &MlnetParams<T>) -> Result<FrameAttention<T>> {
    let cfg = params.config();
    if cfg.variant != Variant::FullAttention {
        return Err(Error::InvalidArgument(format!("variant {} has no attention", cfg.variant)));
    }
    if q.rank() != 2 || q.shape()[0] != cfg.n_branches() {
        return Err(Error::Shape(format!("q {:?} for {} branches", q.shape(), cfg.n_branches())));
    }
    let mut g = Graph::inference();
    let qs: Vec<Var> = (0..q.shape()[0])
        .map(|i| g.constant(Tensor::new(&[1, q.shape()[1]], q.row(i).to_vec()).expect("row shape")))
        .collect();
    let mut c = |name: &str| g.constant(params.get(name).expect("full_attention layout").clone());
    let w = AttentionWeights {
        w0: c("attn.w0"),
        b0: c("attn.b0"),
        w1: c("attn.w1"),
        b1: c("attn.b1"),
    };
    let out = attention(&mut g, &qs, w, cfg.double_sigmoid)?;
    Ok(FrameAttention {
        a: g.value(out.a).data().to_vec(),
        p: g.value(out.p).data().to_vec(),
        fused: g.value(out.fused).data().to_vec(),
    })
}

/// Uniform fusion of one frame's branch outputs `q: n_branches × D`.
pub fn non_attention_forward<T: Real>(q: &Tensor<T>) -> Result<Vec<T>> {
    if q.rank() != 2 || q.shape()[0] == 0 {
        return Err(Error::Shape(format!("q {:?} must be n_branches × D", q.shape())));
    }
    let mut g = Graph::inference();
    let qs: Vec<Var> = (0..q.shape()[0])
        .map(|i| g.constant(Tensor::new(&[1, q.shape()[1]], q.row(i).to_vec()).expect("row shape")))
        .collect();
    let fused = uniform_fusion(&mut g, &qs)?;
    Ok(g.value(fused).data().to_vec())
}

/// Bi-LSTM + head over an already fused sequence `m: T × D`.
pub fn classifier_forward<T: Real>(m: &Tensor<T>, params: &MlnetParams<T>) -> Result<Vec<T>> {
    let cfg = params.config();
    if m.rank() != 2 || m.shape()[1] != cfg.gated_dim {
        return Err(Error::Shape(format!("sequence {:?}, expected T × {}", m.shape(), cfg.gated_dim)));
    }
    let mut g = Graph::inference();
    let mut c = |name: String| g.constant(params.get(&name).expect("classifier layout").clone());
    let layers: Vec<(LstmWeights, LstmWeights)> = (0..cfg.lstm_layers)
        .map(|l| {
            let mut dir = |d: &str| LstmWeights {
                w_ih: c(format!("lstm.l{l}.{d}.w_ih")),
                w_hh: c(format!("lstm.l{l}.{d}.w_hh")),
                b: c(format!("lstm.l{l}.{d}.b")),
            };
            (dir("fwd"), dir("bwd"))
        })
        .collect();
    let head = HeadWeights {
        w_h: c("head.w_h".into()),
        b_h: c("head.b_h".into()),
        w_out: c("head.w_out".into()),
        b_out: c("head.b_out".into()),
    };
    let x = g.constant(m.clone());
    let probs = classifier(&mut g, x, &layers, head)?;
    Ok(g.value(probs).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            receptive_fields: vec![1, 2],
            n_mels: 3,
            gated_dim: 4,
            attn_hidden: 5,
            lstm_hidden: 3,
            lstm_layers: 2,
            fc_hidden: 4,
            variant,
            double_sigmoid: true,
        }
    }

    #[test]
    fn default_context_is_nineteen_frames() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.context_window(), 19);
        assert_eq!(cfg.n_branches(), 5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.receptive_fields = vec![1, 1, 3];
        assert!(cfg.validate().is_err());
        cfg.receptive_fields = vec![];
        assert!(cfg.validate().is_err());
        cfg.receptive_fields = vec![0, 4];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = small(Variant::NonAttention);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = cfg.to_kv();
        kv.push(("bogus".into(), "1".into()));
        assert!(ModelConfig::from_kv(&kv).is_err());
        assert!(ModelConfig::from_kv(&cfg.to_kv()[1..]).is_err());
    }

    #[test]
    fn affine_matrix_shapes_follow_receptive_fields() {
        let p = init_params::<f32>(&ModelConfig::default(), 0).unwrap();
        for (i, r) in [1usize, 3, 5, 7, 9].into_iter().enumerate() {
            assert_eq!(p.get(&format!("branch{i}.w_f")).unwrap().shape(), &[64, 40 * (2 * r + 1)]);
            assert_eq!(p.get(&format!("branch{i}.w_g")).unwrap().shape(), &[64, 40 * (2 * r + 1)]);
        }
        assert_eq!(p.get("attn.w0").unwrap().shape(), &[64, 5]);
        assert_eq!(p.get("attn.w1").unwrap().shape(), &[5, 64]);
        assert_eq!(p.get("head.w_h").unwrap().shape(), &[64, 128]);
    }

    #[test]
    fn windows_replicate_edges() {
        let f = Tensor::<f64>::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let w = context_windows(&f, 2).unwrap();
        assert_eq!(w.shape(), &[3, 5]);
        assert_eq!(w.row(0), &[1.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(w.row(2), &[1.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let p = init_params::<f64>(&small(v), 1).unwrap();
            let feats = Tensor::from_f64(&[5, 3], &[0.1; 15]).unwrap();
            let out = predict_tensor(&p, &feats).unwrap();
            assert_eq!(out.probs.len(), 5);
            assert_eq!(out.trace.is_some(), v == Variant::FullAttention);
        }
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let p = init_params::<f64>(&small(Variant::GatedUnit), 1).unwrap();
        let feats = Tensor::from_f64(&[5, 4], &[0.1; 20]).unwrap();
        assert!(predict_tensor(&p, &feats).is_err());
        let empty = Tensor::<f64>::zeros(&[0, 3]);
        assert!(predict_tensor(&p, &empty).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("attention".parse::<Variant>().is_err());
    }
}
