//! Pre-norm decoder-only transformer with rotary attention.
//!
//! Training may run attention in [`AttentionMode::BicoBidirectional`], where
//! each query also sees the keys after it (scored with transposed rotations,
//! see [`crate::rope`]). Inference is always causal.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_checksum, load_checkpoint, parse_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::numeric::{Real, RngStream, Tape, Tensor, Var};
use crate::rope::RotaryTable;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_epsilon")]
    pub norm_epsilon: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_epsilon() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// `n_layers = 0` is accepted (embedding -> norm -> projection).
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        } else if self.n_heads > 0 && self.head_dim() % 2 != 0 {
            problems.push(format!(
                "head dimension d_model / n_heads = {} must be even",
                self.head_dim()
            ));
        }
        if !(self.rope_base > 1.0) {
            problems.push(format!("rope_base must exceed 1 (got {})", self.rope_base));
        }
        if !(self.norm_epsilon > 0.0) {
            problems.push(format!("norm_epsilon must be positive (got {})", self.norm_epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    CausalNtp,
    BicoBidirectional,
}

/// Per-sequence flags; `true` removes that position from the key set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyExclusionMask(pub Vec<bool>);

impl KeyExclusionMask {
    pub fn none(len: usize) -> Self {
        KeyExclusionMask(vec![false; len])
    }

    pub fn from_pad(tokens: &[u32], pad_id: u32) -> Self {
        KeyExclusionMask(tokens.iter().map(|&t| t == pad_id).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ragged sequences right-filled to a common length. Filler positions are
/// never attended to and never carry loss.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(sequences: &[Vec<u32>], filler: u32) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidConfig("empty sequence in batch".into()));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap();
        let mut tokens = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            tokens.extend(s.iter().map(|&t| t as usize));
            tokens.extend(std::iter::repeat(filler as usize).take(seq_len - s.len()));
        }
        Ok(SequenceBatch {
            tokens,
            batch: sequences.len(),
            seq_len,
            lengths: sequences.iter().map(Vec::len).collect(),
        })
    }

    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::new(&[tokens.to_vec()], 0)
    }
}

/// Parameter handles registered on one tape, in [`TransformerModel::names`] order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

pub struct ForwardOutput {
    pub logits: Var,
    /// Attention probabilities `[B*H, T, T]` per layer.
    pub attention: Vec<Var>,
}

const PER_LAYER: usize = 9;
const LAYER_PARTS: [&str; PER_LAYER] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

#[derive(Debug, Clone)]
pub struct TransformerModel<F: Real> {
    config: ModelConfig,
    rotary: Arc<RotaryTable<F>>,
    params: Vec<Tensor<F>>,
    names: Vec<String>,
}

fn param_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for l in 0..n_layers {
        names.extend(LAYER_PARTS.iter().map(|p| format!("layers.{l}.{p}")));
    }
    names.push("final_norm".into());
    names.push("output".into());
    names
}

fn param_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let mut shapes = vec![vec![v, d]];
    for _ in 0..c.n_layers {
        shapes.extend([
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, f],
            vec![d, f],
            vec![f, d],
        ]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![d, v]);
    shapes
}

impl<F: Real> TransformerModel<F> {
    /// Scaled-normal initialization; residual output projections are further
    /// scaled by `1/sqrt(2 * n_layers)`, norm gains start at one.
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let names = param_names(config.n_layers);
        let residual_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let params = names
            .iter()
            .zip(param_shapes(config))
            .map(|(name, shape)| {
                if name.ends_with("norm") {
                    Tensor::full(&shape, F::one())
                } else if name.ends_with(".wo") || name.ends_with(".w_down") {
                    Tensor::randn(&shape, residual_std, rng)
                } else {
                    Tensor::randn(&shape, INIT_STD, rng)
                }
            })
            .collect();
        Self::from_parts(config.clone(), params)
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let names = param_names(config.n_layers);
        let shapes = param_shapes(&config);
        if params.len() != names.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                names.len(),
                params.len()
            )));
        }
        for ((p, s), name) in params.iter().zip(&shapes).zip(&names) {
            if p.shape() != s.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected shape {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let rotary = Arc::new(RotaryTable::new(
            config.head_dim(),
            config.max_positions,
            config.rope_base,
        )?);
        Ok(TransformerModel {
            config,
            rotary,
            params,
            names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rotary(&self) -> &Arc<RotaryTable<F>> {
        &self.rotary
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<G: Real>(&self) -> TransformerModel<G> {
        TransformerModel::from_parts(
            self.config.clone(),
            self.params.iter().map(Tensor::cast).collect(),
        )
        .expect("same config")
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| tape.leaf(p.clone(), trainable))
                .collect(),
        )
    }

    /// Collects gradients after `tape.backward`; untouched parameters get zeros.
    pub fn gradients(&self, tape: &Tape<F>, bound: &BoundParams) -> Vec<Tensor<F>> {
        bound
            .0
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    fn attention_mask(
        &self,
        batch: &SequenceBatch,
        causal: bool,
        exclusion: &[KeyExclusionMask],
    ) -> Result<Tensor<F>> {
        let (b, t, h) = (batch.batch, batch.seq_len, self.config.n_heads);
        if exclusion.len() != b {
            return Err(Error::Shape {
                op: "key exclusion",
                lhs: vec![exclusion.len()],
                rhs: vec![b],
            });
        }
        let mut mask = vec![F::zero(); b * h * t * t];
        for (bi, excl) in exclusion.iter().enumerate() {
            let len = batch.lengths[bi];
            if excl.len() != len {
                return Err(Error::Shape {
                    op: "key exclusion",
                    lhs: vec![excl.len()],
                    rhs: vec![len],
                });
            }
            let blocked = |m: usize, n: usize| n >= len || excl.0[n] || (causal && n > m);
            let mut plane = vec![F::zero(); t * t];
            for m in 0..t {
                for n in 0..t {
                    if blocked(m, n) {
                        plane[m * t + n] = F::MASK_SENTINEL;
                    }
                }
            }
            for hi in 0..h {
                let off = (bi * h + hi) * t * t;
                mask[off..off + t * t].copy_from_slice(&plane);
            }
        }
        Tensor::from_vec(&[b * h, t, t], mask)
    }

    /// Multi-head self-attention for one layer on pre-normalized input
    /// `[B*T, d_model]`. Returns the projected output and the attention
    /// probabilities. `impose_causal` adds a causal mask on top of `mode`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_layer(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        layer: usize,
        x: Var,
        batch: &SequenceBatch,
        mode: AttentionMode,
        exclusion: &[KeyExclusionMask],
        impose_causal: bool,
    ) -> Result<(Var, Var)> {
        let base = 1 + layer * PER_LAYER;
        let p = |i: usize| bound.0[base + i];
        let heads = self.config.n_heads;
        let b = batch.batch;

        let q = tape.matmul(x, p(1))?;
        let k = tape.matmul(x, p(2))?;
        let v = tape.matmul(x, p(3))?;
        let q = tape.split_heads(q, b, heads)?;
        let k = tape.split_heads(k, b, heads)?;
        let v = tape.split_heads(v, b, heads)?;

        let q_rot = tape.rotary(q, &self.rotary, false)?;
        let k_rot = tape.rotary(k, &self.rotary, false)?;
        let preceding = tape.batch_matmul(q_rot, k_rot, true)?;
        let scores = match mode {
            AttentionMode::CausalNtp => preceding,
            AttentionMode::BicoBidirectional => {
                let q_t = tape.rotary(q, &self.rotary, true)?;
                let k_t = tape.rotary(k, &self.rotary, true)?;
                let succeeding = tape.batch_matmul(q_t, k_t, true)?;
                tape.causal_merge(preceding, succeeding)?
            }
        };
        let scale = F::one() / F::from_usize(self.config.head_dim()).unwrap().sqrt();
        let scores = tape.scale(scores, scale);
        let causal = impose_causal || mode == AttentionMode::CausalNtp;
        let mask = self.attention_mask(batch, causal, exclusion)?;
        let probs = tape.softmax_rows(scores, Some(&mask))?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let merged = tape.merge_heads(ctx, b)?;
        let out = tape.matmul(merged, p(4))?;
        Ok((out, probs))
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        batch: &SequenceBatch,
        mode: AttentionMode,
        exclusion: &[KeyExclusionMask],
        impose_causal: bool,
    ) -> Result<ForwardOutput> {
        if batch.seq_len > self.config.max_positions {
            return Err(Error::PositionOutOfRange {
                pos: batch.seq_len - 1,
                max: self.config.max_positions,
            });
        }
        let eps = self.config.norm_epsilon;
        let mut x = tape.embedding(bound.0[0], &batch.tokens)?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let base = 1 + layer * PER_LAYER;
            let p = |i: usize| bound.0[base + i];
            let h = tape.rms_norm(x, p(0), eps)?;
            let (attn, probs) = self.attention_layer(
                tape,
                bound,
                layer,
                h,
                batch,
                mode,
                exclusion,
                impose_causal,
            )?;
            attention.push(probs);
            x = tape.add(x, attn)?;

            let h = tape.rms_norm(x, p(5), eps)?;
            let gate = tape.matmul(h, p(6))?;
            let gate = tape.silu(gate);
            let up = tape.matmul(h, p(7))?;
            let hidden = tape.mul(gate, up)?;
            let ff = tape.matmul(hidden, p(8))?;
            x = tape.add(x, ff)?;
        }
        let n = bound.0.len();
        let h = tape.rms_norm(x, bound.0[n - 2], eps)?;
        let logits = tape.matmul(h, bound.0[n - 1])?;
        Ok(ForwardOutput { logits, attention })
    }

    /// Logits `[B*T, vocab]` for a batch.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        batch: &SequenceBatch,
        mode: AttentionMode,
        exclusion: &[KeyExclusionMask],
    ) -> Result<Var> {
        Ok(self
            .forward_with(tape, bound, batch, mode, exclusion, false)?
            .logits)
    }

    /// Untracked forward pass over one sequence; logits `[T, vocab]`.
    pub fn logits(
        &self,
        tokens: &[u32],
        mode: AttentionMode,
        exclusion: &KeyExclusionMask,
    ) -> Result<Tensor<F>> {
        let batch = SequenceBatch::single(tokens)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &bound, &batch, mode, std::slice::from_ref(exclusion))?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy autoregressive continuation under causal attention. The
    /// returned sequence includes the prompt and, if emitted, `stop_id`.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize, stop_id: u32) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::InvalidConfig("greedy_decode needs a non-empty prompt".into()));
        }
        if prompt.len() + max_new > self.config.max_positions {
            return Err(Error::PositionOutOfRange {
                pos: prompt.len() + max_new - 1,
                max: self.config.max_positions,
            });
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.logits(&seq, AttentionMode::CausalNtp, &KeyExclusionMask::none(seq.len()))?;
            let next = argmax(logits.row(seq.len() - 1)) as u32;
            seq.push(next);
            if next == stop_id {
                break;
            }
        }
        Ok(seq)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
