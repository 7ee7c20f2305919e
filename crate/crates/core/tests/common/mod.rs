#![allow(dead_code)]

use std::sync::Arc;

use bico_core::model::{AttentionMode, BoundParams, KeyExclusionMask, ModelConfig, SequenceBatch, TransformerModel};
use bico_core::numeric::{grad_check_many, GradCheckReport, Real, RngStream, Tape, Tensor, Var};
use bico_core::rope::RotaryTable;
use bico_core::Result;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        max_positions: 16,
        rope_base: 10000.0,
        norm_epsilon: 1e-5,
    }
}

/// A model whose weights are large enough that every gradient coordinate is
/// well above finite-difference noise.
pub fn rough_model(config: &ModelConfig, seed: u64) -> TransformerModel<f64> {
    let mut rng = RngStream::new(seed);
    let mut m = TransformerModel::<f64>::init(config, &mut rng).unwrap();
    let names = m.names().to_vec();
    for (name, p) in names.iter().zip(m.params_mut()) {
        let noise = Tensor::<f64>::randn(p.shape(), 1.0, &mut rng);
        let gain = name.ends_with("norm");
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x = if gain { 1.0 + 0.2 * n } else { 0.4 * n };
        }
    }
    m
}

/// Checks the gradient of `loss` with respect to every parameter.
pub fn model_grad_check<L>(model: &TransformerModel<f64>, loss: L, eps: f64) -> GradCheckReport
where
    L: Fn(&TransformerModel<f64>, &mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| loss(model, tape, &BoundParams(vars.to_vec())),
        model.params(),
        eps,
    )
    .unwrap()
}

pub fn random_tokens(rng: &mut RngStream, len: usize, lo: u32, hi: u32) -> Vec<u32> {
    (0..len)
        .map(|_| lo + rng.below((hi - lo) as usize) as u32)
        .collect()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed))
}

/// Contracts `out` with fixed random weights so every gradient entry is O(1).
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(out), seed));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

pub type PrimitiveCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// One small loss per tape primitive, each reducing to an O(1) scalar.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let table = Arc::new(RotaryTable::<f64>::new(4, 8, 10000.0).unwrap());
    let t1 = Arc::clone(&table);
    let t2 = Arc::clone(&table);
    let mut mask = Tensor::<f64>::zeros(&[2, 3, 3]);
    mask.data_mut()[1] = f64::MASK_SENTINEL;
    mask.data_mut()[13] = f64::MASK_SENTINEL;
    vec![
        ("add", vec![randn(&[3, 2], 1), randn(&[3, 2], 2)], Box::new(|t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o, 9)
        })),
        ("add_bias", vec![randn(&[3, 2], 1), randn(&[2], 2)], Box::new(|t, v| {
            let o = t.add_bias(v[0], v[1])?;
            project(t, o, 9)
        })),
        ("mul", vec![randn(&[4], 1), randn(&[4], 2)], Box::new(|t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o, 9)
        })),
        ("scale", vec![randn(&[4], 1)], Box::new(|t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, 9)
        })),
        ("silu", vec![randn(&[6], 1)], Box::new(|t, v| {
            let o = t.silu(v[0]);
            project(t, o, 9)
        })),
        ("softmax", vec![randn(&[2, 3, 3], 1)], Box::new(move |t, v| {
            let o = t.softmax_rows(v[0], Some(&mask))?;
            project(t, o, 9)
        })),
        ("rms_norm", vec![randn(&[3, 4], 1), randn(&[4], 2)], Box::new(|t, v| {
            let o = t.rms_norm(v[0], v[1], 1e-5)?;
            project(t, o, 9)
        })),
        ("embedding", vec![randn(&[5, 3], 1)], Box::new(|t, v| {
            let o = t.embedding(v[0], &[4, 0, 4, 2])?;
            project(t, o, 9)
        })),
        ("heads", vec![randn(&[6, 4], 1)], Box::new(|t, v| {
            let s = t.split_heads(v[0], 2, 2)?;
            let w = t.constant(randn(&[4, 3, 2], 5));
            let s = t.mul(s, w)?;
            let o = t.merge_heads(s, 2)?;
            project(t, o, 9)
        })),
        ("rotary", vec![randn(&[2, 5, 4], 1)], Box::new(move |t, v| {
            let a = t.rotary(v[0], &t1, false)?;
            let b = t.rotary(v[0], &t2, true)?;
            let o = t.add(a, b)?;
            let o = t.mul(o, o)?;
            project(t, o, 9)
        })),
        ("batch_matmul", vec![randn(&[2, 3, 4], 1), randn(&[2, 4, 2], 2), randn(&[2, 5, 4], 3)], Box::new(|t, v| {
            let a = t.batch_matmul(v[0], v[1], false)?;
            let b = t.batch_matmul(v[0], v[2], true)?;
            let (pa, pb) = (project(t, a, 8)?, project(t, b, 9)?);
            t.add(pa, pb)
        })),
        ("causal_merge", vec![randn(&[2, 3, 3], 1), randn(&[2, 3, 3], 2)], Box::new(|t, v| {
            let o = t.causal_merge(v[0], v[1])?;
            project(t, o, 9)
        })),
        ("cross_entropy", vec![randn(&[4, 6], 1)], Box::new(|t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 2], &[1.0, 0.0, 1.0, 1.0])
        })),
    ]
}

pub fn vec_of(rng: &mut RngStream, d: usize) -> Vec<f64> {
    (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rotation by an arbitrary (possibly negative) angle multiple, computed
/// directly from the frequency formula.
pub fn rotate_by(v: &[f64], steps: f64, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let theta = (-(2.0 * i as f64 / d as f64) * base.ln()).exp();
        let (s, c) = (steps * theta).sin_cos();
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}


pub fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

pub fn run(
    model: &TransformerModel<f64>,
    seqs: &[Vec<u32>],
    mode: AttentionMode,
    excl: &[KeyExclusionMask],
    impose_causal: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let batch = SequenceBatch::new(seqs, 0).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = model
        .forward_with(&mut tape, &bound, &batch, mode, excl, impose_causal)
        .unwrap();
    (
        tape.value(out.logits).data().to_vec(),
        out.attention.iter().map(|a| tape.value(*a).data().to_vec()).collect(),
    )
}

pub fn no_exclusion(seqs: &[Vec<u32>]) -> Vec<KeyExclusionMask> {
    seqs.iter().map(|s| KeyExclusionMask::none(s.len())).collect()
}


/// Next-token targets under either attention mode. Under causal attention
/// this is the training loss; under bidirectional attention it only serves
/// gradient checks.
pub fn next_token_targets_loss(
    model: &TransformerModel<f64>,
    tape: &mut Tape<f64>,
    bound: &BoundParams,
    seqs: &[Vec<u32>],
    mode: AttentionMode,
) -> Result<Var> {
    let batch = SequenceBatch::new(seqs, 0)?;
    let logits = model.forward(tape, bound, &batch, mode, &no_exclusion(seqs))?;
    let t = batch.seq_len;
    let mut targets = vec![0usize; batch.batch * t];
    let mut weights = vec![0.0; batch.batch * t];
    for (b, s) in seqs.iter().enumerate() {
        for pos in 0..s.len() - 1 {
            targets[b * t + pos] = s[pos + 1] as usize;
            weights[b * t + pos] = 1.0;
        }
    }
    tape.cross_entropy(logits, &targets, &weights)
}
