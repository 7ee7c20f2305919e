//! Adam, the mixed-objective training loop, and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::TestItem;
use crate::error::{Error, Result};
use crate::model::{argmax, AttentionMode, KeyExclusionMask, TransformerModel};
use crate::numeric::{Real, RngStream, Tape, Tensor};
use crate::objectives::{
    bico_loss, choose_objective, corrupt_input, ntp_loss, MaskingPolicy, Objective, ObjectiveMix,
};

/// Names of the independent random substreams drawn from the run seed.
pub mod streams {
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const OBJECTIVE: &str = "objective";
    pub const CORRUPTION: &str = "corruption";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Taken from the run seed; not a config key.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "defaults::p_mask")]
    pub p_mask: f64,
    #[serde(default = "defaults::span")]
    pub span: usize,
    #[serde(default = "defaults::p_ntp")]
    pub p_ntp: f64,
    /// Attention used by denoising steps; NTP steps are always causal.
    #[serde(default = "defaults::bico_attention")]
    pub bico_attention: AttentionMode,
}

mod defaults {
    use crate::model::AttentionMode;
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn p_mask() -> f64 {
        0.15
    }
    pub fn span() -> usize {
        1
    }
    pub fn p_ntp() -> f64 {
        0.5
    }
    pub fn bico_attention() -> AttentionMode {
        AttentionMode::BicoBidirectional
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            clip_norm: defaults::clip_norm(),
            seed: 0,
            p_mask: defaults::p_mask(),
            span: defaults::span(),
            p_ntp: defaults::p_ntp(),
            bico_attention: defaults::bico_attention(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            bad.push("adam_eps must be positive");
        }
        if self.clip_norm <= 0.0 {
            bad.push("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_ntp) {
            bad.push("p_ntp must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            bad.push("p_mask must lie in [0, 1]");
        }
        if self.span == 0 {
            bad.push("span must be >= 1");
        }
        if self.p_ntp < 1.0 && self.p_mask == 0.0 {
            bad.push("p_mask must be positive when denoising steps can occur");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    pub fn masking_policy(&self, pad_id: u32) -> MaskingPolicy {
        MaskingPolicy {
            p_mask: self.p_mask,
            span: self.span,
            pad_id,
            protected_prefix: 1,
        }
    }

    pub fn objective_mix(&self) -> ObjectiveMix {
        ObjectiveMix { p_ntp: self.p_ntp }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Bias-corrected Adam update after clipping the global gradient norm to
/// `config.clip_norm`. Returns the pre-clip norm. Non-finite gradients leave
/// parameters and state untouched.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    config: &TrainConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step: state.step as usize,
        });
    }
    let clip = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let f = F::from_f64_lossy;
    let (b1f, b2f, clipf) = (f(b1), f(b2), f(clip));
    let (one_b1, one_b2) = (f(1.0 - b1), f(1.0 - b2));
    let (c1f, c2f, lr, eps) = (f(c1), f(c2), f(config.learning_rate), f(config.adam_eps));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi * clipf;
            *mi = b1f * *mi + one_b1 * gi;
            *vi = b2f * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1f;
            let v_hat = *vi / c2f;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub objective: Objective,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_fraction: Option<f64>,
    pub grad_norm: f64,
}

pub fn steps_per_epoch(examples: usize, batch_size: usize) -> usize {
    examples.div_ceil(batch_size)
}

/// Trains `model` in place. Each epoch reshuffles the training set; each
/// step chooses one objective. On divergence the model keeps the parameters
/// of the last completed step.
pub fn train<F: Real>(
    model: &mut TransformerModel<F>,
    sequences: &[Vec<u32>],
    config: &TrainConfig,
    pad_id: u32,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let policy = config.masking_policy(pad_id);
    let mix = config.objective_mix();
    let mut shuffle_rng = RngStream::substream(config.seed, streams::SHUFFLE);
    let mut objective_rng = RngStream::substream(config.seed, streams::OBJECTIVE);
    let mut corruption_rng = RngStream::substream(config.seed, streams::CORRUPTION);
    let mut adam = AdamState::new(model.params());
    let mut records = Vec::with_capacity(config.epochs * steps_per_epoch(sequences.len(), config.batch_size));
    let mut order: Vec<usize> = (0..sequences.len()).collect();

    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let step = records.len();
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let objective = choose_objective(&mix, &mut objective_rng);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Divergence { step },
                other => other,
            };
            let (loss, masked_fraction) = match objective {
                Objective::Ntp => (ntp_loss(model, &mut tape, &bound, &batch).map_err(diverged)?, None),
                Objective::Bico => {
                    let corrupted = corrupt_input(&batch, &policy, &mut corruption_rng)?;
                    let loss =
                        bico_loss(model, &mut tape, &bound, &corrupted, config.bico_attention).map_err(diverged)?;
                    (loss, Some(corrupted.masked_fraction()))
                }
            };
            let loss_value = tape.value(loss).item().to_f64().unwrap();
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step });
            }
            tape.backward(loss).map_err(diverged)?;
            let grads = model.gradients(&tape, &bound);
            drop(tape);
            let grad_norm = adam_step(model.params_mut(), &grads, &mut adam, config)
                .map_err(|e| match e {
                    Error::Divergence { .. } => Error::Divergence { step },
                    other => other,
                })?;
            let record = StepRecord {
                step,
                epoch,
                objective,
                loss: loss_value,
                masked_fraction,
                grad_norm,
            };
            on_step(&record);
            records.push(record);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub prompt: Vec<u32>,
    pub gold: Vec<u32>,
    pub prediction: Vec<u32>,
    pub matched: bool,
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_match_rate: f64,
    pub mean_likelihood: f64,
    pub items: Vec<ItemRecord>,
}

/// Extra decoding budget beyond the gold completion length.
pub const DECODE_MARGIN: usize = 4;

/// `exp(-NLL)` of `completion` given `prompt`, summing only over completion
/// positions.
pub fn sequence_likelihood<F: Real>(
    model: &TransformerModel<F>,
    prompt: &[u32],
    completion: &[u32],
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("likelihood needs a non-empty prompt".into()));
    }
    if completion.is_empty() {
        return Ok(1.0);
    }
    let full: Vec<u32> = prompt.iter().chain(completion).copied().collect();
    let logits = model.logits(&full, AttentionMode::CausalNtp, &KeyExclusionMask::none(full.len()))?;
    let mut nll = 0.0;
    for (j, &tok) in completion.iter().enumerate() {
        let row: Vec<f64> = logits.row(prompt.len() - 1 + j).iter().map(|x| x.to_f64().unwrap()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[tok as usize];
    }
    Ok((-nll).exp())
}

/// Greedy completion of `item.prompt`, stopping at `item.stop` or after
/// `gold length + DECODE_MARGIN` tokens. The stop token is not part of the
/// returned completion.
pub fn predict<F: Real>(model: &TransformerModel<F>, item: &TestItem) -> Result<Vec<u32>> {
    let budget = (item.completion.len() + DECODE_MARGIN)
        .min(model.config().max_positions.saturating_sub(item.prompt.len()));
    let out = model.greedy_decode(&item.prompt, budget, item.stop)?;
    let mut completion = out[item.prompt.len()..].to_vec();
    if completion.last() == Some(&item.stop) {
        completion.pop();
    }
    Ok(completion)
}

pub fn evaluate_item<F: Real>(model: &TransformerModel<F>, item: &TestItem) -> Result<ItemRecord> {
    let prediction = predict(model, item)?;
    let likelihood = sequence_likelihood(model, &item.prompt, &item.completion)?;
    Ok(ItemRecord {
        prompt: item.prompt.clone(),
        gold: item.completion.clone(),
        matched: prediction == item.completion,
        prediction,
        likelihood,
    })
}

pub fn summarize(items: Vec<ItemRecord>) -> EvalReport {
    let n = items.len().max(1) as f64;
    EvalReport {
        exact_match_rate: items.iter().filter(|r| r.matched).count() as f64 / n,
        mean_likelihood: items.iter().map(|r| r.likelihood).sum::<f64>() / n,
        items,
    }
}

pub fn evaluate_em<F: Real>(model: &TransformerModel<F>, items: &[TestItem]) -> Result<EvalReport> {
    let records = items
        .iter()
        .map(|it| evaluate_item(model, it))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(records))
}

/// Index of the most likely next token after `context`.
pub fn next_token<F: Real>(model: &TransformerModel<F>, context: &[u32]) -> Result<u32> {
    let logits = model.logits(context, AttentionMode::CausalNtp, &KeyExclusionMask::none(context.len()))?;
    Ok(argmax(logits.row(context.len() - 1)) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut params = vec![scalar(1.0)];
        let mut st = AdamState::new(&params);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            clip_norm: 10.0,
            ..TrainConfig::default()
        };
        adam_step(&mut params, &[scalar(2.0)], &mut st, &cfg).unwrap();
        assert!((params[0].item() - 0.9).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![scalar(0.5)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[scalar(0.0)], &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(params[0].item(), 0.5);
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(&params);
        let cfg = TrainConfig {
            clip_norm: 1.0,
            ..TrainConfig::default()
        };
        let g = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let norm = adam_step(&mut params, &[g], &mut st, &cfg).unwrap();
        assert_eq!(norm, 5.0);
        // The first moment holds (1 - beta1) times the clipped gradient.
        let m = st.m[0].to_f64_vec();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut params = vec![scalar(0.5)];
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &[scalar(f64::NAN)], &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("divergence detected"));
        assert_eq!(params[0].item(), 0.5);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn uniform_model_likelihood() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_positions: 8,
            rope_base: 10000.0,
            norm_epsilon: 1e-5,
        };
        let mut m = TransformerModel::<f64>::init(&cfg, &mut RngStream::new(0)).unwrap();
        let out = m.param_mut("output").unwrap();
        out.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let l = sequence_likelihood(&m, &[1, 2], &[3, 4]).unwrap();
        assert!((l - 1.0 / 256.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn step_accounting() {
        assert_eq!(steps_per_epoch(1200, 32), 38);
        assert_eq!(steps_per_epoch(1, 32), 1);
        assert_eq!(steps_per_epoch(64, 32), 2);
    }

    #[test]
    fn config_rejects_bad_values() {
        let cfg = TrainConfig {
            batch_size: 0,
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size") && msg.contains("clip_norm"), "{msg}");
    }
}
