//! Training objectives: plain next-token prediction, and the pad-corruption
//! denoising loss where output position `t` predicts the original token
//! hidden at input position `t + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMode, BoundParams, KeyExclusionMask, SequenceBatch, TransformerModel};
use crate::numeric::{Real, RngStream, Tape, Var};

const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    /// Probability that an eligible position is replaced by the pad token.
    pub p_mask: f64,
    /// Span length; 1 means independent per-position masking.
    pub span: usize,
    pub pad_id: u32,
    /// Leading positions that are never masked.
    pub protected_prefix: usize,
}

impl MaskingPolicy {
    pub fn new(pad_id: u32) -> Self {
        MaskingPolicy {
            p_mask: 0.15,
            span: 1,
            pad_id,
            protected_prefix: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::InvalidConfig(format!(
                "p_mask must lie in [0, 1] (got {})",
                self.p_mask
            )));
        }
        if self.span == 0 {
            return Err(Error::InvalidConfig("span must be >= 1".into()));
        }
        if self.protected_prefix == 0 {
            return Err(Error::InvalidConfig(
                "protected_prefix must be >= 1: position 0 has no preceding output".into(),
            ));
        }
        Ok(())
    }

    /// Per-position probability of starting a span.
    pub fn start_probability(&self) -> f64 {
        self.p_mask / self.span as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMix {
    /// Probability that a step uses next-token prediction.
    pub p_ntp: f64,
}

impl Default for ObjectiveMix {
    fn default() -> Self {
        ObjectiveMix { p_ntp: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ntp,
    Bico,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Ntp => "ntp",
            Objective::Bico => "bico",
        })
    }
}

/// Draws exactly one uniform from `rng` per call.
pub fn choose_objective(mix: &ObjectiveMix, rng: &mut RngStream) -> Objective {
    if rng.bernoulli(mix.p_ntp) {
        Objective::Ntp
    } else {
        Objective::Bico
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub original_tokens: Vec<Vec<u32>>,
    pub corrupted_tokens: Vec<Vec<u32>>,
    /// `true` where the input token was replaced by pad and must be predicted.
    pub loss_mask: Vec<Vec<bool>>,
    pub key_exclusion: Vec<KeyExclusionMask>,
    pub pad_id: u32,
}

impl CorruptedBatch {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }

    pub fn total_positions(&self) -> usize {
        self.loss_mask.iter().map(Vec::len).sum()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.total_positions().max(1) as f64
    }

    /// Rebuilds the uncorrupted sequences from the stored bookkeeping.
    pub fn restore(&self) -> Vec<Vec<u32>> {
        self.corrupted_tokens
            .iter()
            .zip(&self.loss_mask)
            .zip(&self.original_tokens)
            .map(|((c, m), o)| {
                c.iter()
                    .zip(m)
                    .zip(o)
                    .map(|((&ct, &masked), &ot)| if masked { ot } else { ct })
                    .collect()
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for b in 0..self.original_tokens.len() {
            let (o, c, m, k) = (
                &self.original_tokens[b],
                &self.corrupted_tokens[b],
                &self.loss_mask[b],
                &self.key_exclusion[b].0,
            );
            if o.len() != c.len() || o.len() != m.len() || o.len() != k.len() {
                return Err(Error::Dataset(format!("sequence {b}: ragged bookkeeping")));
            }
            for t in 0..o.len() {
                let is_pad = c[t] == self.pad_id;
                if is_pad != m[t] || m[t] != k[t] || (!m[t] && c[t] != o[t]) {
                    return Err(Error::Dataset(format!(
                        "sequence {b} position {t}: pad/loss/exclusion disagree"
                    )));
                }
            }
        }
        if self.masked_count() == 0 {
            return Err(Error::NoMaskablePositions);
        }
        Ok(())
    }
}

/// Replaces random positions with the pad token. Spans of `policy.span`
/// positions start at each eligible position with probability
/// `p_mask / span`; overlapping spans merge and spans are clipped at the end
/// of the sequence. A draw with no masked position anywhere is repeated.
pub fn corrupt_input(
    tokens: &[Vec<u32>],
    policy: &MaskingPolicy,
    rng: &mut RngStream,
) -> Result<CorruptedBatch> {
    policy.validate()?;
    if policy.p_mask == 0.0 {
        return Err(Error::NoMaskablePositions);
    }
    if tokens.iter().flatten().any(|&t| t == policy.pad_id) {
        return Err(Error::Dataset("input already contains the pad token".into()));
    }
    if tokens.iter().all(|s| s.len() <= policy.protected_prefix) {
        return Err(Error::NoMaskablePositions);
    }
    let start_p = policy.start_probability();
    for _ in 0..MAX_REDRAWS {
        let loss_mask: Vec<Vec<bool>> = tokens
            .iter()
            .map(|seq| {
                let mut mask = vec![false; seq.len()];
                for start in policy.protected_prefix..seq.len() {
                    if rng.bernoulli(start_p) {
                        let end = (start + policy.span).min(seq.len());
                        mask[start..end].iter_mut().for_each(|m| *m = true);
                    }
                }
                mask
            })
            .collect();
        if !loss_mask.iter().flatten().any(|&m| m) {
            continue;
        }
        let corrupted_tokens: Vec<Vec<u32>> = tokens
            .iter()
            .zip(&loss_mask)
            .map(|(seq, mask)| {
                seq.iter()
                    .zip(mask)
                    .map(|(&t, &m)| if m { policy.pad_id } else { t })
                    .collect()
            })
            .collect();
        let key_exclusion = loss_mask.iter().map(|m| KeyExclusionMask(m.clone())).collect();
        return Ok(CorruptedBatch {
            original_tokens: tokens.to_vec(),
            corrupted_tokens,
            loss_mask,
            key_exclusion,
            pad_id: policy.pad_id,
        });
    }
    Err(Error::NoMaskablePositions)
}

fn check_targets<F: Real>(model: &TransformerModel<F>, sequences: &[Vec<u32>]) -> Result<()> {
    let v = model.config().vocab_size;
    for &t in sequences.iter().flatten() {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
    }
    Ok(())
}

/// Mean next-token negative log-likelihood under causal attention.
pub fn ntp_loss<F: Real>(
    model: &TransformerModel<F>,
    tape: &mut Tape<F>,
    bound: &BoundParams,
    sequences: &[Vec<u32>],
) -> Result<Var> {
    if sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidConfig(
            "next-token loss needs sequences of length >= 2".into(),
        ));
    }
    check_targets(model, sequences)?;
    let batch = SequenceBatch::new(sequences, 0)?;
    let exclusion: Vec<KeyExclusionMask> =
        sequences.iter().map(|s| KeyExclusionMask::none(s.len())).collect();
    let logits = model.forward(tape, bound, &batch, AttentionMode::CausalNtp, &exclusion)?;

    let t = batch.seq_len;
    let mut targets = vec![0usize; batch.batch * t];
    let mut weights = vec![F::zero(); batch.batch * t];
    for (b, seq) in sequences.iter().enumerate() {
        for pos in 0..seq.len() - 1 {
            targets[b * t + pos] = seq[pos + 1] as usize;
            weights[b * t + pos] = F::one();
        }
    }
    tape.cross_entropy(logits, &targets, &weights)
}

/// Denoising loss: output position `t` is supervised with the original token
/// at `t + 1` exactly where that input position was replaced by pad.
pub fn bico_loss<F: Real>(
    model: &TransformerModel<F>,
    tape: &mut Tape<F>,
    bound: &BoundParams,
    batch: &CorruptedBatch,
    mode: AttentionMode,
) -> Result<Var> {
    check_targets(model, &batch.original_tokens)?;
    let seqs = SequenceBatch::new(&batch.corrupted_tokens, batch.pad_id)?;
    let logits = model.forward(tape, bound, &seqs, mode, &batch.key_exclusion)?;

    let t = seqs.seq_len;
    let mut targets = vec![0usize; seqs.batch * t];
    let mut weights = vec![F::zero(); seqs.batch * t];
    for (b, (orig, mask)) in batch.original_tokens.iter().zip(&batch.loss_mask).enumerate() {
        for pos in 0..orig.len().saturating_sub(1) {
            if mask[pos + 1] {
                targets[b * t + pos] = orig[pos + 1] as usize;
                weights[b * t + pos] = F::one();
            }
        }
    }
    tape.cross_entropy(logits, &targets, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(n: usize, len: usize) -> Vec<Vec<u32>> {
        (0..n)
            .map(|i| (0..len).map(|t| 1 + ((i + t) % 7) as u32).collect())
            .collect()
    }

    #[test]
    fn certain_masking_hits_everything_but_prefix() {
        let mut policy = MaskingPolicy::new(0);
        policy.p_mask = 1.0;
        let b = corrupt_input(&seqs(3, 9), &policy, &mut RngStream::new(1)).unwrap();
        for c in &b.corrupted_tokens {
            assert_ne!(c[0], 0);
            assert!(c[1..].iter().all(|&t| t == 0));
        }
        b.check_invariants().unwrap();
        assert_eq!(b.restore(), b.original_tokens);
    }

    #[test]
    fn zero_rate_is_rejected() {
        let mut policy = MaskingPolicy::new(0);
        policy.p_mask = 0.0;
        let err = corrupt_input(&seqs(2, 5), &policy, &mut RngStream::new(1)).unwrap_err();
        assert_eq!(err.to_string(), "BICO step requires maskable positions");
    }

    #[test]
    fn unmaskable_input_is_rejected() {
        let policy = MaskingPolicy::new(0);
        let err = corrupt_input(&[vec![4]], &policy, &mut RngStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::NoMaskablePositions));
    }

    #[test]
    fn pad_in_input_is_rejected() {
        let policy = MaskingPolicy::new(3);
        assert!(corrupt_input(&[vec![1, 3, 2]], &policy, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn tiny_rate_redraws_until_something_is_masked() {
        let mut policy = MaskingPolicy::new(0);
        policy.p_mask = 0.05;
        for seed in 0..20 {
            let b = corrupt_input(&[vec![1, 2, 3, 4]], &policy, &mut RngStream::new(seed)).unwrap();
            assert!(b.masked_count() > 0);
        }
    }

    #[test]
    fn spans_cover_multiples_of_span_length() {
        let mut policy = MaskingPolicy::new(0);
        policy.span = 3;
        policy.p_mask = 0.15;
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let b = corrupt_input(&seqs(4, 40), &policy, &mut rng).unwrap();
            for m in &b.loss_mask {
                // Every maximal run either reaches the end or has length >= span.
                let mut t = 0;
                while t < m.len() {
                    if m[t] {
                        let s = t;
                        while t < m.len() && m[t] {
                            t += 1;
                        }
                        assert!(t == m.len() || t - s >= 3, "run {s}..{t}");
                    } else {
                        t += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn objective_choice_extremes() {
        let mut rng = RngStream::new(0);
        assert!((0..1000).all(|_| choose_objective(&ObjectiveMix { p_ntp: 1.0 }, &mut rng) == Objective::Ntp));
        assert!((0..1000).all(|_| choose_objective(&ObjectiveMix { p_ntp: 0.0 }, &mut rng) == Objective::Bico));
    }
}
