//! Rotary position embedding.
//!
//! Dimensions `(2i, 2i+1)` of a head vector form rotation block `i`, turned by
//! angle `pos * theta_i` with `theta_i = base^(-2i/d)`. The transposed rotation
//! turns by `-pos * theta_i`.
//!
//! With plain rotations a query at `m` and key at `n` interact through offset
//! `n - m`, which is never positive under causal attention. To let a query
//! look at succeeding keys without producing positive offsets, keys with
//! `n > m` are scored with both vectors rotated by the transpose, giving
//! offset `m - n`. Either way the offset seen is `-|n - m|`.

use crate::error::{Error, Result};
use crate::numeric::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTable<F> {
    head_dim: usize,
    base: f64,
    max_positions: usize,
    thetas: Vec<f64>,
    // [max_positions, head_dim / 2]
    cos: Vec<F>,
    sin: Vec<F>,
}

/// Which half of the score matrix a (query, key) pair falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelativeBranch {
    /// Key at or before the query (`n <= m`).
    Preceding,
    /// Key after the query (`n > m`).
    Succeeding,
}

impl RelativeBranch {
    pub fn of(query_pos: usize, key_pos: usize) -> Self {
        if key_pos <= query_pos {
            RelativeBranch::Preceding
        } else {
            RelativeBranch::Succeeding
        }
    }
}

impl<F: Real> RotaryTable<F> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(Error::OddHeadDim(head_dim));
        }
        if max_positions == 0 {
            return Err(Error::InvalidConfig("max_positions must be >= 1".into()));
        }
        if !(base > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rotary base must exceed 1 (got {base})"
            )));
        }
        let half = head_dim / 2;
        let thetas: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for m in 0..max_positions {
            for &theta in &thetas {
                let angle = m as f64 * theta;
                cos.push(F::from_f64_lossy(angle.cos()));
                sin.push(F::from_f64_lossy(angle.sin()));
            }
        }
        Ok(RotaryTable {
            head_dim,
            base,
            max_positions,
            thetas,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn theta(&self, i: usize) -> f64 {
        self.thetas[i]
    }

    pub fn cos(&self, pos: usize, i: usize) -> F {
        self.cos[pos * self.head_dim / 2 + i]
    }

    pub fn sin(&self, pos: usize, i: usize) -> F {
        self.sin[pos * self.head_dim / 2 + i]
    }

    fn check_pos(&self, pos: usize) -> Result<()> {
        if pos >= self.max_positions {
            return Err(Error::PositionOutOfRange {
                pos,
                max: self.max_positions,
            });
        }
        Ok(())
    }

    /// Rotates one head vector in place. `transposed` applies `R^T`.
    ///
    /// Panics if `pos` is outside the table; callers validate lengths up front.
    #[inline]
    pub fn rotate_in_place(&self, v: &mut [F], pos: usize, transposed: bool) {
        debug_assert_eq!(v.len(), self.head_dim);
        let half = self.head_dim / 2;
        let cos = &self.cos[pos * half..(pos + 1) * half];
        let sin = &self.sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            let (c, s) = (cos[i], if transposed { -sin[i] } else { sin[i] });
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }

    pub fn apply_rotation(&self, v: &[F], pos: usize, transposed: bool) -> Result<Vec<F>> {
        self.check_pos(pos)?;
        if v.len() != self.head_dim {
            return Err(Error::Shape {
                op: "apply_rotation",
                lhs: vec![v.len()],
                rhs: vec![self.head_dim],
            });
        }
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, pos, transposed);
        Ok(out)
    }

    /// Attention logit (before scaling) between a projected query at `m`
    /// and a projected key at `n`, using the branch rule described above.
    pub fn relative_score(&self, q_raw: &[F], k_raw: &[F], m: usize, n: usize) -> Result<F> {
        self.check_pos(m)?;
        self.check_pos(n)?;
        let transposed = RelativeBranch::of(m, n) == RelativeBranch::Succeeding;
        let q = self.apply_rotation(q_raw, m, transposed)?;
        let k = self.apply_rotation(k_raw, n, transposed)?;
        Ok(q.iter().zip(&k).fold(F::zero(), |acc, (&a, &b)| acc + a * b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thetas_for_d4() {
        let t = RotaryTable::<f64>::new(4, 8, 10000.0).unwrap();
        assert_eq!(t.theta(0), 1.0);
        assert!((t.theta(1) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let err = RotaryTable::<f64>::new(5, 8, 10000.0).unwrap_err();
        assert!(err.to_string().contains("head dimension must be even"));
    }

    #[test]
    fn position_zero_is_identity() {
        let t = RotaryTable::<f64>::new(8, 4, 10000.0).unwrap();
        for i in 0..4 {
            assert_eq!(t.cos(0, i), 1.0);
            assert_eq!(t.sin(0, i), 0.0);
        }
        let v = [0.3, -1.0, 2.0, 0.5, 1.5, -0.25, 0.0, 4.0];
        assert_eq!(t.apply_rotation(&v, 0, false).unwrap(), v.to_vec());
        assert_eq!(t.apply_rotation(&v, 0, true).unwrap(), v.to_vec());
    }

    #[test]
    fn unit_vector_rotation() {
        let t = RotaryTable::<f64>::new(2, 16, 10000.0).unwrap();
        for m in 0..16 {
            let r = t.apply_rotation(&[1.0, 0.0], m, false).unwrap();
            assert!((r[0] - (m as f64).cos()).abs() < 1e-12);
            assert!((r[1] - (m as f64).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_position() {
        let t = RotaryTable::<f64>::new(2, 4, 10000.0).unwrap();
        assert!(matches!(
            t.apply_rotation(&[1.0, 0.0], 4, false),
            Err(Error::PositionOutOfRange { pos: 4, max: 4 })
        ));
        assert!(t.relative_score(&[1.0, 0.0], &[1.0, 0.0], 0, 9).is_err());
    }

    #[test]
    fn diagonal_score_is_dot_product() {
        let t = RotaryTable::<f64>::new(4, 10, 10000.0).unwrap();
        let q = [0.5, 1.0, -2.0, 0.25];
        let k = [1.0, -1.0, 0.5, 2.0];
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        for m in 0..10 {
            assert!((t.relative_score(&q, &k, m, m).unwrap() - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn mirrored_pairs_score_alike() {
        let t = RotaryTable::<f64>::new(2, 8, 10000.0).unwrap();
        let s1 = t.relative_score(&[1.0, 0.0], &[1.0, 0.0], 2, 5).unwrap();
        let s2 = t.relative_score(&[1.0, 0.0], &[1.0, 0.0], 5, 2).unwrap();
        assert!((s1 - (-3.0f64).cos()).abs() < 1e-12);
        assert!((s1 - (-0.9899924966004454)).abs() < 1e-12);
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn branch_split() {
        assert_eq!(RelativeBranch::of(3, 3), RelativeBranch::Preceding);
        assert_eq!(RelativeBranch::of(3, 1), RelativeBranch::Preceding);
        assert_eq!(RelativeBranch::of(3, 4), RelativeBranch::Succeeding);
    }
}
