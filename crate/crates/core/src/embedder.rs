//! Learnable token embedding tables.
//!
//! Rows live on the unit sphere: initialization normalizes, and every
//! gradient step is projected back by renormalizing (projected ascent).
//! Gradients accumulate into `grad_rows` and are consumed by
//! [`EmbeddingTable::apply_gradients`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::math::normalize_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TableData", into = "TableData")]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
    grad_rows: Vec<Vec<f64>>,
}

/// On-disk shape: the gradient accumulator is transient state.
#[derive(Serialize, Deserialize)]
struct TableData {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl From<TableData> for EmbeddingTable {
    fn from(d: TableData) -> Self {
        let grad_rows = vec![vec![0.0; d.dim]; d.rows.len()];
        EmbeddingTable {
            dim: d.dim,
            rows: d.rows,
            grad_rows,
        }
    }
}

impl From<EmbeddingTable> for TableData {
    fn from(t: EmbeddingTable) -> Self {
        TableData {
            dim: t.dim,
            rows: t.rows,
        }
    }
}

impl EmbeddingTable {
    /// Seeded uniform init on [-0.5, 0.5], then unit-normalized per row.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
            normalize_in_place(&mut row);
            rows.push(row);
        }
        let grad_rows = vec![vec![0.0; dim]; vocab_size];
        Ok(EmbeddingTable { dim, rows, grad_rows })
    }

    /// Builds a table from explicit rows (oracle embedders and tests).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidConfig("ragged embedding rows".into()));
        }
        let grad_rows = vec![vec![0.0; dim]; rows.len()];
        Ok(EmbeddingTable { dim, rows, grad_rows })
    }

    /// Overwrites one coordinate of a raw row without renormalizing.
    /// Finite-difference probes only; training never calls this.
    pub fn perturb_raw(&mut self, token: TokenId, coord: usize, delta: f64) {
        self.rows[token][coord] += delta;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, token: TokenId) -> &[f64] {
        &self.rows[token]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One vector per token id; the vectors are the current rows.
    pub fn encode(&self, token_ids: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        token_ids
            .iter()
            .map(|&t| {
                self.rows
                    .get(t)
                    .cloned()
                    .ok_or(Error::TokenOutOfRange {
                        token: t,
                        vocab_size: self.rows.len(),
                    })
            })
            .collect()
    }

    /// Adds `coeff * g` to the gradient accumulator of `token`.
    pub fn accumulate_grad(&mut self, token: TokenId, coeff: f64, g: &[f64]) {
        let acc = &mut self.grad_rows[token];
        for (a, &gi) in acc.iter_mut().zip(g) {
            *a += coeff * gi;
        }
    }

    pub fn grad_row(&self, token: TokenId) -> &[f64] {
        &self.grad_rows[token]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grad_rows.iter_mut() {
            for x in g.iter_mut() {
                *x = 0.0;
            }
        }
    }

    /// Gradient-ascent step `rows += lr * grad_rows`, then projection back
    /// onto the unit sphere; the accumulator is zeroed. `lr == 0` leaves the
    /// rows bit-identical. Negative rates are rejected.
    pub fn apply_gradients(&mut self, learning_rate: f64) -> Result<()> {
        if learning_rate < 0.0 || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        if learning_rate == 0.0 {
            self.zero_grads();
            return Ok(());
        }
        for (i, (row, grad)) in self.rows.iter_mut().zip(&self.grad_rows).enumerate() {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient for embedding row {i}"),
                });
            }
            for (r, &g) in row.iter_mut().zip(grad) {
                *r += learning_rate * g;
            }
            normalize_in_place(row);
        }
        self.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, l2_norm};

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = EmbeddingTable::init(10, 16, 7).unwrap();
        let b = EmbeddingTable::init(10, 16, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rows_are_unit_length() {
        let t = EmbeddingTable::init(10, 16, 7).unwrap();
        for row in t.rows() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = EmbeddingTable::init(10, 16, 7).unwrap();
        let b = EmbeddingTable::init(10, 16, 8).unwrap();
        // oracle: elementwise compare
        let differs = a
            .rows()
            .iter()
            .zip(b.rows())
            .any(|(ra, rb)| ra.iter().zip(rb).any(|(x, y)| x != y));
        assert!(differs);
    }

    #[test]
    fn dim_below_two_rejected() {
        assert!(matches!(
            EmbeddingTable::init(4, 1, 0).unwrap_err(),
            Error::DimTooSmall(1)
        ));
    }

    #[test]
    fn encode_empty_and_identity_and_repeats() {
        let t = EmbeddingTable::init(5, 4, 3).unwrap();
        assert!(t.encode(&[]).unwrap().is_empty());
        assert_eq!(t.encode(&[2]).unwrap()[0], t.row(2).to_vec());
        let two = t.encode(&[2, 2]).unwrap();
        assert_eq!(two[0], two[1]);
    }

    #[test]
    fn encode_out_of_range_errors() {
        let t = EmbeddingTable::init(5, 4, 3).unwrap();
        assert!(matches!(
            t.encode(&[5]).unwrap_err(),
            Error::TokenOutOfRange { token: 5, .. }
        ));
    }

    #[test]
    fn zero_gradient_leaves_rows_unchanged() {
        let mut t = EmbeddingTable::init(5, 4, 3).unwrap();
        let before = t.rows().to_vec();
        t.apply_gradients(0.1).unwrap();
        // renormalizing an already-unit row moves it by < 1e-15
        for (a, b) in before.iter().zip(t.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn radial_gradient_is_null_under_projection() {
        let mut t = EmbeddingTable::init(5, 4, 3).unwrap();
        let before = t.row(1).to_vec();
        let radial = before.clone();
        t.accumulate_grad(1, 1.0, &radial);
        t.apply_gradients(0.5).unwrap();
        for (x, y) in before.iter().zip(t.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_row() {
        let mut t = EmbeddingTable::init(5, 4, 3).unwrap();
        t.accumulate_grad(2, 1.0, &[f64::NAN, 0.0, 0.0, 0.0]);
        let err = t.apply_gradients(0.1).unwrap_err();
        match err {
            Error::NonFinite { what } => assert!(that_names_row(&what, 2)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn that_names_row(msg: &str, row: usize) -> bool {
        msg.contains(&row.to_string())
    }

    #[test]
    fn small_tangential_step_increases_smooth_objective() {
        // objective f(rows) = dot(row_0, target); gradient = target
        let mut t = EmbeddingTable::init(5, 4, 9).unwrap();
        let target = {
            let mut v = vec![0.3, -0.2, 0.9, 0.1];
            normalize_in_place(&mut v);
            v
        };
        let before = dot(t.row(0), &target);
        t.accumulate_grad(0, 1.0, &target);
        t.apply_gradients(1e-3).unwrap();
        let after = dot(t.row(0), &target);
        assert!(after > before, "projected ascent must not decrease the objective");
    }

    #[test]
    fn rows_stay_unit_after_steps() {
        let mut t = EmbeddingTable::init(6, 8, 2).unwrap();
        for step in 0..5 {
            for tok in 0..6 {
                let g: Vec<f64> = (0..8).map(|i| ((tok + i + step) as f64).sin()).collect();
                t.accumulate_grad(tok, 1.0, &g);
            }
            t.apply_gradients(0.2).unwrap();
            for row in t.rows() {
                assert!((l2_norm(row) - 1.0).abs() < 1e-9);
            }
        }
    }
}
