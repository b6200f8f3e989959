use rand::Rng;

use crate::numerics::{kernels, Scalar};

/// Per-position unnormalized token scores, `rows × vocab`, held in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    rows: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn new(rows: usize, vocab: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * vocab, data.len(), "logits shape mismatch");
        Self { rows, vocab, data }
    }

    pub fn from_values<F: Scalar>(rows: usize, vocab: usize, values: &[F]) -> Self {
        Self::new(rows, vocab, values.iter().map(|v| v.f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Highest-scoring token at row `i`; ties go to the lowest id.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (k, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = k;
            }
        }
        best
    }

    pub fn log_softmax(&self, i: usize) -> Vec<f64> {
        let row = self.row(i);
        let lse = kernels::log_sum_exp(row);
        row.iter().map(|&z| z - lse).collect()
    }

    /// `softmax(row / temperature)`.
    pub fn probs(&self, i: usize, temperature: f64) -> Vec<f64> {
        let mut p: Vec<f64> = self.row(i).iter().map(|&z| z / temperature).collect();
        kernels::softmax_in_place(&mut p);
        p
    }

    /// Draws a token for row `i` from `softmax(row / temperature)`.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, temperature: f64, rng: &mut R) -> usize {
        let p = self.probs(i, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k;
            }
        }
        // Rounding left `acc` a hair below 1.
        p.iter().rposition(|&pk| pk > 0.0).unwrap_or(0)
    }

    /// Certainty of row `i`: the largest log-probability.
    pub fn certainty(&self, i: usize) -> f64 {
        let row = self.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max - kernels::log_sum_exp(row)
    }
}

/// Distribution over downsampled target-length classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthPrediction {
    pub probs: Vec<f64>,
    /// Argmax class (lowest index on ties).
    pub class: usize,
}

impl LengthPrediction {
    pub fn from_logits<F: Scalar>(logits: &[F]) -> Self {
        let l = Logits::from_values(1, logits.len(), logits);
        Self { probs: l.probs(0, 1.0), class: l.argmax(0) }
    }
}
