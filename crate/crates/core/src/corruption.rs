//! The fixed corruption process: a uniform corruption proportion, an
//! independent Bernoulli position mask, and uniform replacement tokens.

use rand::Rng;

use crate::data::TokenId;
use crate::error::{bail_arg, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSample {
    pub corrupted: Vec<TokenId>,
    /// Sampled expected corruption proportion.
    pub alpha: f64,
    /// `true` where the original token was replaced.
    pub mask: Vec<bool>,
    /// The replacement draw, one token per position.
    pub noise: Vec<TokenId>,
}

/// `(1 - mask) * x + mask * noise`, elementwise.
pub fn apply_mask(x: &[TokenId], mask: &[bool], noise: &[TokenId]) -> Vec<TokenId> {
    x.iter().zip(mask).zip(noise).map(|((&t, &m), &n)| if m { n } else { t }).collect()
}

/// Draws `alpha ~ U[0,1]`, then corrupts with [`corrupt_with_alpha`].
pub fn corrupt<R: Rng + ?Sized>(x: &[TokenId], vocab_size: usize, rng: &mut R) -> CorruptionSample {
    let alpha = rng.gen::<f64>();
    corrupt_with_alpha(x, vocab_size, alpha, rng)
}

/// Corrupts every position (PAD included) independently with probability
/// `alpha`, replacing it by a token uniform over the whole vocabulary.
///
/// The mask and noise draws never look at `x`, so two inputs corrupted from
/// identical rng states receive identical masks and noise.
pub fn corrupt_with_alpha<R: Rng + ?Sized>(
    x: &[TokenId],
    vocab_size: usize,
    alpha: f64,
    rng: &mut R,
) -> CorruptionSample {
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() < alpha).collect();
    let noise: Vec<TokenId> = (0..x.len()).map(|_| rng.gen_range(0..vocab_size as TokenId)).collect();
    CorruptionSample { corrupted: apply_mask(x, &mask, &noise), alpha, mask, noise }
}

/// Per-token transition matrix `Q = (1-p) I + p V` with `V = 1/v` everywhere;
/// row `a`, column `b` is the probability that token `a` becomes `b` when
/// positions are corrupted with probability `corrupt_prob`.
pub fn corruption_matrix(corrupt_prob: f64, vocab_size: usize) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&corrupt_prob) {
        bail_arg!("corruption probability {corrupt_prob} outside [0, 1]");
    }
    if vocab_size < 2 {
        bail_arg!("vocabulary size must be at least 2");
    }
    let off = corrupt_prob / vocab_size as f64;
    Ok((0..vocab_size)
        .map(|a| {
            (0..vocab_size)
                .map(|b| if a == b { 1.0 - corrupt_prob + off } else { off })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_alpha_is_identity() {
        let x = vec![3, 4, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = corrupt_with_alpha(&x, 8, 0.0, &mut rng);
        assert!(s.mask.iter().all(|&m| !m));
        assert_eq!(s.corrupted, x);
    }

    #[test]
    fn full_mask_gives_noise() {
        let x = vec![3, 4, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = corrupt_with_alpha(&x, 8, 1.0, &mut rng);
        assert!(s.mask.iter().all(|&m| m));
        assert_eq!(s.corrupted, s.noise);
    }

    #[test]
    fn corruption_is_content_independent() {
        let a = corrupt(&[2, 3, 4, 5, 6], 9, &mut ChaCha8Rng::seed_from_u64(42));
        let b = corrupt(&[8, 8, 0, 0, 0], 9, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!((a.alpha, &a.mask, &a.noise), (b.alpha, &b.mask, &b.noise));
        let c = corrupt(&[2, 3, 4, 5, 6], 9, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, c);
    }

    #[test]
    fn matrix_edge_cases() {
        let q = corruption_matrix(0.0, 4).unwrap();
        for (a, row) in q.iter().enumerate() {
            for (b, &p) in row.iter().enumerate() {
                assert_eq!(p, if a == b { 1.0 } else { 0.0 });
            }
        }
        let q = corruption_matrix(1.0, 4).unwrap();
        assert!(q.iter().flatten().all(|&p| (p - 0.25).abs() < 1e-15));
        for p in [0.0, 0.13, 0.5, 0.99, 1.0] {
            for row in corruption_matrix(p, 7).unwrap() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(corruption_matrix(1.5, 4).is_err());
        assert!(corruption_matrix(0.5, 1).is_err());
    }
}
