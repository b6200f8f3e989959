//! Exact chain probabilities on a tiny model: every multi-step distribution
//! sums to one, and the two-step likelihood obeys the Jensen bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::model::{init_model, DenoiserModel, ModelConfig};
use sundae::sampling::{exact_chain_prob, jensen_check};

fn main() -> sundae::Result<()> {
    let cfg = ModelConfig { vocab_size: 3, seq_len: 2, layers: 1, d_model: 8, heads: 2, d_ff: 8, ..ModelConfig::default() };
    let mut model: DenoiserModel<f64> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.perturb_output_heads(2.0, &mut ChaCha8Rng::seed_from_u64(1));
    let states: Vec<Vec<u32>> = (0..9).map(|i| vec![i / 3, i % 3]).collect();
    let x0 = &states[4];
    for t in 1..=3 {
        let total: f64 = states.iter().map(|x| exact_chain_prob(&model, x0, x, t, None)).sum::<sundae::Result<f64>>()?;
        println!("t={t}: sum over x of p_t(x | x0) = {total:.12}");
    }
    let mut worst = f64::NEG_INFINITY;
    for a in &states {
        for b in &states {
            let j = jensen_check(&model, a, b, None)?;
            worst = worst.max(j.neg_log_p2 - j.expected_nll);
        }
    }
    println!("max over 81 pairs of -log p2 - E[-log f] = {worst:.3e} (bound holds if <= 0)");
    Ok(())
}
