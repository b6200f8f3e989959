//! Checks reverse-mode gradients of the two-term unrolled loss against
//! central finite differences on a tiny model, at 32 and 64 bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::data::{SynthTask, TaskKind};
use sundae::model::{init_model, DenoiserModel, ModelConfig};
use sundae::numerics::{grad_check, GradCheckOptions, Scalar};
use sundae::training::{loss_and_gradients, PinnedLoss, TrainBatch};

fn check<F: Scalar>(model: &DenoiserModel<F>, batch: &TrainBatch, step: f64) -> sundae::Result<f64> {
    let (loss, _) = loss_and_gradients(model, batch, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(4), false)?;
    let obj = PinnedLoss { config: model.config.clone(), batch, unroll_terms: 2, label_smoothing: 0.1, draws: loss.draws };
    let report = grad_check(&obj, &model.params, &GradCheckOptions { step, max_coords: None, seed: 0 })?;
    println!("  worst coordinate {:?} over {} checked", report.worst, report.coords_checked);
    Ok(report.max_rel_error)
}

fn main() -> sundae::Result<()> {
    let cfg = ModelConfig { vocab_size: 8, seq_len: 8, layers: 2, d_model: 16, heads: 2, d_ff: 32, dropout: 0.0, ..ModelConfig::default() };
    let mut model: DenoiserModel<f64> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(21))?;
    model.perturb_output_heads(0.5, &mut ChaCha8Rng::seed_from_u64(22));
    let task = SynthTask::new(TaskKind::ReverseCipher, 6, 1..=8, 8, 0)?;
    let batch = TrainBatch::unconditional(task.generate(2, 4)?.into_iter().map(|p| p.1).collect());
    println!("32-bit max relative error {:.3e}", check(&model.cast::<f32>(), &batch, 1e-4)?);
    println!("64-bit max relative error {:.3e}", check(&model, &batch, 1e-5)?);
    Ok(())
}
