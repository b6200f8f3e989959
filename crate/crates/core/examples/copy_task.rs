//! Trains an encoder-decoder denoiser on the copy task and decodes held-out
//! sources with reranked low-temperature chains.
//!
//! cargo run --release --example copy_task -- [steps]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::data::{SynthTask, TaskKind};
use sundae::eval::{decode_pairs, exact_match, split_pairs};
use sundae::model::{init_model, DenoiserModel, ModelConfig, ModelMode};
use sundae::sampling::SamplerConfig;
use sundae::training::{train, TrainConfig, TrainData, TrainState};

fn main() -> sundae::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let task = SynthTask::new(TaskKind::Copy, 8, 2..=6, 8, 0)?;
    let (train_pairs, test) = split_pairs(&task, 0, 5000, 1, 50)?;
    let cfg = ModelConfig {
        vocab_size: task.vocab_size(),
        seq_len: 8,
        source_len: 8,
        layers: 2,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        dropout: 0.0,
        mode: ModelMode::EncoderDecoder,
        length_hidden: 32,
        length_blocks: 2,
        ..ModelConfig::default()
    };
    let model: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tc = TrainConfig { total_steps: steps, warmup_steps: steps / 10, log_every: (steps / 10).max(1), ..TrainConfig::default() };
    let mut state = TrainState::new(model, 0);
    train(&mut state, &TrainData::Pairs(train_pairs), &tc, &mut std::io::stdout())?;
    let model = state.averaged_model()?;

    let sampler = SamplerConfig { rerank_width: 4, ..SamplerConfig::default() };
    let vocab = task.vocab();
    for ((src, tgt), out) in test.iter().zip(decode_pairs(&model, &test, &sampler)?).take(5) {
        println!("{:>14} -> {:<14} (target {})", vocab.decode(src.ids()), vocab.decode(&out), vocab.decode(tgt.ids()));
    }
    println!("exact match on {} held-out pairs: {:.3}", test.len(), exact_match(&model, &test, &sampler)?);
    Ok(())
}
