//! Trains a character-level language model on toy sentences and samples
//! from it with the unconditional chain settings.
//!
//! cargo run --release --example unconditional_text -- [steps]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::data::{corpus_from_lines, toy_sentences, Vocab};
use sundae::model::{init_model, DenoiserModel, ModelConfig};
use sundae::sampling::{run_chains, ChainSpec, SamplerConfig};
use sundae::training::{train, TrainConfig, TrainData, TrainState};

fn main() -> sundae::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lines = toy_sentences(0, 2000);
    let vocab = Vocab::chars_from_corpus(lines.iter().map(String::as_str));
    let docs = corpus_from_lines(lines.iter().map(String::as_str), &vocab);
    let cfg = ModelConfig { vocab_size: vocab.size(), seq_len: 32, d_model: 64, heads: 4, d_ff: 256, dropout: 0.0, ..ModelConfig::default() };
    let model: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tc = TrainConfig { total_steps: steps, warmup_steps: steps / 10, log_every: (steps / 10).max(1), ..TrainConfig::default() };
    let mut state = TrainState::new(model, 0);
    train(&mut state, &TrainData::Corpus { docs, seq_len: 32 }, &tc, &mut std::io::stdout())?;
    let model = state.averaged_model()?;

    let sampler = SamplerConfig::unconditional();
    let specs: Vec<ChainSpec<'_>> = (0..8).map(|s| ChainSpec { init: None, cond: None, stream: s }).collect();
    for trace in run_chains(&model, &sampler, &specs)? {
        println!("[{:>3} steps] {}", trace.states.len() - 1, vocab.decode(trace.last()));
    }
    Ok(())
}
