//! Fills the free positions of a word-level template while the given words
//! stay clamped.
//!
//! cargo run --release --example inpainting -- [steps] ["template with * marks"]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::cli::render_inpainted;
use sundae::data::{corpus_from_lines, toy_sentences, Vocab};
use sundae::model::{init_model, DenoiserModel, ModelConfig};
use sundae::sampling::{run_chains, ChainSpec, SamplerConfig, Template};
use sundae::training::{train, TrainConfig, TrainData, TrainState};

fn main() -> sundae::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let text = args.next().unwrap_or_else(|| "the * * * the *".to_string());
    let lines = toy_sentences(0, 2000);
    let vocab = Vocab::words_from_corpus(lines.iter().map(String::as_str), 200);
    let docs = corpus_from_lines(lines.iter().map(String::as_str), &vocab);
    let cfg = ModelConfig { vocab_size: vocab.size(), seq_len: 8, d_model: 64, heads: 4, d_ff: 128, dropout: 0.0, ..ModelConfig::default() };
    let model: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tc = TrainConfig { total_steps: steps, warmup_steps: steps / 10, log_every: steps, ..TrainConfig::default() };
    let mut state = TrainState::new(model, 0);
    train(&mut state, &TrainData::Corpus { docs, seq_len: 8 }, &tc, &mut std::io::stdout())?;
    let model = state.averaged_model()?;

    let template = Template::parse(&text, &vocab, 8, false)?;
    let sampler = SamplerConfig { steps: 20, temperature: 0.5, ..SamplerConfig::default() };
    let specs: Vec<ChainSpec<'_>> = (0..5).map(|s| ChainSpec { init: Some(&template), cond: None, stream: s }).collect();
    println!("template: {text}");
    for trace in run_chains(&model, &sampler, &specs)? {
        println!("  {}", render_inpainted(&vocab, trace.last(), text.split_whitespace().count()));
    }
    Ok(())
}
