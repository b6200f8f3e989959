//! Forward-pass counts and wall-clock of chain decoding against greedy
//! causal decoding with a key/value cache, on the same network.
//!
//! cargo run --release --example speed_bench -- [batch]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sundae::cli::bench;
use sundae::model::{init_model, DenoiserModel, ModelConfig};
use sundae::sampling::SamplerConfig;

fn main() -> sundae::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let cfg = ModelConfig { vocab_size: 64, seq_len: 64, d_model: 64, heads: 4, d_ff: 256, dropout: 0.0, ..ModelConfig::default() };
    let model: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    for row in bench(&model, &SamplerConfig::default(), &[64], &[4, 8, 10, 16, 64], batch, 3, 0)? {
        println!("{}", row.line());
    }
    Ok(())
}
