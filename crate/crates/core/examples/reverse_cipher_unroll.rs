//! Compares one-term and two-term unrolled training on the reverse-cipher
//! task under the same seeds and budget.
//!
//! cargo run --release --example reverse_cipher_unroll -- [steps]

use sundae::data::{SynthTask, TaskKind};
use sundae::eval::{ablation_report, AblationSetup, AblationVariant};
use sundae::model::{ModelConfig, ModelMode};
use sundae::sampling::SamplerConfig;
use sundae::training::TrainConfig;

fn main() -> sundae::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let task = SynthTask::new(TaskKind::ReverseCipher, 16, 4..=12, 16, 0)?;
    let setup = AblationSetup {
        model: ModelConfig {
            vocab_size: task.vocab_size(),
            seq_len: 16,
            source_len: 16,
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            dropout: 0.0,
            mode: ModelMode::EncoderDecoder,
            length_hidden: 64,
            length_blocks: 2,
            ..ModelConfig::default()
        },
        task,
        train: TrainConfig { total_steps: steps, warmup_steps: steps / 10, ..TrainConfig::default() },
        sampler: SamplerConfig { steps: 10, temperature: 0.3, rerank_width: 4, ..SamplerConfig::default() },
        train_pairs: 20000,
        test_pairs: 200,
        train_seed: 0,
        test_seed: 1,
    };
    let report = ablation_report(&setup, &[AblationVariant::new(1, true), AblationVariant::new(2, true)])?;
    print!("{}", report.to_table());
    print!("{}", report.to_machine());
    Ok(())
}
