use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sundae::cli::{Checkpoint, RunConfig};
use sundae::corruption::{apply_mask, corrupt_with_alpha, corruption_matrix};
use sundae::data::{TokenSeq, Vocab, PAD};
use sundae::eval::{bleu, self_bleu, BleuConfig};
use sundae::model::{init_model, DenoiserModel, ModelConfig, ModelMode};
use sundae::numerics::{softmax, Tensor};
use sundae::sampling::{run_chains, triangular_count, ChainSpec, SamplerConfig, Strategy, Template};
use sundae::training::{lr_schedule, TrainConfig};

fn small_model(seed: u64) -> DenoiserModel<f32> {
    let cfg = ModelConfig { vocab_size: 6, seq_len: 6, layers: 1, d_model: 8, heads: 2, d_ff: 8, ..ModelConfig::default() };
    let mut m: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    m.perturb_output_heads(1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_only_touches_masked_positions(
        x in prop::collection::vec(0u32..9, 1..20), alpha in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let s = corrupt_with_alpha(&x, 9, alpha, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&s.corrupted, &apply_mask(&x, &s.mask, &s.noise));
        for i in 0..x.len() {
            if !s.mask[i] {
                prop_assert_eq!(s.corrupted[i], x[i]);
            }
            prop_assert!(s.corrupted[i] < 9);
        }
    }

    #[test]
    fn corruption_matrix_is_stochastic(p in 0.0f64..=1.0, v in 2usize..12) {
        let q = corruption_matrix(p, v).unwrap();
        for row in &q {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-30.0f64..30.0, 12), tau in 0.05f64..5.0
    ) {
        let p = softmax(&Tensor::new(vec![3, 4], vals).unwrap(), tau).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_seqs_are_content_then_pad(content in prop::collection::vec(2u32..20, 0..10), extra in 0usize..6) {
        let n = (content.len() + extra).max(1);
        let s = TokenSeq::new(&content, n).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert_eq!(s.content(), &content[..]);
        prop_assert!(s.ids()[content.len()..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn triangular_schedule_is_bounded_and_symmetric(total in 1usize..60, n in 1usize..80, t in 0usize..60) {
        let t = t.min(total);
        let k = triangular_count(t, total, n);
        prop_assert!(k <= n);
        prop_assert_eq!(k, triangular_count(total - t, total, n));
    }

    #[test]
    fn schedule_stays_in_range(step in 0usize..3000) {
        let cfg = TrainConfig { total_steps: 2000, warmup_steps: 200, ..TrainConfig::default() };
        let lr = lr_schedule(step, &cfg);
        prop_assert!(lr >= cfg.lr_min.min(cfg.lr_start) - 1e-15 && lr <= cfg.lr_peak + 1e-15);
    }

    #[test]
    fn bleu_ignores_corpus_order(
        pairs in prop::collection::vec((prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)), 1..6),
        rot in 0usize..6
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % h.len();
        let (mut h2, mut r2) = (h.clone(), r.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let cfg = BleuConfig::default();
        let a = bleu(&h, &r, &cfg).unwrap();
        prop_assert!((a - bleu(&h2, &r2, &cfg).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }

    #[test]
    fn bleu_is_100_on_identical_corpora(h in prop::collection::vec(prop::collection::vec(0u8..6, 4..10), 1..5)) {
        prop_assert!((bleu(&h, &h, &BleuConfig::default()).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn self_bleu_ignores_sample_order(s in prop::collection::vec(prop::collection::vec(0u8..5, 1..8), 2..6)) {
        let cfg = BleuConfig::default();
        let mut rev = s.clone();
        rev.reverse();
        prop_assert!((self_bleu(&s, &cfg).unwrap() - self_bleu(&rev, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn config_dump_reparses(seed in any::<u64>(), d in 1usize..512, tau in 0.01f64..3.0, lp in any::<bool>()) {
        let base = RunConfig::default();
        let text = format!("seed = {seed}\nmodel.d_model = {d}\nsampler.temperature = {tau}\nmodel.length_prediction = {lp}\n");
        let cfg = base.apply_text(&text).unwrap();
        prop_assert_eq!(RunConfig::parse_str(&cfg.dump()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), step in any::<u64>()) {
        let ck = Checkpoint { model: small_model(seed % 1000), step, seed, vocab: Some(Vocab::synthetic(4)), task: None };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.step, step);
    }

    #[test]
    fn clamped_positions_never_move(
        seed in 0u64..1000, clamp in prop::collection::vec(any::<bool>(), 6), argmax in any::<bool>()
    ) {
        let m = small_model(seed);
        let tokens: Vec<u32> = (0..6).map(|i| (i % 4 + 2) as u32).collect();
        let template = Template::new(tokens.clone(), clamp.clone()).unwrap();
        let strategy = if argmax { Strategy::ArgmaxUnrolled } else { Strategy::LowTemp };
        let cfg = SamplerConfig { steps: 5, temperature: 1.0, strategy, seed, ..SamplerConfig::default() };
        let specs: Vec<ChainSpec<'_>> = (0..4).map(|s| ChainSpec { init: Some(&template), cond: None, stream: s }).collect();
        for trace in run_chains(&m, &cfg, &specs).unwrap() {
            for state in &trace.states {
                for i in 0..6 {
                    if clamp[i] {
                        prop_assert_eq!(state[i], tokens[i]);
                    }
                }
            }
        }
    }
}

#[test]
fn unconditional_models_reject_sources() {
    let m = small_model(0);
    assert_eq!(m.config.mode, ModelMode::Unconditional);
    let src = TokenSeq::new(&[2, 3], 6).unwrap();
    assert!(sundae::model::Denoiser::condition(&m, &src).is_err());
}
