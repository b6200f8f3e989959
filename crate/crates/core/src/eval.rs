//! Corpus BLEU, self-BLEU, quality/diversity sweeps over temperature,
//! exact-match accuracy on synthetic tasks, and the ablation harness.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SynthTask, TokenId, TokenSeq, Vocab, PAD};
use crate::error::{bail_arg, Result, SundaeError};
use crate::model::{init_model, Conditioning, Denoiser, DenoiserModel, ModelConfig, ModelMode};
use crate::sampling::{decode_reranked_from, run_chains, ChainSpec, SamplerConfig};
use crate::training::{train, TrainConfig, TrainData, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { max_order: 4 }
    }
}

/// References for one hypothesis: per-order n-gram counts clipped to the
/// maximum over references, plus reference lengths.
struct RefSet<T> {
    max_counts: Vec<HashMap<Vec<T>, usize>>,
    lengths: Vec<usize>,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

impl<T: Eq + Hash + Clone> RefSet<T> {
    fn new<'a>(refs: impl IntoIterator<Item = &'a [T]>, order: usize) -> Self
    where
        T: 'a,
    {
        let mut max_counts: Vec<HashMap<Vec<T>, usize>> = vec![HashMap::new(); order];
        let mut lengths = Vec::new();
        for r in refs {
            lengths.push(r.len());
            for (n, slot) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r, n + 1) {
                    let e = slot.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        Self { max_counts, lengths }
    }

    /// Reference length closest to `len`, the shorter one on ties.
    fn closest_length(&self, len: usize) -> usize {
        let mut best = usize::MAX;
        for &r in &self.lengths {
            let (d, bd) = (r.abs_diff(len), best.abs_diff(len));
            if best == usize::MAX || d < bd || (d == bd && r < best) {
                best = r;
            }
        }
        if best == usize::MAX { 0 } else { best }
    }
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(order: usize) -> Self {
        Self { matches: vec![0; order], totals: vec![0; order], hyp_len: 0, ref_len: 0 }
    }

    fn add<T: Eq + Hash + Clone>(&mut self, hyp: &[T], refs: &RefSet<T>) {
        for (n, (m, t)) in self.matches.iter_mut().zip(self.totals.iter_mut()).enumerate() {
            for (g, c) in ngram_counts(hyp, n + 1) {
                *t += c;
                *m += c.min(refs.max_counts[n].get(&g).copied().unwrap_or(0));
            }
        }
        self.hyp_len += hyp.len();
        self.ref_len += refs.closest_length(hyp.len());
    }

    fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / self.matches.len() as f64;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn check_order(cfg: &BleuConfig) -> Result<()> {
    if cfg.max_order == 0 {
        bail_arg!("BLEU order must be at least 1");
    }
    Ok(())
}

/// Corpus BLEU with one reference per hypothesis.
pub fn bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>], cfg: &BleuConfig) -> Result<f64> {
    let refs: Vec<Vec<Vec<T>>> = references.iter().map(|r| vec![r.clone()]).collect();
    bleu_multi(hypotheses, &refs, cfg)
}

/// Corpus BLEU where hypothesis `i` is scored against every sequence in
/// `references[i]`: uniform geometric mean of clipped n-gram precisions up
/// to `max_order`, no smoothing, times the brevity penalty
/// `min(1, exp(1 - r/c))` with `r` the summed closest reference lengths.
pub fn bleu_multi<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    cfg: &BleuConfig,
) -> Result<f64> {
    check_order(cfg)?;
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        bail_arg!("need equal, nonzero hypothesis and reference counts");
    }
    let mut stats = BleuStats::new(cfg.max_order);
    for (h, rs) in hypotheses.iter().zip(references) {
        stats.add(h, &RefSet::new(rs.iter().map(Vec::as_slice), cfg.max_order));
    }
    Ok(stats.score())
}

/// Corpus BLEU of `hypotheses` against one shared reference corpus.
pub fn bleu_against_corpus<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    corpus: &[Vec<T>],
    cfg: &BleuConfig,
) -> Result<f64> {
    check_order(cfg)?;
    if hypotheses.is_empty() || corpus.is_empty() {
        bail_arg!("need hypotheses and references");
    }
    let refs = RefSet::new(corpus.iter().map(Vec::as_slice), cfg.max_order);
    let mut stats = BleuStats::new(cfg.max_order);
    for h in hypotheses {
        stats.add(h, &refs);
    }
    Ok(stats.score())
}

/// Mean over samples of the BLEU of that sample against all the others.
pub fn self_bleu<T: Eq + Hash + Clone>(samples: &[Vec<T>], cfg: &BleuConfig) -> Result<f64> {
    check_order(cfg)?;
    if samples.len() < 2 {
        bail_arg!("self-BLEU needs at least two samples");
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let others = samples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, r)| r.as_slice());
        let mut stats = BleuStats::new(cfg.max_order);
        stats.add(s, &RefSet::new(others, cfg.max_order));
        total += stats.score();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QDPoint {
    pub temperature: f64,
    /// BLEU of samples against the reference corpus.
    pub quality: f64,
    /// Self-BLEU of an independent sample set; higher means less diverse.
    pub diversity: f64,
}

/// Word lists of the decoded sequences (content up to the first PAD).
pub fn to_words(vocab: &Vocab, seqs: &[Vec<TokenId>]) -> Vec<Vec<String>> {
    seqs.iter().map(|s| vocab.decode(s).split_whitespace().map(String::from).collect()).collect()
}

/// For each temperature, draws two disjoint sets of `samples_per_temp`
/// unconditional samples: one scored by BLEU against `references`, the
/// other by self-BLEU. Scoring is on whitespace words of the decoded text.
pub fn quality_diversity_curve<D: Denoiser + ?Sized>(
    model: &D,
    vocab: &Vocab,
    cfg: &SamplerConfig,
    temperatures: &[f64],
    samples_per_temp: usize,
    references: &[String],
) -> Result<Vec<QDPoint>> {
    if temperatures.is_empty() {
        bail_arg!("no temperatures given");
    }
    if temperatures.windows(2).any(|w| w[0] > w[1]) {
        bail_arg!("temperatures must be sorted ascending");
    }
    if samples_per_temp < 2 {
        bail_arg!("need at least two samples per temperature");
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| r.split_whitespace().map(String::from).collect()).collect();
    let bleu_cfg = BleuConfig::default();
    let mut points = Vec::with_capacity(temperatures.len());
    for &temperature in temperatures {
        let cfg = SamplerConfig { temperature, ..cfg.clone() };
        let specs: Vec<ChainSpec<'_>> =
            (0..2 * samples_per_temp).map(|s| ChainSpec { init: None, cond: None, stream: s as u64 }).collect();
        let mut samples = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(100) {
            samples.extend(run_chains(model, &cfg, chunk)?.into_iter().map(|t| t.last().to_vec()));
        }
        let words = to_words(vocab, &samples);
        let (quality_set, diversity_set) = words.split_at(samples_per_temp);
        points.push(QDPoint {
            temperature,
            quality: bleu_against_corpus(quality_set, &refs, &bleu_cfg)?,
            diversity: self_bleu(diversity_set, &bleu_cfg)?,
        });
    }
    Ok(points)
}

/// Content of `y` up to its first PAD.
pub fn content_of(y: &[TokenId]) -> &[TokenId] {
    let end = y.iter().position(|&t| t == PAD).unwrap_or(y.len());
    &y[..end]
}

/// Fraction of pairs whose reranked chain sample, read up to its first
/// PAD, equals the target content exactly.
pub fn exact_match<D: Denoiser + ?Sized>(
    model: &D,
    pairs: &[(TokenSeq, TokenSeq)],
    cfg: &SamplerConfig,
) -> Result<f64> {
    Ok(decode_pairs(model, pairs, cfg)?.iter().zip(pairs).filter(|(y, (_, t))| content_of(y) == t.content()).count()
        as f64
        / pairs.len().max(1) as f64)
}

/// Final reranked sample for each source.
pub fn decode_pairs<D: Denoiser + ?Sized>(
    model: &D,
    pairs: &[(TokenSeq, TokenSeq)],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<TokenId>>> {
    if !model.is_conditional() {
        return Err(SundaeError::UnsupportedMode("exact match needs an encoder-decoder model".into()));
    }
    let conds: Vec<Conditioning> = pairs.iter().map(|(s, _)| model.condition(s)).collect::<Result<_>>()?;
    let group = 64;
    let mut out = Vec::with_capacity(pairs.len());
    for (g, chunk) in conds.chunks(group).enumerate() {
        let inputs: Vec<_> = chunk.iter().map(|c| (None, Some(c))).collect();
        let traces = decode_reranked_from(model, cfg, &inputs, g * group)?;
        out.extend(traces.into_iter().map(|t| t.last().to_vec()));
    }
    Ok(out)
}

/// One ablation arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub unroll_terms: usize,
    pub length_prediction: bool,
}

impl AblationVariant {
    pub fn new(unroll_terms: usize, length_prediction: bool) -> Self {
        let lp = if length_prediction { "on" } else { "off" };
        Self { name: format!("s={unroll_terms},length={lp}"), unroll_terms, length_prediction }
    }
}

/// Everything shared by the arms of an ablation.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub task: SynthTask,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Seeds for training and held-out pairs; see [`split_pairs`].
    pub train_seed: u64,
    pub test_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn value(&self, variant: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.metric == metric).map(|r| r.value)
    }

    /// Aligned text table, one row per (variant, metric).
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let m = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<w$}  {:<m$}  value\n", "variant", "metric");
        for r in &self.rows {
            let _ = writeln!(out, "{:<w$}  {:<m$}  {:.4}", r.variant, r.metric, r.value);
        }
        out
    }

    /// `variant=<str> metric=<str> value=<float>` lines.
    pub fn to_machine(&self) -> String {
        self.rows.iter().map(|r| format!("variant={} metric={} value={}\n", r.variant, r.metric, r.value)).collect()
    }
}

/// Training pairs from `train_seed` and held-out pairs from `test_seed`;
/// held-out pairs whose source also occurs in training are dropped.
pub fn split_pairs(
    task: &SynthTask,
    train_seed: u64,
    train_count: usize,
    test_seed: u64,
    test_count: usize,
) -> Result<(Vec<(TokenSeq, TokenSeq)>, Vec<(TokenSeq, TokenSeq)>)> {
    let train = task.generate(train_seed, train_count)?;
    let seen: HashSet<&TokenSeq> = train.iter().map(|(s, _)| s).collect();
    let test = task.generate(test_seed, test_count)?.into_iter().filter(|(s, _)| !seen.contains(s)).collect();
    Ok((train, test))
}

/// Trains one model for a variant and returns it (checkpoint-averaged).
pub fn train_variant(
    setup: &AblationSetup,
    variant: &AblationVariant,
    pairs: &[(TokenSeq, TokenSeq)],
) -> Result<DenoiserModel<f32>> {
    let model_cfg = ModelConfig {
        mode: ModelMode::EncoderDecoder,
        length_prediction: variant.length_prediction,
        ..setup.model.clone()
    };
    let train_cfg = TrainConfig { unroll_terms: variant.unroll_terms, ..setup.train.clone() };
    let model = init_model(model_cfg, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
    let mut state = TrainState::new(model, train_cfg.seed);
    train(&mut state, &TrainData::Pairs(pairs.to_vec()), &train_cfg, &mut std::io::sink())?;
    state.averaged_model()
}

/// Trains every variant with identical seeds and budget and reports
/// held-out exact match (and final training loss).
pub fn ablation_report(setup: &AblationSetup, variants: &[AblationVariant]) -> Result<AblationReport> {
    if let Some(v) = variants.iter().find(|v| !(1..=3).contains(&v.unroll_terms)) {
        bail_arg!("variant {} has {} unroll terms; ablations cover 1 to 3", v.name, v.unroll_terms);
    }
    let (train_pairs, test) =
        split_pairs(&setup.task, setup.train_seed, setup.train_pairs, setup.test_seed, setup.test_pairs)?;
    let mut report = AblationReport::default();
    for v in variants {
        let model = train_variant(setup, v, &train_pairs)?;
        let acc = exact_match(&model, &test, &setup.sampler)?;
        report.rows.push(AblationRow { variant: v.name.clone(), metric: "exact_match".into(), value: acc });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::TaskKind;
    use crate::model::{LengthPrediction, Logits};
    use crate::sampling::decode_reranked;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Textbook corpus BLEU written independently of the scorer above.
    fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let (mut num, mut den) = (0usize, 0usize);
            for (h, r) in hyps.iter().zip(refs) {
                let hg: Vec<&[String]> = if h.len() >= n { h.windows(n).collect() } else { vec![] };
                let rg: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
                let mut used = vec![false; rg.len()];
                for g in &hg {
                    if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == *g) {
                        used[k] = true;
                        num += 1;
                    }
                }
                den += hg.len();
            }
            if num == 0 {
                return 0.0;
            }
            log_sum += (num as f64 / den as f64).ln();
        }
        let c: usize = hyps.iter().map(Vec::len).sum();
        let r: usize = refs.iter().map(Vec::len).sum();
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        100.0 * bp * (log_sum / 4.0).exp()
    }

    #[test]
    fn bleu_trivial_cases() {
        let cfg = BleuConfig::default();
        let a = vec![toks("the cat sat on the mat"), toks("a dog ran in the park")];
        assert!((bleu(&a, &a, &cfg).unwrap() - 100.0).abs() < 1e-9);
        let b = vec![toks("x y z w v"), toks("p q r s t")];
        assert_eq!(bleu(&b, &a, &cfg).unwrap(), 0.0);
        assert!(bleu(&a, &a[..1], &cfg).is_err());
        assert!(bleu(&a, &a, &BleuConfig { max_order: 0 }).is_err());
    }

    #[test]
    fn bleu_matches_textbook_oracle() {
        let hyps = vec![toks("the cat is on the mat today"), toks("there is a big dog in the small park")];
        let refs = vec![toks("the cat sat on the mat today"), toks("there is a dog in the park")];
        let got = bleu(&hyps, &refs, &BleuConfig::default()).unwrap();
        let want = reference_bleu(&hyps, &refs);
        assert!(want > 0.0 && (got - want).abs() < 1e-9, "{got} vs {want}");

        // Short hypotheses pay the brevity penalty.
        let short = vec![toks("the cat sat on the"), toks("there is a dog in")];
        let got = bleu(&short, &refs, &BleuConfig::default()).unwrap();
        assert!((got - reference_bleu(&short, &refs)).abs() < 1e-9);
    }

    #[test]
    fn self_bleu_cases() {
        let cfg = BleuConfig::default();
        let same = vec![toks("a b c d e"); 3];
        assert!((self_bleu(&same, &cfg).unwrap() - 100.0).abs() < 1e-9);
        let disjoint = vec![toks("a b c d"), toks("e f g h"), toks("i j k l")];
        assert_eq!(self_bleu(&disjoint, &cfg).unwrap(), 0.0);
        assert!(self_bleu(&same[..1], &cfg).is_err());

        let s = vec![toks("a b c d e f"), toks("a b c d x y"), toks("z b c d e f")];
        let brute: f64 = (0..3)
            .map(|i| {
                let others: Vec<Vec<String>> = (0..3).filter(|&j| j != i).map(|j| s[j].clone()).collect();
                bleu_multi(&[s[i].clone()], &[others], &cfg).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert!((self_bleu(&s, &cfg).unwrap() - brute).abs() < 1e-12);
        let rev: Vec<_> = s.iter().rev().cloned().collect();
        assert!((self_bleu(&rev, &cfg).unwrap() - brute).abs() < 1e-9);
    }

    /// A "model" that always puts all its mass on the task's answer.
    struct Oracle {
        task: SynthTask,
    }

    impl Denoiser for Oracle {
        fn vocab_size(&self) -> usize {
            self.task.vocab_size()
        }
        fn seq_len(&self) -> usize {
            self.task.seq_len
        }
        fn is_conditional(&self) -> bool {
            true
        }
        fn condition(&self, source: &TokenSeq) -> Result<Conditioning> {
            Ok(Conditioning {
                source: source.clone(),
                length: Some(LengthPrediction { probs: vec![1.0], class: 0 }),
                memory: Vec::new(),
                memory_rows: 0,
                memory_valid: Vec::new(),
            })
        }
        fn denoise_batch(&self, xs: &[&[TokenId]], conds: &[Option<&Conditioning>]) -> Result<Vec<Logits>> {
            let (n, v) = (self.seq_len(), self.vocab_size());
            Ok(xs
                .iter()
                .zip(conds)
                .map(|(_, c)| {
                    let target = TokenSeq::new(&self.task.solve(c.unwrap().source.content()), n).unwrap();
                    let mut data = vec![0.0; n * v];
                    for (i, &t) in target.ids().iter().enumerate() {
                        data[i * v + t as usize] = 50.0;
                    }
                    Logits::new(n, v, data)
                })
                .collect())
        }
    }

    #[test]
    fn exact_match_plumbing() {
        let task = SynthTask::new(TaskKind::ReverseCipher, 14, 2..=8, 8, 0).unwrap();
        let pairs = task.generate(5, 40).unwrap();
        let cfg = SamplerConfig { rerank_width: 2, steps: 3, ..SamplerConfig::default() };
        assert_eq!(exact_match(&Oracle { task: task.clone() }, &pairs, &cfg).unwrap(), 1.0);

        let mcfg = ModelConfig {
            vocab_size: 16,
            seq_len: 8,
            source_len: 8,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 8,
            length_hidden: 8,
            length_blocks: 1,
            mode: ModelMode::EncoderDecoder,
            ..ModelConfig::default()
        };
        let m: DenoiserModel<f32> = init_model(mcfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(exact_match(&m, &pairs, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn decoding_in_groups_matches_one_batch() {
        let task = SynthTask::new(TaskKind::Copy, 4, 1..=4, 4, 0).unwrap();
        let pairs = task.generate(1, 70).unwrap();
        let mcfg = ModelConfig {
            vocab_size: 6,
            seq_len: 4,
            source_len: 4,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 8,
            length_hidden: 8,
            length_blocks: 1,
            mode: ModelMode::EncoderDecoder,
            ..ModelConfig::default()
        };
        let mut m: DenoiserModel<f32> = init_model(mcfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.perturb_output_heads(1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = SamplerConfig { rerank_width: 2, steps: 2, temperature: 1.0, ..SamplerConfig::default() };
        let grouped = decode_pairs(&m, &pairs, &cfg).unwrap();
        let conds: Vec<Conditioning> = pairs.iter().map(|(s, _)| m.condition(s).unwrap()).collect();
        let inputs: Vec<_> = conds.iter().map(|c| (None, Some(c))).collect();
        let whole: Vec<Vec<TokenId>> =
            decode_reranked(&m, &cfg, &inputs).unwrap().into_iter().map(|t| t.last().to_vec()).collect();
        assert_eq!(grouped, whole);
    }

    #[test]
    fn report_formats() {
        let report = AblationReport {
            rows: vec![
                AblationRow { variant: "s=1".into(), metric: "exact_match".into(), value: 0.5 },
                AblationRow { variant: "s=2".into(), metric: "exact_match".into(), value: 0.75 },
            ],
        };
        assert_eq!(report.to_machine(), "variant=s=1 metric=exact_match value=0.5\nvariant=s=2 metric=exact_match value=0.75\n");
        assert!(report.to_table().lines().nth(2).unwrap().contains("0.7500"));
        assert_eq!(report.value("s=2", "exact_match"), Some(0.75));
    }

    #[test]
    fn qd_curve_contract() {
        let vocab = Vocab::chars_from_corpus(["ab ba"]);
        let mcfg = ModelConfig { vocab_size: vocab.size(), seq_len: 6, layers: 1, d_model: 8, heads: 2, d_ff: 8, ..ModelConfig::default() };
        let mut m: DenoiserModel<f32> = init_model(mcfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.perturb_output_heads(1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = SamplerConfig { steps: 3, ..SamplerConfig::unconditional() };
        let refs = vec!["ab ba".to_string()];
        let one = quality_diversity_curve(&m, &vocab, &cfg, &[0.5], 4, &refs).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one, quality_diversity_curve(&m, &vocab, &cfg, &[0.5], 4, &refs).unwrap());
        assert!(quality_diversity_curve(&m, &vocab, &cfg, &[], 4, &refs).is_err());
        assert!(quality_diversity_curve(&m, &vocab, &cfg, &[1.0, 0.5], 4, &refs).is_err());
        for p in one {
            assert!((0.0..=100.0).contains(&p.quality) && (0.0..=100.0).contains(&p.diversity));
        }
    }
}
