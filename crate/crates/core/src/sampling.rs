//! Markov-chain generation: chains start from uniform noise (or a clamped
//! template) and repeatedly apply the denoiser.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, Vocab};
use crate::error::{bail_arg, Result, SundaeError};
use crate::model::{Conditioning, Denoiser, Logits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LowTemp,
    ArgmaxUnrolled,
}

impl std::str::FromStr for Strategy {
    type Err = SundaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_temp" => Ok(Self::LowTemp),
            "argmax_unrolled" => Ok(Self::ArgmaxUnrolled),
            _ => Err(SundaeError::Argument(format!("unknown strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LowTemp => "low_temp",
            Self::ArgmaxUnrolled => "argmax_unrolled",
        })
    }
}

/// How many positions a low-temperature step resamples.
/// Written as `triangular` or as the bare fraction in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum UpdateSchedule {
    /// `ceil(fraction * N)` positions every step.
    Fraction(f64),
    /// [`triangular_count`] positions at step `t`.
    Triangular,
}

impl std::str::FromStr for UpdateSchedule {
    type Err = SundaeError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "triangular" {
            return Ok(Self::Triangular);
        }
        s.parse::<f64>()
            .map(Self::Fraction)
            .map_err(|_| SundaeError::Argument(format!("schedule must be `triangular` or a fraction, got {s:?}")))
    }
}

impl std::fmt::Display for UpdateSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fraction(x) => write!(f, "{x}"),
            Self::Triangular => f.write_str("triangular"),
        }
    }
}

impl TryFrom<String> for UpdateSchedule {
    type Error = SundaeError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<UpdateSchedule> for String {
    fn from(s: UpdateSchedule) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum number of steps `T`.
    pub steps: usize,
    pub temperature: f64,
    pub strategy: Strategy,
    pub schedule: UpdateSchedule,
    /// Number of chains decoded per input and reranked by model score.
    pub rerank_width: usize,
    /// Share `ρ` of least-certain positions unrolled in argmax-unrolled mode.
    pub uncertain_share: f64,
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            temperature: 0.3,
            strategy: Strategy::LowTemp,
            schedule: UpdateSchedule::Fraction(1.0),
            rerank_width: 16,
            uncertain_share: 0.3,
            early_stop: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Settings for unconditional text: temperature 0.8, 30% of tokens per
    /// step, stop once a step changes nothing.
    pub fn unconditional() -> Self {
        Self {
            steps: 100,
            temperature: 0.8,
            schedule: UpdateSchedule::Fraction(0.3),
            rerank_width: 1,
            early_stop: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail_arg!("temperature must be positive, got {}", self.temperature);
        }
        if let UpdateSchedule::Fraction(f) = self.schedule {
            if !(f > 0.0 && f <= 1.0) {
                bail_arg!("update fraction {f} outside (0, 1]");
            }
        }
        if self.rerank_width == 0 {
            bail_arg!("rerank width must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.uncertain_share) {
            bail_arg!("uncertain share {} outside [0, 1]", self.uncertain_share);
        }
        Ok(())
    }

    /// Positions resampled at step `t` (1-based) of a length-`n` chain.
    pub fn update_count(&self, t: usize, n: usize) -> usize {
        match self.schedule {
            UpdateSchedule::Fraction(f) => ((f * n as f64).ceil() as usize).min(n),
            UpdateSchedule::Triangular => triangular_count(t, self.steps.max(1), n),
        }
    }
}

/// `floor(2N * min(t/T, 1 - t/T))`: a linear ramp up to `N` at `T/2`, then
/// back down.
pub fn triangular_count(t: usize, total: usize, n: usize) -> usize {
    assert!(total >= 1 && t <= total, "need 0 <= t <= T and T >= 1");
    // Exact in integers: 2N * min(t, T - t) / T.
    2 * n * t.min(total - t) / total
}

/// A partially fixed starting sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub tokens: Vec<TokenId>,
    /// `true` marks a fixed context token.
    pub clamp: Vec<bool>,
}

impl Template {
    pub fn new(tokens: Vec<TokenId>, clamp: Vec<bool>) -> Result<Self> {
        if tokens.len() != clamp.len() {
            bail_arg!("template has {} tokens but {} clamp flags", tokens.len(), clamp.len());
        }
        Ok(Self { tokens, clamp })
    }

    /// A template with nothing clamped.
    pub fn free(n: usize) -> Self {
        Self { tokens: vec![0; n], clamp: vec![false; n] }
    }

    /// Parses whitespace-separated tokens, `*` marking a free position.
    /// With `per_char`, every character is a position and `*` a free one.
    /// Trailing positions up to `n` are free.
    pub fn parse(text: &str, vocab: &Vocab, n: usize, per_char: bool) -> Result<Self> {
        let parts: Vec<String> = if per_char {
            text.chars().map(String::from).collect()
        } else {
            text.split_whitespace().map(String::from).collect()
        };
        if parts.len() > n {
            bail_arg!("template has {} positions, context is {n}", parts.len());
        }
        let mut tokens = vec![0; n];
        let mut clamp = vec![false; n];
        for (i, p) in parts.iter().enumerate() {
            if p != "*" {
                tokens[i] = vocab.id(p);
                clamp[i] = true;
            }
        }
        Ok(Self { tokens, clamp })
    }
}

/// The states of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    /// `x_0, x_1, ...`; shorter than `T + 1` after an early stop.
    pub states: Vec<Vec<TokenId>>,
    /// Positions that changed at each step (`changed[t-1]` for step `t`).
    pub changed: Vec<usize>,
    /// Model score of the final state, filled in when chains are reranked.
    pub score: Option<f64>,
    /// Network evaluations spent, excluding the final scoring pass.
    pub forward_passes: usize,
}

impl ChainTrace {
    pub fn last(&self) -> &[TokenId] {
        self.states.last().expect("a trace holds at least x_0")
    }
}

/// One chain to run: its template, conditioning and rng stream.
#[derive(Clone, Debug)]
pub struct ChainSpec<'a> {
    pub init: Option<&'a Template>,
    pub cond: Option<&'a Conditioning>,
    pub stream: u64,
}

fn clamp_of(init: Option<&Template>, n: usize) -> Vec<bool> {
    init.map_or_else(|| vec![false; n], |t| t.clamp.clone())
}

/// Resamples `update_count` unclamped positions of `y_prev` (chosen
/// uniformly) from `softmax(logits / τ)`; everything else is copied.
pub fn low_temp_update<R: Rng + ?Sized>(
    logits: &Logits,
    y_prev: &[TokenId],
    temperature: f64,
    update_count: usize,
    clamp: &[bool],
    rng: &mut R,
) -> Vec<TokenId> {
    let free: Vec<usize> = (0..y_prev.len()).filter(|&i| !clamp[i]).collect();
    let k = update_count.min(free.len());
    let mut y = y_prev.to_vec();
    for j in sample(rng, free.len(), k).into_iter() {
        let i = free[j];
        y[i] = logits.sample(i, temperature, rng) as TokenId;
    }
    y
}

/// One low-temperature step: evaluates the model on `y_prev`, then
/// [`low_temp_update`].
#[allow(clippy::too_many_arguments)]
pub fn sample_step_low_temp<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    y_prev: &[TokenId],
    temperature: f64,
    update_count: usize,
    clamp: &[bool],
    cond: Option<&Conditioning>,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(temperature > 0.0) {
        bail_arg!("temperature must be positive");
    }
    check_clamp(clamp, y_prev.len())?;
    let logits = model.denoise(y_prev, cond)?;
    Ok(low_temp_update(&logits, y_prev, temperature, update_count, clamp, rng))
}

fn check_clamp(clamp: &[bool], n: usize) -> Result<()> {
    if clamp.len() != n {
        bail_arg!("clamp mask has length {}, state has {n}", clamp.len());
    }
    Ok(())
}

/// Per-position argmax, keeping clamped positions from `y_prev`.
pub fn argmax_tokens(logits: &Logits, y_prev: &[TokenId], clamp: &[bool]) -> Vec<TokenId> {
    (0..y_prev.len())
        .map(|i| if clamp[i] { y_prev[i] } else { logits.argmax(i) as TokenId })
        .collect()
}

/// The `ceil(ρN)` unclamped positions with the lowest certainty under
/// `lambda_prev` (ties broken by lower position first), in position order.
pub fn uncertain_positions(lambda_prev: &Logits, clamp: &[bool], share: f64) -> Vec<usize> {
    let n = clamp.len();
    let k = (share * n as f64).ceil() as usize;
    let mut free: Vec<(f64, usize)> =
        (0..n).filter(|&i| !clamp[i]).map(|i| (lambda_prev.certainty(i), i)).collect();
    free.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = free.into_iter().take(k).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Combines predicted tokens with the argmax of the unrolled logits at the
/// uncertain positions.
fn merge_unrolled(predicted: &[TokenId], unrolled: &Logits, uncertain: &[usize]) -> Vec<TokenId> {
    let mut y = predicted.to_vec();
    for &i in uncertain {
        y[i] = unrolled.argmax(i) as TokenId;
    }
    y
}

/// Output of one argmax-unrolled step.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledStep {
    pub y: Vec<TokenId>,
    /// Logits of the step's input, carried to the next step.
    pub lambda: Logits,
    pub forward_passes: usize,
}

/// One argmax-unrolled step. `lambda_prev` ranks positions by certainty;
/// at the first step (`None`) the step's own logits are used. The
/// intermediate state for the extra unroll is the full argmax prediction.
pub fn argmax_unrolled_step<D: Denoiser + ?Sized>(
    model: &D,
    y_prev: &[TokenId],
    lambda_prev: Option<&Logits>,
    share: f64,
    clamp: &[bool],
    cond: Option<&Conditioning>,
) -> Result<UnrolledStep> {
    check_clamp(clamp, y_prev.len())?;
    if !(0.0..=1.0).contains(&share) {
        bail_arg!("uncertain share {share} outside [0, 1]");
    }
    let lambda = model.denoise(y_prev, cond)?;
    let predicted = argmax_tokens(&lambda, y_prev, clamp);
    let uncertain = uncertain_positions(lambda_prev.unwrap_or(&lambda), clamp, share);
    if uncertain.is_empty() {
        return Ok(UnrolledStep { y: predicted, lambda, forward_passes: 1 });
    }
    let unrolled = model.denoise(&predicted, cond)?;
    Ok(UnrolledStep { y: merge_unrolled(&predicted, &unrolled, &uncertain), lambda, forward_passes: 2 })
}

/// Model score: mean self-reconstruction cross-entropy of `y`, lower is
/// better.
pub fn model_score<D: Denoiser + ?Sized>(model: &D, y: &[TokenId], cond: Option<&Conditioning>) -> Result<f64> {
    Ok(model_scores(model, &[y], &[cond])?[0])
}

/// [`model_score`] for several states in one batched evaluation.
pub fn model_scores<D: Denoiser + ?Sized>(
    model: &D,
    ys: &[&[TokenId]],
    conds: &[Option<&Conditioning>],
) -> Result<Vec<f64>> {
    let logits = model.denoise_batch(ys, conds)?;
    Ok(logits.iter().zip(ys).map(|(l, y)| self_nll(l, y)).collect())
}

fn self_nll(logits: &Logits, y: &[TokenId]) -> f64 {
    let total: f64 = y.iter().enumerate().map(|(i, &t)| -logits.log_softmax(i)[t as usize]).sum();
    total / y.len() as f64
}

/// Index of the lowest-scoring candidate (lowest index on ties) and all
/// scores.
pub fn rerank<D: Denoiser + ?Sized>(
    candidates: &[Vec<TokenId>],
    model: &D,
    cond: Option<&Conditioning>,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        bail_arg!("nothing to rerank");
    }
    let ys: Vec<&[TokenId]> = candidates.iter().map(Vec::as_slice).collect();
    let scores = model_scores(model, &ys, &vec![cond; ys.len()])?;
    Ok((argmin(&scores), scores))
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Chain {
    state: Vec<TokenId>,
    clamp: Vec<bool>,
    lambda: Option<Logits>,
    rng: ChaCha8Rng,
    trace: ChainTrace,
    done: bool,
}

/// Runs independent chains in lockstep, batching each step's network
/// evaluations. Chain `i` draws from rng stream `specs[i].stream` of
/// `cfg.seed`, so its trace does not depend on the other chains.
pub fn run_chains<D: Denoiser + ?Sized>(model: &D, cfg: &SamplerConfig, specs: &[ChainSpec<'_>]) -> Result<Vec<ChainTrace>> {
    cfg.validate()?;
    let (n, v) = (model.seq_len(), model.vocab_size());
    for s in specs {
        if model.is_conditional() && s.cond.is_none() {
            bail_arg!("encoder-decoder model needs conditioning to sample");
        }
        if let Some(t) = s.init {
            if t.tokens.len() != n || t.clamp.len() != n {
                bail_arg!("template length {} does not match context {n}", t.tokens.len());
            }
        }
    }
    let mut chains: Vec<Chain> = specs
        .iter()
        .map(|s| {
            let mut rng = chain_rng(cfg.seed, s.stream);
            let clamp = clamp_of(s.init, n);
            let state: Vec<TokenId> = (0..n)
                .map(|i| match s.init {
                    Some(t) if t.clamp[i] => t.tokens[i],
                    _ => rng.gen_range(0..v as TokenId),
                })
                .collect();
            let trace = ChainTrace { states: vec![state.clone()], changed: Vec::new(), score: None, forward_passes: 0 };
            Chain { state, clamp, lambda: None, rng, trace, done: false }
        })
        .collect();

    for t in 1..=cfg.steps {
        let active: Vec<usize> = (0..chains.len()).filter(|&i| !chains[i].done).collect();
        if active.is_empty() {
            break;
        }
        let xs: Vec<&[TokenId]> = active.iter().map(|&i| chains[i].state.as_slice()).collect();
        let conds: Vec<Option<&Conditioning>> = active.iter().map(|&i| specs[i].cond).collect();
        let logits = model.denoise_batch(&xs, &conds)?;
        let count = cfg.update_count(t, n);
        let next: Vec<Vec<TokenId>> = match cfg.strategy {
            Strategy::LowTemp => active
                .iter()
                .zip(&logits)
                .map(|(&i, l)| {
                    let c = &mut chains[i];
                    c.trace.forward_passes += 1;
                    low_temp_update(l, &c.state, cfg.temperature, count, &c.clamp, &mut c.rng)
                })
                .collect(),
            Strategy::ArgmaxUnrolled => {
                let mut predicted = Vec::with_capacity(active.len());
                let mut uncertain = Vec::with_capacity(active.len());
                for (&i, l) in active.iter().zip(&logits) {
                    let c = &chains[i];
                    predicted.push(argmax_tokens(l, &c.state, &c.clamp));
                    uncertain.push(uncertain_positions(c.lambda.as_ref().unwrap_or(l), &c.clamp, cfg.uncertain_share));
                }
                let needs: Vec<usize> = (0..active.len()).filter(|&j| !uncertain[j].is_empty()).collect();
                let xs: Vec<&[TokenId]> = needs.iter().map(|&j| predicted[j].as_slice()).collect();
                let conds: Vec<Option<&Conditioning>> = needs.iter().map(|&j| specs[active[j]].cond).collect();
                let unrolled = model.denoise_batch(&xs, &conds)?;
                let mut out = predicted.clone();
                for (&j, u) in needs.iter().zip(&unrolled) {
                    out[j] = merge_unrolled(&predicted[j], u, &uncertain[j]);
                    chains[active[j]].trace.forward_passes += 1;
                }
                for (&i, l) in active.iter().zip(logits) {
                    chains[i].trace.forward_passes += 1;
                    chains[i].lambda = Some(l);
                }
                out
            }
        };
        for (&i, y) in active.iter().zip(next) {
            let c = &mut chains[i];
            let changed = y.iter().zip(&c.state).filter(|(a, b)| a != b).count();
            c.state = y;
            c.trace.states.push(c.state.clone());
            c.trace.changed.push(changed);
            let idle = cfg.strategy == Strategy::LowTemp && count == 0;
            if cfg.early_stop && changed == 0 && !idle {
                c.done = true;
            }
        }
    }

    Ok(chains.into_iter().map(|c| c.trace).collect())
}

/// A single chain on rng stream 0.
pub fn sample_chain<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    init: Option<&Template>,
    cond: Option<&Conditioning>,
) -> Result<ChainTrace> {
    Ok(run_chains(model, cfg, &[ChainSpec { init, cond, stream: 0 }])?.remove(0))
}

/// Decodes every input with `cfg.rerank_width` chains and keeps the
/// best-scoring one. Input `j`, candidate `r` uses stream `j * width + r`.
pub fn decode_reranked<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    inputs: &[(Option<&Template>, Option<&Conditioning>)],
) -> Result<Vec<ChainTrace>> {
    decode_reranked_from(model, cfg, inputs, 0)
}

/// [`decode_reranked`] for a slice that starts at input `first` of a larger
/// list, so decoding in groups gives the same samples as one call.
pub fn decode_reranked_from<D: Denoiser + ?Sized>(
    model: &D,
    cfg: &SamplerConfig,
    inputs: &[(Option<&Template>, Option<&Conditioning>)],
    first: usize,
) -> Result<Vec<ChainTrace>> {
    let w = cfg.rerank_width;
    let specs: Vec<ChainSpec<'_>> = inputs
        .iter()
        .enumerate()
        .flat_map(|(j, &(init, cond))| {
            (0..w).map(move |r| ChainSpec { init, cond, stream: ((first + j) * w + r) as u64 })
        })
        .collect();
    let mut traces = run_chains(model, cfg, &specs)?;
    if w == 1 {
        return Ok(traces);
    }
    let finals: Vec<&[TokenId]> = traces.iter().map(ChainTrace::last).collect();
    let conds: Vec<Option<&Conditioning>> = specs.iter().map(|s| s.cond).collect();
    let scores = model_scores(model, &finals, &conds)?;
    for (t, s) in traces.iter_mut().zip(scores) {
        t.score = Some(s);
    }
    Ok(traces.chunks(w).map(|group| group[argmin(&scores_of(group))].clone()).collect())
}

fn scores_of(group: &[ChainTrace]) -> Vec<f64> {
    group.iter().map(|t| t.score.unwrap_or(f64::INFINITY)).collect()
}

/// Count of adjacent equal content tokens (PAD runs excluded).
pub fn adjacent_duplicates(y: &[TokenId]) -> usize {
    y.windows(2).filter(|w| w[0] == w[1] && w[0] != crate::data::PAD).count()
}

/// Trace dump: one line per state, `step=<t> changed=<c>` followed by the
/// space-separated tokens.
pub fn format_trace(trace: &ChainTrace, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (t, state) in trace.states.iter().enumerate() {
        let changed = if t == 0 { 0 } else { trace.changed[t - 1] };
        let _ = writeln!(out, "step={t} changed={changed} {}", vocab.render(state));
    }
    out
}

/// Largest number of intermediate sequences exact enumeration will visit.
pub const MAX_ENUMERATION: f64 = 1e6;

fn state_of(index: usize, n: usize, v: usize) -> Vec<TokenId> {
    let mut x = vec![0; n];
    let mut r = index;
    for slot in x.iter_mut().rev() {
        *slot = (r % v) as TokenId;
        r /= v;
    }
    x
}

/// `f_θ(x | prev)` at temperature 1: product over positions.
fn transition(logits: &Logits, x: &[TokenId]) -> f64 {
    x.iter().enumerate().map(|(i, &t)| logits.log_softmax(i)[t as usize]).sum::<f64>().exp()
}

/// Logits for every sequence in the state space, in index order.
fn all_logits<D: Denoiser + ?Sized>(model: &D, cond: Option<&Conditioning>) -> Result<Vec<Logits>> {
    let (n, v) = (model.seq_len(), model.vocab_size());
    let count = v.pow(n as u32);
    let states: Vec<Vec<TokenId>> = (0..count).map(|s| state_of(s, n, v)).collect();
    let mut out = Vec::with_capacity(count);
    for chunk in states.chunks(256) {
        let xs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        out.extend(model.denoise_batch(&xs, &vec![cond; xs.len()])?);
    }
    Ok(out)
}

/// `p_t(x | x_0)`: the probability that `t` full denoising steps at
/// temperature 1 lead from `x0` to `x`, summed exactly over all
/// intermediate sequences. Refuses when `v^(N(t-1))` exceeds
/// [`MAX_ENUMERATION`].
pub fn exact_chain_prob<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[TokenId],
    x: &[TokenId],
    t: usize,
    cond: Option<&Conditioning>,
) -> Result<f64> {
    let (n, v) = (model.seq_len(), model.vocab_size());
    if t == 0 {
        return Ok(if x0 == x { 1.0 } else { 0.0 });
    }
    let size = (v as f64).powf((n * (t - 1)) as f64);
    if size > MAX_ENUMERATION {
        return Err(SundaeError::Size(format!(
            "enumerating {size:e} intermediate sequences exceeds the limit of {MAX_ENUMERATION:e}"
        )));
    }
    let first = model.denoise(x0, cond)?;
    if t == 1 {
        return Ok(transition(&first, x));
    }
    let table = all_logits(model, cond)?;
    let count = table.len();
    let mut dist: Vec<f64> = (0..count).map(|s| transition(&first, &state_of(s, n, v))).collect();
    for _ in 2..t {
        let mut next = vec![0.0; count];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (y, slot) in next.iter_mut().enumerate() {
                *slot += p * transition(&table[s], &state_of(y, n, v));
            }
        }
        dist = next;
    }
    Ok(dist.iter().zip(&table).map(|(&p, l)| p * transition(l, x)).sum())
}

/// Both sides of the Jensen bound for one `(x0, x)` pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JensenCheck {
    /// `-log p_2(x | x0)`.
    pub neg_log_p2: f64,
    /// `E_{x1 ~ f(.|x0)} [-log f(x | x1)]`.
    pub expected_nll: f64,
}

impl JensenCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.neg_log_p2 <= self.expected_nll + tol
    }
}

/// Exact two-step Jensen check over the full state space.
pub fn jensen_check<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[TokenId],
    x: &[TokenId],
    cond: Option<&Conditioning>,
) -> Result<JensenCheck> {
    let (n, v) = (model.seq_len(), model.vocab_size());
    if (v as f64).powf(n as f64) > MAX_ENUMERATION {
        return Err(SundaeError::Size("state space too large to enumerate".into()));
    }
    let first = model.denoise(x0, cond)?;
    let table = all_logits(model, cond)?;
    let (mut p2, mut expected) = (0.0, 0.0);
    for (s, l) in table.iter().enumerate() {
        let p1 = transition(&first, &state_of(s, n, v));
        let step: f64 = x.iter().enumerate().map(|(i, &tok)| l.log_softmax(i)[tok as usize]).sum();
        p2 += p1 * step.exp();
        expected -= p1 * step;
    }
    Ok(JensenCheck { neg_log_p2: -p2.ln(), expected_nll: expected })
}
