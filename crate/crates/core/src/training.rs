//! The unrolled denoising objective, AdamW with warmup and cosine decay, and
//! checkpoint averaging.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::corrupt;
use crate::data::{make_batch, make_pair_batch, PairBatch, TokenId, TokenSeq};
use crate::error::{bail_arg, Result, SundaeError};
use crate::model::{DenoiserModel, Dropout, Logits};
use crate::numerics::{Gradients, Graph, NodeId, Objective, ParamSet, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of reconstruction terms `s` averaged in the loss.
    pub unroll_terms: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Ring-buffer capacity `k` for checkpoint averaging.
    pub average_window: usize,
    pub seed: u64,
    /// Metrics are logged every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unroll_terms: 2,
            batch_size: 32,
            total_steps: 1000,
            warmup_steps: 100,
            lr_start: 1e-5,
            lr_peak: 2e-3,
            lr_min: 1e-5,
            label_smoothing: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            average_window: 10,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll_terms == 0 {
            bail_arg!("unroll_terms must be at least 1");
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.average_window == 0 {
            bail_arg!("batch_size, total_steps and average_window must be positive");
        }
        if self.warmup_steps > self.total_steps {
            bail_arg!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps);
        }
        for (name, lr) in [("lr_start", self.lr_start), ("lr_peak", self.lr_peak), ("lr_min", self.lr_min)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                bail_arg!("{name} must be a nonnegative number, got {lr}");
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail_arg!("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            bail_arg!("invalid Adam hyperparameters");
        }
        Ok(())
    }

    /// Steps between ring-buffer snapshots: a twentieth of the run.
    pub fn snapshot_interval(&self) -> usize {
        (self.total_steps / 20).max(1)
    }
}

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to `lr_min`
/// at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.lr_peak;
        }
        let frac = step as f64 / cfg.warmup_steps as f64;
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// Training targets, with aligned sources in encoder-decoder mode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub targets: Vec<TokenSeq>,
    pub sources: Option<Vec<TokenSeq>>,
}

impl TrainBatch {
    pub fn unconditional(targets: Vec<TokenSeq>) -> Self {
        Self { targets, sources: None }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl From<PairBatch> for TrainBatch {
    fn from(b: PairBatch) -> Self {
        Self { targets: b.targets, sources: Some(b.sources) }
    }
}

/// Every random draw the loss makes, so it can be replayed with the
/// sampled tokens held as constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnrollDraws {
    /// Corrupted input per example.
    pub corrupted: Vec<Vec<TokenId>>,
    /// `intermediates[t][b]`: the state fed to term `t + 2` for example `b`.
    pub intermediates: Vec<Vec<Vec<TokenId>>>,
    /// Encoder output as seen by the length head (gradient-stopped there).
    /// Replays feed these values back so the length loss stays constant
    /// with respect to the encoder.
    pub frozen_encodings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledLoss {
    pub total: f64,
    pub terms: Vec<f64>,
    /// Length-classification loss (encoder-decoder mode with length
    /// prediction).
    pub length: Option<f64>,
    pub draws: UnrollDraws,
}

enum DrawSource<'a> {
    Fresh(&'a mut dyn RngCore),
    Replay(&'a UnrollDraws),
}

struct LossNodes {
    total: NodeId,
    terms: Vec<NodeId>,
    length: Option<NodeId>,
}

fn build_loss<'p, F: Scalar>(
    model: &'p DenoiserModel<F>,
    g: &mut Graph<'p, F>,
    batch: &TrainBatch,
    s: usize,
    smoothing: f64,
    mut source: DrawSource<'_>,
    drop: &mut Dropout<'_>,
) -> Result<(LossNodes, UnrollDraws)> {
    if s == 0 {
        bail_arg!("unroll_terms must be at least 1");
    }
    if batch.is_empty() {
        bail_arg!("empty batch");
    }
    let cfg = &model.config;
    let (n, v) = (cfg.seq_len, cfg.vocab_size);
    let eps = F::of(smoothing);
    let mut length = None;
    let mut frozen_encodings = Vec::new();
    let memory = if cfg.is_conditional() {
        let sources = batch
            .sources
            .as_ref()
            .ok_or_else(|| SundaeError::Argument("encoder-decoder training needs sources".into()))?;
        if sources.len() != batch.len() {
            bail_arg!("{} sources for {} targets", sources.len(), batch.len());
        }
        let refs: Vec<&TokenSeq> = sources.iter().collect();
        let enc = model.encode_graph(g, &refs, drop)?;
        let classes = if cfg.uses_length() {
            let classes = batch
                .targets
                .iter()
                .map(|t| cfg.length_class(t.content_len()))
                .collect::<Result<Vec<_>>>()?;
            let frozen = match &source {
                DrawSource::Replay(d) if !d.frozen_encodings.is_empty() => {
                    let (r, c) = g.dims(enc.node);
                    g.constant(r, c, d.frozen_encodings.iter().map(|&x| F::of(x)).collect())?
                }
                _ => g.detach(enc.node),
            };
            frozen_encodings = g.value(frozen).iter().map(|x| x.f64()).collect();
            let logits = model.length_logits_from(g, frozen, &enc)?;
            let ones = vec![F::one(); batch.len()];
            length = Some(g.cross_entropy(logits, &classes, eps, &ones)?);
            classes
        } else {
            Vec::new()
        };
        Some(model.memory_graph(g, &enc, &classes)?)
    } else {
        None
    };

    let targets: Vec<usize> = batch.targets.iter().flat_map(|t| t.ids().iter().map(|&x| x as usize)).collect();
    let ones = vec![F::one(); targets.len()];
    let mut draws = UnrollDraws { frozen_encodings, ..UnrollDraws::default() };
    let mut state: Vec<Vec<TokenId>> = match &mut source {
        DrawSource::Fresh(rng) => batch.targets.iter().map(|t| corrupt(t.ids(), v, *rng).corrupted).collect(),
        DrawSource::Replay(d) => d.corrupted.clone(),
    };
    if state.len() != batch.len() {
        bail_arg!("replayed draws do not match the batch");
    }
    draws.corrupted = state.clone();
    let mut terms = Vec::with_capacity(s);
    for t in 0..s {
        if t > 0 {
            state = match &mut source {
                DrawSource::Fresh(rng) => {
                    let last: NodeId = *terms.last().map(|(logits, _)| logits).unwrap();
                    let values = g.value(last);
                    values
                        .chunks_exact(n * v)
                        .map(|chunk| {
                            let l = Logits::from_values(n, v, chunk);
                            (0..n).map(|i| l.sample(i, 1.0, *rng) as TokenId).collect()
                        })
                        .collect()
                }
                DrawSource::Replay(d) => d
                    .intermediates
                    .get(t - 1)
                    .ok_or_else(|| SundaeError::Argument("replayed draws have too few terms".into()))?
                    .clone(),
            };
            draws.intermediates.push(state.clone());
        }
        let xs: Vec<&[TokenId]> = state.iter().map(Vec::as_slice).collect();
        let logits = model.decoder_graph(g, &xs, memory.as_ref(), drop)?;
        let ce = g.cross_entropy(logits, &targets, eps, &ones)?;
        terms.push((logits, ce));
    }
    let term_nodes: Vec<NodeId> = terms.iter().map(|&(_, ce)| ce).collect();
    let mut sum = term_nodes[0];
    for &ce in &term_nodes[1..] {
        sum = g.add(sum, ce)?;
    }
    let mut total = g.scale(sum, F::of(1.0 / s as f64));
    if let Some(l) = length {
        total = g.add(total, l)?;
    }
    Ok((LossNodes { total, terms: term_nodes, length }, draws))
}

fn summarize<F: Scalar>(g: &Graph<'_, F>, nodes: &LossNodes, draws: UnrollDraws) -> UnrolledLoss {
    UnrolledLoss {
        total: g.scalar(nodes.total).f64(),
        terms: nodes.terms.iter().map(|&t| g.scalar(t).f64()).collect(),
        length: nodes.length.map(|l| g.scalar(l).f64()),
        draws,
    }
}

/// `L^(1:s)`: the mean of `s` reconstruction losses along a chain started
/// from a corruption of each target, plus the length loss in
/// encoder-decoder mode. Intermediate states are sampled at temperature 1
/// and enter the next pass as plain tokens, so no gradient crosses them.
pub fn loss_unrolled<F: Scalar>(
    model: &DenoiserModel<F>,
    batch: &TrainBatch,
    s: usize,
    label_smoothing: f64,
    rng: &mut dyn RngCore,
    train_mode: bool,
) -> Result<UnrolledLoss> {
    Ok(loss_and_gradients(model, batch, s, label_smoothing, rng, train_mode)?.0)
}

/// [`loss_unrolled`] together with its parameter gradients.
pub fn loss_and_gradients<F: Scalar>(
    model: &DenoiserModel<F>,
    batch: &TrainBatch,
    s: usize,
    label_smoothing: f64,
    rng: &mut dyn RngCore,
    train_mode: bool,
) -> Result<(UnrolledLoss, Gradients<F>)> {
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut drop = if train_mode && model.config.dropout > 0.0 {
        Dropout { rate: model.config.dropout, rng: Some(&mut drop_rng) }
    } else {
        Dropout::off()
    };
    let mut g = Graph::new(&model.params);
    let (nodes, draws) = build_loss(model, &mut g, batch, s, label_smoothing, DrawSource::Fresh(rng), &mut drop)?;
    let grads = g.backward(nodes.total);
    Ok((summarize(&g, &nodes, draws), grads))
}

/// Recomputes the loss with every random draw taken from `draws` and
/// dropout off. The result is a smooth function of the parameters.
pub fn loss_replayed<F: Scalar>(
    model: &DenoiserModel<F>,
    batch: &TrainBatch,
    s: usize,
    label_smoothing: f64,
    draws: &UnrollDraws,
) -> Result<(UnrolledLoss, Gradients<F>)> {
    let mut g = Graph::new(&model.params);
    let (nodes, draws) =
        build_loss(model, &mut g, batch, s, label_smoothing, DrawSource::Replay(draws), &mut Dropout::off())?;
    let grads = g.backward(nodes.total);
    Ok((summarize(&g, &nodes, draws), grads))
}

/// The unrolled loss with pinned draws, as an [`Objective`] over the
/// model's parameters.
pub struct PinnedLoss<'a> {
    pub config: crate::model::ModelConfig,
    pub batch: &'a TrainBatch,
    pub unroll_terms: usize,
    pub label_smoothing: f64,
    pub draws: UnrollDraws,
}

impl Objective for PinnedLoss<'_> {
    fn evaluate<G: Scalar>(&self, params: &ParamSet<G>) -> Result<(G, Gradients<G>)> {
        let model = DenoiserModel { config: self.config.clone(), params: params.clone() };
        let (loss, grads) = loss_replayed(&model, self.batch, self.unroll_terms, self.label_smoothing, &self.draws)?;
        Ok((G::of(loss.total), grads))
    }
}

/// Parameters, AdamW moments, step counter and the averaging ring buffer.
#[derive(Clone, Debug)]
pub struct TrainState<F: Scalar = f32> {
    pub model: DenoiserModel<F>,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: usize,
    pub snapshots: VecDeque<ParamSet<F>>,
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: DenoiserModel<F>, seed: u64) -> Self {
        let zeros: Vec<Vec<F>> = model.params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Self {
            model,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            snapshots: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One AdamW update at learning rate `lr`. Parameters without a
    /// gradient are left alone; weight decay applies to matrices only.
    pub fn apply_gradients(&mut self, grads: &Gradients<F>, lr: f64, cfg: &TrainConfig) {
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (lr_f, eps, wd) = (F::of(lr), F::of(cfg.adam_eps), F::of(cfg.weight_decay));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        for p in 0..self.model.params.len() {
            let Some(g) = grads.get(p) else { continue };
            let tensor = self.model.params.by_index_mut(p);
            let decay = tensor.rank() >= 2;
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for (((w, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                let mut update = mhat / (vhat.sqrt() + eps);
                if decay {
                    update += wd * *w;
                }
                *w -= lr_f * update;
            }
        }
    }

    /// Mean of the snapshots in the ring buffer, or the live parameters
    /// when no snapshot has been taken yet.
    pub fn averaged_model(&self) -> Result<DenoiserModel<F>> {
        if self.snapshots.is_empty() {
            return Ok(self.model.clone());
        }
        let snaps: Vec<ParamSet<F>> = self.snapshots.iter().cloned().collect();
        Ok(DenoiserModel { config: self.model.config.clone(), params: average_checkpoints(&snaps)? })
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Step index (starting at 0) the update was taken at.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub terms: Vec<f64>,
    pub length: Option<f64>,
}

impl StepReport {
    /// `step=<int> loss=<float> lr=<float> term1=<float> ...`, with
    /// `length=<float>` appended when a length loss is trained.
    pub fn log_line(&self) -> String {
        let mut line = format!("step={} loss={} lr={}", self.step, self.loss, self.lr);
        for (i, t) in self.terms.iter().enumerate() {
            line.push_str(&format!(" term{}={}", i + 1, t));
        }
        if let Some(l) = self.length {
            line.push_str(&format!(" length={l}"));
        }
        line
    }
}

/// Computes the unrolled loss on `batch`, applies one AdamW update, and
/// snapshots the parameters every [`TrainConfig::snapshot_interval`] steps.
pub fn train_step<F: Scalar>(state: &mut TrainState<F>, batch: &TrainBatch, cfg: &TrainConfig) -> Result<StepReport> {
    let lr = lr_schedule(state.step, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(state.rng.next_u64());
    let (loss, grads) = loss_and_gradients(&state.model, batch, cfg.unroll_terms, cfg.label_smoothing, &mut rng, true)?;
    if !loss.total.is_finite() || !grads.all_finite() {
        return Err(SundaeError::Numeric(format!(
            "non-finite loss {} at batch id {}",
            loss.total, state.step
        )));
    }
    state.apply_gradients(&grads, lr, cfg);
    let report = StepReport { step: state.step, loss: loss.total, lr, terms: loss.terms, length: loss.length };
    state.step += 1;
    if state.step % cfg.snapshot_interval() == 0 {
        if state.snapshots.len() == cfg.average_window {
            state.snapshots.pop_front();
        }
        state.snapshots.push_back(state.model.params.clone());
    }
    Ok(report)
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Unpadded documents, randomly cropped to `seq_len`.
    Corpus { docs: Vec<Vec<TokenId>>, seq_len: usize },
    Pairs(Vec<(TokenSeq, TokenSeq)>),
}

impl TrainData {
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<TrainBatch> {
        match self {
            Self::Corpus { docs, seq_len } => Ok(TrainBatch::unconditional(make_batch(docs, batch_size, *seq_len, rng)?)),
            Self::Pairs(pairs) => Ok(make_pair_batch(pairs, batch_size, rng)?.into()),
        }
    }
}

/// Runs `train_step` until `cfg.total_steps`, writing metrics lines to `log`.
pub fn train<F: Scalar>(
    state: &mut TrainState<F>,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    while state.step < cfg.total_steps {
        let batch = data.sample(cfg.batch_size, &mut state.rng)?;
        let report = train_step(state, &batch, cfg)?;
        if report.step % cfg.log_every.max(1) == 0 || state.step == cfg.total_steps {
            writeln!(log, "{}", report.log_line())?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Elementwise arithmetic mean of parameter snapshots, accumulated in
/// 64-bit.
pub fn average_checkpoints<F: Scalar>(snapshots: &[ParamSet<F>]) -> Result<ParamSet<F>> {
    let Some(first) = snapshots.first() else {
        bail_arg!("no snapshots to average");
    };
    if let Some(bad) = snapshots.iter().position(|s| !s.same_layout(first)) {
        bail_arg!("snapshot {bad} differs in parameter names or shapes");
    }
    let k = snapshots.len() as f64;
    let mut out = ParamSet::new();
    for (p, (name, t)) in first.iter().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for s in snapshots {
            acc.iter_mut().zip(s.by_index(p).data()).for_each(|(a, &x)| *a += x.f64());
        }
        let data = acc.into_iter().map(|a| F::of(a / k)).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{SynthTask, TaskKind};
    use crate::model::{init_model, Denoiser, ModelConfig, ModelMode};
    use crate::numerics::{grad_check, GradCheckOptions};

    fn tiny(v: usize, n: usize, mode: ModelMode) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            seq_len: n,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            dropout: 0.0,
            mode,
            source_len: n,
            length_hidden: 8,
            length_downsample: 2,
            length_blocks: 2,
            length_prediction: true,
        }
    }

    fn perturbed(cfg: ModelConfig, seed: u64) -> DenoiserModel<f64> {
        let mut m = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        m.perturb_output_heads(1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        m
    }

    fn copy_batch(n: usize, count: usize, seed: u64) -> TrainBatch {
        let task = SynthTask::new(TaskKind::Copy, 4, 1..=n, n, 0).unwrap();
        TrainBatch::unconditional(task.generate(seed, count).unwrap().into_iter().map(|(_, t)| t).collect())
    }

    #[test]
    fn schedule_hits_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            lr_start: 1e-7,
            lr_peak: 1e-4,
            lr_min: 1e-5,
            warmup_steps: 5000,
            total_steps: 100_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 1e-7);
        assert!((lr_schedule(5000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(100_000, &cfg) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(2500, &cfg) - (1e-7 + 1e-4) / 2.0).abs() < 1e-18);
        let mid = 5000 + 95_000 / 2;
        assert!((lr_schedule(mid, &cfg) - 5.5e-5).abs() < 1e-15);
    }

    #[test]
    fn uniform_model_loss_is_log_v() {
        let m: DenoiserModel<f64> = init_model(tiny(4, 5, ModelMode::Unconditional), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = TrainBatch::unconditional(vec![
            TokenSeq::new(&[2, 3, 3], 5).unwrap(),
            TokenSeq::new(&[3, 2, 2, 3, 2], 5).unwrap(),
        ]);
        for s in 1..=3 {
            let l = loss_unrolled(&m, &batch, s, 0.0, &mut ChaCha8Rng::seed_from_u64(2), false).unwrap();
            assert_eq!(l.terms.len(), s);
            for t in &l.terms {
                assert!((t - 4f64.ln()).abs() < 1e-12);
            }
            assert!((l.total - 4f64.ln()).abs() < 1e-12);
        }
        assert!(loss_unrolled(&m, &batch, 0, 0.0, &mut ChaCha8Rng::seed_from_u64(2), false).is_err());
    }

    #[test]
    fn two_term_loss_matches_step_by_step_reference() {
        let m = perturbed(tiny(3, 2, ModelMode::Unconditional), 11);
        let batch = TrainBatch::unconditional(vec![TokenSeq::new(&[2, 2], 2).unwrap(), TokenSeq::new(&[2], 2).unwrap()]);
        let l = loss_unrolled(&m, &batch, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();

        // Reference: each term is the mean over all positions of -log p(x_i).
        let nll = |state: &[Vec<u32>]| -> f64 {
            let mut total = 0.0;
            for (x, tgt) in state.iter().zip(&batch.targets) {
                let logits = m.denoise(x, None).unwrap();
                for i in 0..2 {
                    total -= logits.log_softmax(i)[tgt.ids()[i] as usize];
                }
            }
            total / 4.0
        };
        let t1 = nll(&l.draws.corrupted);
        let t2 = nll(&l.draws.intermediates[0]);
        assert!((l.terms[0] - t1).abs() < 1e-6);
        assert!((l.terms[1] - t2).abs() < 1e-6);
        assert!((l.total - 0.5 * (t1 + t2)).abs() < 1e-6);

        // Single-term loss is the plain reconstruction loss on the same corruption.
        let l1 = loss_unrolled(&m, &batch, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();
        assert_eq!(l1.draws.corrupted, l.draws.corrupted);
        assert!((l1.total - t1).abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_loss_and_gradient() {
        // Feeding the sampled intermediates back as constants must give the
        // same gradient: nothing flows through the sampling.
        let m = perturbed(tiny(5, 4, ModelMode::EncoderDecoder), 3);
        let task = SynthTask::new(TaskKind::ReverseCipher, 3, 1..=4, 4, 0).unwrap();
        let batch: TrainBatch = PairBatch::new(
            task.generate(1, 3).unwrap().iter().map(|p| p.0.clone()).collect(),
            task.generate(1, 3).unwrap().iter().map(|p| p.1.clone()).collect(),
        )
        .unwrap()
        .into();
        let (a, ga) = loss_and_gradients(&m, &batch, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        let (b, gb) = loss_replayed(&m, &batch, 2, 0.1, &a.draws).unwrap();
        assert_eq!(a, b);
        for p in 0..m.params.len() {
            assert_eq!(ga.get(p), gb.get(p));
        }
        assert!(a.length.is_some());
    }

    #[test]
    fn pinned_loss_gradients_are_correct() {
        let m = perturbed(tiny(5, 4, ModelMode::EncoderDecoder), 21);
        let task = SynthTask::new(TaskKind::Copy, 3, 1..=4, 4, 0).unwrap();
        let pairs = task.generate(2, 2).unwrap();
        let batch: TrainBatch =
            PairBatch::new(pairs.iter().map(|p| p.0.clone()).collect(), pairs.iter().map(|p| p.1.clone()).collect())
                .unwrap()
                .into();
        let (loss, _) = loss_and_gradients(&m, &batch, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
        let obj = PinnedLoss {
            config: m.config.clone(),
            batch: &batch,
            unroll_terms: 2,
            label_smoothing: 0.1,
            draws: loss.draws,
        };
        let opts = GradCheckOptions { step: 1e-5, max_coords: Some(24), seed: 0 };
        let report = grad_check(&obj, &m.params, &opts).unwrap();
        // Central differences bottom out near 1e-6 on small gradients; a
        // wrong backward rule shows up orders of magnitude above this.
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn length_loss_leaves_encoder_untouched() {
        let m: DenoiserModel<f32> = perturbed(tiny(5, 4, ModelMode::EncoderDecoder), 8).cast();
        let src = TokenSeq::new(&[2, 3, 4], 4).unwrap();
        let mut g = Graph::new(&m.params);
        let enc = m.encode_graph(&mut g, &[&src], &mut Dropout::off()).unwrap();
        let logits = m.length_logits_graph(&mut g, &enc).unwrap();
        let loss = g.cross_entropy(logits, &[2], 0.0, &[1.0]).unwrap();
        let grads = g.backward(loss);
        let mut state = TrainState::new(m.clone(), 0);
        state.apply_gradients(&grads, 1e-2, &TrainConfig::default());
        for (name, t) in state.model.params.iter() {
            let before = m.params.get(name).unwrap();
            if name.starts_with("enc.") || name.starts_with("dec.") {
                assert_eq!(t, before, "{name} moved");
            }
        }
        assert_ne!(state.model.params.get("len.out.w"), m.params.get("len.out.w"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m: DenoiserModel<f32> = perturbed(tiny(6, 4, ModelMode::Unconditional), 1).cast();
        let cfg = TrainConfig { lr_start: 0.0, lr_peak: 0.0, lr_min: 0.0, total_steps: 20, ..TrainConfig::default() };
        let mut state = TrainState::new(m.clone(), 0);
        let batch = copy_batch(4, 4, 0);
        for _ in 0..3 {
            train_step(&mut state, &batch, &cfg).unwrap();
        }
        assert_eq!(state.model.params, m.params);
        assert_eq!(state.step, 3);
        assert_eq!(state.snapshots.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let m: DenoiserModel<f32> = perturbed(tiny(6, 4, ModelMode::Unconditional), 1).cast();
        let task = SynthTask::new(TaskKind::Copy, 4, 1..=4, 4, 0).unwrap();
        let docs = task.generate(0, 50).unwrap().into_iter().map(|(_, t)| t.content().to_vec()).collect();
        let data = TrainData::Corpus { docs, seq_len: 4 };
        let cfg = TrainConfig { total_steps: 10, warmup_steps: 2, batch_size: 4, log_every: 1, ..TrainConfig::default() };
        let run = || {
            let mut state = TrainState::new(m.clone(), 7);
            let mut log = Vec::new();
            train(&mut state, &data, &cfg, &mut log).unwrap();
            (state.model.params, log)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
        let text = String::from_utf8(la).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("step=0 loss="));
        assert!(text.lines().next().unwrap().contains(" term2="));
    }

    #[test]
    fn ring_buffer_is_capped() {
        let m: DenoiserModel<f32> = init_model(tiny(6, 4, ModelMode::Unconditional), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = TrainConfig { total_steps: 40, average_window: 3, batch_size: 2, ..TrainConfig::default() };
        let mut state = TrainState::new(m, 0);
        let batch = copy_batch(4, 2, 0);
        for _ in 0..9 {
            train_step(&mut state, &batch, &cfg).unwrap();
        }
        // Interval 2: snapshots after steps 2, 4, 6, 8, capped at 3.
        assert_eq!(state.snapshots.len(), 3);
    }

    #[test]
    fn averaging() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut b = ParamSet::<f32>::new();
        b.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(average_checkpoints(&[a.clone(), b]).unwrap().get("w").unwrap().data(), &[1.0]);

        let m: DenoiserModel<f32> = init_model(tiny(6, 4, ModelMode::EncoderDecoder), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let same = vec![m.params.clone(); 10];
        assert_eq!(average_checkpoints(&same).unwrap(), m.params);
        assert!(average_checkpoints::<f32>(&[]).is_err());
        assert!(average_checkpoints(&[a, m.params.clone()]).is_err());
    }

    #[test]
    fn non_finite_loss_names_batch() {
        let mut m: DenoiserModel<f32> = perturbed(tiny(6, 4, ModelMode::Unconditional), 1).cast();
        m.params.get_mut("dec.out.b").unwrap().data_mut()[0] = f32::NAN;
        let mut state = TrainState::new(m, 0);
        let err = train_step(&mut state, &copy_batch(4, 2, 0), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, SundaeError::Numeric(ref msg) if msg.contains("batch id 0")), "{err}");
    }
}
