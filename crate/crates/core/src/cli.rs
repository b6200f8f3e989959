//! Command-line driver: flat `key = value` run configs, the binary
//! checkpoint format, and the train/sample/translate/inpaint/eval/bench/
//! ablate commands.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{corpus_from_lines, encode, toy_sentences, SynthTask, TaskKind, TokenId, TokenSeq, Vocab, VocabKind, PAD};
use crate::error::{bail_arg, Result, SundaeError};
use crate::eval::{ablation_report, exact_match, quality_diversity_curve, split_pairs, AblationSetup, AblationVariant};
use crate::model::{init_model, Conditioning, Denoiser, DenoiserModel, ModelConfig, ModelMode};
use crate::numerics::{ParamSet, Tensor};
use crate::sampling::{decode_reranked_from, format_trace, run_chains, ChainSpec, SamplerConfig, Template};
use crate::training::{train, TrainConfig, TrainData, TrainState};

pub const COMMANDS: [&str; 7] = ["train", "sample", "translate", "inpaint", "eval", "bench", "ablate"];

/// Where training data comes from and how synthetic pairs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `copy`, `reverse_cipher`, `corpus` (lines of `paths.corpus`) or `toy`
    /// (built-in sentences).
    pub source: String,
    pub vocab_kind: VocabKind,
    /// Cap for word vocabularies built from a corpus.
    pub max_vocab: usize,
    pub task_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub task_seed: u64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub toy_sentences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "copy".into(),
            vocab_kind: VocabKind::Char,
            max_vocab: 1000,
            task_vocab: 16,
            min_len: 4,
            max_len: 12,
            task_seed: 0,
            train_pairs: 20000,
            test_pairs: 200,
            toy_sentences: 2000,
        }
    }
}

/// File locations; an empty string means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: String,
    pub vocab: String,
    /// Checkpoint read by every command except `train`.
    pub checkpoint: String,
    /// Primary output: the checkpoint for `train`, generated lines otherwise.
    pub out: String,
    /// Metrics log for `train`; defaults to `<out>.log`.
    pub log: String,
    pub report: String,
    /// Source sentences for `translate`, one per line.
    pub input: String,
    pub trace: String,
}

/// Per-command knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub count: usize,
    pub template: String,
    /// Template positions are characters; always the case for char vocabularies.
    pub per_char: bool,
    /// Comma-separated temperatures for `eval` on unconditional models.
    pub temps: String,
    /// Comma-separated lengths for `bench`; empty means the model length.
    pub bench_lengths: String,
    pub bench_steps: String,
    pub bench_batch: usize,
    pub bench_repeats: usize,
    /// Comma-separated `<s>:<on|off>` arms for `ablate`.
    pub variants: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            count: 1,
            template: String::new(),
            per_char: false,
            temps: "0.2,0.5,0.8,1.0,1.5".into(),
            bench_lengths: String::new(),
            bench_steps: "4,8,10,16".into(),
            bench_batch: 32,
            bench_repeats: 3,
            variants: "1:on,2:on".into(),
        }
    }
}

/// Everything a command needs. `seed` drives all randomness; the
/// per-module seeds are copies of it and are not separate keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub run: RunOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: "train".into(),
            seed: 0,
            data: DataConfig::default(),
            paths: PathsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            run: RunOptions::default(),
        }
    }
}

const DERIVED_KEYS: [&str; 2] = ["train.seed", "sampler.seed"];

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            if !DERIVED_KEYS.contains(&prefix) {
                out.push((prefix.to_string(), leaf.clone()));
            }
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.as_object_mut().and_then(|m| m.get_mut(*p)).expect("key came from the flattened defaults");
    }
    if let Some(m) = node.as_object_mut() {
        m.insert(parts[parts.len() - 1].to_string(), value);
    }
}

/// Parses `raw` as the same JSON type as `like`.
fn typed_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = || SundaeError::Config(format!("bad value {raw:?} for `{key}`"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            Value::Number(serde_json::Number::from_f64(x).ok_or_else(bad)?)
        }
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        _ => {
            if raw.starts_with('"') {
                Value::String(serde_json::from_str(raw).map_err(|_| bad())?)
            } else {
                Value::String(raw.to_string())
            }
        }
    })
}

impl RunConfig {
    fn with_derived_seeds(mut self) -> Self {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self
    }

    /// Every settable key with its current value, in dump order.
    pub fn entries(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies `key = value` assignments on top of `self`.
    pub fn apply<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let entries = self.entries();
        let mut root = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in assignments {
            let Some((_, like)) = entries.iter().find(|(k, _)| k == key) else {
                return Err(SundaeError::Config(format!("unknown key `{key}`")));
            };
            set_dotted(&mut root, key, typed_value(key, raw, like)?);
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| SundaeError::Config(e.to_string()))?;
        Ok(cfg.with_derived_seeds())
    }

    /// Parses config text (`key = value` lines, `#` comment lines) over the
    /// defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn apply_text(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SundaeError::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            pairs.push((k.trim(), v.trim()));
        }
        self.apply(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&read_config(path.as_ref())?)
    }

    /// The effective config in the file format; parsing it gives back `self`.
    pub fn dump(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !COMMANDS.contains(&self.command.as_str()) {
            return Err(SundaeError::Config(format!("unknown command `{}`", self.command)));
        }
        self.train.validate().map_err(as_config)?;
        self.sampler.validate().map_err(as_config)?;
        let p = &self.paths;
        for (name, path) in [("corpus", &p.corpus), ("vocab", &p.vocab), ("input", &p.input)] {
            if !path.is_empty() && !Path::new(path).exists() {
                return Err(SundaeError::Config(format!("paths.{name} {path} does not exist")));
            }
        }
        let needs_checkpoint = !matches!(self.command.as_str(), "train" | "ablate" | "bench");
        if needs_checkpoint && p.checkpoint.is_empty() {
            return Err(SundaeError::Config(format!("`{}` needs --checkpoint", self.command)));
        }
        if !p.checkpoint.is_empty() && self.command != "train" && !Path::new(&p.checkpoint).exists() {
            return Err(SundaeError::Config(format!("checkpoint {} does not exist", p.checkpoint)));
        }
        if self.command == "train" && p.out.is_empty() {
            return Err(SundaeError::Config("`train` needs --out for the checkpoint".into()));
        }
        Ok(())
    }
}

fn as_config(e: SundaeError) -> SundaeError {
    match e {
        SundaeError::Argument(m) => SundaeError::Config(m),
        other => other,
    }
}

/// Parses a comma-separated list.
pub fn parse_csv<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| SundaeError::Config(format!("bad {what} {s:?}"))))
        .collect()
}

// ---- checkpoints ----

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNDA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    step: u64,
    seed: u64,
    vocab: Option<Vocab>,
    task: Option<SynthTask>,
}

/// A saved model with the vocabulary (and synthetic task) it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub step: u64,
    pub seed: u64,
    pub vocab: Option<Vocab>,
    pub task: Option<SynthTask>,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 metadata length, JSON metadata, then
    /// per parameter: u64 name length, name, u32 rank, u64 dims, f32 values.
    /// All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            step: self.step,
            seed: self.seed,
            vocab: self.vocab.clone(),
            task: self.task.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != CHECKPOINT_MAGIC {
            return Err(SundaeError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(SundaeError::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u64("metadata")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| SundaeError::Checkpoint(format!("metadata: {e}")))?;
        meta.model.validate()?;
        // Only the layout of a fresh model is used, not its values.
        let layout: DenoiserModel<f32> = init_model(meta.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut params = ParamSet::new();
        for (i, (want_name, want)) in layout.params.iter().enumerate() {
            let at = format!("record {i} ({want_name})");
            let name_len = r.u64(&at)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &at)?)
                .map_err(|_| SundaeError::Checkpoint(format!("{at}: name is not UTF-8")))?;
            if name != want_name {
                return Err(SundaeError::Checkpoint(format!("{at}: found parameter {name:?}")));
            }
            let rank = r.u32(&at)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&at)? as usize);
            }
            if shape != want.shape() {
                return Err(SundaeError::Checkpoint(format!(
                    "{at}: shape {shape:?} does not match config shape {:?}",
                    want.shape()
                )));
            }
            let raw = r.take(4 * want.len(), &at)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(SundaeError::Checkpoint(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
        }
        let vocab = meta.vocab.map(|mut v| {
            v.reindex();
            v
        });
        Ok(Self {
            model: DenoiserModel::new(meta.model, params)?,
            step: meta.step,
            seed: meta.seed,
            vocab,
            task: meta.task,
        })
    }

    pub fn vocab(&self) -> Result<&Vocab> {
        self.vocab.as_ref().ok_or_else(|| SundaeError::Checkpoint("checkpoint has no vocabulary".into()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(SundaeError::Checkpoint(format!("truncated in {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

// ---- bench ----

/// Reported speed gains of parallel decoding over greedy AR decoding.
pub const REPORTED_GAINS: [(usize, f64); 4] = [(4, 4.7), (8, 2.6), (10, 2.2), (16, 1.4)];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub steps: usize,
    /// Full-sequence passes per chain.
    pub chain_passes: usize,
    /// Single-position passes of the causal baseline.
    pub ar_passes: usize,
    pub pass_ratio: f64,
    pub chain_secs: f64,
    pub ar_secs: f64,
    /// `ar_secs / chain_secs`.
    pub wall_ratio: f64,
    pub reported_gain: Option<f64>,
}

impl BenchRow {
    pub fn line(&self) -> String {
        let reported = self.reported_gain.map_or("-".to_string(), |g| format!("{g}x"));
        format!(
            "length={} steps={} chain_passes={} ar_passes={} pass_ratio={} chain_secs={:.6} ar_secs={:.6} wall_ratio={:.3} reported={}",
            self.length,
            self.steps,
            self.chain_passes,
            self.ar_passes,
            self.pass_ratio,
            self.chain_secs,
            self.ar_secs,
            self.wall_ratio,
            reported
        )
    }
}

fn min_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((last.expect("at least one repeat"), best))
}

/// Times `batch` chains of each step count against greedy causal decoding
/// of `length` positions with the same network. Each timing is the minimum
/// over `repeats` runs.
pub fn bench(
    model: &DenoiserModel<f32>,
    sampler: &SamplerConfig,
    lengths: &[usize],
    steps: &[usize],
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let n = model.config.seq_len;
    if batch == 0 || lengths.is_empty() || steps.is_empty() {
        bail_arg!("bench needs a batch, lengths and step counts");
    }
    if let Some(l) = lengths.iter().find(|&&l| l == 0 || l > n) {
        bail_arg!("bench length {l} outside 1..={n}");
    }
    let conds: Vec<Conditioning> = if model.is_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src_len = model.config.source_len;
        (0..batch)
            .map(|_| {
                let ids: Vec<TokenId> = (0..src_len).map(|_| rng.gen_range(2..model.config.vocab_size) as TokenId).collect();
                model.condition(&TokenSeq::new(&ids, src_len)?)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let cond_refs: Vec<Option<&Conditioning>> =
        if conds.is_empty() { vec![None; batch] } else { conds.iter().map(Some).collect() };
    let mut rows = Vec::new();
    for &length in lengths {
        let (ar, ar_secs) = min_time(repeats, || model.ar_greedy_decode(&cond_refs, batch, length))?;
        for &t in steps {
            let cfg = SamplerConfig { steps: t, early_stop: false, rerank_width: 1, seed, ..sampler.clone() };
            let specs: Vec<ChainSpec<'_>> =
                cond_refs.iter().enumerate().map(|(i, &cond)| ChainSpec { init: None, cond, stream: i as u64 }).collect();
            let (traces, chain_secs) = min_time(repeats, || run_chains(model, &cfg, &specs))?;
            let chain_passes = traces[0].forward_passes;
            rows.push(BenchRow {
                length,
                steps: t,
                chain_passes,
                ar_passes: ar.forward_passes,
                pass_ratio: ar.forward_passes as f64 / chain_passes as f64,
                chain_secs,
                ar_secs,
                wall_ratio: ar_secs / chain_secs,
                reported_gain: REPORTED_GAINS.iter().find(|g| g.0 == t).map(|g| g.1),
            });
        }
    }
    Ok(rows)
}

// ---- commands ----

pub const USAGE: &str = "\
usage: sundae <command> [--config PATH] [--key value ...]

commands: train sample translate inpaint eval bench ablate

flags:
  --config PATH       base config file (key = value lines)
  --seed INT          seed for all randomness
  --checkpoint PATH   checkpoint to read
  --out PATH          checkpoint to write (train) or output lines
  --count INT         number of samples
  --template STR      inpainting template, `*` marks a free position
  --temps CSV         temperatures for eval on unconditional models
  --steps INT         chain steps
  --strategy NAME     low_temp or argmax_unrolled
  --input PATH        source lines for translate
  --<key> VALUE       any config key, e.g. --train.total_steps 500
";

fn flag_key(flag: &str) -> &str {
    match flag {
        "checkpoint" => "paths.checkpoint",
        "out" => "paths.out",
        "input" => "paths.input",
        "count" => "run.count",
        "template" => "run.template",
        "temps" => "run.temps",
        "steps" => "sampler.steps",
        "strategy" => "sampler.strategy",
        other => other,
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SundaeError::Config(format!("cannot read config {}: {e}", path.display())))
}

/// Builds the run config from arguments (without the program name).
pub fn parse_args(args: &[String]) -> Result<RunConfig> {
    let mut command = None;
    let mut config_path = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(flag) = a.strip_prefix("--") {
            let value = args.get(i + 1).ok_or_else(|| SundaeError::Config(format!("--{flag} needs a value")))?;
            if flag == "config" {
                config_path = Some(value.clone());
            } else {
                overrides.push((flag_key(flag).to_string(), value.clone()));
            }
            i += 2;
        } else if command.is_none() {
            command = Some(a.clone());
            i += 1;
        } else {
            return Err(SundaeError::Config(format!("unexpected argument {a:?}")));
        }
    }
    // The command may come from the config file; a positional one wins.
    let unset = RunConfig { command: String::new(), ..RunConfig::default() };
    let base = match config_path {
        Some(p) => unset.apply_text(&read_config(Path::new(&p))?)?,
        None => unset,
    };
    let mut pairs: Vec<(&str, &str)> = command.iter().map(|c| ("command", c.as_str())).collect();
    pairs.extend(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    let cfg = base.apply(pairs)?;
    if cfg.command.is_empty() {
        return Err(SundaeError::Config("no command given".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Process exit code for an error: 1 for usage and configuration problems,
/// 2 for failures while running.
pub fn exit_code(e: &SundaeError) -> i32 {
    match e {
        SundaeError::Argument(_) | SundaeError::Config(_) | SundaeError::UnsupportedMode(_) => 1,
        _ => 2,
    }
}

/// Entry point for the binary.
pub fn run(args: &[String]) -> i32 {
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if args.is_empty() {
        let _ = write!(err, "{USAGE}");
        return 1;
    }
    if args.iter().any(|a| a == "--help" || a == "-h") {
        let _ = write!(out, "{USAGE}");
        return 0;
    }
    let cfg = match parse_args(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}\n\n{USAGE}");
            return 1;
        }
    };
    match execute(&cfg, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match cfg.command.as_str() {
        "train" => cmd_train(cfg, out),
        "sample" => cmd_sample(cfg, out),
        "translate" => cmd_translate(cfg, out),
        "inpaint" => cmd_inpaint(cfg, out),
        "eval" => cmd_eval(cfg, out),
        "bench" => cmd_bench(cfg, out),
        "ablate" => cmd_ablate(cfg, out),
        other => Err(SundaeError::Config(format!("unknown command `{other}`"))),
    }
}

/// Sends lines to `paths.out` when set, otherwise to `out`.
fn emit(cfg: &RunConfig, out: &mut dyn Write, text: &str) -> Result<()> {
    if cfg.command != "train" && !cfg.paths.out.is_empty() {
        fs::write(&cfg.paths.out, text)?;
    } else {
        out.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn task_of(cfg: &RunConfig) -> Result<Option<SynthTask>> {
    let kind = match cfg.data.source.as_str() {
        "copy" => TaskKind::Copy,
        "reverse_cipher" => TaskKind::ReverseCipher,
        "corpus" | "toy" => return Ok(None),
        other => return Err(SundaeError::Config(format!("unknown data.source `{other}`"))),
    };
    let d = &cfg.data;
    Ok(Some(SynthTask::new(kind, d.task_vocab, d.min_len..=d.max_len, cfg.model.seq_len, d.task_seed)?))
}

fn corpus_lines(cfg: &RunConfig) -> Result<Vec<String>> {
    match cfg.data.source.as_str() {
        "corpus" => {
            if cfg.paths.corpus.is_empty() {
                return Err(SundaeError::Config("data.source = corpus needs paths.corpus".into()));
            }
            Ok(fs::read_to_string(&cfg.paths.corpus)?.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect())
        }
        _ => Ok(toy_sentences(cfg.seed, cfg.data.toy_sentences)),
    }
}

fn corpus_vocab(cfg: &RunConfig, lines: &[String]) -> Result<Vocab> {
    if !cfg.paths.vocab.is_empty() {
        return Vocab::load(&cfg.paths.vocab, cfg.data.vocab_kind);
    }
    let it = lines.iter().map(String::as_str);
    Ok(match cfg.data.vocab_kind {
        VocabKind::Char => Vocab::chars_from_corpus(it),
        VocabKind::Word => Vocab::words_from_corpus(it, cfg.data.max_vocab),
    })
}

/// Train/held-out pairs for a synthetic task from the run seed.
pub fn task_pairs(cfg: &RunConfig, task: &SynthTask) -> Result<(Vec<(TokenSeq, TokenSeq)>, Vec<(TokenSeq, TokenSeq)>)> {
    split_pairs(task, cfg.seed, cfg.data.train_pairs, held_out_seed(cfg.seed), cfg.data.test_pairs)
}

/// Seed for held-out pairs, kept away from the training seed.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_7e57
}

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut model_cfg = cfg.model.clone();
    let (data, vocab, task) = match task_of(cfg)? {
        Some(task) => {
            model_cfg.mode = ModelMode::EncoderDecoder;
            model_cfg.vocab_size = task.vocab_size();
            model_cfg.source_len = task.seq_len;
            let (train_pairs, _) = task_pairs(cfg, &task)?;
            (TrainData::Pairs(train_pairs), task.vocab(), Some(task))
        }
        None => {
            let lines = corpus_lines(cfg)?;
            let vocab = corpus_vocab(cfg, &lines)?;
            model_cfg.mode = ModelMode::Unconditional;
            model_cfg.vocab_size = vocab.size();
            let docs = corpus_from_lines(lines.iter().map(String::as_str), &vocab);
            (TrainData::Corpus { docs, seq_len: model_cfg.seq_len }, vocab, None)
        }
    };
    model_cfg.validate().map_err(as_config)?;
    let model = init_model(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut state = TrainState::new(model, cfg.seed);
    let log_path = if cfg.paths.log.is_empty() { format!("{}.log", cfg.paths.out) } else { cfg.paths.log.clone() };
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let reports = train(&mut state, &data, &cfg.train, &mut log)?;
    log.flush()?;
    let ck = Checkpoint { model: state.averaged_model()?, step: state.step as u64, seed: cfg.seed, vocab: Some(vocab), task };
    save_checkpoint(&ck, &cfg.paths.out)?;
    fs::write(format!("{}.cfg", cfg.paths.out), cfg.dump())?;
    let last = reports.last().map_or(f64::NAN, |r| r.loss);
    writeln!(out, "trained steps={} final_loss={last} checkpoint={} log={log_path}", state.step, cfg.paths.out)?;
    Ok(())
}

fn load_for(cfg: &RunConfig) -> Result<Checkpoint> {
    load_checkpoint(&cfg.paths.checkpoint)
}

fn write_traces(cfg: &RunConfig, traces: &[crate::sampling::ChainTrace], vocab: &Vocab) -> Result<()> {
    if !cfg.paths.trace.is_empty() {
        let text: String = traces.iter().enumerate().map(|(i, t)| format!("chain={i}\n{}", format_trace(t, vocab))).collect();
        fs::write(&cfg.paths.trace, text)?;
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_for(cfg)?;
    if ck.model.is_conditional() {
        return Err(SundaeError::UnsupportedMode("`sample` needs an unconditional model; use `translate`".into()));
    }
    let vocab = ck.vocab()?;
    let specs: Vec<ChainSpec<'_>> =
        (0..cfg.run.count).map(|i| ChainSpec { init: None, cond: None, stream: i as u64 }).collect();
    let traces = run_chains(&ck.model, &cfg.sampler, &specs)?;
    write_traces(cfg, &traces, vocab)?;
    let text: String = traces.iter().map(|t| format!("{}\n", vocab.decode(t.last()))).collect();
    emit(cfg, out, &text)
}

fn cmd_translate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_for(cfg)?;
    if !ck.model.is_conditional() {
        return Err(SundaeError::UnsupportedMode("`translate` needs an encoder-decoder model".into()));
    }
    if cfg.paths.input.is_empty() {
        return Err(SundaeError::Config("`translate` needs --input".into()));
    }
    let vocab = ck.vocab()?;
    let text = fs::read_to_string(&cfg.paths.input)?;
    let sources: Vec<TokenSeq> =
        text.lines().map(|l| encode(l, vocab, ck.model.config.source_len)).collect::<Result<_>>()?;
    let conds: Vec<Conditioning> = sources.iter().map(|s| ck.model.condition(s)).collect::<Result<_>>()?;
    let inputs: Vec<_> = conds.iter().map(|c| (None, Some(c))).collect();
    let traces = decode_reranked_from(&ck.model, &cfg.sampler, &inputs, 0)?;
    write_traces(cfg, &traces, vocab)?;
    let text: String = traces.iter().map(|t| format!("{}\n", vocab.decode(t.last()))).collect();
    emit(cfg, out, &text)
}

/// The template positions verbatim (PAD shown as its literal), followed by
/// generated content up to the first PAD.
pub fn render_inpainted(vocab: &Vocab, y: &[TokenId], template_len: usize) -> String {
    let head = y[..template_len].iter().map(|&t| vocab.token(t));
    let tail = y[template_len..].iter().take_while(|&&t| t != PAD).map(|&t| vocab.token(t));
    let parts: Vec<&str> = head.chain(tail).collect();
    match vocab.kind() {
        VocabKind::Char => parts.concat(),
        VocabKind::Word => parts.join(" "),
    }
}

fn cmd_inpaint(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_for(cfg)?;
    if ck.model.is_conditional() {
        return Err(SundaeError::UnsupportedMode("`inpaint` needs an unconditional model".into()));
    }
    let vocab = ck.vocab()?;
    let n = ck.model.config.seq_len;
    let per_char = cfg.run.per_char || vocab.kind() == VocabKind::Char;
    let template = Template::parse(&cfg.run.template, vocab, n, per_char)?;
    let template_len =
        if per_char { cfg.run.template.chars().count() } else { cfg.run.template.split_whitespace().count() };
    let specs: Vec<ChainSpec<'_>> =
        (0..cfg.run.count).map(|i| ChainSpec { init: Some(&template), cond: None, stream: i as u64 }).collect();
    let traces = run_chains(&ck.model, &cfg.sampler, &specs)?;
    write_traces(cfg, &traces, vocab)?;
    let text: String = traces.iter().map(|t| format!("{}\n", render_inpainted(vocab, t.last(), template_len))).collect();
    emit(cfg, out, &text)
}

fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_for(cfg)?;
    let mut report = String::new();
    if ck.model.is_conditional() {
        let task = ck.task.clone().ok_or_else(|| SundaeError::Checkpoint("checkpoint has no synthetic task".into()))?;
        let seed = ck.seed;
        let (_, test) = split_pairs(&task, seed, cfg.data.train_pairs, held_out_seed(seed), cfg.data.test_pairs)?;
        let acc = exact_match(&ck.model, &test, &cfg.sampler)?;
        report.push_str(&format!("metric=exact_match value={acc}\n"));
    } else {
        let vocab = ck.vocab()?;
        let temps: Vec<f64> = parse_csv(&cfg.run.temps, "temperature")?;
        let refs = corpus_lines(cfg)?;
        let points = quality_diversity_curve(&ck.model, vocab, &cfg.sampler, &temps, cfg.run.count.max(2), &refs)?;
        for p in points {
            report.push_str(&format!("temperature={} quality={} self_bleu={}\n", p.temperature, p.quality, p.diversity));
        }
    }
    if !cfg.paths.report.is_empty() {
        fs::write(&cfg.paths.report, &report)?;
    }
    emit(cfg, out, &report)
}

fn cmd_bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = if cfg.paths.checkpoint.is_empty() {
        cfg.model.validate().map_err(as_config)?;
        init_model(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
    } else {
        load_for(cfg)?.model
    };
    let lengths: Vec<usize> = if cfg.run.bench_lengths.trim().is_empty() {
        vec![model.config.seq_len]
    } else {
        parse_csv(&cfg.run.bench_lengths, "length")?
    };
    let steps: Vec<usize> = parse_csv(&cfg.run.bench_steps, "step count")?;
    let rows = bench(&model, &cfg.sampler, &lengths, &steps, cfg.run.bench_batch, cfg.run.bench_repeats, cfg.seed)?;
    let text: String = rows.iter().map(|r| r.line() + "\n").collect();
    if !cfg.paths.report.is_empty() {
        fs::write(&cfg.paths.report, &text)?;
    }
    emit(cfg, out, &text)
}

/// Parses `<s>:<on|off>` arms.
pub fn parse_variants(text: &str) -> Result<Vec<AblationVariant>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let bad = || SundaeError::Config(format!("bad variant {s:?}, expected <s>:<on|off>"));
            let (terms, lp) = s.split_once(':').ok_or_else(bad)?;
            let terms: usize = terms.parse().map_err(|_| bad())?;
            let lp = match lp {
                "on" => true,
                "off" => false,
                _ => return Err(bad()),
            };
            Ok(AblationVariant::new(terms, lp))
        })
        .collect()
}

fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let task = task_of(cfg)?.ok_or_else(|| SundaeError::Config("`ablate` needs a synthetic data.source".into()))?;
    let model = ModelConfig {
        mode: ModelMode::EncoderDecoder,
        vocab_size: task.vocab_size(),
        source_len: task.seq_len,
        ..cfg.model.clone()
    };
    let setup = AblationSetup {
        task,
        model,
        train: cfg.train.clone(),
        sampler: cfg.sampler.clone(),
        train_pairs: cfg.data.train_pairs,
        test_pairs: cfg.data.test_pairs,
        train_seed: cfg.seed,
        test_seed: held_out_seed(cfg.seed),
    };
    let report = ablation_report(&setup, &parse_variants(&cfg.run.variants)?)?;
    if !cfg.paths.report.is_empty() {
        fs::write(&cfg.paths.report, report.to_machine())?;
    }
    emit(cfg, out, &report.to_table())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(mode: ModelMode) -> DenoiserModel<f32> {
        let cfg = ModelConfig {
            vocab_size: 7,
            seq_len: 5,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 8,
            mode,
            source_len: 4,
            length_hidden: 8,
            length_blocks: 1,
            ..ModelConfig::default()
        };
        init_model(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn checkpoint(mode: ModelMode) -> Checkpoint {
        Checkpoint { model: tiny_model(mode), step: 12, seed: 5, vocab: Some(Vocab::synthetic(5)), task: None }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for mode in [ModelMode::Unconditional, ModelMode::EncoderDecoder] {
            let ck = checkpoint(mode);
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], b"SNDA");
            assert_eq!(bytes, checkpoint(mode).to_bytes());
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            for ((n1, a), (n2, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
                assert_eq!(n1, n2);
                let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(back.model.config, ck.model.config);
            assert_eq!((back.step, back.seed), (12, 5));
            assert_eq!(back.vocab().unwrap().id("c"), ck.vocab().unwrap().id("c"));
        }
    }

    #[test]
    fn damaged_checkpoints_are_refused() {
        let bytes = checkpoint(ModelMode::Unconditional).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated in record") && err.contains("dec.out.b"), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version 9"));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        bad = bytes.clone();
        bad.push(0);
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("trailing"));
        assert!(Checkpoint::from_bytes(&bytes[..10]).unwrap_err().to_string().contains("metadata"));
    }

    #[test]
    fn config_parses_overrides_and_round_trips() {
        let text = "# comment\nseed = 7\nmodel.d_model = 32\nsampler.strategy = argmax_unrolled\n\
                    sampler.schedule = triangular\nrun.template = \"the * cat\"\ntrain.lr_peak = 0.001\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.train.seed, cfg.sampler.seed), (7, 7));
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.run.template, "the * cat");
        assert_eq!(cfg.sampler.schedule, crate::sampling::UpdateSchedule::Triangular);
        assert_eq!(RunConfig::parse_str(&cfg.dump()).unwrap(), cfg);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().dump()).unwrap(), RunConfig::default());
        assert!(!cfg.dump().contains("train.seed"));

        for bad in ["nope = 1", "model.d_model = x", "train.seed = 3", "model.mode = sideways", "seed"] {
            assert!(matches!(RunConfig::parse_str(bad), Err(SundaeError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn argument_parsing_and_exit_codes() {
        let args = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let cfg = parse_args(&args("bench --seed 3 --steps 4 --strategy argmax_unrolled --model.layers 1")).unwrap();
        assert_eq!((cfg.seed, cfg.sampler.steps, cfg.model.layers), (3, 4, 1));
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with(&args("fly"), &mut out, &mut err), 1);
        assert!(String::from_utf8(err).unwrap().contains("usage"));
        assert_eq!(run_with(&args("bench --wings 2"), &mut out, &mut Vec::new()), 1);
        assert_eq!(run_with(&args("sample"), &mut out, &mut Vec::new()), 1);
        assert_eq!(run_with(&args("sample --checkpoint /nonexistent/ck"), &mut out, &mut Vec::new()), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "command = bench\nseed = 5\n").unwrap();
        let p = path.display();
        let cfg = parse_args(&args(&format!("--config {p}"))).unwrap();
        assert_eq!((cfg.command.as_str(), cfg.seed), ("bench", 5));
        assert_eq!(parse_args(&args(&format!("ablate --config {p}"))).unwrap().command, "ablate");
        fs::write(&path, "seed = 5\n").unwrap();
        assert!(matches!(parse_args(&args(&format!("--config {p}"))), Err(SundaeError::Config(_))));
    }

    #[test]
    fn pass_ratio_is_length_over_steps() {
        let mut cfg = tiny_model(ModelMode::Unconditional).config;
        cfg.seq_len = 8;
        let m: DenoiserModel<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rows = bench(&m, &SamplerConfig::default(), &[8], &[2, 4, 8], 2, 1, 0).unwrap();
        let ratios: Vec<f64> = rows.iter().map(|r| r.pass_ratio).collect();
        assert_eq!(ratios, vec![4.0, 2.0, 1.0]);
        assert_eq!(rows[1].reported_gain, Some(4.7));
        assert!(bench(&m, &SamplerConfig::default(), &[9], &[2], 2, 1, 0).is_err());
    }

    #[test]
    fn variants_parse() {
        let v = parse_variants("1:on, 2:off").unwrap();
        assert_eq!(v, vec![AblationVariant::new(1, true), AblationVariant::new(2, false)]);
        assert!(parse_variants("2:maybe").is_err());
    }

    #[test]
    fn inpainted_rendering_keeps_template_positions() {
        let vocab = Vocab::new(VocabKind::Word, ["the", "cat", "sat"]);
        let (the, cat, sat) = (vocab.id("the"), vocab.id("cat"), vocab.id("sat"));
        let y = vec![the, PAD, cat, sat, PAD, the];
        assert_eq!(render_inpainted(&vocab, &y, 3), "the <pad> cat sat");
    }
}
