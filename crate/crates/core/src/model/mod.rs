//! The denoiser `f_θ`: a transformer decoder without causal masking that
//! maps a token sequence to one row of logits per position. In
//! encoder-decoder mode a source encoder and a target-length classifier
//! provide the cross-attention memory.

mod ar;
mod logits;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use ar::ArDecodeOutput;
pub use logits::{Logits, LengthPrediction};

use crate::data::{TokenId, TokenSeq, PAD};
use crate::error::{bail_arg, Result, SundaeError};
use crate::numerics::kernels::AttnShape;
use crate::numerics::{Graph, NodeId, ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Unconditional,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Target (decoder) length N.
    pub seq_len: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mode: ModelMode,
    /// Maximum source length (encoder-decoder mode).
    pub source_len: usize,
    /// Hidden width of the length predictor.
    pub length_hidden: usize,
    pub length_downsample: usize,
    pub length_blocks: usize,
    /// Whether the length predictor and its embedding are used at all.
    pub length_prediction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 16,
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            dropout: 0.1,
            mode: ModelMode::Unconditional,
            source_len: 16,
            length_hidden: 128,
            length_downsample: 2,
            length_blocks: 6,
            length_prediction: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("source_len", self.source_len),
            ("length_hidden", self.length_hidden),
            ("length_downsample", self.length_downsample),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            bail_arg!("model dimension {name} must be at least 1");
        }
        if self.vocab_size < 3 {
            bail_arg!("vocabulary must hold PAD, UNK and at least one token");
        }
        if self.d_model % self.heads != 0 {
            bail_arg!("d_model {} not divisible by {} heads", self.d_model, self.heads);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail_arg!("dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.mode == ModelMode::EncoderDecoder
    }

    /// Whether the length predictor and its embedding are active.
    pub fn uses_length(&self) -> bool {
        self.is_conditional() && self.length_prediction
    }

    /// Number of length classes: `ceil(N / downsample) + 1`, class 0 being
    /// the empty target.
    pub fn length_classes(&self) -> usize {
        self.seq_len.div_ceil(self.length_downsample) + 1
    }

    /// Downsampled length class `ceil(len / downsample)`.
    pub fn length_class(&self, len: usize) -> Result<usize> {
        if len > self.seq_len {
            bail_arg!("length {len} exceeds target length {}", self.seq_len);
        }
        Ok(len.div_ceil(self.length_downsample))
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let attn = 4 * d * d + 3 * d;
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc_dec = self.is_conditional();
        let dec_layer = ln + attn + ln + ffn + if enc_dec { ln + attn } else { 0 };
        let mut total = v * d + self.seq_len * d + self.layers * dec_layer + ln + d * v + v;
        if enc_dec {
            let enc_layer = ln + attn + ln + ffn;
            total += v * d + self.source_len * d + self.layers * enc_layer + ln;
        }
        if self.uses_length() {
            let (h, nd) = (self.length_hidden, self.length_classes());
            total += d * h + h + self.source_len * h;
            total += self.length_blocks * (2 * h * h + 2 * h);
            total += h * nd + nd + nd * d;
        }
        total
    }
}

/// Source-side state the decoder attends to: the (optionally length-
/// prefixed) encoder memory for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub source: TokenSeq,
    pub length: Option<LengthPrediction>,
    /// Row-major `[memory_rows, d_model]` memory values.
    pub memory: Vec<f64>,
    pub memory_rows: usize,
    pub memory_valid: Vec<bool>,
}

/// Anything that maps a token state to per-position logits. Sampling,
/// scoring and evaluation are written against this trait.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn is_conditional(&self) -> bool;

    /// Prepares conditioning for `source`, using the predicted length.
    fn condition(&self, source: &TokenSeq) -> Result<Conditioning>;

    /// Logits for each state; `conds` is empty or aligned with `xs`.
    fn denoise_batch(&self, xs: &[&[TokenId]], conds: &[Option<&Conditioning>]) -> Result<Vec<Logits>>;

    fn denoise(&self, x: &[TokenId], cond: Option<&Conditioning>) -> Result<Logits> {
        Ok(self.denoise_batch(&[x], &[cond])?.remove(0))
    }
}

/// Graph-side encoder output.
pub struct EncoderOut {
    pub node: NodeId,
    pub key_valid: Vec<bool>,
    pub source_lens: Vec<usize>,
}

/// Graph-side cross-attention memory.
pub struct Memory {
    pub node: NodeId,
    pub rows: usize,
    pub key_valid: Vec<bool>,
}

/// Dropout state for one forward pass. `rng == None` disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

fn uniform<F: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-scale..=scale))).collect();
    Tensor::new(shape, data).expect("shape matches generated values")
}

struct Init<'a, F: Scalar, R: Rng + ?Sized> {
    params: ParamSet<F>,
    rng: &'a mut R,
}

impl<F: Scalar, R: Rng + ?Sized> Init<'_, F, R> {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<()> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let t = uniform(vec![fan_in, fan_out], scale, self.rng);
        self.params.insert(name, t).map(|_| ())
    }

    fn table(&mut self, name: String, rows: usize, width: usize) -> Result<()> {
        let scale = 1.0 / (width as f64).sqrt();
        let t = uniform(vec![rows, width], scale, self.rng);
        self.params.insert(name, t).map(|_| ())
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape)).map(|_| ())
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(format!("{prefix}.{w}"), fan_in, fan_out)?;
        self.zeros(format!("{prefix}.{b}"), vec![fan_out])
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.params.insert(format!("{prefix}.g"), Tensor::filled(vec![d], F::one()))?;
        self.zeros(format!("{prefix}.b"), vec![d])
    }

    /// Query, key, value and output projections. Keys carry no bias: it
    /// would shift every score in a softmax row equally.
    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.linear(prefix, "wq", "bq", d, d)?;
        self.weight(format!("{prefix}.wk"), d, d)?;
        self.linear(prefix, "wv", "bv", d, d)?;
        self.linear(prefix, "wo", "bo", d, d)
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) -> Result<()> {
        let d = cfg.d_model;
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.self"), d)?;
        if cross {
            self.layer_norm(&format!("{prefix}.lnx"), d)?;
            self.attention(&format!("{prefix}.cross"), d)?;
        }
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.linear(&format!("{prefix}.ffn"), "w1", "b1", d, cfg.d_ff)?;
        self.linear(&format!("{prefix}.ffn"), "w2", "b2", cfg.d_ff, d)
    }
}

/// Builds a freshly initialized model. Weights are uniform in
/// `±1/sqrt(fan_in)`; the output projection starts at zero so an untrained
/// model predicts the uniform distribution everywhere.
pub fn init_model<F: Scalar, R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<DenoiserModel<F>> {
    config.validate()?;
    let cfg = &config;
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let mut init = Init { params: ParamSet::new(), rng };
    init.table("dec.tok_emb".into(), v, d)?;
    init.table("dec.pos_emb".into(), cfg.seq_len, d)?;
    for i in 0..cfg.layers {
        init.block(&format!("dec.{i}"), cfg, cfg.is_conditional())?;
    }
    init.layer_norm("dec.ln_f", d)?;
    init.zeros("dec.out.w".into(), vec![d, v])?;
    init.zeros("dec.out.b".into(), vec![v])?;
    if cfg.is_conditional() {
        init.table("enc.tok_emb".into(), v, d)?;
        init.table("enc.pos_emb".into(), cfg.source_len, d)?;
        for i in 0..cfg.layers {
            init.block(&format!("enc.{i}"), cfg, false)?;
        }
        init.layer_norm("enc.ln_f", d)?;
    }
    if cfg.uses_length() {
        let (h, nd) = (cfg.length_hidden, cfg.length_classes());
        init.linear("len.proj", "w", "b", d, h)?;
        init.table("len.src_emb".into(), cfg.source_len, h)?;
        for j in 0..cfg.length_blocks {
            init.linear(&format!("len.{j}"), "w1", "b1", h, h)?;
            init.linear(&format!("len.{j}"), "w2", "b2", h, h)?;
        }
        init.zeros("len.out.w".into(), vec![h, nd])?;
        init.zeros("len.out.b".into(), vec![nd])?;
        init.table("len.tgt_emb".into(), nd, d)?;
    }
    Ok(DenoiserModel { config, params: init.params })
}

impl<F: Scalar> DenoiserModel<F> {
    pub fn new(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserModel<G> {
        DenoiserModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Randomizes the zero-initialized output heads so gradients reach every
    /// parameter of an untrained model.
    pub fn perturb_output_heads<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for name in ["dec.out.w", "dec.out.b", "len.out.w", "len.out.b"] {
            if let Some(t) = self.params.get_mut(name) {
                for x in t.data_mut() {
                    *x = F::of(rng.gen_range(-scale..=scale));
                }
            }
        }
    }

    fn check_tokens(&self, ids: &[TokenId], len: usize) -> Result<()> {
        if ids.len() != len {
            bail_arg!("sequence has length {}, model expects {len}", ids.len());
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            bail_arg!("token id {bad} outside vocabulary of {}", self.config.vocab_size);
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph<'_, F>,
        side: &str,
        seqs: &[&[TokenId]],
        len: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = g.param(&format!("{side}.tok_emb"))?;
        let tok = g.gather(tok, &ids)?;
        let pe = g.param(&format!("{side}.pos_emb"))?;
        let pe = g.gather(pe, &pos)?;
        let x = g.add(tok, pe)?;
        Ok(g.dropout(x, drop.rate, drop.rng.as_deref_mut()))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<'_, F>,
        prefix: &str,
        h: NodeId,
        kv: NodeId,
        key_valid: Option<&[bool]>,
        shape: AttnShape,
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let q = g.linear(h, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let wk = g.param(&format!("{prefix}.wk"))?;
        let k = g.matmul(kv, wk)?;
        let v = g.linear(kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let a = g.attention(q, k, v, key_valid, shape)?;
        let o = g.linear(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok(g.dropout(o, drop.rate, drop.rng.as_deref_mut()))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<'_, F>,
        prefix: &str,
        x: NodeId,
        batch: usize,
        len: usize,
        self_valid: Option<&[bool]>,
        causal: bool,
        memory: Option<&Memory>,
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let shape = AttnShape { batch, q_len: len, k_len: len, heads: cfg.heads, d_model: cfg.d_model, causal };
        let h = g.layer_norm(x, &format!("{prefix}.ln1.g"), &format!("{prefix}.ln1.b"))?;
        let a = self.attend(g, &format!("{prefix}.self"), h, h, self_valid, shape, drop)?;
        let mut x = g.add(x, a)?;
        if let Some(mem) = memory {
            let shape = AttnShape { k_len: mem.rows, causal: false, ..shape };
            let h = g.layer_norm(x, &format!("{prefix}.lnx.g"), &format!("{prefix}.lnx.b"))?;
            let a = self.attend(g, &format!("{prefix}.cross"), h, mem.node, Some(&mem.key_valid), shape, drop)?;
            x = g.add(x, a)?;
        }
        let h = g.layer_norm(x, &format!("{prefix}.ln2.g"), &format!("{prefix}.ln2.b"))?;
        let f = g.linear(h, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
        let f = g.gelu(f);
        let f = g.linear(f, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
        let f = g.dropout(f, drop.rate, drop.rng.as_deref_mut());
        g.add(x, f)
    }

    fn require_conditional(&self, what: &str) -> Result<()> {
        if !self.config.is_conditional() {
            return Err(SundaeError::UnsupportedMode(format!("{what} needs an encoder-decoder model")));
        }
        Ok(())
    }

    /// Runs the source encoder on a batch of sources.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[&TokenSeq],
        drop: &mut Dropout<'_>,
    ) -> Result<EncoderOut> {
        self.require_conditional("source encoding")?;
        let ns = self.config.source_len;
        for s in sources {
            self.check_tokens(s.ids(), ns)?;
        }
        let ids: Vec<&[TokenId]> = sources.iter().map(|s| s.ids()).collect();
        let key_valid: Vec<bool> = ids.iter().flat_map(|s| s.iter().map(|&t| t != PAD)).collect();
        let mut x = self.embed(g, "enc", &ids, ns, drop)?;
        for i in 0..self.config.layers {
            x = self.block(g, &format!("enc.{i}"), x, ids.len(), ns, Some(&key_valid), false, None, drop)?;
        }
        let node = g.layer_norm(x, "enc.ln_f.g", "enc.ln_f.b")?;
        let source_lens = sources.iter().map(|s| s.content_len()).collect();
        Ok(EncoderOut { node, key_valid, source_lens })
    }

    /// Length-class logits `[batch, classes]` from pooled encodings. The
    /// encodings are detached first, so the length loss never reaches the
    /// encoder.
    pub fn length_logits_graph(&self, g: &mut Graph<'_, F>, enc: &EncoderOut) -> Result<NodeId> {
        let detached = g.detach(enc.node);
        self.length_logits_from(g, detached, enc)
    }

    /// Length-class logits computed from `frozen`, a gradient-free stand-in
    /// for the encodings in `enc`.
    pub fn length_logits_from(&self, g: &mut Graph<'_, F>, frozen: NodeId, enc: &EncoderOut) -> Result<NodeId> {
        if !self.config.uses_length() {
            return Err(SundaeError::UnsupportedMode("length prediction is disabled".into()));
        }
        if g.dims(frozen) != g.dims(enc.node) {
            bail_arg!("frozen encodings do not match the encoder output shape");
        }
        let batch = enc.source_lens.len();
        let pooled = g.masked_mean(frozen, &enc.key_valid, batch)?;
        self.length_head(g, pooled, &enc.source_lens)
    }

    fn length_head(&self, g: &mut Graph<'_, F>, pooled: NodeId, source_lens: &[usize]) -> Result<NodeId> {
        let ns = self.config.source_len;
        if let Some(&bad) = source_lens.iter().find(|&&l| l == 0 || l > ns) {
            bail_arg!("source length {bad} outside [1, {ns}]");
        }
        let h = g.linear(pooled, "len.proj.w", "len.proj.b")?;
        let table = g.param("len.src_emb")?;
        let idx: Vec<usize> = source_lens.iter().map(|&l| l - 1).collect();
        let len_emb = g.gather(table, &idx)?;
        let mut h = g.add(h, len_emb)?;
        for j in 0..self.config.length_blocks {
            let r = g.linear(h, &format!("len.{j}.w1"), &format!("len.{j}.b1"))?;
            let r = g.gelu(r);
            let r = g.linear(r, &format!("len.{j}.w2"), &format!("len.{j}.b2"))?;
            h = g.add(h, r)?;
        }
        g.linear(h, "len.out.w", "len.out.b")
    }

    /// Cross-attention memory: the target-length embedding of `classes`
    /// prepended to the encodings (or the bare encodings when length
    /// prediction is off).
    pub fn memory_graph(&self, g: &mut Graph<'_, F>, enc: &EncoderOut, classes: &[usize]) -> Result<Memory> {
        let ns = self.config.source_len;
        if !self.config.uses_length() {
            return Ok(Memory { node: enc.node, rows: ns, key_valid: enc.key_valid.clone() });
        }
        let nd = self.config.length_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= nd) {
            bail_arg!("length class {bad} outside [0, {nd})");
        }
        let table = g.param("len.tgt_emb")?;
        let rows = g.gather(table, classes)?;
        let node = g.prepend_rows(enc.node, rows, classes.len())?;
        let key_valid = enc
            .key_valid
            .chunks(ns)
            .flat_map(|c| std::iter::once(true).chain(c.iter().copied()))
            .collect();
        Ok(Memory { node, rows: ns + 1, key_valid })
    }

    /// Decoder logits `[batch * N, v]`, no causal mask.
    pub fn decoder_graph(
        &self,
        g: &mut Graph<'_, F>,
        xs: &[&[TokenId]],
        memory: Option<&Memory>,
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        self.decoder_graph_masked(g, xs, memory, false, drop)
    }

    pub(crate) fn decoder_graph_masked(
        &self,
        g: &mut Graph<'_, F>,
        xs: &[&[TokenId]],
        memory: Option<&Memory>,
        causal: bool,
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let n = self.config.seq_len;
        for x in xs {
            self.check_tokens(x, n)?;
        }
        if self.config.is_conditional() != memory.is_some() {
            bail_arg!("conditioning must be given exactly when the model is encoder-decoder");
        }
        let mut h = self.embed(g, "dec", xs, n, drop)?;
        for i in 0..self.config.layers {
            h = self.block(g, &format!("dec.{i}"), h, xs.len(), n, None, causal, memory, drop)?;
        }
        let h = g.layer_norm(h, "dec.ln_f.g", "dec.ln_f.b")?;
        g.linear(h, "dec.out.w", "dec.out.b")
    }

    /// Stacks per-example conditioning into a constant memory node.
    fn memory_from_conds(&self, g: &mut Graph<'_, F>, conds: &[Option<&Conditioning>]) -> Result<Option<Memory>> {
        if !self.config.is_conditional() {
            if conds.iter().any(Option::is_some) {
                bail_arg!("unconditional model given conditioning");
            }
            return Ok(None);
        }
        let mut values = Vec::new();
        let mut key_valid = Vec::new();
        let mut rows = None;
        for c in conds {
            let c = c.ok_or_else(|| SundaeError::Argument("encoder-decoder model needs conditioning".into()))?;
            if *rows.get_or_insert(c.memory_rows) != c.memory_rows {
                bail_arg!("conditioning memories differ in length");
            }
            values.extend(c.memory.iter().map(|&v| F::of(v)));
            key_valid.extend_from_slice(&c.memory_valid);
        }
        let rows = rows.unwrap_or(0);
        let node = g.constant(conds.len() * rows, self.config.d_model, values)?;
        Ok(Some(Memory { node, rows, key_valid }))
    }

    /// Per-position logits for `x` (the spec-level `denoise_logits`).
    pub fn denoise_logits(
        &self,
        x: &[TokenId],
        cond: Option<&Conditioning>,
        train_mode: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Logits> {
        let mut g = Graph::new(&self.params);
        let memory = self.memory_from_conds(&mut g, &[cond])?;
        let mut drop = if train_mode {
            Dropout { rate: self.config.dropout, rng: Some(rng) }
        } else {
            Dropout::off()
        };
        let node = self.decoder_graph(&mut g, &[x], memory.as_ref(), &mut drop)?;
        Ok(Logits::from_values(self.config.seq_len, self.config.vocab_size, g.value(node)))
    }

    /// Encoder output for one source, `[source_len, d_model]`.
    pub fn encode_source(&self, src: &TokenSeq) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, &[src], &mut Dropout::off())?;
        Ok(g.tensor(enc.node))
    }

    /// Distribution over downsampled target-length classes.
    pub fn predict_length(&self, encodings: &Tensor<F>, src_content_len: usize) -> Result<LengthPrediction> {
        self.require_conditional("length prediction")?;
        let ns = self.config.source_len;
        if src_content_len == 0 || src_content_len > ns {
            bail_arg!("source length {src_content_len} outside [1, {ns}]");
        }
        if encodings.shape() != [ns, self.config.d_model] {
            bail_arg!("encodings must have shape [{ns}, {}]", self.config.d_model);
        }
        let mut g = Graph::new(&self.params);
        let enc = g.constant(ns, self.config.d_model, encodings.data().to_vec())?;
        let mask: Vec<bool> = (0..ns).map(|i| i < src_content_len).collect();
        let pooled = g.masked_mean(enc, &mask, 1)?;
        let logits = self.length_head(&mut g, pooled, &[src_content_len])?;
        Ok(LengthPrediction::from_logits(g.value(logits)))
    }

    /// Row of the target-length embedding table.
    pub fn length_embedding(&self, class: usize) -> Result<Tensor<F>> {
        self.require_conditional("length embedding")?;
        let nd = self.config.length_classes();
        if class >= nd {
            bail_arg!("length class {class} outside [0, {nd})");
        }
        let table = self
            .params
            .get("len.tgt_emb")
            .ok_or_else(|| SundaeError::UnsupportedMode("length prediction is disabled".into()))?;
        let d = self.config.d_model;
        Tensor::new(vec![d], table.data()[class * d..(class + 1) * d].to_vec())
    }

    /// Conditioning with an explicitly chosen length class (`None` uses the
    /// predicted one).
    pub fn condition_with_class(&self, source: &TokenSeq, class: Option<usize>) -> Result<Conditioning> {
        self.require_conditional("conditioning")?;
        let mut g = Graph::new(&self.params);
        let enc = self.encode_graph(&mut g, &[source], &mut Dropout::off())?;
        let (length, memory) = if self.config.uses_length() {
            let logits = self.length_logits_graph(&mut g, &enc)?;
            let pred = LengthPrediction::from_logits(g.value(logits));
            let chosen = class.unwrap_or(pred.class);
            let mem = self.memory_graph(&mut g, &enc, &[chosen])?;
            (Some(pred), mem)
        } else {
            (None, self.memory_graph(&mut g, &enc, &[])?)
        };
        Ok(Conditioning {
            source: source.clone(),
            length,
            memory: g.value(memory.node).iter().map(|v| v.f64()).collect(),
            memory_rows: memory.rows,
            memory_valid: memory.key_valid,
        })
    }
}

impl<F: Scalar> Denoiser for DenoiserModel<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn is_conditional(&self) -> bool {
        self.config.is_conditional()
    }

    fn condition(&self, source: &TokenSeq) -> Result<Conditioning> {
        self.condition_with_class(source, None)
    }

    fn denoise_batch(&self, xs: &[&[TokenId]], conds: &[Option<&Conditioning>]) -> Result<Vec<Logits>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let none = vec![None; xs.len()];
        let conds = if conds.is_empty() { &none[..] } else { conds };
        if conds.len() != xs.len() {
            bail_arg!("{} states but {} conditionings", xs.len(), conds.len());
        }
        let mut g = Graph::new(&self.params);
        let memory = self.memory_from_conds(&mut g, conds)?;
        let node = self.decoder_graph(&mut g, xs, memory.as_ref(), &mut Dropout::off())?;
        let (n, v) = (self.config.seq_len, self.config.vocab_size);
        Ok(g.value(node).chunks_exact(n * v).map(|c| Logits::from_values(n, v, c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            seq_len: 5,
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            dropout: 0.1,
            mode,
            source_len: 6,
            length_hidden: 10,
            length_downsample: 2,
            length_blocks: 3,
            length_prediction: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(ModelMode::Unconditional);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small(ModelMode::Unconditional);
        c.layers = 0;
        assert!(init_model::<f32, _>(c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for mode in [ModelMode::Unconditional, ModelMode::EncoderDecoder] {
            for lp in [true, false] {
                let mut c = small(mode);
                c.length_prediction = lp;
                let m: DenoiserModel<f32> = init_model(c.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                // Hand count for d=8, f=12, v=7, N=5, Ns=6, h=10, Nd=4, 3 blocks.
                let attn = 4 * 64 + 3 * 8;
                let ffn = 8 * 12 + 12 + 12 * 8 + 8;
                let dec_layer = 16 + attn + 16 + ffn + if mode == ModelMode::EncoderDecoder { 16 + attn } else { 0 };
                let mut expect = 7 * 8 + 5 * 8 + 2 * dec_layer + 16 + 8 * 7 + 7;
                if mode == ModelMode::EncoderDecoder {
                    expect += 7 * 8 + 6 * 8 + 2 * (16 + attn + 16 + ffn) + 16;
                    if lp {
                        expect += 8 * 10 + 10 + 6 * 10 + 3 * (2 * 100 + 20) + 10 * 4 + 4 + 4 * 8;
                    }
                }
                assert_eq!(m.params.num_values(), expect);
                assert_eq!(c.parameter_count(), expect);
            }
        }
    }

    #[test]
    fn untrained_model_is_uniform_and_deterministic() {
        let c = small(ModelMode::Unconditional);
        let a: DenoiserModel<f32> = init_model(c.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: DenoiserModel<f32> = init_model(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.params, b.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = a.denoise_logits(&[2, 3, 4, 0, 0], None, false, &mut rng).unwrap();
        assert_eq!((l.rows(), l.vocab()), (5, 7));
        assert!(l.data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn eval_mode_is_bit_identical_train_mode_is_not() {
        let mut m: DenoiserModel<f32> =
            init_model(small(ModelMode::Unconditional), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.perturb_output_heads(0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let x = [2, 3, 4, 5, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.denoise_logits(&x, None, false, &mut rng).unwrap();
        let b = m.denoise_logits(&x, None, false, &mut rng).unwrap();
        assert_eq!(a, b);
        let c = m.denoise_logits(&x, None, true, &mut rng).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_errors() {
        let m: DenoiserModel<f32> =
            init_model(small(ModelMode::Unconditional), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.denoise_logits(&[2, 3], None, false, &mut rng).is_err());
        assert!(m.denoise_logits(&[2, 3, 4, 5, 9], None, false, &mut rng).is_err());
        let src = TokenSeq::new(&[2, 3], 6).unwrap();
        assert!(matches!(m.encode_source(&src), Err(SundaeError::UnsupportedMode(_))));
        assert!(matches!(m.condition(&src), Err(SundaeError::UnsupportedMode(_))));
    }

    #[test]
    fn conditional_surfaces() {
        let mut m: DenoiserModel<f32> =
            init_model(small(ModelMode::EncoderDecoder), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        m.perturb_output_heads(0.5, &mut ChaCha8Rng::seed_from_u64(6));
        let src = TokenSeq::new(&[2, 3, 4], 6).unwrap();
        let enc = m.encode_source(&src).unwrap();
        assert_eq!(enc.shape(), &[6, 8]);
        assert_eq!(enc, m.encode_source(&src).unwrap());
        let pred = m.predict_length(&enc, 3).unwrap();
        assert_eq!(pred.probs.len(), 4);
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(m.predict_length(&enc, 0).is_err());
        assert!(m.predict_length(&enc, 7).is_err());
        let e = m.length_embedding(2).unwrap();
        assert_eq!(e.shape(), &[8]);
        assert_eq!(e, m.length_embedding(2).unwrap());
        assert!(m.length_embedding(4).is_err());

        let cond = m.condition(&src).unwrap();
        assert_eq!(cond.memory_rows, 7);
        assert_eq!(cond.memory.len(), 7 * 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.denoise_logits(&[2, 3, 4, 0, 0], None, false, &mut rng).is_err());
        let l = m.denoise_logits(&[2, 3, 4, 0, 0], Some(&cond), false, &mut rng).unwrap();
        let batch = m.denoise_batch(&[&[2, 3, 4, 0, 0]], &[Some(&cond)]).unwrap();
        assert_eq!(l, batch[0]);
    }

    #[test]
    fn length_class_downsamples_by_ceiling() {
        let c = ModelConfig { seq_len: 16, length_downsample: 2, ..ModelConfig::default() };
        assert_eq!(c.length_class(7).unwrap(), 4);
        assert_eq!(c.length_class(16).unwrap(), 8);
        assert_eq!(c.length_classes(), 9);
        assert!(c.length_class(17).is_err());
    }
}
