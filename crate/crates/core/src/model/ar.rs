//! Left-to-right greedy decoding with the same network run causally and a
//! key/value cache. Only used as the step-count and wall-clock baseline in
//! benchmarks; the denoiser is never trained this way.

use super::{Conditioning, DenoiserModel};
use crate::data::{TokenId, PAD};
use crate::error::{bail_arg, Result, SundaeError};
use crate::numerics::kernels::{self, AttnShape};
use crate::numerics::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ArDecodeOutput {
    pub tokens: Vec<Vec<TokenId>>,
    /// Number of single-position network evaluations.
    pub forward_passes: usize,
}

struct LayerCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
    mem_keys: Vec<F>,
    mem_values: Vec<F>,
}

impl<F: Scalar> DenoiserModel<F> {
    fn p(&self, name: &str) -> Result<&[F]> {
        self.params
            .get(name)
            .map(|t| t.data())
            .ok_or_else(|| SundaeError::Argument(format!("missing parameter {name}")))
    }

    fn dense(&self, x: &[F], rows: usize, prefix: &str, w: &str, b: &str) -> Result<Vec<F>> {
        let mut out = self.project(x, rows, prefix, w)?;
        kernels::add_bias(&mut out, self.p(&format!("{prefix}.{b}"))?);
        Ok(out)
    }

    fn project(&self, x: &[F], rows: usize, prefix: &str, w: &str) -> Result<Vec<F>> {
        let wt = self.params.get(&format!("{prefix}.{w}")).ok_or_else(|| {
            SundaeError::Argument(format!("missing parameter {prefix}.{w}"))
        })?;
        let (fan_in, fan_out) = (wt.shape()[0], wt.shape()[1]);
        let mut out = vec![F::zero(); rows * fan_out];
        kernels::matmul(x, wt.data(), &mut out, rows, fan_in, fan_out, false, false, false);
        Ok(out)
    }

    fn norm(&self, x: &[F], prefix: &str) -> Result<Vec<F>> {
        let mut out = vec![F::zero(); x.len()];
        kernels::layer_norm(x, self.p(&format!("{prefix}.g"))?, self.p(&format!("{prefix}.b"))?, &mut out);
        Ok(out)
    }

    /// Greedy causal decoding of `steps` positions for `batch` sequences.
    /// Position `t` reads the token emitted at `t - 1` (PAD at `t = 0`).
    pub fn ar_greedy_decode(
        &self,
        conds: &[Option<&Conditioning>],
        batch: usize,
        steps: usize,
    ) -> Result<ArDecodeOutput> {
        let cfg = &self.config;
        let (d, n, v) = (cfg.d_model, cfg.seq_len, cfg.vocab_size);
        if steps > n {
            bail_arg!("cannot decode {steps} positions with context {n}");
        }
        if cfg.is_conditional() && conds.len() != batch {
            bail_arg!("need one conditioning per sequence");
        }
        let mut caches = Vec::with_capacity(cfg.layers);
        let mut mem_valid = Vec::new();
        let mut mem_rows = 0;
        for i in 0..cfg.layers {
            let (mut mem_keys, mut mem_values) = (Vec::new(), Vec::new());
            if cfg.is_conditional() {
                let mut mem = Vec::new();
                mem_valid.clear();
                for c in conds {
                    let c = c.ok_or_else(|| SundaeError::Argument("missing conditioning".into()))?;
                    mem.extend(c.memory.iter().map(|&x| F::of(x)));
                    mem_valid.extend_from_slice(&c.memory_valid);
                    mem_rows = c.memory_rows;
                }
                let prefix = format!("dec.{i}.cross");
                mem_keys = self.project(&mem, batch * mem_rows, &prefix, "wk")?;
                mem_values = self.dense(&mem, batch * mem_rows, &prefix, "wv", "bv")?;
            }
            caches.push(LayerCache {
                keys: vec![F::zero(); batch * n * d],
                values: vec![F::zero(); batch * n * d],
                mem_keys,
                mem_values,
            });
        }
        let tok_emb = self.p("dec.tok_emb")?;
        let pos_emb = self.p("dec.pos_emb")?;
        let mut tokens = vec![Vec::with_capacity(steps); batch];
        let mut prev = vec![PAD; batch];
        let mut valid = vec![false; batch * n];
        for t in 0..steps {
            for b in 0..batch {
                valid[b * n + t] = true;
            }
            let mut x = Vec::with_capacity(batch * d);
            for &tok in &prev {
                let e = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
                let p = &pos_emb[t * d..(t + 1) * d];
                x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
            }
            for (i, cache) in caches.iter_mut().enumerate() {
                let prefix = format!("dec.{i}");
                let h = self.norm(&x, &format!("{prefix}.ln1"))?;
                let sp = format!("{prefix}.self");
                let q = self.dense(&h, batch, &sp, "wq", "bq")?;
                let k = self.project(&h, batch, &sp, "wk")?;
                let vv = self.dense(&h, batch, &sp, "wv", "bv")?;
                for b in 0..batch {
                    let at = (b * n + t) * d;
                    cache.keys[at..at + d].copy_from_slice(&k[b * d..(b + 1) * d]);
                    cache.values[at..at + d].copy_from_slice(&vv[b * d..(b + 1) * d]);
                }
                let shape = AttnShape { batch, q_len: 1, k_len: n, heads: cfg.heads, d_model: d, causal: false };
                let mut a = vec![F::zero(); batch * d];
                kernels::attention_forward(&q, &cache.keys, &cache.values, Some(&valid), shape, &mut a);
                let o = self.dense(&a, batch, &sp, "wo", "bo")?;
                x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
                if cfg.is_conditional() {
                    let h = self.norm(&x, &format!("{prefix}.lnx"))?;
                    let cp = format!("{prefix}.cross");
                    let q = self.dense(&h, batch, &cp, "wq", "bq")?;
                    let shape = AttnShape { k_len: mem_rows, ..shape };
                    let mut a = vec![F::zero(); batch * d];
                    kernels::attention_forward(&q, &cache.mem_keys, &cache.mem_values, Some(&mem_valid), shape, &mut a);
                    let o = self.dense(&a, batch, &cp, "wo", "bo")?;
                    x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
                }
                let h = self.norm(&x, &format!("{prefix}.ln2"))?;
                let f = self.dense(&h, batch, &format!("{prefix}.ffn"), "w1", "b1")?;
                let f: Vec<F> = f.into_iter().map(kernels::gelu).collect();
                let f = self.dense(&f, batch, &format!("{prefix}.ffn"), "w2", "b2")?;
                x.iter_mut().zip(&f).for_each(|(x, &o)| *x += o);
            }
            let h = self.norm(&x, "dec.ln_f")?;
            let logits = self.dense(&h, batch, "dec.out", "w", "b")?;
            for b in 0..batch {
                let row = &logits[b * v..(b + 1) * v];
                let mut best = 0;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                tokens[b].push(best as TokenId);
                prev[b] = best as TokenId;
            }
        }
        Ok(ArDecodeOutput { tokens, forward_passes: steps })
    }
}
