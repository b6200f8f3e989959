//! Dense arrays, a reverse-mode tape and the few stand-alone functions the
//! rest of the crate is built on.

mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail_arg, Result, SundaeError};

/// Softmax over the last axis at temperature `temperature`.
pub fn softmax<F: Scalar>(logits: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        bail_arg!("temperature must be positive, got {temperature}");
    }
    if !logits.all_finite() {
        return Err(SundaeError::Numeric("softmax input contains non-finite values".into()));
    }
    let v = logits.last_dim();
    let inv_t = F::of(1.0 / temperature);
    let mut out = logits.clone();
    out.clear_grad();
    for row in out.data_mut().chunks_exact_mut(v.max(1)) {
        row.iter_mut().for_each(|z| *z *= inv_t);
        kernels::softmax_in_place(row);
    }
    Ok(out)
}

/// Mean over positions with `weight_mask == 1` of the label-smoothed
/// cross-entropy between `softmax(logits)` and `targets`.
///
/// The smoothed target puts `1 - eps + eps/v` on the gold class and `eps/v`
/// everywhere else.
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    label_smoothing: f64,
    weight_mask: &[F],
) -> Result<F> {
    if !(0.0..1.0).contains(&label_smoothing) {
        bail_arg!("label smoothing must lie in [0, 1), got {label_smoothing}");
    }
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let v = logits.last_dim();
    let n = logits.len() / v.max(1);
    let node = g.constant(n, v, logits.data().to_vec())?;
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = g.cross_entropy(node, &targets, F::of(label_smoothing), weight_mask)?;
    Ok(g.scalar(loss))
}

/// A differentiable scalar function of a parameter set, evaluable at any
/// precision. Used by [`grad_check`] so the finite-difference reference can
/// run in 64-bit regardless of the precision under test.
pub trait Objective {
    fn evaluate<G: Scalar>(&self, params: &ParamSet<G>) -> Result<(G, Gradients<G>)>;

    fn value<G: Scalar>(&self, params: &ParamSet<G>) -> Result<G> {
        self.evaluate(params).map(|(v, _)| v)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: Some(512), seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients (at precision `F`) against 64-bit central
/// differences `(f(w+h) - f(w-h)) / 2h`.
///
/// Relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Scalar, O: Objective>(
    objective: &O,
    params: &ParamSet<F>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        bail_arg!("finite-difference step must be positive");
    }
    let (v1, grads) = objective.evaluate(params)?;
    let (v2, _) = objective.evaluate(params)?;
    if v1 != v2 {
        return Err(SundaeError::Numeric(
            "objective is not deterministic; seed every random draw inside it".into(),
        ));
    }
    let mut probe: ParamSet<f64> = params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for p in 0..params.len() {
        let len = params.by_index(p).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let analytic = grads.get(p).map_or(0.0, |g| g[i].f64());
            let base = probe.by_index(p).data()[i];
            probe.by_index_mut(p).data_mut()[i] = base + opts.step;
            let plus = objective.value(&probe)?;
            probe.by_index_mut(p).data_mut()[i] = base - opts.step;
            let minus = objective.value(&probe)?;
            probe.by_index_mut(p).data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name_of(p).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_two_way_values() {
        let p = softmax(&t(&[0.0, 2f64.ln()]), 1.0).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let p = softmax(&t(&[0.0, 2f64.ln()]), 0.5).unwrap();
        assert!((p.data()[0] - 0.2).abs() < 1e-12);
        assert!((p.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn softmax_near_zero_temperature_is_one_hot() {
        let p = softmax(&t(&[0.3, 1.2, -4.0, 1.1]), 1e-6).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(softmax(&t(&[0.0, 1.0]), 0.0), Err(SundaeError::Argument(_))));
        assert!(matches!(softmax(&t(&[0.0, 1.0]), -1.0), Err(SundaeError::Argument(_))));
        assert!(matches!(softmax(&t(&[0.0, f64::NAN]), 1.0), Err(SundaeError::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let uniform = Tensor::<f64>::zeros(vec![3, 4]);
        let ce = cross_entropy(&uniform, &[0, 3, 2], 0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        for eps in [0.1, 0.5, 0.9] {
            let ce = cross_entropy(&uniform, &[1, 1, 1], eps, &[1.0, 0.0, 1.0]).unwrap();
            assert!((ce - 4f64.ln()).abs() < 1e-12);
        }
        let mut confident = Tensor::<f64>::zeros(vec![1, 4]);
        confident.data_mut()[2] = 1e6;
        let ce = cross_entropy(&confident, &[2], 0.0, &[1.0]).unwrap();
        assert!(ce.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_errors() {
        let uniform = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(cross_entropy(&uniform, &[0, 4], 0.0, &[1.0, 1.0]).is_err());
        assert!(cross_entropy(&uniform, &[0, 1], 0.0, &[0.0, 0.0]).is_err());
        assert!(cross_entropy(&uniform, &[0, 1], 1.0, &[1.0, 1.0]).is_err());
    }

    struct Square;
    impl Objective for Square {
        fn evaluate<G: Scalar>(&self, params: &ParamSet<G>) -> Result<(G, Gradients<G>)> {
            let w = params.by_index(0).data()[0];
            let mut g = Gradients::zeros_like(params);
            g.per_param[0] = Some(vec![G::of(2.0) * w]);
            Ok((w * w, g))
        }
    }

    struct Constant;
    impl Objective for Constant {
        fn evaluate<G: Scalar>(&self, params: &ParamSet<G>) -> Result<(G, Gradients<G>)> {
            let mut g = Gradients::zeros_like(params);
            g.per_param[0] = Some(vec![G::zero(); params.by_index(0).len()]);
            Ok((G::of(1.5), g))
        }
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let r = grad_check(&Square, &params, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let r = grad_check(&Constant, &params, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn tape_layer_norm_and_attention_gradients() {
        // A small graph touching every op, checked by central differences.
        struct Mixed;
        impl Objective for Mixed {
            fn evaluate<G: Scalar>(&self, p: &ParamSet<G>) -> Result<(G, Gradients<G>)> {
                let mut g = Graph::new(p);
                let table = g.param("emb")?;
                let x = g.gather(table, &[0, 2, 1, 1, 3, 0])?;
                let x = g.layer_norm(x, "ln.g", "ln.b")?;
                let h = g.linear(x, "w", "b")?;
                let h = g.gelu(h);
                let q = g.linear(h, "wq", "bq")?;
                let shape = kernels::AttnShape {
                    batch: 2,
                    q_len: 3,
                    k_len: 3,
                    heads: 2,
                    d_model: 4,
                    causal: false,
                };
                let a = g.attention(q, h, h, Some(&[true, true, false, true, true, true]), shape)?;
                let pooled = g.masked_mean(a, &[true, false, true, true, true, true], 2)?;
                let r = g.prepend_rows(a, pooled, 2)?;
                let r = g.scale(r, G::of(1.7));
                let r = g.add(r, r)?;
                let logits = g.linear(r, "out.w", "out.b")?;
                let w = vec![G::one(); 8];
                let loss = g.cross_entropy(logits, &[0, 1, 2, 0, 1, 2, 2, 1], G::of(0.1), &w)?;
                Ok((g.scalar(loss), g.backward(loss)))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::<f64>::new();
        let mut rand_t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
                .unwrap()
        };
        p.insert("emb", rand_t(vec![4, 4])).unwrap();
        p.insert("ln.g", rand_t(vec![4])).unwrap();
        p.insert("ln.b", rand_t(vec![4])).unwrap();
        p.insert("w", rand_t(vec![4, 4])).unwrap();
        p.insert("b", rand_t(vec![4])).unwrap();
        p.insert("wq", rand_t(vec![4, 4])).unwrap();
        p.insert("bq", rand_t(vec![4])).unwrap();
        p.insert("out.w", rand_t(vec![4, 3])).unwrap();
        p.insert("out.b", rand_t(vec![3])).unwrap();
        let opts = GradCheckOptions { step: 1e-5, max_coords: None, seed: 0 };
        let r = grad_check(&Mixed, &p, &opts).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_temperature_equals_scaled_logits(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..10),
            tau in 0.05f64..5.0,
            shift in -50.0f64..50.0,
        ) {
            let a = softmax(&t(&xs), tau).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x / tau).collect();
            let b = softmax(&t(&scaled), 1.0).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let c = softmax(&t(&shifted), tau).unwrap();
            let sum: f64 = a.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            for i in 0..xs.len() {
                proptest::prop_assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
                proptest::prop_assert!((a.data()[i] - c.data()[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn unsmoothed_cross_entropy_is_negative_log_prob(
            xs in proptest::collection::vec(-10.0f64..10.0, 5),
            target in 0u32..5,
        ) {
            let logits = Tensor::new(vec![1, 5], xs.clone()).unwrap();
            let ce = cross_entropy(&logits, &[target], 0.0, &[1.0]).unwrap();
            let p = softmax(&logits, 1.0).unwrap();
            proptest::prop_assert!((ce + p.data()[target as usize].ln()).abs() < 1e-6);
        }
    }
}
