//! Strictly monotone per-task score transforms.
//!
//! Each task owns a head computing
//!
//! ```text
//! g(p, h) = ∫₀ᵖ f(t, h) dt + β,    f(t, h) = ELU(MLP(t ⊕ h ⊕ pos(t))) + 1
//! ```
//!
//! `f > 0` everywhere because ELU is bounded below by −1, so `g` is strictly
//! increasing in `p` for any parameter values. The integral is evaluated with
//! Clenshaw–Curtis quadrature; parameter gradients integrate the integrand's
//! gradient over the same nodes and `∂g/∂p` is the integrand at the upper
//! limit.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{elu_derivative, elu_scalar, Activation, Mlp, MlpCache, ParamSet, Parameter, Tensor2};
use crate::quadrature::QuadratureRule;

/// Width of the sinusoidal encoding of the integration variable.
pub const POS_ENC_DIM: usize = 4;

/// Upper limits are clamped into `[P_CLAMP, 1 − P_CLAMP]` before integration.
pub const P_CLAMP: f64 = 1e-9;

/// Inputs further than this outside `[0, 1]` are rejected instead of clamped.
pub const P_TOLERANCE: f64 = 1e-6;

/// Personalisation features fed to every integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One transformed score per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedScores(pub Vec<f64>);

impl TransformedScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Gradients of one transform output with respect to its non-parameter
/// inputs. Parameter gradients are accumulated into the head itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrads {
    pub d_p: f64,
    pub d_beta: f64,
    pub d_context: Vec<f64>,
}

pub fn positional_encoding(t: f64) -> [f64; POS_ENC_DIM] {
    let a = PI * t;
    [a.sin(), a.cos(), (2.0 * a).sin(), (2.0 * a).cos()]
}

/// Check an upper limit and clamp it into the open unit interval.
pub fn prepare_upper_limit(p: f64) -> Result<f64> {
    if !(-P_TOLERANCE..=1.0 + P_TOLERANCE).contains(&p) {
        return Err(Error::arg(format!("pxtr {p} outside [0, 1]")));
    }
    Ok(p.clamp(P_CLAMP, 1.0 - P_CLAMP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmnnHead {
    pub task: usize,
    pub integrand: Mlp,
    pub beta: Parameter,
    context_dim: usize,
}

/// Forward state of a batched transform, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct UmnnCache {
    weights: Vec<f64>,
    nodes: usize,
    mlp: MlpCache,
}

impl UmnnHead {
    /// Random head: Glorot-initialised ReLU integrand with `depth` hidden
    /// layers of width `hidden`, `β ~ U(−0.5, 0.5)`.
    pub fn new<R: Rng + ?Sized>(
        task: usize,
        context_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let dims = Self::dims(context_dim, hidden, depth);
        let integrand = Mlp::new(&dims, Activation::Relu, Activation::Identity, rng);
        let beta = rng.random_range(-0.5..0.5);
        Self {
            task,
            integrand,
            beta: Parameter::new(Tensor2::filled(1, 1, beta)),
            context_dim,
        }
    }

    /// Head with an all-zero integrand network, giving `g(p) = p + β`.
    pub fn identity(task: usize, context_dim: usize, hidden: usize, depth: usize, beta: f64) -> Self {
        let dims = Self::dims(context_dim, hidden, depth);
        Self {
            task,
            integrand: Mlp::zeroed(&dims, Activation::Relu, Activation::Identity),
            beta: Parameter::new(Tensor2::filled(1, 1, beta)),
            context_dim,
        }
    }

    fn dims(context_dim: usize, hidden: usize, depth: usize) -> Vec<usize> {
        let mut dims = vec![1 + context_dim + POS_ENC_DIM];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(1);
        dims
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn beta(&self) -> f64 {
        self.beta.value.get(0, 0)
    }

    fn check_context(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.context_dim {
            return Err(Error::shape(format!(
                "context has {} features, head {} expects {}",
                h.len(),
                self.task,
                self.context_dim
            )));
        }
        Ok(())
    }

    fn write_input(row: &mut [f64], t: f64, h: &[f64]) {
        row[0] = t;
        row[1..1 + h.len()].copy_from_slice(h);
        row[1 + h.len()..].copy_from_slice(&positional_encoding(t));
    }

    /// `f(t, h) = ELU(MLP(t ⊕ h ⊕ pos(t))) + 1`.
    pub fn integrand_eval(&self, t: f64, h: &ContextVector) -> Result<f64> {
        self.check_context(h.as_slice())?;
        let mut x = Tensor2::zeros(1, self.integrand.input_dim());
        Self::write_input(x.row_mut(0), t, h.as_slice());
        let out = self.integrand.forward(&x)?;
        Ok(elu_scalar(out.get(0, 0)) + 1.0)
    }

    pub fn transform_forward(&self, p: f64, h: &ContextVector, rule: &QuadratureRule) -> Result<f64> {
        let ctx = Tensor2::row_vector(h.as_slice());
        let (g, _) = self.forward_batch(&[p], &ctx, rule)?;
        Ok(g[0])
    }

    /// Single-sample backward. Accumulates `upstream · ∂g/∂θ` and
    /// `upstream · ∂g/∂β` into the head's gradients and returns the input
    /// gradients.
    pub fn transform_backward(
        &mut self,
        p: f64,
        h: &ContextVector,
        rule: &QuadratureRule,
        upstream: f64,
    ) -> Result<TransformGrads> {
        let ctx = Tensor2::row_vector(h.as_slice());
        let (_, cache) = self.forward_batch(&[p], &ctx, rule)?;
        let d_ctx = self.backward_batch(&cache, &[upstream], true)?;
        let d_p = upstream * self.integrand_eval(prepare_upper_limit(p)?, h)?;
        Ok(TransformGrads {
            d_p,
            d_beta: upstream,
            d_context: d_ctx.map(Tensor2::into_data).unwrap_or_default(),
        })
    }

    /// Transform a batch of upper limits, one context row per sample.
    pub fn forward_batch(
        &self,
        ps: &[f64],
        contexts: &Tensor2,
        rule: &QuadratureRule,
    ) -> Result<(Vec<f64>, UmnnCache)> {
        if contexts.rows() != ps.len() {
            return Err(Error::shape(format!(
                "{} upper limits but {} context rows",
                ps.len(),
                contexts.rows()
            )));
        }
        if contexts.cols() != self.context_dim {
            return Err(Error::shape(format!(
                "context has {} features, head {} expects {}",
                contexts.cols(),
                self.task,
                self.context_dim
            )));
        }
        let q = rule.len();
        let mut input = Tensor2::zeros(ps.len() * q, self.integrand.input_dim());
        let mut weights = Vec::with_capacity(ps.len() * q);
        for (i, &p) in ps.iter().enumerate() {
            let p = prepare_upper_limit(p)?;
            let h = contexts.row(i);
            for j in 0..q {
                let (t, w) = rule.mapped(j, p);
                Self::write_input(input.row_mut(i * q + j), t, h);
                weights.push(w);
            }
        }
        let (out, mlp) = self.integrand.forward_cached(&input)?;
        let beta = self.beta();
        let g = (0..ps.len())
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..q {
                    let k = i * q + j;
                    acc += weights[k] * (elu_scalar(out.get(k, 0)) + 1.0);
                }
                acc + beta
            })
            .collect();
        Ok((
            g,
            UmnnCache {
                weights,
                nodes: q,
                mlp,
            },
        ))
    }

    /// Backward of [`forward_batch`](Self::forward_batch). Returns the context
    /// gradient (one row per sample) when `need_context` is set.
    pub fn backward_batch(
        &mut self,
        cache: &UmnnCache,
        upstream: &[f64],
        need_context: bool,
    ) -> Result<Option<Tensor2>> {
        let q = cache.nodes;
        if upstream.len() * q != cache.weights.len() {
            return Err(Error::shape("upstream length does not match cached batch"));
        }
        let out = cache.mlp.output_pre_activation();
        let mut d_out = Tensor2::zeros(cache.weights.len(), 1);
        for (i, &u) in upstream.iter().enumerate() {
            for j in 0..q {
                let k = i * q + j;
                d_out.set(k, 0, u * cache.weights[k] * elu_derivative(out.get(k, 0)));
            }
        }
        let beta_grad: f64 = upstream.iter().sum();
        self.beta.grad.data_mut()[0] += beta_grad;

        let need_input = need_context && self.context_dim > 0;
        let d_in = self.integrand.backward(&cache.mlp, &d_out, need_input)?;
        if !need_context {
            return Ok(None);
        }
        let mut d_ctx = Tensor2::zeros(upstream.len(), self.context_dim);
        if let Some(d_in) = d_in {
            for i in 0..upstream.len() {
                let row = d_ctx.row_mut(i);
                for j in 0..q {
                    let src = &d_in.row(i * q + j)[1..1 + self.context_dim];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += s;
                    }
                }
            }
        }
        Ok(Some(d_ctx))
    }

    /// `points` evenly spaced samples of `(p, g(p))` over `[0, 1]`.
    pub fn curve(&self, h: &ContextVector, points: usize, rule: &QuadratureRule) -> Result<Vec<(f64, f64)>> {
        if points < 2 {
            return Err(Error::arg("a transform curve needs at least 2 points"));
        }
        let ps: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
        let ctx = Tensor2::from_rows(&vec![h.0.clone(); points])?;
        let ctx = if self.context_dim == 0 {
            Tensor2::zeros(points, 0)
        } else {
            ctx
        };
        let (g, _) = self.forward_batch(&ps, &ctx, rule)?;
        Ok(ps.into_iter().zip(g).collect())
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.integrand.push_named(&format!("{prefix}.integrand"), out);
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        self.integrand.push_mut(out);
        out.push(&mut self.beta);
    }
}

impl ParamSet for UmnnHead {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named(&format!("umnn{}", self.task), &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

/// Apply each task's head to its own pxtr under a shared context.
pub fn transform_all(
    heads: &[UmnnHead],
    p: &[f64],
    h: &ContextVector,
    rule: &QuadratureRule,
) -> Result<TransformedScores> {
    if heads.len() != p.len() {
        return Err(Error::shape(format!(
            "{} heads for {} pxtrs",
            heads.len(),
            p.len()
        )));
    }
    heads
        .iter()
        .zip(p)
        .map(|(head, &pk)| head.transform_forward(pk, h, rule))
        .collect::<Result<Vec<_>>>()
        .map(TransformedScores)
}

/// True when every consecutive pair of curve values strictly increases.
pub fn is_strictly_increasing(curve: &[(f64, f64)]) -> bool {
    curve.windows(2).all(|w| w[1].1 > w[0].1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::check_param_set;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rule() -> std::sync::Arc<QuadratureRule> {
        QuadratureRule::cached(32).unwrap()
    }

    fn random_context(rng: &mut ChaCha8Rng, dim: usize) -> ContextVector {
        ContextVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Independent forward pass written directly from the definition:
    /// explicit loops, no tensor helpers.
    fn reference_integrand(head: &UmnnHead, t: f64, h: &[f64]) -> f64 {
        let mut a: Vec<f64> = std::iter::once(t)
            .chain(h.iter().copied())
            .chain([
                (PI * t).sin(),
                (PI * t).cos(),
                (2.0 * PI * t).sin(),
                (2.0 * PI * t).cos(),
            ])
            .collect();
        let n = head.integrand.layers.len();
        for (li, layer) in head.integrand.layers.iter().enumerate() {
            let w = &layer.weight.value;
            let mut next = vec![0.0; w.cols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut s = layer.bias.value.get(0, j);
                for (i, ai) in a.iter().enumerate() {
                    s += ai * w.get(i, j);
                }
                *out = if li + 1 < n { s.max(0.0) } else { s };
            }
            a = next;
        }
        let o = a[0];
        (if o > 0.0 { o } else { o.exp() - 1.0 }) + 1.0
    }

    #[test]
    fn zero_network_integrand_is_one() {
        let head = UmnnHead::identity(0, 3, 8, 3, 0.0);
        for t in [0.0, 0.3, 1.0] {
            let h = ContextVector(vec![5.0, -2.0, 0.1]);
            assert_eq!(head.integrand_eval(t, &h).unwrap(), 1.0);
        }
    }

    #[test]
    fn integrand_is_positive_and_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = UmnnHead::new(0, 6, 16, 3, &mut rng);
        let zero = ContextVector::zeros(6);
        let got = head.integrand_eval(0.5, &zero).unwrap();
        let want = reference_integrand(&head, 0.5, zero.as_slice());
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
        for _ in 0..200 {
            let h = random_context(&mut rng, 6);
            let t = rng.random_range(0.0..=1.0);
            let v = head.integrand_eval(t, &h).unwrap();
            assert!(v > 0.0);
            assert!((v - reference_integrand(&head, t, h.as_slice())).abs() < 1e-12);
        }
    }

    #[test]
    fn context_dimension_is_checked() {
        let head = UmnnHead::identity(0, 4, 8, 2, 0.0);
        let r = head.integrand_eval(0.5, &ContextVector::zeros(3));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn identity_head_gives_p_plus_beta() {
        let head = UmnnHead::identity(0, 2, 8, 3, 0.2);
        let h = ContextVector::zeros(2);
        let g = head.transform_forward(0.7, &h, &rule()).unwrap();
        assert!((g - 0.9).abs() < 1e-12, "{g}");
    }

    #[test]
    fn zero_upper_limit_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = UmnnHead::new(0, 4, 16, 3, &mut rng);
        let h = random_context(&mut rng, 4);
        let g = head.transform_forward(0.0, &h, &rule()).unwrap();
        // the limit is clamped to 1e-9, so the integral term is O(1e-9)
        assert!((g - head.beta()).abs() < 1e-8);
    }

    #[test]
    fn out_of_range_pxtr_is_rejected_but_tiny_excursions_clamp() {
        let head = UmnnHead::identity(0, 0, 4, 1, 0.0);
        let h = ContextVector::zeros(0);
        assert!(matches!(
            head.transform_forward(1.5, &h, &rule()),
            Err(Error::Argument(_))
        ));
        assert!(head.transform_forward(-1e-3, &h, &rule()).is_err());
        assert!(head.transform_forward(1.0 + 1e-7, &h, &rule()).is_ok());
        assert!(head.transform_forward(-1e-7, &h, &rule()).is_ok());
    }

    #[test]
    fn random_head_orders_two_pxtrs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = UmnnHead::new(0, 4, 32, 3, &mut rng);
        let h = random_context(&mut rng, 4);
        let a = head.transform_forward(0.8, &h, &rule()).unwrap();
        let b = head.transform_forward(0.3, &h, &rule()).unwrap();
        assert!(a > b);
    }

    #[test]
    fn identity_backward() {
        let mut head = UmnnHead::identity(0, 2, 8, 3, 0.0);
        let h = ContextVector(vec![0.4, -0.1]);
        let g = head.transform_backward(0.6, &h, &rule(), 1.0).unwrap();
        assert_eq!(g.d_p, 1.0);
        assert_eq!(g.d_beta, 1.0);
        assert_eq!(head.beta.grad.get(0, 0), 1.0);
    }

    #[test]
    fn upper_limit_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = rule();
        for _ in 0..20 {
            let mut head = UmnnHead::new(0, 4, 16, 3, &mut rng);
            let h = random_context(&mut rng, 4);
            let p = rng.random_range(0.05..0.95);
            let g = head.transform_backward(p, &h, &r, 1.0).unwrap();
            let eps = 1e-5;
            let num = (head.transform_forward(p + eps, &h, &r).unwrap()
                - head.transform_forward(p - eps, &h, &r).unwrap())
                / (2.0 * eps);
            // the gap is the p-derivative of the quadrature error, which the
            // ReLU kinks keep well above round-off at this node count
            let rel = (g.d_p - num).abs() / 1f64.max(g.d_p.abs()).max(num.abs());
            assert!(rel < 1e-1, "rel {rel}");
            // identity of ∂g/∂p with the integrand at the limit
            assert!((g.d_p - head.integrand_eval(p, &h).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_and_context_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rule();
        let mut head = UmnnHead::new(0, 3, 8, 3, &mut rng);
        let h = random_context(&mut rng, 3);
        let p = 0.63;
        let up = 1.7;
        let grads = head.transform_backward(p, &h, &r, up).unwrap();

        let err = check_param_set(&mut head, 1e-6, None, |m| {
            Ok(up * m.transform_forward(p, &h, &r)?)
        })
        .unwrap();
        assert!(err < 1e-4, "param rel err {err}");

        let err = crate::numcore::finite_diff_check(h.as_slice(), &grads.d_context, 1e-6, |v| {
            Ok(up * head.transform_forward(p, &ContextVector(v.to_vec()), &r)?)
        })
        .unwrap();
        assert!(err < 1e-4, "context rel err {err}");
    }

    #[test]
    fn batched_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = UmnnHead::new(1, 2, 8, 2, &mut rng);
        let ps = [0.1, 0.5, 0.9];
        let ctx = Tensor2::new(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]).unwrap();
        let (g, _) = head.forward_batch(&ps, &ctx, &rule()).unwrap();
        for i in 0..3 {
            let single = head
                .transform_forward(ps[i], &ContextVector(ctx.row(i).to_vec()), &rule())
                .unwrap();
            assert!((g[i] - single).abs() < 1e-14);
        }
    }

    #[test]
    fn transform_all_is_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let heads: Vec<_> = (0..3).map(|k| UmnnHead::new(k, 2, 8, 2, &mut rng)).collect();
        let h = random_context(&mut rng, 2);
        let p = [0.2, 0.5, 0.7];
        let t = transform_all(&heads, &p, &h, &rule()).unwrap();
        let single = transform_all(&heads[..1], &p[..1], &h, &rule()).unwrap();
        assert_eq!(single.0[0], heads[0].transform_forward(0.2, &h, &rule()).unwrap());

        let perm = [2usize, 0, 1];
        let heads_p: Vec<_> = perm.iter().map(|&i| heads[i].clone()).collect();
        let p_p: Vec<_> = perm.iter().map(|&i| p[i]).collect();
        let t_p = transform_all(&heads_p, &p_p, &h, &rule()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(t_p.0[j], t.0[i]);
        }
        assert!(matches!(
            transform_all(&heads, &p[..2], &h, &rule()),
            Err(Error::Shape(_))
        ));

        // same context, task 1 pxtr raised: coordinate 1 increases
        let t2 = transform_all(&heads, &[0.2, 0.55, 0.7], &h, &rule()).unwrap();
        assert!(t2.0[1] > t.0[1]);
        assert_eq!(t2.0[0], t.0[0]);
    }

    #[test]
    fn beta_shift_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut head = UmnnHead::new(0, 2, 8, 2, &mut rng);
        let h = random_context(&mut rng, 2);
        let ps = [0.1, 0.4, 0.35, 0.9];
        let before: Vec<f64> = ps.iter().map(|&p| head.transform_forward(p, &h, &rule()).unwrap()).collect();
        head.beta.value.set(0, 0, head.beta() + 3.0);
        let after: Vec<f64> = ps.iter().map(|&p| head.transform_forward(p, &h, &rule()).unwrap()).collect();
        for i in 0..ps.len() {
            assert!((after[i] - before[i] - 3.0).abs() < 1e-12);
            for j in 0..ps.len() {
                assert_eq!(before[i] < before[j], after[i] < after[j]);
            }
        }
    }

    #[test]
    fn curve_has_requested_points_and_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let head = UmnnHead::new(0, 2, 16, 3, &mut rng);
        let c = head.curve(&random_context(&mut rng, 2), 101, &rule()).unwrap();
        assert_eq!(c.len(), 101);
        assert!(is_strictly_increasing(&c));
    }
}
