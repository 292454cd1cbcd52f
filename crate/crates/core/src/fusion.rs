//! Personalised fusion weights from two cross-attentions and the weighted
//! sum of transformed scores.
//!
//! The user embedding queries (a) the task embeddings scaled by each task's
//! transformed score and (b) category embeddings. The two attention outputs
//! are concatenated with the user embedding and mapped by a linear head to
//! one weight per task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax_in_place, Activation, Dense, ParamSet, Parameter, Tensor2};
use crate::umnn::TransformedScores;

/// Output nonlinearity of the weight head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Linear,
    Softmax,
}

/// Which category embeddings the second attention reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySource {
    /// The candidate item's category only.
    #[default]
    Candidate,
    /// Categories of the history events.
    History,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleScore(pub f64);

/// Row `k` is `t_k · table[k]`.
pub fn build_task_embeddings(t: &TransformedScores, table: &Parameter) -> Result<Tensor2> {
    let k = t.0.len();
    if table.value.rows() != k {
        return Err(Error::shape(format!(
            "{k} scores for {} task embeddings",
            table.value.rows()
        )));
    }
    let mut out = table.value.clone();
    for (r, &tk) in t.0.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v *= tk);
    }
    Ok(out)
}

/// `s = Σ w_k t_k`.
pub fn fuse(w: &FusionWeights, t: &TransformedScores) -> Result<EnsembleScore> {
    if w.0.len() != t.0.len() {
        return Err(Error::shape(format!(
            "{} weights for {} scores",
            w.0.len(),
            t.0.len()
        )));
    }
    Ok(EnsembleScore(w.0.iter().zip(&t.0).map(|(a, b)| a * b).sum()))
}

/// Single-query scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    query: Vec<f64>,
    x: Tensor2,
    q: Vec<f64>,
    keys: Tensor2,
    values: Tensor2,
    coef: Vec<f64>,
}

impl AttentionCache {
    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }
}

impl AttentionBlock {
    /// `d_k` is used for both the key and the value width.
    pub fn new<R: Rng + ?Sized>(query_dim: usize, input_dim: usize, d_k: usize, rng: &mut R) -> Self {
        Self {
            w_q: Parameter::glorot(query_dim, d_k, rng),
            w_k: Parameter::glorot(input_dim, d_k, rng),
            w_v: Parameter::glorot(input_dim, d_k, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.value.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.value.cols()
    }

    pub fn forward(&self, query: &[f64], x: &Tensor2) -> Result<(Vec<f64>, AttentionCache)> {
        if x.rows() == 0 {
            return Err(Error::arg("attention over zero rows"));
        }
        if query.len() != self.w_q.value.rows() {
            return Err(Error::shape(format!(
                "query has {} features, expected {}",
                query.len(),
                self.w_q.value.rows()
            )));
        }
        let q = self.w_q.value.vecmat(query);
        let keys = x.matmul(&self.w_k.value)?;
        let values = x.matmul(&self.w_v.value)?;
        let scale = 1.0 / (self.key_dim() as f64).sqrt();
        let mut coef: Vec<f64> = keys.matvec(&q).into_iter().map(|l| l * scale).collect();
        softmax_in_place(&mut coef);
        let out = values.vecmat(&coef);
        Ok((
            out,
            AttentionCache {
                query: query.to_vec(),
                x: x.clone(),
                q,
                keys,
                values,
                coef,
            },
        ))
    }

    /// Accumulates projection gradients; returns `(d_query, d_x)`.
    pub fn backward(&mut self, cache: &AttentionCache, d_out: &[f64]) -> Result<(Vec<f64>, Tensor2)> {
        if d_out.len() != self.value_dim() {
            return Err(Error::shape("attention output gradient has wrong width"));
        }
        let n = cache.coef.len();
        let scale = 1.0 / (self.key_dim() as f64).sqrt();
        let d_coef = cache.values.matvec(d_out);
        let dot: f64 = cache.coef.iter().zip(&d_coef).map(|(a, b)| a * b).sum();
        let d_logit: Vec<f64> = (0..n)
            .map(|i| cache.coef[i] * (d_coef[i] - dot) * scale)
            .collect();

        let mut d_values = Tensor2::zeros(n, self.value_dim());
        d_values.add_outer(&cache.coef, d_out, 1.0);
        let mut d_keys = Tensor2::zeros(n, self.key_dim());
        d_keys.add_outer(&d_logit, &cache.q, 1.0);
        let d_q = cache.keys.vecmat(&d_logit);

        self.w_v.grad.accumulate_tn(&cache.x, &d_values)?;
        self.w_k.grad.accumulate_tn(&cache.x, &d_keys)?;
        self.w_q.grad.add_outer(&cache.query, &d_q, 1.0);

        let d_query = self.w_q.value.matvec(&d_q);
        let mut d_x = d_values.matmul_nt(&self.w_v.value)?;
        d_x.add_scaled(&d_keys.matmul_nt(&self.w_k.value)?, 1.0);
        Ok((d_query, d_x))
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([&mut self.w_q, &mut self.w_k, &mut self.w_v]);
    }
}

pub fn cross_attention(query: &[f64], x: &Tensor2, block: &AttentionBlock) -> Result<Vec<f64>> {
    Ok(block.forward(query, x)?.0)
}

/// Task embeddings, both attentions and the weight head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub task_emb: Parameter,
    pub attn_t: AttentionBlock,
    pub attn_c: AttentionBlock,
    pub head: Dense,
    pub mode: WeightMode,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    t: Vec<f64>,
    attn_t: AttentionCache,
    attn_c: AttentionCache,
    features: Tensor2,
    weights: Vec<f64>,
}

impl FusionCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Input gradients of one fused score.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub d_user: Vec<f64>,
    pub d_t: Vec<f64>,
    pub d_category: Tensor2,
}

impl FusionHead {
    pub fn new<R: Rng + ?Sized>(
        tasks: usize,
        user_dim: usize,
        category_dim: usize,
        task_dim: usize,
        d_k: usize,
        mode: WeightMode,
        rng: &mut R,
    ) -> Self {
        let task_emb = {
            let data = (0..tasks * task_dim)
                .map(|_| rng.random_range(-0.1..0.1))
                .collect();
            Parameter::new(Tensor2::new(tasks, task_dim, data).expect("sized by construction"))
        };
        let attn_t = AttentionBlock::new(user_dim, task_dim, d_k, rng);
        let attn_c = AttentionBlock::new(user_dim, category_dim, d_k, rng);
        let head = Dense::new(user_dim + 2 * d_k, tasks, Activation::Identity, rng);
        Self {
            task_emb,
            attn_t,
            attn_c,
            head,
            mode,
        }
    }

    pub fn tasks(&self) -> usize {
        self.task_emb.value.rows()
    }

    pub fn user_dim(&self) -> usize {
        self.attn_t.w_q.value.rows()
    }

    /// Weights `w` for one candidate; `c_emb` holds one or more category
    /// embedding rows.
    pub fn fusion_weights(
        &self,
        u: &[f64],
        t: &TransformedScores,
        c_emb: &Tensor2,
    ) -> Result<(FusionWeights, FusionCache)> {
        let t_emb = build_task_embeddings(t, &self.task_emb)?;
        let (a1, attn_t) = self.attn_t.forward(u, &t_emb)?;
        let (a2, attn_c) = self.attn_c.forward(u, c_emb)?;
        let mut feat = Vec::with_capacity(u.len() + a1.len() + a2.len());
        feat.extend_from_slice(u);
        feat.extend_from_slice(&a1);
        feat.extend_from_slice(&a2);
        let features = Tensor2::row_vector(&feat);
        let (z, _) = self.head.forward(&features)?;
        let mut w = z.into_data();
        if self.mode == WeightMode::Softmax {
            softmax_in_place(&mut w);
        }
        Ok((
            FusionWeights(w.clone()),
            FusionCache {
                t: t.0.clone(),
                attn_t,
                attn_c,
                features,
                weights: w,
            },
        ))
    }

    /// Weights and fused score together.
    pub fn score(
        &self,
        u: &[f64],
        t: &TransformedScores,
        c_emb: &Tensor2,
    ) -> Result<(EnsembleScore, FusionCache)> {
        let (w, cache) = self.fusion_weights(u, t, c_emb)?;
        Ok((fuse(&w, t)?, cache))
    }

    /// Backward from `ds = ∂L/∂s`. Accumulates parameter gradients.
    pub fn backward(&mut self, cache: &FusionCache, ds: f64) -> Result<FusionGrads> {
        let k = self.tasks();
        let mut d_t: Vec<f64> = cache.weights.iter().map(|w| ds * w).collect();
        let mut dw: Vec<f64> = cache.t.iter().map(|t| ds * t).collect();
        if self.mode == WeightMode::Softmax {
            let dot: f64 = cache.weights.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (g, w) in dw.iter_mut().zip(&cache.weights) {
                *g = w * (*g - dot);
            }
        }
        let dz = Tensor2::row_vector(&dw);
        let d_feat = self
            .head
            .backward_pre(&cache.features, &dz, true)?
            .expect("input gradient requested");
        let d_feat = d_feat.data();
        let ud = self.user_dim();
        let dv = self.attn_t.value_dim();
        let mut d_user = d_feat[..ud].to_vec();

        let (dq1, d_temb) = self.attn_t.backward(&cache.attn_t, &d_feat[ud..ud + dv])?;
        let (dq2, d_category) = self.attn_c.backward(&cache.attn_c, &d_feat[ud + dv..])?;
        for ((d, a), b) in d_user.iter_mut().zip(&dq1).zip(&dq2) {
            *d += a + b;
        }
        for r in 0..k {
            let e = self.task_emb.value.row(r);
            let g = d_temb.row(r);
            d_t[r] += e.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            let tk = cache.t[r];
            for (dst, gg) in self.task_emb.grad.row_mut(r).iter_mut().zip(g) {
                *dst += tk * gg;
            }
        }
        Ok(FusionGrads {
            d_user,
            d_t,
            d_category,
        })
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.task_emb"), &self.task_emb));
        self.attn_t.push_named(&format!("{prefix}.attn_t"), out);
        self.attn_c.push_named(&format!("{prefix}.attn_c"), out);
        out.push((format!("{prefix}.head.weight"), &self.head.weight));
        out.push((format!("{prefix}.head.bias"), &self.head.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.task_emb);
        self.attn_t.push_mut(out);
        self.attn_c.push_mut(out);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
    }
}

impl ParamSet for FusionHead {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named("fusion", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_param_set, finite_diff_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Parameter {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        Parameter::new(t)
    }

    #[test]
    fn task_embeddings_scale_rows() {
        let table = Parameter::new(Tensor2::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = build_task_embeddings(&TransformedScores(vec![0.0, 1.0]), &table).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 3.0, 4.0]);
        let m2 = build_task_embeddings(&TransformedScores(vec![0.0, 2.0]), &table).unwrap();
        assert_eq!(m2.row(1), &[6.0, 8.0]);
        assert!(build_task_embeddings(&TransformedScores(vec![1.0]), &table).is_err());
    }

    #[test]
    fn fuse_examples() {
        let t = TransformedScores(vec![1.0, 2.0]);
        assert_eq!(fuse(&FusionWeights(vec![0.0, 1.0]), &t).unwrap().0, 2.0);
        assert_eq!(fuse(&FusionWeights(vec![0.0, 0.0]), &t).unwrap().0, 0.0);
        assert!((fuse(&FusionWeights(vec![0.3, 0.7]), &t).unwrap().0 - 1.7).abs() < 1e-15);
        assert!(fuse(&FusionWeights(vec![1.0]), &t).is_err());
    }

    #[test]
    fn single_row_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttentionBlock::new(3, 2, 4, &mut rng);
        let x = Tensor2::row_vector(&[0.4, -0.9]);
        let out = cross_attention(&[1.0, 2.0, 3.0], &x, &block).unwrap();
        let want = block.w_v.value.vecmat(x.row(0));
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = AttentionBlock::new(2, 2, 2, &mut rng);
        let x = Tensor2::from_rows(&[vec![0.5, 0.1], vec![0.5, 0.1], vec![0.5, 0.1]]).unwrap();
        let (out, cache) = block.forward(&[0.3, -0.2], &x).unwrap();
        let want = block.w_v.value.vecmat(x.row(0));
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let s: f64 = cache.coefficients().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_row_identity_projection_by_hand() {
        let block = AttentionBlock {
            w_q: identity(2),
            w_k: identity(2),
            w_v: identity(2),
        };
        let q = [1.0, 0.0];
        let x = Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = cross_attention(&q, &x, &block).unwrap();
        // logits 2/√2 and 0
        let e = (2.0 / 2f64.sqrt()).exp();
        let a0 = e / (e + 1.0);
        let a1 = 1.0 / (e + 1.0);
        assert!((out[0] - 2.0 * a0).abs() < 1e-15);
        assert!((out[1] - a1).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = AttentionBlock::new(2, 2, 2, &mut rng);
        assert!(matches!(
            cross_attention(&[0.0, 0.0], &Tensor2::zeros(0, 2), &block),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_head_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = FusionHead::new(2, 3, 2, 4, 4, WeightMode::Linear, &mut rng);
        f.head.weight.value.fill(0.0);
        f.head.bias.value = Tensor2::row_vector(&[0.25, -1.5]);
        let c = Tensor2::row_vector(&[0.1, 0.2]);
        for t in [vec![0.1, 0.9], vec![3.0, -2.0]] {
            let (w, _) = f
                .fusion_weights(&[0.3, 0.1, -0.7], &TransformedScores(t), &c)
                .unwrap();
            assert_eq!(w.0, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn single_task_constant_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = FusionHead::new(1, 2, 2, 2, 2, WeightMode::Linear, &mut rng);
        f.head.weight.value.fill(0.0);
        f.head.bias.value = Tensor2::row_vector(&[1.0]);
        let (w, _) = f
            .fusion_weights(&[0.5, 0.5], &TransformedScores(vec![0.7]), &Tensor2::row_vector(&[1.0, 0.0]))
            .unwrap();
        assert_eq!(w.0, vec![1.0]);
    }

    fn check_gradients(mode: WeightMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FusionHead::new(3, 4, 2, 3, 5, mode, &mut rng);
        let u: Vec<f64> = (0..4).map(|_| rng.random_range(-0.9..0.9)).collect();
        let t = vec![0.3, 1.2, -0.4];
        let c = Tensor2::from_rows(&[vec![0.2, -0.5], vec![0.7, 0.1]]).unwrap();
        let target = 0.8;
        let loss = |f: &FusionHead, u: &[f64], t: &[f64], c: &Tensor2| -> Result<f64> {
            let (s, _) = f.score(u, &TransformedScores(t.to_vec()), c)?;
            Ok((s.0 - target).powi(2))
        };
        let (s, cache) = f.score(&u, &TransformedScores(t.clone()), &c).unwrap();
        let g = f.backward(&cache, 2.0 * (s.0 - target)).unwrap();

        let err = check_param_set(&mut f, 1e-6, None, |f| loss(f, &u, &t, &c)).unwrap();
        assert!(err < 1e-4, "params {err}");
        let err = finite_diff_check(&u, &g.d_user, 1e-6, |v| loss(&f, v, &t, &c)).unwrap();
        assert!(err < 1e-4, "user {err}");
        let err = finite_diff_check(&t, &g.d_t, 1e-6, |v| loss(&f, &u, v, &c)).unwrap();
        assert!(err < 1e-4, "scores {err}");
        let err = finite_diff_check(c.data(), g.d_category.data(), 1e-6, |v| {
            loss(&f, &u, &t, &Tensor2::new(2, 2, v.to_vec())?)
        })
        .unwrap();
        assert!(err < 1e-4, "category {err}");
    }

    #[test]
    fn linear_head_gradients_match_finite_differences() {
        check_gradients(WeightMode::Linear, 11);
    }

    #[test]
    fn softmax_head_gradients_match_finite_differences() {
        check_gradients(WeightMode::Softmax, 12);
    }

    #[test]
    fn softmax_mode_yields_simplex_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = FusionHead::new(4, 3, 2, 2, 2, WeightMode::Softmax, &mut rng);
        let (w, _) = f
            .fusion_weights(
                &[0.1, 0.2, 0.3],
                &TransformedScores(vec![0.1, 0.5, 0.9, 0.2]),
                &Tensor2::row_vector(&[0.3, 0.3]),
            )
            .unwrap();
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.0.iter().all(|&x| x > 0.0));
    }
}
