//! Comparison fusers: ranking by one raw pxtr, logistic regression and a
//! small MLP trained on the click label, and two hand-written fusion
//! formulas. The learned fusers accept transformed scores in place of raw
//! pxtrs, see `Umre::transform_session`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Session;
use crate::error::{Error, Result};
use crate::metrics::{RankedItem, RankedSession};
use crate::numcore::{Activation, Adam, AdamConfig, Mlp, MlpCache, ParamSet, Parameter, Tensor2};

/// Rank a session by task `k`'s raw pxtr.
pub fn single_sort(session: &Session, task: usize) -> Result<RankedSession> {
    let items = session
        .records
        .iter()
        .map(|r| {
            let score = *r
                .pxtrs
                .get(task)
                .ok_or_else(|| Error::arg(format!("task index {task} out of range")))?;
            Ok(RankedItem {
                item_id: r.item_id,
                score,
                labels: r.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RankedSession::new(items)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) − y·z`, the logistic loss on a logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// A model producing one logit per row of a pxtr matrix.
pub trait ClickFuser: ParamSet + Clone + Send + Sync {
    type Cache;

    fn forward(&self, x: &Tensor2) -> Result<(Vec<f64>, Self::Cache)>;

    fn backward(&mut self, cache: &Self::Cache, d_logits: &[f64]) -> Result<()>;

    /// `σ(logit)` per row.
    fn predict(&self, x: &Tensor2) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0.into_iter().map(sigmoid).collect())
    }
}

/// `σ(w·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrFuser {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LrFuser {
    pub fn zeroed(inputs: usize) -> Self {
        Self {
            weight: Parameter::zeros(inputs, 1),
            bias: Parameter::zeros(1, 1),
        }
    }

    pub fn with_weights(w: &[f64], b: f64) -> Self {
        Self {
            weight: Parameter::new(Tensor2::new(w.len(), 1, w.to_vec()).expect("column vector")),
            bias: Parameter::new(Tensor2::filled(1, 1, b)),
        }
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl ParamSet for LrFuser {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named("lr", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

impl ClickFuser for LrFuser {
    type Cache = Tensor2;

    fn forward(&self, x: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
        let z = crate::numcore::linear_forward(x, &self.weight, &self.bias)?;
        Ok((z.into_data(), x.clone()))
    }

    fn backward(&mut self, x: &Tensor2, d_logits: &[f64]) -> Result<()> {
        let dz = Tensor2::new(d_logits.len(), 1, d_logits.to_vec())?;
        self.weight.grad.accumulate_tn(x, &dz)?;
        self.bias.grad.data_mut()[0] += d_logits.iter().sum::<f64>();
        Ok(())
    }
}

/// Two ReLU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpFuser {
    pub mlp: Mlp,
}

pub const MLP_FUSER_HIDDEN: usize = 64;

impl MlpFuser {
    pub fn new<R: Rng + ?Sized>(inputs: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(
                &[inputs, MLP_FUSER_HIDDEN, MLP_FUSER_HIDDEN, 1],
                Activation::Relu,
                Activation::Identity,
                rng,
            ),
        }
    }

    pub fn zeroed(inputs: usize) -> Self {
        Self {
            mlp: Mlp::zeroed(
                &[inputs, MLP_FUSER_HIDDEN, MLP_FUSER_HIDDEN, 1],
                Activation::Relu,
                Activation::Identity,
            ),
        }
    }
}

impl ParamSet for MlpFuser {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.mlp.push_named("mlp", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.mlp.push_mut(&mut out);
        out
    }
}

impl ClickFuser for MlpFuser {
    type Cache = MlpCache;

    fn forward(&self, x: &Tensor2) -> Result<(Vec<f64>, MlpCache)> {
        let (out, cache) = self.mlp.forward_cached(x)?;
        Ok((out.into_data(), cache))
    }

    fn backward(&mut self, cache: &MlpCache, d_logits: &[f64]) -> Result<()> {
        let d = Tensor2::new(d_logits.len(), 1, d_logits.to_vec())?;
        self.mlp.backward(cache, &d, false)?;
        Ok(())
    }
}

/// Mean logistic loss of `fuser` on rows `x` with labels `y`, plus the
/// logit gradients.
pub fn click_loss<F: ClickFuser>(fuser: &F, x: &Tensor2, y: &[f64]) -> Result<(f64, Vec<f64>, F::Cache)> {
    let (z, cache) = fuser.forward(x)?;
    let n = z.len() as f64;
    let loss = z.iter().zip(y).map(|(&zi, &yi)| bce_with_logit(zi, yi)).sum::<f64>() / n;
    let d = z.iter().zip(y).map(|(&zi, &yi)| (sigmoid(zi) - yi) / n).collect();
    Ok((loss, d, cache))
}

/// Stack the pxtrs and one task's labels of several sessions.
pub fn stack_sessions(sessions: &[&Session], label_task: usize) -> Result<(Tensor2, Vec<f64>)> {
    let rows: Vec<Vec<f64>> = sessions
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.pxtrs.clone()))
        .collect();
    let y = sessions
        .iter()
        .flat_map(|s| s.records.iter().map(move |r| r.labels.get(label_task).copied()))
        .map(|l| l.map(f64::from).ok_or_else(|| Error::arg("label task out of range")))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor2::from_rows(&rows)?, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickTraining {
    pub epochs: usize,
    pub batch_sessions: usize,
    /// Index of the click task whose label supervises the fusers.
    pub label_task: usize,
}

impl Default for ClickTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_sessions: 16,
            label_task: 0,
        }
    }
}

/// Minibatch training on the click label; returns the mean loss per epoch.
pub fn train_click_fuser<F: ClickFuser, R: Rng + ?Sized>(
    fuser: &mut F,
    sessions: &[Session],
    cfg: &ClickTraining,
    adam: AdamConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(adam);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_sessions.max(1)) {
            let batch: Vec<&Session> = chunk.iter().map(|&i| &sessions[i]).collect();
            let (x, y) = stack_sessions(&batch, cfg.label_task)?;
            let (loss, d, cache) = click_loss(fuser, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite baseline loss in epoch {} batch {batches}",
                    epoch + 1
                )));
            }
            fuser.backward(&cache, &d)?;
            opt.step(fuser.params_mut());
            total += loss;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
    }
    Ok(losses)
}

/// Per-task parameters of the hand-written fusion formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaParams {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FormulaParams {
    /// `w = α = β = 1` with offset `b` for `k` tasks.
    pub fn unit(k: usize, b: f64) -> Self {
        Self {
            w: vec![1.0; k],
            alpha: vec![1.0; k],
            b: vec![b; k],
            beta: vec![1.0; k],
        }
    }

    fn check(&self, k: usize) -> Result<()> {
        if [self.w.len(), self.alpha.len(), self.b.len(), self.beta.len()]
            .iter()
            .any(|&n| n != k)
        {
            return Err(Error::shape(format!("formula parameters must have {k} entries each")));
        }
        Ok(())
    }
}

/// `Σ_k w_k (α_k p_k + b_k)^β_k`.
pub fn formula_additive(p: &[f64], params: &FormulaParams) -> Result<f64> {
    params.check(p.len())?;
    let mut s = 0.0;
    for k in 0..p.len() {
        let base = params.alpha[k] * p[k] + params.b[k];
        let e = params.beta[k];
        if base < 0.0 && e.fract() != 0.0 {
            return Err(Error::arg(format!(
                "task {k}: negative base {base} with fractional exponent {e}"
            )));
        }
        let term = base.powf(e);
        if !term.is_finite() {
            return Err(Error::arg(format!("task {k}: {base}^{e} is not finite")));
        }
        s += params.w[k] * term;
    }
    Ok(s)
}

/// `Π_k ((α_k p_k + b_k)^β_k)^w_k`, evaluated as `exp(Σ w_k β_k ln(·))`.
pub fn formula_multiplicative(p: &[f64], params: &FormulaParams) -> Result<f64> {
    params.check(p.len())?;
    let mut log_s = 0.0;
    for k in 0..p.len() {
        let base = params.alpha[k] * p[k] + params.b[k];
        if !(base > 0.0) {
            return Err(Error::arg(format!("task {k}: non-positive base {base}")));
        }
        log_s += params.w[k] * params.beta[k] * base.ln();
    }
    Ok(log_s.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RawInteraction;
    use crate::numcore::check_param_set;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn session(pxtrs: &[[f64; 2]], clicks: &[u8]) -> Session {
        Session {
            user_id: 1,
            records: pxtrs
                .iter()
                .zip(clicks)
                .enumerate()
                .map(|(i, (p, &c))| RawInteraction {
                    user_id: 1,
                    item_id: i as u32 + 1,
                    category_id: 1,
                    ts: i as i64,
                    labels: vec![c, 0],
                    pxtrs: p.to_vec(),
                })
                .collect(),
            history: vec![],
        }
    }

    #[test]
    fn single_sort_orders() {
        let s = session(&[[0.1, 0.0], [0.9, 0.0], [0.5, 0.0]], &[0, 0, 0]);
        let r = single_sort(&s, 0).unwrap();
        let ids: Vec<u32> = r.items().iter().map(|i| i.item_id).collect();
        assert_eq!(ids, vec![2, 3, 1]);
        let r = single_sort(&s, 1).unwrap();
        let ids: Vec<u32> = r.items().iter().map(|i| i.item_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert!(single_sort(&s, 2).is_err());
    }

    #[test]
    fn single_sort_ignores_monotone_transform() {
        let s = session(&[[0.1, 0.0], [0.9, 0.0], [0.5, 0.0], [0.3, 0.0]], &[0, 1, 0, 1]);
        let mut t = s.clone();
        for r in &mut t.records {
            r.pxtrs[0] = r.pxtrs[0].powi(3) + 0.1;
        }
        let ids = |r: RankedSession| r.items().iter().map(|i| i.item_id).collect::<Vec<_>>();
        assert_eq!(ids(single_sort(&s, 0).unwrap()), ids(single_sort(&t, 0).unwrap()));
    }

    #[test]
    fn lr_examples() {
        let x = Tensor2::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap();
        let f = LrFuser::with_weights(&[0.0, 0.0], 0.7);
        let p = f.predict(&x).unwrap();
        assert_eq!(p[0], p[1]);
        assert!((p[0] - sigmoid(0.7)).abs() < 1e-15);
        let f = LrFuser::with_weights(&[1.0, 0.0], 0.0);
        let p = f.predict(&x).unwrap();
        assert!(p[1] > p[0]);
    }

    #[test]
    fn lr_separates_two_points() {
        let sessions = vec![session(&[[0.1, 0.5], [0.9, 0.5]], &[0, 1])];
        let mut f = LrFuser::zeroed(2);
        let cfg = ClickTraining {
            epochs: 3000,
            batch_sessions: 1,
            label_task: 0,
        };
        let adam = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let losses = train_click_fuser(&mut f, &sessions, &cfg, adam, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(losses[losses.len() - 1] < 0.02, "{}", losses[losses.len() - 1]);
        assert!(losses.windows(2).take(50).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mlp_zero_weights_is_constant() {
        let f = MlpFuser::zeroed(2);
        let x = Tensor2::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap();
        assert_eq!(f.predict(&x).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = MlpFuser::new(3, &mut rng);
        let x = Tensor2::from_rows(&[vec![0.1, 0.9, 0.3], vec![0.8, 0.2, 0.6], vec![0.5, 0.5, 0.1]]).unwrap();
        let y = [1.0, 0.0, 1.0];
        let (_, d, cache) = click_loss(&f, &x, &y).unwrap();
        f.backward(&cache, &d).unwrap();
        let err = check_param_set(&mut f, 1e-6, None, |m| Ok(click_loss(m, &x, &y)?.0)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mlp_fits_xor_where_lr_cannot() {
        let pts = [[0.1, 0.1], [0.9, 0.9], [0.1, 0.9], [0.9, 0.1]];
        let sessions = vec![session(&pts, &[0, 0, 1, 1])];
        let cfg = ClickTraining {
            epochs: 2000,
            batch_sessions: 1,
            label_task: 0,
        };
        let adam = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mlp = MlpFuser::new(2, &mut rng);
        let mlp_loss = *train_click_fuser(&mut mlp, &sessions, &cfg, adam, &mut rng).unwrap().last().unwrap();
        let mut lr = LrFuser::zeroed(2);
        let lr_loss = *train_click_fuser(&mut lr, &sessions, &cfg, adam, &mut rng).unwrap().last().unwrap();
        assert!(mlp_loss < 0.1, "mlp {mlp_loss}");
        assert!(lr_loss > 0.6, "lr {lr_loss}");
    }

    #[test]
    fn additive_examples() {
        let unit = FormulaParams::unit(3, 0.0);
        assert!((formula_additive(&[0.1, 0.2, 0.3], &unit).unwrap() - 0.6).abs() < 1e-15);
        let sq = FormulaParams {
            w: vec![1.0],
            alpha: vec![2.0],
            b: vec![0.0],
            beta: vec![2.0],
        };
        assert_eq!(formula_additive(&[0.5], &sq).unwrap(), 1.0);
        let zero_exp = FormulaParams {
            w: vec![0.3, 0.4],
            alpha: vec![1.0, 1.0],
            b: vec![1.0, 1.0],
            beta: vec![0.0, 0.0],
        };
        assert!((formula_additive(&[0.2, 0.9], &zero_exp).unwrap() - 0.7).abs() < 1e-15);
        let neg = FormulaParams {
            w: vec![1.0],
            alpha: vec![1.0],
            b: vec![-1.0],
            beta: vec![0.5],
        };
        assert!(formula_additive(&[0.2], &neg).is_err());
    }

    #[test]
    fn multiplicative_examples() {
        let zero_w = FormulaParams {
            w: vec![0.0, 0.0],
            ..FormulaParams::unit(2, 0.1)
        };
        assert_eq!(formula_multiplicative(&[0.3, 0.6], &zero_w).unwrap(), 1.0);
        let one = FormulaParams::unit(1, 0.0);
        assert!((formula_multiplicative(&[0.37], &one).unwrap() - 0.37).abs() < 1e-15);
        assert!(formula_multiplicative(&[0.0], &one).is_err());

        let params = FormulaParams {
            w: vec![0.7, 1.3, 0.4],
            alpha: vec![2.0, 0.5, 1.0],
            b: vec![0.1, 0.2, 0.05],
            beta: vec![1.5, 0.8, 2.0],
        };
        let p = [0.3, 0.8, 0.55];
        let direct: f64 = (0..3)
            .map(|k| (params.alpha[k] * p[k] + params.b[k]).powf(params.beta[k]).powf(params.w[k]))
            .product();
        let got = formula_multiplicative(&p, &params).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }
}
