//! The training loop: minibatches of sessions regressed onto the composite
//! reward, with per-epoch validation UAUC driving the reward weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{positive_rates, Session};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, RankedItem, ScoredSession};
use crate::model::Umre;
use crate::numcore::{Adam, AdamConfig, ParamSet};
use crate::par::Exec;
use crate::pareto::{compose_reward, converged, init_weights, pareto_update, ParetoConfig, RewardWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_sessions: usize,
    pub adam: AdamConfig,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_sessions: 16,
            adam: AdamConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sessions == 0 {
            return Err(Error::Config("batch_sessions must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("adam.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_uauc: Vec<f64>,
    /// Reward weights in force during the epoch.
    pub omega: Vec<f64>,
    /// Reward weights for the next epoch.
    pub omega_next: Vec<f64>,
    pub pareto_applied: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub weights: RewardWeights,
}

impl TrainReport {
    pub fn final_uauc(&self) -> &[f64] {
        self.epochs.last().map(|e| e.valid_uauc.as_slice()).unwrap_or(&[])
    }

    pub fn log_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch logs always serialise") + "\n")
            .collect()
    }

    pub fn trace_csv(&self) -> String {
        trace_csv(&self.epochs)
    }
}

/// `epoch,task,omega,uauc` rows, one per task per epoch.
pub fn trace_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,task,omega,uauc\n");
    for e in epochs {
        for (m, (w, u)) in e.omega.iter().zip(&e.valid_uauc).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, m, w, u));
        }
    }
    out
}

/// Parse a training log back into epoch records.
pub fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Score every record of every session.
pub fn score_sessions(model: &Umre, sessions: &[Session], exec: Exec) -> Result<Vec<ScoredSession>> {
    exec.map(sessions, |s| {
        let scores = model.score_session(s)?;
        Ok(ScoredSession {
            user_id: s.user_id,
            items: s
                .records
                .iter()
                .zip(scores)
                .map(|(r, score)| RankedItem {
                    item_id: r.item_id,
                    score,
                    labels: r.labels.clone(),
                })
                .collect(),
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate_model(
    model: &Umre,
    sessions: &[Session],
    task_names: &[String],
    k: usize,
    exec: Exec,
) -> Result<MetricReport> {
    evaluate(&score_sessions(model, sessions, exec)?, task_names, k)
}

/// Sum of squared errors against the composite reward and the matching
/// gradients accumulated into `model`, computed per session and reduced in
/// session order. The loss is the mean over all records of the batch.
pub fn batch_gradients(model: &mut Umre, batch: &[&Session], omega: &RewardWeights, exec: Exec) -> Result<f64> {
    let n: usize = batch.iter().map(|s| s.records.len()).sum();
    if n == 0 {
        return Err(Error::arg("empty training batch"));
    }
    let scale = 1.0 / n as f64;
    let shared: &Umre = model;
    let parts = exec.map(batch, |s| -> Result<(f64, Umre)> {
        let (out, cache) = shared.forward_session(s)?;
        let mut sse = 0.0;
        let mut d = Vec::with_capacity(out.scores.len());
        for (rec, &score) in s.records.iter().zip(&out.scores) {
            let err = score - compose_reward(&rec.labels, omega)?;
            sse += err * err;
            d.push(2.0 * err * scale);
        }
        let mut local = shared.clone();
        local.zero_grad();
        local.backward_session(s, &cache, &d)?;
        Ok((sse, local))
    });
    model.zero_grad();
    let mut sse = 0.0;
    for part in parts {
        let (s, g) = part?;
        sse += s;
        model.add_grads_from(&g);
    }
    Ok(sse * scale)
}

/// Train until the reward weights converge or the epoch cap is reached.
pub fn train_umre(
    model: &mut Umre,
    train: &[Session],
    valid: &[Session],
    task_names: &[String],
    cfg: &TrainConfig,
    pareto: &ParetoConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let m = model.tasks();
    pareto.validate(m)?;
    if task_names.len() != m {
        return Err(Error::Config(format!("{} task names for a {m}-task model", task_names.len())));
    }
    if train.is_empty() {
        return Err(Error::arg("no training sessions"));
    }
    let rates = positive_rates(train.iter().flat_map(|s| s.records.iter()), m);
    let mut omega = init_weights(&rates, pareto.omega_min, pareto.omega_max)?;
    let mut opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut u_prev: Option<Vec<f64>> = None;
    let mut epochs = Vec::new();

    for epoch in 1..=pareto.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_sessions).enumerate() {
            let batch: Vec<&Session> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = batch_gradients(model, &batch, &omega, cfg.exec)?;
            let grads_finite = model.named_params().iter().all(|(_, p)| p.grad.all_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} (sessions {chunk:?})"
                )));
            }
            opt.step(model.params_mut());
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;

        // only the UAUC of the validation report is used
        let u_cur = if valid.is_empty() {
            vec![0.5; m]
        } else {
            evaluate_model(model, valid, task_names, 1, cfg.exec)?.uauc_vector()
        };
        let mut next = omega.clone();
        let mut applied = false;
        let mut done = false;
        if epoch >= pareto.warmup_epochs {
            if let Some(prev) = &u_prev {
                let step = pareto_update(&omega, prev, &u_cur, pareto)?;
                applied = step.applied;
                done = applied && converged(&omega, &step.weights, pareto.eps);
                next = step.weights;
            }
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.6}, uauc {:?}, omega {:?}",
            u_cur,
            next.as_slice()
        );
        epochs.push(EpochLog {
            epoch,
            train_loss,
            valid_uauc: u_cur.clone(),
            omega: omega.0.clone(),
            omega_next: next.0.clone(),
            pareto_applied: applied,
            converged: done,
        });
        omega = next;
        u_prev = Some(u_cur);
        if done {
            break;
        }
    }
    Ok(TrainReport { epochs, weights: omega })
}
