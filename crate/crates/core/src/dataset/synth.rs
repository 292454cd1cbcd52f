//! Synthetic interaction logs with known monotone distortions of the true
//! propensities.
//!
//! Each task's propensity is `σ(logit_m + b_m)` where `logit_m` is a
//! task-weighted inner product of user and item factors and `b_m` is solved
//! by bisection so the mean propensity hits the target rate. The reported
//! pxtr is a per-task monotone warp of a noisy propensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RawInteraction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warp {
    Identity,
    Square,
    Sqrt,
    Squash,
}

/// Which warps the tasks receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpSet {
    /// Square, sqrt and logistic squash assigned round-robin.
    #[default]
    Mixed,
    Identity,
}

impl WarpSet {
    pub fn for_task(self, task: usize) -> Warp {
        match self {
            WarpSet::Identity => Warp::Identity,
            WarpSet::Mixed => [Warp::Square, Warp::Sqrt, Warp::Squash][task % 3],
        }
    }
}

const SQUASH_STEEPNESS: f64 = 8.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Strictly increasing map of `[0, 1]` onto itself.
pub fn warp(kind: Warp, x: f64) -> f64 {
    match kind {
        Warp::Identity => x,
        Warp::Square => x * x,
        Warp::Sqrt => x.sqrt(),
        Warp::Squash => {
            let k = SQUASH_STEEPNESS;
            let lo = sigmoid(-0.5 * k);
            let hi = sigmoid(0.5 * k);
            (sigmoid(k * (x - 0.5)) - lo) / (hi - lo)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Target positive rate per task; its length sets the task count.
    pub rates: Vec<f64>,
    pub latent_dim: usize,
    /// Half-width of the uniform logit noise added before warping.
    pub noise: f64,
    pub warps: WarpSet,
    /// Correlation of task weightings over latent dimensions, in `[0, 1]`.
    pub task_correlation: f64,
    /// Standard deviation of the task logits before the bias.
    pub signal: f64,
    pub sessions_per_user: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    /// Allowed relative deviation of empirical from target rates.
    pub rate_tolerance: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 1000,
            categories: 20,
            rates: vec![0.3, 0.1, 0.05, 0.04, 0.03, 0.2],
            latent_dim: 8,
            noise: 0.5,
            warps: WarpSet::Mixed,
            task_correlation: 0.5,
            signal: 2.0,
            sessions_per_user: 3,
            min_session_len: 20,
            max_session_len: 40,
            rate_tolerance: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.items == 0 || self.categories == 0 || self.latent_dim == 0 {
            return bad("users, items, categories and latent_dim must be positive".into());
        }
        if self.rates.is_empty() {
            return bad("at least one task rate is required".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return bad(format!("target rate {r} outside (0, 1)"));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.task_correlation) {
            return bad("noise must be >= 0 and task_correlation in [0, 1]".into());
        }
        if self.min_session_len == 0 || self.min_session_len > self.max_session_len {
            return bad("session length bounds are inverted or zero".into());
        }
        if self.max_session_len > 60 {
            // one-second minimum gaps must keep a session inside one hour
            return bad("max_session_len above 60 cannot fit inside a one-hour window".into());
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Bias `b` with `mean(σ(logits + b)) = target`.
fn calibrate_bias(logits: &[f64], target: f64) -> Result<f64> {
    let mean_at = |b: f64| logits.iter().map(|l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    if mean_at(lo) > target || mean_at(hi) < target {
        return Err(Error::Generation(format!(
            "positive rate {target} is not reachable"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct Slot {
    user: usize,
    item: usize,
    ts: i64,
}

/// Deterministic synthetic log, sorted by user then timestamp.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<RawInteraction>> {
    Ok(generate_with_propensities(cfg)?.0)
}

/// The log together with each record's true per-task propensities.
pub(crate) fn generate_with_propensities(
    cfg: &SyntheticConfig,
) -> Result<(Vec<RawInteraction>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.latent_dim;
    let m = cfg.rates.len();

    let cat_centres: Vec<Vec<f64>> = (0..cfg.categories).map(|_| normal_vec(&mut rng, d)).collect();
    let item_cat: Vec<usize> = (0..cfg.items).map(|_| rng.random_range(0..cfg.categories)).collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let item_f: Vec<Vec<f64>> = item_cat
        .iter()
        .map(|&c| {
            normal_vec(&mut rng, d)
                .into_iter()
                .zip(&cat_centres[c])
                .map(|(e, cc)| s * cc + s * e)
                .collect()
        })
        .collect();
    let user_f: Vec<Vec<f64>> = (0..cfg.users).map(|_| normal_vec(&mut rng, d)).collect();
    let rho = cfg.task_correlation;
    let task_a: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            normal_vec(&mut rng, d)
                .into_iter()
                .map(|z| rho + (1.0 - rho * rho).sqrt() * z)
                .collect()
        })
        .collect();

    let mut slots = Vec::new();
    let gap = |rng: &mut ChaCha8Rng| rng.random_range(1..=60i64);
    let long_gap = |rng: &mut ChaCha8Rng| rng.random_range(2 * 3600..=24 * 3600i64);
    for user in 0..cfg.users {
        let mut ts = rng.random_range(0..7 * 86_400i64);
        // a short burst before the first session: too small to be a
        // session, it only seeds the behaviour history
        let warmup = rng.random_range(5..=15usize);
        for _ in 0..warmup {
            slots.push(Slot {
                user,
                item: rng.random_range(0..cfg.items),
                ts,
            });
            ts += gap(&mut rng);
        }
        for _ in 0..cfg.sessions_per_user {
            ts += long_gap(&mut rng);
            let len = rng.random_range(cfg.min_session_len..=cfg.max_session_len);
            for j in 0..len {
                if j > 0 {
                    ts += gap(&mut rng);
                }
                slots.push(Slot {
                    user,
                    item: rng.random_range(0..cfg.items),
                    ts,
                });
            }
        }
    }

    let scale = cfg.signal / (d as f64).sqrt();
    let logits: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            slots
                .iter()
                .map(|sl| {
                    let u = &user_f[sl.user];
                    let it = &item_f[sl.item];
                    scale * (0..d).map(|j| task_a[k][j] * u[j] * it[j]).sum::<f64>()
                })
                .collect()
        })
        .collect();
    let biases = cfg
        .rates
        .iter()
        .zip(&logits)
        .map(|(&r, l)| calibrate_bias(l, r))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(slots.len());
    let mut props = Vec::with_capacity(slots.len());
    let mut positives = vec![0usize; m];
    for (n, sl) in slots.iter().enumerate() {
        let mut labels = Vec::with_capacity(m);
        let mut pxtrs = Vec::with_capacity(m);
        let mut truth = Vec::with_capacity(m);
        for k in 0..m {
            let z = logits[k][n] + biases[k];
            let prop = sigmoid(z);
            truth.push(prop);
            let y = u8::from(rng.random::<f64>() < prop);
            positives[k] += y as usize;
            let noisy = if cfg.noise > 0.0 {
                sigmoid(z + rng.random_range(-cfg.noise..=cfg.noise))
            } else {
                prop
            };
            labels.push(y);
            pxtrs.push(warp(cfg.warps.for_task(k), noisy).clamp(0.0, 1.0));
        }
        out.push(RawInteraction {
            user_id: sl.user as u64 + 1,
            item_id: sl.item as u32 + 1,
            category_id: item_cat[sl.item] as u32 + 1,
            ts: sl.ts,
            labels,
            pxtrs,
        });
        props.push(truth);
    }

    let n = out.len() as f64;
    for (k, (&target, &p)) in cfg.rates.iter().zip(&positives).enumerate() {
        let rate = p as f64 / n;
        if (rate - target).abs() > cfg.rate_tolerance * target {
            return Err(Error::Generation(format!(
                "task {k}: empirical positive rate {rate:.4} misses target {target} by more than {:.0}%",
                cfg.rate_tolerance * 100.0
            )));
        }
    }
    Ok((out, props))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{positive_rates, segment_sessions};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 30,
            items: 200,
            rates: vec![0.3, 0.1, 0.2],
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn warps_are_increasing_endpoint_preserving() {
        for w in [Warp::Identity, Warp::Square, Warp::Sqrt, Warp::Squash] {
            assert!(warp(w, 0.0).abs() < 1e-15);
            assert!((warp(w, 1.0) - 1.0).abs() < 1e-15);
            let xs: Vec<f64> = (0..=100).map(|i| warp(w, i as f64 / 100.0)).collect();
            assert!(xs.windows(2).all(|p| p[1] > p[0]), "{w:?}");
        }
        assert_eq!(WarpSet::Mixed.for_task(4), Warp::Sqrt);
    }

    #[test]
    fn zero_noise_identity_warp_reports_propensity() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            warps: WarpSet::Identity,
            ..small()
        };
        let (rows, props) = generate_with_propensities(&cfg).unwrap();
        for (r, p) in rows.iter().zip(&props) {
            assert_eq!(&r.pxtrs, p);
        }
        let (noisy, props) = generate_with_propensities(&small()).unwrap();
        assert!(noisy.iter().zip(&props).any(|(r, p)| &r.pxtrs != p));
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = serde_json::to_string(&generate_synthetic(&small()).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticConfig { seed: 1, ..small() };
        let c = serde_json::to_string(&generate_synthetic(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn target_rate_over_many_records() {
        let cfg = SyntheticConfig {
            users: 1100,
            rates: vec![0.1],
            ..SyntheticConfig::default()
        };
        let rows = generate_synthetic(&cfg).unwrap();
        assert!(rows.len() >= 100_000, "{} rows", rows.len());
        let rate = positive_rates(&rows, 1)[0];
        assert!((0.08..=0.12).contains(&rate), "{rate}");
    }

    #[test]
    fn every_user_yields_sessions_with_history() {
        let cfg = small();
        let rows = generate_synthetic(&cfg).unwrap();
        let sessions = segment_sessions(&rows);
        assert_eq!(sessions.len(), cfg.users * cfg.sessions_per_user);
        for s in &sessions {
            assert!(!s.history.is_empty());
            assert!(s.records.len() >= 20);
        }
    }

    #[test]
    fn thresholded_propensity_ranks_perfectly() {
        // with labels set by thresholding the true propensity, ranking by
        // that propensity separates the classes for every user
        let cfg = SyntheticConfig {
            noise: 0.0,
            warps: WarpSet::Identity,
            ..small()
        };
        let rows = generate_synthetic(&cfg).unwrap();
        let mut per_user = std::collections::BTreeMap::new();
        for r in &rows {
            let y = u8::from(r.pxtrs[0] > 0.3);
            per_user.entry(r.user_id).or_insert_with(Vec::new).push((r.pxtrs[0], y));
        }
        assert_eq!(crate::metrics::uauc(&per_user).unwrap(), 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = SyntheticConfig {
            rates: vec![0.0],
            ..small()
        };
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
        let c = SyntheticConfig {
            rates: vec![1e-9],
            users: 2,
            ..small()
        };
        assert!(matches!(generate_synthetic(&c), Err(Error::Generation(_))));
    }
}
