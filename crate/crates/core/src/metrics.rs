//! Ranking metrics over sessions and user-level AUC.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub item_id: u32,
    pub score: f64,
    pub labels: Vec<u8>,
}

/// Items sorted by descending score, ties broken by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSession {
    items: Vec<RankedItem>,
}

impl RankedSession {
    pub fn new(mut items: Vec<RankedItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::arg("a ranked session needs at least one item"));
        }
        if let Some(it) = items.iter().find(|it| it.score.is_nan()) {
            return Err(Error::Numeric(format!("NaN score for item {}", it.item_id)));
        }
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
        Ok(Self { items })
    }

    pub fn items(&self) -> &[RankedItem] {
        &self.items
    }

    fn positives(&self, task: usize) -> usize {
        self.items.iter().filter(|it| it.labels[task] == 1).count()
    }
}

/// 1 if a top-`k` item is positive for `task`; `None` when the session has
/// no positive for the task.
pub fn hr_at_k(session: &RankedSession, task: usize, k: usize) -> Option<f64> {
    if session.positives(task) == 0 {
        return None;
    }
    let hit = session.items.iter().take(k).any(|it| it.labels[task] == 1);
    Some(if hit { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(session: &RankedSession, task: usize, k: usize) -> Option<f64> {
    let pos = session.positives(task);
    if pos == 0 {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = session
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, it)| it.labels[task] == 1)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=pos.min(k)).map(discount).sum();
    Some(dcg / idcg)
}

/// AUC from average ranks with ties sharing their mean rank. `None` when a
/// class is missing.
pub fn auc_rank(pairs: &[(f64, u8)]) -> Option<f64> {
    let pos = pairs.iter().filter(|p| p.1 == 1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));
    // twice the rank sum keeps half ranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean, doubled: i + j + 2
        let twice_mean = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            if pairs[idx].1 == 1 {
                twice_rank_sum += twice_mean;
            }
        }
        i = j + 1;
    }
    let p = pos as u64;
    let wins_twice = twice_rank_sum - p * (p + 1);
    Some(wins_twice as f64 / (2 * p * neg as u64) as f64)
}

/// Pairwise AUC over every positive/negative pair.
pub fn auc_bruteforce(pairs: &[(f64, u8)]) -> Result<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1 == 1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| p.1 != 1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::arg("AUC needs at least one positive and one negative"));
    }
    let mut wins = 0.0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Mean per-user AUC over users with both classes.
pub fn uauc(per_user: &BTreeMap<u64, Vec<(f64, u8)>>) -> Result<f64> {
    let aucs: Vec<f64> = per_user.values().filter_map(|p| auc_rank(p)).collect();
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no user has both positive and negative labels".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// One session's scored items with the owning user.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSession {
    pub user_id: u64,
    pub items: Vec<RankedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub uauc: Option<f64>,
    /// Sessions containing at least one positive for the task.
    pub sessions: usize,
    /// Users with both classes for the task.
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub tasks: Vec<(String, TaskMetrics)>,
    pub sessions: usize,
    pub users: usize,
}

impl MetricReport {
    pub fn mean_ndcg(&self) -> f64 {
        mean(self.tasks.iter().filter_map(|(_, t)| t.ndcg))
    }

    pub fn mean_hr(&self) -> f64 {
        mean(self.tasks.iter().filter_map(|(_, t)| t.hr))
    }

    pub fn uauc_vector(&self) -> Vec<f64> {
        self.tasks.iter().map(|(_, t)| t.uauc.unwrap_or(0.5)).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let hr = format!("hr@{}", self.k);
        let ndcg = format!("ndcg@{}", self.k);
        let mut tasks = serde_json::Map::new();
        for (name, t) in &self.tasks {
            let mut m = serde_json::Map::new();
            m.insert(hr.clone(), serde_json::json!(t.hr));
            m.insert(ndcg.clone(), serde_json::json!(t.ndcg));
            m.insert("uauc".into(), serde_json::json!(t.uauc));
            m.insert("sessions".into(), serde_json::json!(t.sessions));
            m.insert("users".into(), serde_json::json!(t.users));
            tasks.insert(name.clone(), serde_json::Value::Object(m));
        }
        serde_json::json!({
            "tasks": tasks,
            "counts": {"sessions": self.sessions, "users": self.users},
        })
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-task HR@k, NDCG@k and UAUC over scored sessions.
pub fn evaluate(sessions: &[ScoredSession], task_names: &[String], k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let m = task_names.len();
    let ranked = sessions
        .iter()
        .map(|s| {
            if let Some(it) = s.items.iter().find(|it| it.labels.len() != m) {
                return Err(Error::shape(format!(
                    "item {} has {} labels for {m} tasks",
                    it.item_id,
                    it.labels.len()
                )));
            }
            RankedSession::new(s.items.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut users = BTreeMap::new();
    for s in sessions {
        users.entry(s.user_id).or_insert_with(Vec::new).extend(s.items.iter());
    }

    let mut tasks = Vec::with_capacity(m);
    for (task, name) in task_names.iter().enumerate() {
        let hr: Vec<f64> = ranked.iter().filter_map(|r| hr_at_k(r, task, k)).collect();
        let ndcg: Vec<f64> = ranked.iter().filter_map(|r| ndcg_at_k(r, task, k)).collect();
        let per_user: BTreeMap<u64, Vec<(f64, u8)>> = users
            .iter()
            .map(|(u, items)| (*u, items.iter().map(|it| (it.score, it.labels[task])).collect()))
            .collect();
        let qualifying = per_user.values().filter(|p| auc_rank(p).is_some()).count();
        let u = match uauc(&per_user) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        tasks.push((
            name.clone(),
            TaskMetrics {
                hr: (!hr.is_empty()).then(|| mean(hr.iter().copied())),
                ndcg: (!ndcg.is_empty()).then(|| mean(ndcg.iter().copied())),
                uauc: u,
                sessions: hr.len(),
                users: qualifying,
            },
        ));
    }
    Ok(MetricReport {
        k,
        tasks,
        sessions: sessions.len(),
        users: users.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session(labels: &[u8]) -> RankedSession {
        // scores descending with position
        let items = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| RankedItem {
                item_id: i as u32 + 1,
                score: 1.0 - i as f64 * 0.01,
                labels: vec![l],
            })
            .collect();
        RankedSession::new(items).unwrap()
    }

    #[test]
    fn hit_rate_examples() {
        assert_eq!(hr_at_k(&session(&[0, 1, 0, 0]), 0, 3), Some(1.0));
        assert_eq!(hr_at_k(&session(&[0, 0, 0, 1]), 0, 3), Some(0.0));
        assert_eq!(hr_at_k(&session(&[1, 1, 1]), 0, 1), Some(1.0));
        assert_eq!(hr_at_k(&session(&[0, 0]), 0, 3), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&session(&[1, 0, 0]), 0, 3), Some(1.0));
        let v = ndcg_at_k(&session(&[0, 1, 0, 0]), 0, 3).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&session(&[0, 0, 0, 1]), 0, 3), Some(0.0));
        assert_eq!(ndcg_at_k(&session(&[0, 0]), 0, 3), None);
    }

    #[test]
    fn ties_break_by_item_id() {
        let items = vec![
            RankedItem { item_id: 9, score: 0.5, labels: vec![1] },
            RankedItem { item_id: 2, score: 0.5, labels: vec![0] },
            RankedItem { item_id: 5, score: 0.7, labels: vec![0] },
        ];
        let r = RankedSession::new(items).unwrap();
        let ids: Vec<u32> = r.items().iter().map(|i| i.item_id).collect();
        assert_eq!(ids, vec![5, 2, 9]);
        assert!(RankedSession::new(vec![]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_bruteforce(&[(1.0, 1), (0.0, 0)]).unwrap(), 1.0);
        assert_eq!(auc_bruteforce(&[(0.0, 1), (1.0, 0)]).unwrap(), 0.0);
        assert_eq!(auc_bruteforce(&[(0.5, 1), (0.5, 0)]).unwrap(), 0.5);
        assert!(auc_bruteforce(&[(0.5, 1)]).is_err());
        assert_eq!(auc_rank(&[(0.5, 1), (0.5, 0)]), Some(0.5));
        assert_eq!(auc_rank(&[(0.9, 1), (0.2, 0), (0.1, 0)]), Some(1.0));
    }

    #[test]
    fn uauc_skips_single_class_users() {
        let mut m = BTreeMap::new();
        m.insert(1, vec![(0.9, 1), (0.1, 0)]);
        m.insert(2, vec![(0.9, 1), (0.1, 1)]);
        m.insert(3, vec![(0.1, 1), (0.9, 0), (0.5, 0)]);
        assert_eq!(uauc(&m).unwrap(), 0.5);
        let mut only = BTreeMap::new();
        only.insert(1, vec![(0.3, 0)]);
        assert!(matches!(uauc(&only), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_counts_and_json_shape() {
        let s = |u: u64, scores: &[f64], labels: &[[u8; 2]]| ScoredSession {
            user_id: u,
            items: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, l))| RankedItem {
                    item_id: i as u32 + 1,
                    score,
                    labels: l.to_vec(),
                })
                .collect(),
        };
        let sessions = vec![
            s(1, &[0.9, 0.5, 0.1], &[[1, 0], [0, 0], [0, 1]]),
            s(2, &[0.2, 0.8], &[[0, 0], [0, 0]]),
        ];
        let names = vec!["click".to_string(), "like".to_string()];
        let r = evaluate(&sessions, &names, 3).unwrap();
        assert_eq!(r.sessions, 2);
        assert_eq!(r.users, 2);
        assert_eq!(r.tasks[0].1.sessions, 1);
        assert_eq!(r.tasks[0].1.uauc, Some(1.0));
        assert_eq!(r.tasks[1].1.uauc, Some(0.0));
        let j = r.to_json();
        assert_eq!(j["tasks"]["click"]["hr@3"], 1.0);
        assert_eq!(j["counts"]["users"], 2);
    }

    proptest! {
        #[test]
        fn rank_auc_equals_bruteforce(
            pairs in prop::collection::vec((0u8..20, 0u8..2), 2..200),
        ) {
            // coarse scores force plenty of ties
            let pairs: Vec<(f64, u8)> = pairs.iter().map(|&(s, l)| (s as f64 / 7.0, l)).collect();
            match auc_rank(&pairs) {
                Some(a) => {
                    let b = auc_bruteforce(&pairs).unwrap();
                    prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
                }
                None => prop_assert!(auc_bruteforce(&pairs).is_err()),
            }
        }

        #[test]
        fn metrics_ignore_monotone_rescaling(
            raw in prop::collection::vec((-3.0f64..3.0, 0u8..2), 1..40),
        ) {
            let mk = |f: &dyn Fn(f64) -> f64| ScoredSession {
                user_id: 1,
                items: raw
                    .iter()
                    .enumerate()
                    .map(|(i, &(s, l))| RankedItem { item_id: i as u32, score: f(s), labels: vec![l] })
                    .collect(),
            };
            let names = vec!["t".to_string()];
            let a = evaluate(&[mk(&|x| x)], &names, 3).unwrap();
            let b = evaluate(&[mk(&|x| x.powi(3) + x)], &names, 3).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ndcg_is_bounded(labels in prop::collection::vec(0u8..2, 1..30), k in 1usize..10) {
            let s = session(&labels);
            if let Some(v) = ndcg_at_k(&s, 0, k) {
                prop_assert!((0.0..=1.0 + 1e-15).contains(&v));
            }
        }
    }
}
