//! Interaction records, session construction, splitting and file I/O.

mod synth;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BehaviorEvent, MAX_HISTORY};
use crate::error::{Error, Result};

pub use synth::{generate_synthetic, warp, SyntheticConfig, Warp, WarpSet};

/// Sessions are anchored windows of this many seconds.
pub const SESSION_WINDOW_SECS: i64 = 3600;

/// Windows with fewer records are dropped.
pub const MIN_SESSION_LEN: usize = 20;

/// One logged impression with its labels and upstream predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: u64,
    pub item_id: u32,
    pub category_id: u32,
    pub ts: i64,
    pub labels: Vec<u8>,
    pub pxtrs: Vec<f64>,
}

impl RawInteraction {
    /// Behaviour taxonomy index: 1 for an impression without any positive,
    /// otherwise `2 + highest positive task index`. 0 is padding.
    pub fn action_type(&self) -> u32 {
        match self.labels.iter().rposition(|&l| l == 1) {
            Some(k) => 2 + k as u32,
            None => 1,
        }
    }

    pub fn event(&self) -> BehaviorEvent {
        BehaviorEvent {
            item_id: self.item_id,
            category_id: self.category_id,
            action_type: self.action_type(),
        }
    }

    fn validate(&self, tasks: usize) -> std::result::Result<(), String> {
        if self.labels.len() != tasks || self.pxtrs.len() != tasks {
            return Err(format!(
                "expected {tasks} labels and pxtrs, got {} and {}",
                self.labels.len(),
                self.pxtrs.len()
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(format!("label {l} is not binary"));
        }
        if let Some(p) = self.pxtrs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(format!("pxtr {p} outside [0, 1]"));
        }
        if self.item_id == 0 || self.category_id == 0 {
            return Err("item and category ids start at 1".into());
        }
        Ok(())
    }
}

/// Action vocabulary size (including padding) for `tasks` behaviours.
pub fn action_vocab(tasks: usize) -> usize {
    tasks + 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user_id: u64,
    pub records: Vec<RawInteraction>,
    /// Up to 30 of the user's most recent events before the session, oldest
    /// first.
    pub history: Vec<BehaviorEvent>,
}

impl Session {
    pub fn start(&self) -> i64 {
        self.records[0].ts
    }
}

/// Group each user's interactions into anchored one-hour windows and keep
/// windows with at least [`MIN_SESSION_LEN`] records.
pub fn segment_sessions(interactions: &[RawInteraction]) -> Vec<Session> {
    let mut sorted: Vec<&RawInteraction> = interactions.iter().collect();
    sorted.sort_by_key(|r| (r.user_id, r.ts));

    let mut sessions = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let user = sorted[i].user_id;
        let mut end = i;
        while end < sorted.len() && sorted[end].user_id == user {
            end += 1;
        }
        let user_rows = &sorted[i..end];
        let mut start = 0;
        while start < user_rows.len() {
            let anchor = user_rows[start].ts;
            let mut stop = start;
            while stop < user_rows.len() && user_rows[stop].ts - anchor < SESSION_WINDOW_SECS {
                stop += 1;
            }
            if stop - start >= MIN_SESSION_LEN {
                let from = start.saturating_sub(MAX_HISTORY);
                sessions.push(Session {
                    user_id: user,
                    records: user_rows[start..stop].iter().map(|r| (*r).clone()).collect(),
                    history: user_rows[from..start].iter().map(|r| r.event()).collect(),
                });
            }
            start = stop;
        }
        i = end;
    }
    sessions
}

/// Session-level split by shuffled assignment. Sizes follow the largest
/// remainder rule.
pub fn split(
    sessions: Vec<Session>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<Session>, Vec<Session>, Vec<Session>)> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let n = sessions.len();
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tag = vec![0u8; n];
    for (pos, &i) in idx.iter().enumerate() {
        tag[i] = if pos < sizes[0] {
            0
        } else if pos < sizes[0] + sizes[1] {
            1
        } else {
            2
        };
    }
    let mut parts: [Vec<Session>; 3] = Default::default();
    for (s, t) in sessions.into_iter().zip(tag) {
        parts[t as usize].push(s);
    }
    for (name, part) in ["train", "validation", "test"].iter().zip(&parts) {
        if part.is_empty() {
            log::warn!("{name} split is empty");
        }
    }
    let [a, b, c] = parts;
    Ok((a, b, c))
}

/// Read line-delimited JSON records. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<RawInteraction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<RawInteraction> = Vec::new();
    let mut tasks = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawInteraction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let m = *tasks.get_or_insert(rec.labels.len());
        rec.validate(m).map_err(|message| Error::Validation {
            line: line_no,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[RawInteraction]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialise");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fraction of positive labels per task.
pub fn positive_rates<'a>(records: impl IntoIterator<Item = &'a RawInteraction>, tasks: usize) -> Vec<f64> {
    let mut pos = vec![0usize; tasks];
    let mut n = 0usize;
    for r in records {
        n += 1;
        for (p, &l) in pos.iter_mut().zip(&r.labels) {
            *p += l as usize;
        }
    }
    pos.iter().map(|&p| p as f64 / n.max(1) as f64).collect()
}
