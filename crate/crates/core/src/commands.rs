//! The operations behind each command line subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    formula_additive, formula_multiplicative, single_sort, stack_sessions, train_click_fuser, ClickFuser,
    FormulaParams, LrFuser, MlpFuser,
};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Stage};
use crate::dataset::{generate_synthetic, load_dataset, positive_rates, segment_sessions, split, write_dataset, Session};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, RankedItem, ScoredSession};
use crate::model::{ModelConfig, Umre, Vocab};
use crate::par::Exec;
use crate::train::{parse_log, score_sessions, trace_csv, train_umre, TrainReport};
use crate::umnn::is_strictly_increasing;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRACE_FILE: &str = "pareto_trace.csv";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const CURVES_FILE: &str = "transform_curves.csv";

const LR_PREFIX: &str = "baseline.lr.";
const MLP_PREFIX: &str = "baseline.mlp.";
const LR_UMNN_PREFIX: &str = "baseline.lr_umnn.";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub path: PathBuf,
    pub records: usize,
    pub rates: Vec<f64>,
}

/// Generate the configured synthetic dataset and write it.
pub fn synth(cfg: &Config, out: &Path, data: Option<&Path>) -> Result<SynthSummary> {
    cfg.validate()?;
    cfg.validate_synth()?;
    let records = generate_synthetic(&cfg.synth)?;
    let path = cfg.data_path(out, data);
    write_dataset(&path, &records)?;
    let rates = positive_rates(&records, cfg.tasks());
    Ok(SynthSummary {
        path,
        records: records.len(),
        rates,
    })
}

/// Sessions of a dataset split as configured.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Session>,
    pub valid: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: Vocab,
}

pub fn prepare(cfg: &Config, path: &Path) -> Result<Prepared> {
    let records = load_dataset(path)?;
    let m = cfg.tasks();
    if let Some(r) = records.first() {
        if r.labels.len() != m {
            return Err(Error::Config(format!(
                "{} has {} tasks per record but the config names {m}",
                path.display(),
                r.labels.len()
            )));
        }
    }
    let sessions = segment_sessions(&records);
    if sessions.is_empty() {
        return Err(Error::Config(format!("{} contains no complete sessions", path.display())));
    }
    let vocab = Vocab::covering(&sessions, m);
    let (train, valid, test) = split(sessions, cfg.data.split, cfg.stage_seed(Stage::Split))?;
    Ok(Prepared {
        train,
        valid,
        test,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub tasks: Vec<String>,
    pub seed: u64,
    pub reward_weights: Vec<f64>,
    pub epochs: usize,
}

pub fn checkpoint_path(out: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

/// Rebuild the ranking model stored in a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(Umre, CheckpointMeta)> {
    let meta: CheckpointMeta =
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let mut model = Umre::new(
        meta.model.clone(),
        meta.vocab,
        meta.tasks.len(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    ck.restore("", &mut model)?;
    Ok((model, meta))
}

fn transform_all(model: &Umre, sessions: &[Session], exec: Exec) -> Result<Vec<Session>> {
    exec.map(sessions, |s| model.transform_session(s)).into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Train the ranking model and the learned baselines, then write the
/// checkpoint, the epoch log and the reward-weight trace.
pub fn train(cfg: &Config, out: &Path, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prep = prepare(cfg, &cfg.data_path(out, data))?;
    let m = cfg.tasks();
    let mut init = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Init));
    let mut model = Umre::new(cfg.model.clone(), prep.vocab, m, &mut init)?;
    let report = train_umre(
        &mut model,
        &prep.train,
        &prep.valid,
        &cfg.data.tasks,
        &cfg.train,
        &cfg.pareto,
        cfg.stage_seed(Stage::Shuffle),
    )?;

    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        vocab: prep.vocab,
        tasks: cfg.data.tasks.clone(),
        seed: cfg.seed,
        reward_weights: report.weights.0.clone(),
        epochs: report.epochs.len(),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata always serialises"));
    ck.insert("", &model)?;

    let b = &cfg.baselines;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Baselines));
    if b.lr {
        let mut lr = LrFuser::zeroed(m);
        train_click_fuser(&mut lr, &prep.train, &b.training, b.adam, &mut rng)?;
        ck.insert(LR_PREFIX, &lr)?;
    }
    if b.mlp {
        let mut mlp = MlpFuser::new(m, &mut rng);
        train_click_fuser(&mut mlp, &prep.train, &b.training, b.adam, &mut rng)?;
        ck.insert(MLP_PREFIX, &mlp)?;
    }
    if b.lr_umnn {
        let transformed = transform_all(&model, &prep.train, cfg.train.exec)?;
        let mut lr = LrFuser::zeroed(m);
        train_click_fuser(&mut lr, &transformed, &b.training, b.adam, &mut rng)?;
        ck.insert(LR_UMNN_PREFIX, &lr)?;
    }

    let path = checkpoint_path(out, checkpoint);
    ck.save(&path)?;
    write_file(&out.join(TRAIN_LOG_FILE), &report.log_jsonl())?;
    write_file(&out.join(TRACE_FILE), &report.trace_csv())?;
    Ok(TrainOutcome {
        report,
        checkpoint: path,
    })
}

fn fuser_sessions<F: ClickFuser>(fuser: &F, sessions: &[Session]) -> Result<Vec<ScoredSession>> {
    sessions
        .iter()
        .map(|s| {
            let (x, _) = stack_sessions(&[s], 0)?;
            let p = fuser.predict(&x)?;
            Ok(scored(s, p))
        })
        .collect()
}

fn formula_sessions(
    sessions: &[Session],
    params: &FormulaParams,
    f: fn(&[f64], &FormulaParams) -> Result<f64>,
) -> Result<Vec<ScoredSession>> {
    sessions
        .iter()
        .map(|s| {
            let p = s.records.iter().map(|r| f(&r.pxtrs, params)).collect::<Result<Vec<_>>>()?;
            Ok(scored(s, p))
        })
        .collect()
}

fn scored(s: &Session, scores: Vec<f64>) -> ScoredSession {
    ScoredSession {
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
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Reports in presentation order, ranking model first.
    pub reports: Vec<(String, MetricReport)>,
    pub json: String,
    pub text: String,
}

impl EvalOutcome {
    pub fn report(&self, name: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    /// Name and report of the single-pxtr ranking with the highest mean
    /// NDCG, ties to the earlier task.
    pub fn best_single_sort(&self) -> Option<(&str, &MetricReport)> {
        let mut best: Option<(&str, &MetricReport)> = None;
        for (n, r) in self.reports.iter().filter(|(n, _)| n.starts_with("single_sort:")) {
            if best.is_none_or(|(_, b)| r.mean_ndcg() > b.mean_ndcg()) {
                best = Some((n, r));
            }
        }
        best
    }
}

/// Score the test split with the model and every configured baseline, and
/// write the JSON and plain-text reports.
pub fn eval(cfg: &Config, out: &Path, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(&checkpoint_path(out, checkpoint))?;
    let (model, meta) = load_model(&ck)?;
    if meta.tasks.len() != cfg.tasks() {
        return Err(Error::Config(format!(
            "checkpoint has {} tasks, config names {}",
            meta.tasks.len(),
            cfg.tasks()
        )));
    }
    let prep = prepare(cfg, &cfg.data_path(out, data))?;
    if prep.vocab.items > meta.vocab.items || prep.vocab.categories > meta.vocab.categories {
        return Err(Error::Config("dataset ids exceed the checkpoint vocabulary".into()));
    }
    let names = &cfg.data.tasks;
    let k = cfg.eval.k;
    let test = &prep.test;
    let exec = cfg.train.exec;
    let mut reports = vec![("umre".to_string(), evaluate(&score_sessions(&model, test, exec)?, names, k)?)];

    let b = &cfg.baselines;
    if b.single_sort {
        for (t, name) in names.iter().enumerate() {
            let sessions = test
                .iter()
                .map(|s| {
                    Ok(ScoredSession {
                        user_id: s.user_id,
                        items: single_sort(s, t)?.items().to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            reports.push((format!("single_sort:{name}"), evaluate(&sessions, names, k)?));
        }
    }
    let m = cfg.tasks();
    if ck.has_prefix(LR_PREFIX) {
        let mut lr = LrFuser::zeroed(m);
        ck.restore(LR_PREFIX, &mut lr)?;
        reports.push(("lr".into(), evaluate(&fuser_sessions(&lr, test)?, names, k)?));
    }
    if ck.has_prefix(MLP_PREFIX) {
        let mut mlp = MlpFuser::zeroed(m);
        ck.restore(MLP_PREFIX, &mut mlp)?;
        reports.push(("mlp".into(), evaluate(&fuser_sessions(&mlp, test)?, names, k)?));
    }
    if ck.has_prefix(LR_UMNN_PREFIX) {
        let mut lr = LrFuser::zeroed(m);
        ck.restore(LR_UMNN_PREFIX, &mut lr)?;
        let transformed = transform_all(&model, test, exec)?;
        reports.push(("lr+umnn".into(), evaluate(&fuser_sessions(&lr, &transformed)?, names, k)?));
    }
    if let Some(p) = &b.additive {
        let s = formula_sessions(test, p, formula_additive)?;
        reports.push(("formula_additive".into(), evaluate(&s, names, k)?));
    }
    if let Some(p) = &b.multiplicative {
        let s = formula_sessions(test, p, formula_multiplicative)?;
        reports.push(("formula_multiplicative".into(), evaluate(&s, names, k)?));
    }

    let json = render_json(&reports, k, &prep);
    let text = render_text(&reports, names, k);
    write_file(&out.join(METRICS_JSON_FILE), &json)?;
    write_file(&out.join(METRICS_TEXT_FILE), &text)?;
    Ok(EvalOutcome { reports, json, text })
}

fn render_json(reports: &[(String, MetricReport)], k: usize, prep: &Prepared) -> String {
    let mut methods = serde_json::Map::new();
    for (name, r) in reports {
        let mut v = r.to_json();
        let obj = v.as_object_mut().expect("reports are objects");
        obj.insert(format!("mean_hr@{k}"), serde_json::json!(r.mean_hr()));
        obj.insert(format!("mean_ndcg@{k}"), serde_json::json!(r.mean_ndcg()));
        methods.insert(name.clone(), v);
    }
    let doc = serde_json::json!({
        "k": k,
        "split": {
            "train": prep.train.len(),
            "valid": prep.valid.len(),
            "test": prep.test.len(),
        },
        "methods": methods,
    });
    serde_json::to_string_pretty(&doc).expect("reports always serialise") + "\n"
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn render_text(reports: &[(String, MetricReport)], names: &[String], k: usize) -> String {
    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}  {:>9}  {:>9}", "method", format!("hr@{k}"), format!("ndcg@{k}"));
    for n in names {
        let _ = write!(out, "  {:>12}", format!("uauc:{n}"));
    }
    out.push('\n');
    for (name, r) in reports {
        let _ = write!(out, "{name:<width$}  {:>9.4}  {:>9.4}", r.mean_hr(), r.mean_ndcg());
        for (_, t) in &r.tasks {
            let _ = write!(out, "  {:>12}", fmt_opt(t.uauc));
        }
        out.push('\n');
    }
    out
}

/// Transform curves of every task at contexts drawn from the test split.
/// Any curve that is not strictly increasing aborts before writing.
pub fn dump_transform(cfg: &Config, out: &Path, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let ck = Checkpoint::load(&checkpoint_path(out, checkpoint))?;
    let (model, meta) = load_model(&ck)?;
    let prep = prepare(cfg, &cfg.data_path(out, data))?;
    let pool = if prep.test.is_empty() { &prep.train } else { &prep.test };
    let slots: Vec<(usize, usize)> = pool
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.records.len()).map(move |r| (i, r)))
        .collect();
    let n = cfg.dump.contexts.min(slots.len());
    let mut csv = String::from("task,h_id,p,g_of_p\n");
    for h_id in 0..n {
        let (si, ri) = slots[h_id * slots.len() / n];
        let h = model.record_context(&pool[si], ri)?;
        for (t, head) in model.heads.iter().enumerate() {
            let curve = head.curve(&h, cfg.dump.points, model.rule())?;
            if !is_strictly_increasing(&curve) {
                return Err(Error::Invariant(format!(
                    "transform of task {} is not strictly increasing at context {h_id}",
                    meta.tasks[t]
                )));
            }
            for (p, g) in curve {
                let _ = writeln!(csv, "{t},{h_id},{p},{g}");
            }
        }
    }
    let path = out.join(CURVES_FILE);
    write_file(&path, &csv)?;
    Ok(path)
}

/// Re-emit the reward-weight trace from a training log.
pub fn pareto_trace(log: &Path, out: &Path) -> Result<(PathBuf, String)> {
    let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let csv = trace_csv(&parse_log(&text)?);
    let path = out.join(TRACE_FILE);
    write_file(&path, &csv)?;
    Ok((path, csv))
}
