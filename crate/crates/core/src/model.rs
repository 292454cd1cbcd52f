//! The full ranking model: history encoder, per-task monotone transforms and
//! the attention fusion head, with a per-session forward and backward pass.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{action_vocab, Session};
use crate::encoder::{embed_sequence, BehaviorEvent, EmbeddingTables, GruCell};
use crate::error::{Error, Result};
use crate::fusion::{CategorySource, FusionCache, FusionHead, WeightMode};
use crate::numcore::{ParamSet, Parameter, Tensor2};
use crate::quadrature::{QuadratureRule, MIN_CONFIG_NODES};
use crate::umnn::{ContextVector, TransformedScores, UmnnCache, UmnnHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each of the item, category and action embeddings.
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub umnn_hidden: usize,
    pub umnn_depth: usize,
    pub quadrature_nodes: usize,
    pub task_dim: usize,
    pub d_k: usize,
    pub weights: WeightMode,
    pub cemb: CategorySource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            gru_hidden: 32,
            umnn_hidden: 128,
            umnn_depth: 3,
            quadrature_nodes: 32,
            task_dim: 16,
            d_k: 16,
            weights: WeightMode::Linear,
            cemb: CategorySource::Candidate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quadrature_nodes < MIN_CONFIG_NODES {
            return Err(Error::Config(format!(
                "quadrature_nodes must be at least {MIN_CONFIG_NODES}, got {}",
                self.quadrature_nodes
            )));
        }
        let dims = [
            self.embed_dim,
            self.gru_hidden,
            self.umnn_hidden,
            self.umnn_depth,
            self.task_dim,
            self.d_k,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Context width: user embedding, candidate item and category embeddings.
    pub fn context_dim(&self) -> usize {
        self.gru_hidden + 2 * self.embed_dim
    }
}

/// Embedding-table sizes, padding row included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: usize,
    pub categories: usize,
    pub actions: usize,
}

impl Vocab {
    /// Smallest vocabulary covering every id in `sessions`.
    pub fn covering(sessions: &[Session], tasks: usize) -> Self {
        let mut items = 0;
        let mut categories = 0;
        for s in sessions {
            for r in &s.records {
                items = items.max(r.item_id as usize);
                categories = categories.max(r.category_id as usize);
            }
            for e in &s.history {
                items = items.max(e.item_id as usize);
                categories = categories.max(e.category_id as usize);
            }
        }
        Self {
            items: items + 1,
            categories: categories + 1,
            actions: action_vocab(tasks),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Umre {
    pub config: ModelConfig,
    pub tables: EmbeddingTables,
    pub gru: GruCell,
    pub heads: Vec<UmnnHead>,
    pub fusion: FusionHead,
    rule: Arc<QuadratureRule>,
}

/// Forward state of one session.
pub struct SessionCache {
    history: Vec<BehaviorEvent>,
    gru: crate::encoder::GruCache,
    heads: Vec<UmnnCache>,
    fusion: Vec<FusionCache>,
    c_ids: Vec<Vec<u32>>,
}

/// Per-record outputs of a session forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub user: Vec<f64>,
    /// `transformed[k][r]` is task `k`'s transformed score for record `r`.
    pub transformed: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl Umre {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, tasks: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let tables = EmbeddingTables::new(vocab.items, vocab.categories, vocab.actions, d, rng);
        let gru = GruCell::new(3 * d, config.gru_hidden, rng);
        let ctx = config.context_dim();
        let heads = (0..tasks)
            .map(|k| UmnnHead::new(k, ctx, config.umnn_hidden, config.umnn_depth, rng))
            .collect();
        let fusion = FusionHead::new(tasks, config.gru_hidden, d, config.task_dim, config.d_k, config.weights, rng);
        let rule = QuadratureRule::cached(config.quadrature_nodes)?;
        Ok(Self {
            config,
            tables,
            gru,
            heads,
            fusion,
            rule,
        })
    }

    /// Replace every transform by `g(p) = p + β` with a zero integrand.
    pub fn identity_transforms(&mut self, beta: f64) {
        for (k, head) in self.heads.iter_mut().enumerate() {
            *head = UmnnHead::identity(
                k,
                self.config.context_dim(),
                self.config.umnn_hidden,
                self.config.umnn_depth,
                beta,
            );
        }
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn vocab(&self) -> Vocab {
        let (items, categories, actions) = self.tables.vocab_sizes();
        Vocab {
            items,
            categories,
            actions,
        }
    }

    /// Contexts for a session: `u ⊕ item ⊕ category` per record.
    fn contexts(&self, user: &[f64], session: &Session) -> Result<Tensor2> {
        let d = self.config.embed_dim;
        let mut ctx = Tensor2::zeros(session.records.len(), self.config.context_dim());
        for (i, r) in session.records.iter().enumerate() {
            let row = ctx.row_mut(i);
            row[..user.len()].copy_from_slice(user);
            row[user.len()..user.len() + d].copy_from_slice(self.tables.item_row(r.item_id)?);
            row[user.len() + d..].copy_from_slice(self.tables.category_row(r.category_id)?);
        }
        Ok(ctx)
    }

    /// User embedding for an event history.
    pub fn encode_user(&self, history: &[BehaviorEvent]) -> Result<Vec<f64>> {
        let h = embed_sequence(history, &self.tables)?;
        Ok(self.gru.forward(&h)?.0 .0)
    }

    /// Transform context of one record of a session.
    pub fn record_context(&self, session: &Session, record: usize) -> Result<ContextVector> {
        let rec = session
            .records
            .get(record)
            .ok_or_else(|| Error::arg(format!("record {record} out of range")))?;
        let mut h = self.encode_user(&session.history)?;
        h.extend_from_slice(self.tables.item_row(rec.item_id)?);
        h.extend_from_slice(self.tables.category_row(rec.category_id)?);
        Ok(ContextVector(h))
    }

    fn category_ids(&self, session: &Session, record: usize) -> Vec<u32> {
        match self.config.cemb {
            CategorySource::History if !session.history.is_empty() => {
                session.history.iter().map(|e| e.category_id).collect()
            }
            _ => vec![session.records[record].category_id],
        }
    }

    fn category_rows(&self, ids: &[u32]) -> Result<Tensor2> {
        let rows = ids
            .iter()
            .map(|&c| self.tables.category_row(c).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Tensor2::from_rows(&rows)
    }

    pub fn forward_session(&self, session: &Session) -> Result<(SessionOutput, SessionCache)> {
        let m = self.tasks();
        if let Some(r) = session.records.iter().find(|r| r.pxtrs.len() != m) {
            return Err(Error::shape(format!(
                "record has {} pxtrs, model has {m} tasks",
                r.pxtrs.len()
            )));
        }
        let h = embed_sequence(&session.history, &self.tables)?;
        let (user, gru) = self.gru.forward(&h)?;
        let user = user.0;
        let ctx = self.contexts(&user, session)?;

        let mut transformed = Vec::with_capacity(m);
        let mut heads = Vec::with_capacity(m);
        for (k, head) in self.heads.iter().enumerate() {
            let ps: Vec<f64> = session.records.iter().map(|r| r.pxtrs[k]).collect();
            let (t, cache) = head.forward_batch(&ps, &ctx, &self.rule)?;
            transformed.push(t);
            heads.push(cache);
        }

        let n = session.records.len();
        let mut scores = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut fusion = Vec::with_capacity(n);
        let mut c_ids = Vec::with_capacity(n);
        for r in 0..n {
            let t = TransformedScores(transformed.iter().map(|tk| tk[r]).collect());
            let ids = self.category_ids(session, r);
            let c_emb = self.category_rows(&ids)?;
            let (s, cache) = self.fusion.score(&user, &t, &c_emb)?;
            scores.push(s.0);
            weights.push(cache.weights().to_vec());
            fusion.push(cache);
            c_ids.push(ids);
        }
        Ok((
            SessionOutput {
                user,
                transformed,
                weights,
                scores,
            },
            SessionCache {
                history: session.history.clone(),
                gru,
                heads,
                fusion,
                c_ids,
            },
        ))
    }

    pub fn score_session(&self, session: &Session) -> Result<Vec<f64>> {
        Ok(self.forward_session(session)?.0.scores)
    }

    /// Copy of `session` whose pxtrs are replaced by the transformed scores,
    /// so any pxtr-based fuser can run on top of the learned transforms.
    pub fn transform_session(&self, session: &Session) -> Result<Session> {
        let (out, _) = self.forward_session(session)?;
        let mut t = session.clone();
        for (r, rec) in t.records.iter_mut().enumerate() {
            rec.pxtrs = out.transformed.iter().map(|task| task[r]).collect();
        }
        Ok(t)
    }

    /// Accumulate parameter gradients given `d_scores = ∂L/∂s` per record.
    pub fn backward_session(&mut self, session: &Session, cache: &SessionCache, d_scores: &[f64]) -> Result<()> {
        let n = session.records.len();
        if d_scores.len() != n {
            return Err(Error::shape("score gradient length differs from session length"));
        }
        let m = self.tasks();
        let ud = self.config.gru_hidden;
        let d = self.config.embed_dim;
        let mut d_user = vec![0.0; ud];
        let mut d_t = vec![vec![0.0; n]; m];

        for r in 0..n {
            let g = self.fusion.backward(&cache.fusion[r], d_scores[r])?;
            add(&mut d_user, &g.d_user);
            for k in 0..m {
                d_t[k][r] = g.d_t[k];
            }
            for (row, &c) in cache.c_ids[r].iter().enumerate() {
                self.tables.add_category_grad(c, g.d_category.row(row));
            }
        }

        for (k, head) in self.heads.iter_mut().enumerate() {
            let d_ctx = head
                .backward_batch(&cache.heads[k], &d_t[k], true)?
                .expect("context gradient requested");
            for (r, rec) in session.records.iter().enumerate() {
                let row = d_ctx.row(r);
                add(&mut d_user, &row[..ud]);
                self.tables.add_item_grad(rec.item_id, &row[ud..ud + d]);
                self.tables.add_category_grad(rec.category_id, &row[ud + d..]);
            }
        }

        let d_seq = self.gru.backward(&cache.gru, &d_user)?;
        self.tables.backward_sequence(&cache.history, &d_seq)
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl ParamSet for Umre {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.tables.push_named("emb", &mut out);
        self.gru.push_named("gru", &mut out);
        for (k, head) in self.heads.iter().enumerate() {
            head.push_named(&format!("umnn{k}"), &mut out);
        }
        self.fusion.push_named("fusion", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.tables.push_mut(&mut out);
        self.gru.push_mut(&mut out);
        for head in &mut self.heads {
            head.push_mut(&mut out);
        }
        self.fusion.push_mut(&mut out);
        out
    }
}
