//! Behaviour-history encoding: embedding lookup of `(item, category,
//! action)` triples followed by a single-layer GRU whose final hidden state
//! is the user embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Parameter, Tensor2};

/// Longest history fed to the encoder.
pub const MAX_HISTORY: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item_id: u32,
    pub category_id: u32,
    pub action_type: u32,
}

/// Item, category and action-type tables. Row 0 of each is padding: it
/// stays zero and never receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub item: Parameter,
    pub category: Parameter,
    pub action: Parameter,
}

fn random_table<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Parameter {
    let mut t = Tensor2::zeros(vocab, dim);
    for r in 1..vocab {
        for v in t.row_mut(r) {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    Parameter::new(t)
}

impl EmbeddingTables {
    /// Vocabulary sizes include the padding row.
    pub fn new<R: Rng + ?Sized>(
        items: usize,
        categories: usize,
        actions: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            item: random_table(items, dim, rng),
            category: random_table(categories, dim, rng),
            action: random_table(actions, dim, rng),
        }
    }

    pub fn zeroed(items: usize, categories: usize, actions: usize, dim: usize) -> Self {
        Self {
            item: Parameter::zeros(items, dim),
            category: Parameter::zeros(categories, dim),
            action: Parameter::zeros(actions, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.item.value.cols()
    }

    pub fn vocab_sizes(&self) -> (usize, usize, usize) {
        (
            self.item.value.rows(),
            self.category.value.rows(),
            self.action.value.rows(),
        )
    }

    fn check_id(table: &Parameter, id: u32, what: &str) -> Result<usize> {
        let id = id as usize;
        if id == 0 {
            return Err(Error::arg(format!("{what} id 0 is the padding row")));
        }
        if id >= table.value.rows() {
            return Err(Error::arg(format!(
                "{what} id {id} outside vocabulary of {}",
                table.value.rows()
            )));
        }
        Ok(id)
    }

    pub fn item_row(&self, id: u32) -> Result<&[f64]> {
        let id = Self::check_id(&self.item, id, "item")?;
        Ok(self.item.value.row(id))
    }

    pub fn category_row(&self, id: u32) -> Result<&[f64]> {
        let id = Self::check_id(&self.category, id, "category")?;
        Ok(self.category.value.row(id))
    }

    pub fn validate_event(&self, e: &BehaviorEvent) -> Result<()> {
        Self::check_id(&self.item, e.item_id, "item")?;
        Self::check_id(&self.category, e.category_id, "category")?;
        Self::check_id(&self.action, e.action_type, "action")?;
        Ok(())
    }

    pub(crate) fn add_item_grad(&mut self, id: u32, g: &[f64]) {
        add_row(&mut self.item.grad, id as usize, g);
    }

    pub(crate) fn add_category_grad(&mut self, id: u32, g: &[f64]) {
        add_row(&mut self.category.grad, id as usize, g);
    }

    /// Scatter a `T × 3d` gradient back onto the rows used by `events`.
    pub fn backward_sequence(&mut self, events: &[BehaviorEvent], d_seq: &Tensor2) -> Result<()> {
        let d = self.dim();
        if d_seq.rows() != events.len() || d_seq.cols() != 3 * d {
            return Err(Error::shape("sequence gradient does not match events"));
        }
        for (t, e) in events.iter().enumerate() {
            let row = d_seq.row(t);
            add_row(&mut self.item.grad, e.item_id as usize, &row[..d]);
            add_row(&mut self.category.grad, e.category_id as usize, &row[d..2 * d]);
            add_row(&mut self.action.grad, e.action_type as usize, &row[2 * d..]);
        }
        Ok(())
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.item"), &self.item));
        out.push((format!("{prefix}.category"), &self.category));
        out.push((format!("{prefix}.action"), &self.action));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.item);
        out.push(&mut self.category);
        out.push(&mut self.action);
    }
}

fn add_row(t: &mut Tensor2, row: usize, g: &[f64]) {
    if row == 0 {
        return;
    }
    for (a, b) in t.row_mut(row).iter_mut().zip(g) {
        *a += b;
    }
}

/// Stack `item ⊕ category ⊕ action` embeddings, one row per event in input
/// order.
pub fn embed_sequence(events: &[BehaviorEvent], tables: &EmbeddingTables) -> Result<Tensor2> {
    if events.len() > MAX_HISTORY {
        return Err(Error::arg(format!(
            "history of {} events exceeds {MAX_HISTORY}",
            events.len()
        )));
    }
    let d = tables.dim();
    let mut out = Tensor2::zeros(events.len(), 3 * d);
    for (t, e) in events.iter().enumerate() {
        tables.validate_event(e)?;
        let row = out.row_mut(t);
        row[..d].copy_from_slice(tables.item.value.row(e.item_id as usize));
        row[d..2 * d].copy_from_slice(tables.category.value.row(e.category_id as usize));
        row[2 * d..].copy_from_slice(tables.action.value.row(e.action_type as usize));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Vec<f64>);

impl UserEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// n = tanh(x W_n + (r ⊙ h) U_n + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Parameter,
    pub w_r: Parameter,
    pub w_n: Parameter,
    pub u_z: Parameter,
    pub u_r: Parameter,
    pub u_n: Parameter,
    pub b_z: Parameter,
    pub b_r: Parameter,
    pub b_n: Parameter,
}

#[derive(Debug, Clone)]
struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    steps: Vec<GruStep>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_z: Parameter::glorot(input, hidden, rng),
            w_r: Parameter::glorot(input, hidden, rng),
            w_n: Parameter::glorot(input, hidden, rng),
            u_z: Parameter::glorot(hidden, hidden, rng),
            u_r: Parameter::glorot(hidden, hidden, rng),
            u_n: Parameter::glorot(hidden, hidden, rng),
            b_z: Parameter::zeros(1, hidden),
            b_r: Parameter::zeros(1, hidden),
            b_n: Parameter::zeros(1, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.value.cols()
    }

    /// Run the recurrence over the rows of `seq` from a zero state.
    pub fn forward(&self, seq: &Tensor2) -> Result<(UserEmbedding, GruCache)> {
        if seq.rows() > 0 && seq.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "GRU input has {} columns, expected {}",
                seq.cols(),
                self.input_dim()
            )));
        }
        let hdim = self.hidden_dim();
        let mut h = vec![0.0; hdim];
        let mut steps = Vec::with_capacity(seq.rows());
        for t in 0..seq.rows() {
            let x = seq.row(t).to_vec();
            let gate = |w: &Parameter, u: &Parameter, b: &Parameter, hh: &[f64]| {
                let mut a = w.value.vecmat(&x);
                for ((ai, ui), bi) in a.iter_mut().zip(u.value.vecmat(hh)).zip(b.value.data()) {
                    *ai += ui + bi;
                }
                a
            };
            let z: Vec<f64> = gate(&self.w_z, &self.u_z, &self.b_z, &h)
                .into_iter()
                .map(sigmoid)
                .collect();
            let r: Vec<f64> = gate(&self.w_r, &self.u_r, &self.b_r, &h)
                .into_iter()
                .map(sigmoid)
                .collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = gate(&self.w_n, &self.u_n, &self.b_n, &rh)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let h_next: Vec<f64> = (0..hdim)
                .map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i])
                .collect();
            steps.push(GruStep {
                x,
                h_prev: std::mem::replace(&mut h, h_next),
                z,
                r,
                n,
                rh,
            });
        }
        Ok((UserEmbedding(h), GruCache { steps }))
    }

    /// Backpropagation through time from a gradient on the final state.
    /// Returns the gradient with respect to the input sequence.
    pub fn backward(&mut self, cache: &GruCache, d_final: &[f64]) -> Result<Tensor2> {
        let hdim = self.hidden_dim();
        if d_final.len() != hdim {
            return Err(Error::shape("GRU output gradient has wrong width"));
        }
        let mut d_seq = Tensor2::zeros(cache.steps.len(), self.input_dim());
        let mut dh = d_final.to_vec();
        for (t, s) in cache.steps.iter().enumerate().rev() {
            let mut dh_prev: Vec<f64> = dh.iter().zip(&s.z).map(|(d, z)| d * z).collect();
            let da_n: Vec<f64> = (0..hdim)
                .map(|i| dh[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i]))
                .collect();
            let da_z: Vec<f64> = (0..hdim)
                .map(|i| dh[i] * (s.h_prev[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i]))
                .collect();

            self.w_n.grad.add_outer(&s.x, &da_n, 1.0);
            self.u_n.grad.add_outer(&s.rh, &da_n, 1.0);
            add_vec(self.b_n.grad.data_mut(), &da_n);
            let d_rh = self.u_n.value.matvec(&da_n);
            let da_r: Vec<f64> = (0..hdim)
                .map(|i| d_rh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]))
                .collect();
            for i in 0..hdim {
                dh_prev[i] += d_rh[i] * s.r[i];
            }

            self.w_z.grad.add_outer(&s.x, &da_z, 1.0);
            self.u_z.grad.add_outer(&s.h_prev, &da_z, 1.0);
            add_vec(self.b_z.grad.data_mut(), &da_z);
            self.w_r.grad.add_outer(&s.x, &da_r, 1.0);
            self.u_r.grad.add_outer(&s.h_prev, &da_r, 1.0);
            add_vec(self.b_r.grad.data_mut(), &da_r);

            add_vec(&mut dh_prev, &self.u_z.value.matvec(&da_z));
            add_vec(&mut dh_prev, &self.u_r.value.matvec(&da_r));

            let dx = d_seq.row_mut(t);
            add_vec(dx, &self.w_n.value.matvec(&da_n));
            add_vec(dx, &self.w_z.value.matvec(&da_z));
            add_vec(dx, &self.w_r.value.matvec(&da_r));
            dh = dh_prev;
        }
        Ok(d_seq)
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        for (name, p) in [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_n", &self.w_n),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_n", &self.u_n),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_n", &self.b_n),
        ] {
            out.push((format!("{prefix}.{name}"), p));
        }
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_n,
        ]);
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl ParamSet for GruCell {
    fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.push_named("gru", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

/// Embedding lookup plus GRU as one unit.
pub fn gru_forward(seq: &Tensor2, cell: &GruCell) -> Result<UserEmbedding> {
    Ok(cell.forward(seq)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_param_set, finite_diff_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(item: u32, cat: u32, act: u32) -> BehaviorEvent {
        BehaviorEvent {
            item_id: item,
            category_id: cat,
            action_type: act,
        }
    }

    #[test]
    fn empty_history_embeds_to_no_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tables = EmbeddingTables::new(5, 3, 4, 2, &mut rng);
        let m = embed_sequence(&[], &tables).unwrap();
        assert_eq!(m.shape(), (0, 6));
    }

    #[test]
    fn zero_tables_give_zero_rows() {
        let tables = EmbeddingTables::zeroed(5, 3, 4, 2);
        let m = embed_sequence(&[ev(1, 1, 1)], &tables).unwrap();
        assert_eq!(m.shape(), (1, 6));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_follow_event_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = EmbeddingTables::new(5, 3, 4, 2, &mut rng);
        let m = embed_sequence(&[ev(2, 1, 3), ev(4, 2, 1)], &tables).unwrap();
        assert_eq!(&m.row(0)[..2], tables.item.value.row(2));
        assert_eq!(&m.row(1)[..2], tables.item.value.row(4));
        assert_eq!(&m.row(1)[2..4], tables.category.value.row(2));
        assert_eq!(&m.row(0)[4..], tables.action.value.row(3));
    }

    #[test]
    fn padding_and_out_of_vocab_ids_are_rejected() {
        let tables = EmbeddingTables::zeroed(5, 3, 4, 2);
        assert!(matches!(
            embed_sequence(&[ev(0, 1, 1)], &tables),
            Err(Error::Argument(_))
        ));
        assert!(embed_sequence(&[ev(5, 1, 1)], &tables).is_err());
        assert!(embed_sequence(&[ev(1, 3, 1)], &tables).is_err());
        let long = vec![ev(1, 1, 1); MAX_HISTORY + 1];
        assert!(embed_sequence(&long, &tables).is_err());
    }

    #[test]
    fn empty_sequence_gives_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = GruCell::new(3, 4, &mut rng);
        let u = gru_forward(&Tensor2::zeros(0, 3), &cell).unwrap();
        assert_eq!(u.0, vec![0.0; 4]);
    }

    #[test]
    fn scalar_gru_matches_hand_evaluation() {
        let p = |v: f64| Parameter::new(Tensor2::filled(1, 1, v));
        let cell = GruCell {
            w_z: p(0.5),
            w_r: p(-0.3),
            w_n: p(0.8),
            u_z: p(0.2),
            u_r: p(0.4),
            u_n: p(-0.6),
            b_z: p(0.1),
            b_r: p(0.0),
            b_n: p(-0.2),
        };
        let x1 = 1.5;
        let x2 = -0.7;
        let seq = Tensor2::new(2, 1, vec![x1, x2]).unwrap();
        let u = gru_forward(&seq, &cell).unwrap();

        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        // step 1 from h = 0
        let z1 = sig(0.5 * x1 + 0.1);
        let n1 = (0.8 * x1 - 0.2f64).tanh();
        let h1 = (1.0 - z1) * n1;
        // step 2
        let z2 = sig(0.5 * x2 + 0.2 * h1 + 0.1);
        let r2 = sig(-0.3 * x2 + 0.4 * h1);
        let n2 = (0.8 * x2 - 0.6 * r2 * h1 - 0.2).tanh();
        let h2 = (1.0 - z2) * n2 + z2 * h1;
        assert!((u.0[0] - h2).abs() < 1e-15, "{} vs {h2}", u.0[0]);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cell = GruCell::new(3, 4, &mut rng);
        for p in cell.params_mut() {
            // non-zero biases exercise every path
            if p.shape().0 == 1 {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let seq = Tensor2::new(5, 3, (0..15).map(|i| ((i * 7) as f64 * 0.31).sin()).collect()).unwrap();
        let coef = [0.3, -1.1, 0.7, 0.2];
        let loss = |c: &GruCell, s: &Tensor2| -> Result<f64> {
            let u = gru_forward(s, c)?;
            Ok(u.0.iter().zip(coef).map(|(a, b)| a * b).sum())
        };
        let (_, cache) = cell.forward(&seq).unwrap();
        let d_seq = cell.backward(&cache, &coef).unwrap();

        let err = check_param_set(&mut cell, 1e-6, None, |c| loss(c, &seq)).unwrap();
        assert!(err < 1e-4, "param rel err {err}");
        let err = finite_diff_check(seq.data(), d_seq.data(), 1e-6, |v| {
            loss(&cell, &Tensor2::new(5, 3, v.to_vec())?)
        })
        .unwrap();
        assert!(err < 1e-4, "input rel err {err}");
    }

    #[test]
    fn final_state_stays_inside_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cell = GruCell::new(2, 6, &mut rng);
        let seq = Tensor2::new(30, 2, (0..60).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap();
        let u = gru_forward(&seq, &cell).unwrap();
        assert!(u.0.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn sequence_backward_skips_padding_row() {
        let mut tables = EmbeddingTables::zeroed(4, 3, 3, 2);
        let events = [ev(1, 2, 1), ev(1, 1, 2)];
        let d = Tensor2::filled(2, 6, 1.0);
        tables.backward_sequence(&events, &d).unwrap();
        assert_eq!(tables.item.grad.row(1), &[2.0, 2.0]);
        assert_eq!(tables.item.grad.row(0), &[0.0, 0.0]);
        assert_eq!(tables.category.grad.row(2), &[1.0, 1.0]);
    }
}
