//! Clenshaw–Curtis quadrature on `[-1, 1]` and definite integrals over
//! `[0, p]`.
//!
//! Nodes are the Chebyshev extreme points `cos(πq/(Q−1))`, stored in
//! ascending order. Weights come from the direct cosine series, which costs
//! `O(Q²)` once per rule.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Smallest node count accepted by model configs. Below this the quadrature
/// of a smooth positive integrand is not reliably increasing in `p`.
pub const MIN_CONFIG_NODES: usize = 8;

pub const DEFAULT_NODES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Build the `q`-point Clenshaw–Curtis rule.
    pub fn clenshaw_curtis(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::arg(format!(
                "Clenshaw-Curtis needs at least 2 nodes, got {q}"
            )));
        }
        let n = q - 1;
        let nf = n as f64;
        // sin form keeps the node set exactly antisymmetric about 0
        let nodes: Vec<f64> = (0..q)
            .map(|j| (PI * (2.0 * j as f64 - nf) / (2.0 * nf)).sin())
            .collect();

        let half = n / 2;
        let weights = (0..q)
            .map(|j| {
                let c = if j == 0 || j == n { 1.0 } else { 2.0 };
                let mut s = 1.0;
                for k in 1..=half {
                    let b = if 2 * k == n { 1.0 } else { 2.0 };
                    let kf = k as f64;
                    // cos(2kjπ/n); reduce the integer argument first
                    let m = (2 * k * j) % (2 * n);
                    s -= b / (4.0 * kf * kf - 1.0) * (PI * m as f64 / nf).cos();
                }
                c / nf * s
            })
            .collect();
        Ok(Self { nodes, weights })
    }

    /// Shared rule for `q` nodes, built on first use.
    pub fn cached(q: usize) -> Result<Arc<QuadratureRule>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        if let Some(rule) = guard.get(&q) {
            return Ok(Arc::clone(rule));
        }
        let rule = Arc::new(Self::clenshaw_curtis(q)?);
        guard.insert(q, Arc::clone(&rule));
        Ok(rule)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Node `q` mapped onto `[0, p]` together with its effective weight
    /// (Jacobian `p/2` folded in).
    #[inline]
    pub fn mapped(&self, q: usize, p: f64) -> (f64, f64) {
        let half = 0.5 * p;
        (half * (self.nodes[q] + 1.0), half * self.weights[q])
    }

    /// `∫₀ᵖ f(t) dt ≈ Σ (p/2)·w_q·f((p/2)(x_q+1))`.
    pub fn integrate_upper<F>(&self, p: f64, mut f: F) -> Result<f64>
    where
        F: FnMut(f64) -> f64,
    {
        if !(p >= 0.0) {
            return Err(Error::arg(format!("upper limit must be non-negative, got {p}")));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for q in 0..self.len() {
            let (t, w) = self.mapped(q, p);
            acc += w * f(t);
        }
        Ok(acc)
    }
}

/// Free-function form of [`QuadratureRule::integrate_upper`].
pub fn integrate_upper<F>(f: F, p: f64, rule: &QuadratureRule) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    rule.integrate_upper(p, f)
}
