use super::layers::ParamSet;
use crate::error::{Error, Result};

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::arg(format!("finite-difference epsilon {eps} outside [1e-8, 1e-3]")));
    }
    Ok(())
}

/// Compare an analytic gradient with central differences of `f` at `x`.
///
/// Returns the maximum over coordinates of `|a − n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(x: &[f64], analytic: &[f64], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    if x.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let mut point = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let up = f(&point)?;
        point[i] = x[i] - eps;
        let down = f(&point)?;
        point[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a parameter set whose gradients are already
/// populated by a backward pass. `coords` restricts the check to a subset of
/// flat indices; `None` checks every value.
pub fn check_param_set<M, F>(
    model: &mut M,
    eps: f64,
    coords: Option<&[usize]>,
    mut loss: F,
) -> Result<f64>
where
    M: ParamSet,
    F: FnMut(&M) -> Result<f64>,
{
    check_eps(eps)?;
    let values = model.flat_values();
    let grads = model.flat_grads();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..values.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        model.set_flat_value(i, values[i] + eps);
        let up = loss(model)?;
        model.set_flat_value(i, values[i] - eps);
        let down = loss(model)?;
        model.set_flat_value(i, values[i]);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(grads[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(&[3.0], &[6.0], 1e-5, |w| Ok(w[0] * w[0])).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let a = [0.5, -2.0, 3.0];
        let err = finite_diff_check(&[1.0, 2.0, -1.0], &a, 1e-4, |w| {
            Ok(w.iter().zip(&a).map(|(x, c)| x * c).sum())
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon_and_nan() {
        assert!(finite_diff_check(&[1.0], &[1.0], 1e-2, |w| Ok(w[0])).is_err());
        let r = finite_diff_check(&[1.0], &[1.0], 1e-5, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
