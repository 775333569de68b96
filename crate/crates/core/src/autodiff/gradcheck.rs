use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, NamedTensors};

/// Gradient magnitude below which errors are measured against this floor
/// instead of the gradient itself.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around
/// `params`. When the parameters hold more than `max_coords` coordinates a
/// seeded subset of that size is checked.
pub fn finite_diff_check(
    loss: impl Fn(&NamedTensors) -> f64,
    params: &NamedTensors,
    analytic: &Gradients,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, m)| (0..m.len()).map(move |k| (name.clone(), k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: chosen.len(),
    };
    let mut work = params.clone();
    for i in chosen {
        let (name, k) = &coords[i];
        let orig = params[name].as_slice()[*k];
        work.get_mut(name).unwrap().as_mut_slice()[*k] = orig + eps;
        let plus = loss(&work);
        work.get_mut(name).unwrap().as_mut_slice()[*k] = orig - eps;
        let minus = loss(&work);
        work.get_mut(name).unwrap().as_mut_slice()[*k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let ana = analytic.get(name).map_or(0.0, |g| g.as_slice()[*k]);
        let err = relative_error(ana, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), *k));
            report.analytic_at_worst = ana;
            report.numeric_at_worst = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Matrix;

    #[test]
    fn linear_model_agrees_exactly() {
        // y = w x, loss = y²
        let x = 1.7;
        let mut params = NamedTensors::new();
        params.insert("w".into(), Matrix::filled(1, 1, -0.6));
        let loss = |p: &NamedTensors| {
            let y = p["w"][(0, 0)] * x;
            y * y
        };
        let mut t = Tape::new();
        let w = t.param("w", params["w"].clone());
        let xs = t.constant(Matrix::filled(1, 1, x));
        let y = t.matmul(w, xs);
        let l = t.sum_sq(y);
        let g = t.backward(l).unwrap();
        let report = finite_diff_check(loss, &params, &g, 1e-5, 10, 0);
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.coordinates_checked, 1);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = NamedTensors::new();
        params.insert("w".into(), Matrix::filled(1, 2, 1.0));
        let mut wrong = NamedTensors::new();
        wrong.insert("w".into(), Matrix::from_vec(1, 2, vec![2.0, 5.0]).unwrap());
        let report = finite_diff_check(|p| p["w"].norm_sq(), &params, &Gradients::from_map(wrong), 1e-5, 10, 0);
        assert_eq!(report.worst, Some(("w".to_string(), 1)));
        assert!(report.max_rel_error > 0.5);
    }
}
