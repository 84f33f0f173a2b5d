//! Full-batch gradient descent with backtracking step halving.
//!
//! Each iteration starts from a unit step and halves until the objective
//! decreases, so the recorded loss trace is non-increasing. Shared by the
//! lookalike trainer and the reference classifier.

pub struct GdConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub initial_step: f64,
    pub halving_factor: f64,
    pub max_halvings: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            max_iters: 2000,
            tolerance: 1e-8,
            initial_step: 1.0,
            halving_factor: 0.5,
            max_halvings: 30,
        }
    }
}

pub struct GdOutcome {
    pub params: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

/// Minimize `objective` (returning loss and gradient) from `params`.
/// Deterministic; stops when an accepted step improves the loss by less than
/// `tolerance`, when no halved step decreases it, or at `max_iters`.
pub fn gradient_descent<F>(mut params: Vec<f64>, cfg: &GdConfig, objective: F) -> GdOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (mut loss, mut grad) = objective(&params);
    let mut trace = vec![loss];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let mut step = cfg.initial_step;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let candidate: Vec<f64> =
                params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let (candidate_loss, candidate_grad) = objective(&candidate);
            if candidate_loss.is_finite() && candidate_loss < loss {
                accepted = Some((candidate, candidate_loss, candidate_grad));
                break;
            }
            step *= cfg.halving_factor;
        }
        let Some((new_params, new_loss, new_grad)) = accepted else {
            break;
        };
        let improvement = loss - new_loss;
        params = new_params;
        loss = new_loss;
        grad = new_grad;
        trace.push(loss);
        iterations += 1;
        if improvement < cfg.tolerance {
            break;
        }
    }
    GdOutcome { params, iterations, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x0 - 3)^2 + 2 (x1 + 1)^2
        let out = gradient_descent(vec![0.0, 0.0], &GdConfig::default(), |x| {
            let f = (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            (f, vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)])
        });
        assert!((out.params[0] - 3.0).abs() < 1e-3);
        assert!((out.params[1] + 1.0).abs() < 1e-3);
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let cfg = GdConfig { max_iters: 0, ..GdConfig::default() };
        let out = gradient_descent(vec![5.0], &cfg, |x| (x[0] * x[0], vec![2.0 * x[0]]));
        assert_eq!(out.params, vec![5.0]);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.trace.len(), 1);
    }
}
