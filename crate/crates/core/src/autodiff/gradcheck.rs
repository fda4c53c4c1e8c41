use super::{Array, Graph, NodeId};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Options for [`check_gradient`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Restrict the comparison to these flat indices (all when `None`).
    pub indices: Option<Vec<usize>>,
    /// Negates the analytic gradient; a negative control for the checker itself.
    pub negate_analytic: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            indices: None,
            negate_analytic: false,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference check of a scalar function built on a [`Graph`].
///
/// `f` receives a fresh graph and the node holding `point` and returns the
/// scalar root.
pub fn finite_difference_check<F>(point: &Array, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_gradient(
        point,
        &GradCheck {
            epsilon,
            ..Default::default()
        },
        f,
    )
}

pub fn check_gradient<F>(point: &Array, opts: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::invalid(format!("epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    let eval = |x: &Array| -> Result<f64> {
        let mut g = Graph::new();
        let xi = g.input(x.clone())?;
        let root = f(&mut g, xi)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let xi = g.input(point.clone())?;
    let root = f(&mut g, xi)?;
    if g.value(root).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar root"));
    }
    let f0 = g.value(root).item();
    let f1 = eval(point)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::NonDeterministic { first: f0, second: f1 });
    }
    let grads = g.backward(root, &Array::scalar(1.0))?;
    let sign = if opts.negate_analytic { -1.0 } else { 1.0 };
    let analytic = grads
        .get(xi)
        .map(|a| a.map(|v| v * sign))
        .unwrap_or_else(|| Array::zeros(point.shape()));

    let all: Vec<usize>;
    let indices = match &opts.indices {
        Some(ix) => ix.as_slice(),
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in indices {
        let mut xp = point.clone();
        xp.data_mut()[i] += opts.epsilon;
        let mut xm = point.clone();
        xm.data_mut()[i] -= opts.epsilon;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * opts.epsilon);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
