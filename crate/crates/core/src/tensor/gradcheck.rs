//! Central finite-difference verification of graph gradients in `f64`.

use super::{Graph, Tensor, TensorError, Var};

/// Relative tolerance of the gradient check.
pub const REL_TOL: f64 = 1e-3;
/// Absolute tolerance floor of the gradient check.
pub const ABS_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(rel_tol * scale, abs_tol)` seen; pass iff <= 1.
    pub worst_ratio: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Compares analytic gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar.
pub fn check_gradients<F, E>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).cloned().expect("leaf gradient populated"))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        worst_ratio: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[t].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t].data()[e];
            let allowed = (REL_TOL * a.abs().max(numeric.abs())).max(ABS_TOL);
            let ratio = (a - numeric).abs() / allowed;
            report.checked += 1;
            if ratio > report.worst_ratio || report.worst.is_none() {
                report.worst_ratio = ratio.max(report.worst_ratio);
                report.worst = Some((t, e, a, numeric));
            }
        }
    }
    Ok(report)
}
