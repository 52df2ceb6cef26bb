use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Gradient entries smaller than this are compared on an absolute scale,
/// since central-difference roundoff is absolute rather than relative.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    /// Worst relative error overall.
    pub max_rel_err: f64,
    /// `(tensor, flat index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `analytic` against central differences `(f(p+h) - f(p-h)) / 2h`,
/// element by element.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for t in 0..params.len() {
        let mut tensor_worst: f64 = 0.0;
        for k in 0..params[t].numel() {
            let orig = params[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = f(&work)?;
            work[t].data_mut()[k] = orig - h;
            let minus = f(&work)?;
            work[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[t].data()[k], numeric);
            tensor_worst = tensor_worst.max(err);
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((t, k));
            }
        }
        per_tensor.push(tensor_worst);
    }
    Ok(GradCheck { per_tensor, max_rel_err, worst })
}

/// Builds `loss = build(graph, params)` once for the analytic gradient and
/// once per perturbation for the numeric one.
pub fn check_graph_fn<F>(build: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    finite_diff_check(
        |ps| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        },
        params,
        &analytic,
        h,
    )
}
