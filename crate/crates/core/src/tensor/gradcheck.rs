use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and central-difference gradients
/// for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` for elements above tolerance.
    pub flagged: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|p| p.flagged.is_empty())
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with the given `step`.
///
/// `f` receives the graph and one handle per entry of `params`, in order, and
/// must be deterministic.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract("finite_diff_check", "step must be positive"));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    check_finite(g.scalar(loss)?)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p)).collect();
        let out = f(&mut g, &vars)?;
        check_finite(g.scalar(out)?)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut max_rel_error: f64 = 0.0;
        let mut flagged = Vec::new();
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            max_rel_error = max_rel_error.max(err);
            if err > tolerance {
                flagged.push((j, a, numeric));
            }
        }
        per_param.push(ParamGradError {
            max_rel_error,
            flagged,
        });
    }
    Ok(GradCheckReport {
        per_param,
        step,
        tolerance,
    })
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericInstability(format!(
            "objective evaluated to {v}"
        )))
    }
}
