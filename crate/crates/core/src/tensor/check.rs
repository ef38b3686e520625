//! Central finite-difference gradient checking over a parameter store.

use serde::Serialize;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `path[index]` of the scalar with the largest error.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub scalars_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradcheckReport {
    fn failed(name: &str, tolerance: f64, why: String) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            worst_param: String::new(),
            analytic: f64::NAN,
            numeric: f64::NAN,
            scalars_checked: 0,
            tolerance,
            passed: false,
            failure: Some(why),
        }
    }
}

fn eval_loss<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::with_params(store);
    let out = loss(&mut g)?;
    g.check_finite()?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::contract(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares the analytic gradient of `loss` with central differences for
/// every scalar in `store`. The closure must build the same computation on
/// every call.
pub fn check_gradients<F>(name: &str, store: &ParamStore, loss: F, fd_step: f64, tolerance: f64) -> GradcheckReport
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut analytic = store.zeros_like();
    {
        let mut g = Graph::with_params(store);
        let out = match loss(&mut g) {
            Ok(o) => o,
            Err(e) => return GradcheckReport::failed(name, tolerance, e.to_string()),
        };
        if let Err(e) = g.check_finite() {
            return GradcheckReport::failed(name, tolerance, e.to_string());
        }
        if let Err(e) = g.backward(out) {
            return GradcheckReport::failed(name, tolerance, e.to_string());
        }
        g.accumulate_param_grads(&mut analytic);
    }

    let mut probe = store.clone();
    let mut report = GradcheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        scalars_checked: 0,
        tolerance,
        passed: true,
        failure: None,
    };
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + fd_step;
            let plus = eval_loss(&probe, &loss);
            probe.get_mut(id).data_mut()[k] = orig - fd_step;
            let minus = eval_loss(&probe, &loss);
            probe.get_mut(id).data_mut()[k] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradcheckReport::failed(name, tolerance, format!("{}[{k}]: {e}", store.name(id)));
                }
            };
            let numeric = (plus - minus) / (2.0 * fd_step);
            let a = analytic[id.index()].data()[k];
            let err = relative_error(a, numeric);
            report.scalars_checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{k}]", store.name(id));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relative_error_floor_is_one() {
        assert_eq!(relative_error(1e-8, 0.0), 1e-8);
        assert_eq!(relative_error(200.0, 100.0), 0.5);
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![0.3, -1.2, 0.8]).unwrap()).unwrap();
        let x = store.find("x").unwrap();
        let good = check_gradients(
            "sin",
            &store,
            |g| {
                let p = g.param(x);
                let y = g.map(p, "sin", f64::sin, f64::cos);
                Ok(g.sum(y))
            },
            1e-4,
            1e-6,
        );
        assert!(good.passed, "{good:?}");
        let bad = check_gradients(
            "sin",
            &store,
            |g| {
                let p = g.param(x);
                let y = g.map(p, "sin", f64::sin, |v| -v.cos());
                Ok(g.sum(y))
            },
            1e-4,
            1e-6,
        );
        assert!(!bad.passed);
        assert!(bad.worst_param.starts_with("x["));
    }
}
