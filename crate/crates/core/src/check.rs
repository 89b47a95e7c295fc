//! Central finite-difference gradient oracle.
//!
//! Test support: compares tape gradients against (f(x+h) - f(x-h)) / 2h
//! computed purely through the forward path, in f64. The oracle never
//! touches the backward code it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{bind, collect_grads, BoundParams, ParamStore};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Worst-case relative error between analytic and finite-difference
/// gradients over every checked element.
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor: tiny gradients on both sides are
/// compared at the 1e-6 scale instead of blowing up the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check d(loss)/d(param) for every parameter in `store` against central
/// differences with step `h`. `build` must construct the loss from bound
/// parameters alone and be deterministic. Tensors larger than
/// `max_per_tensor` are stride-sampled.
pub fn finite_diff_check<B>(
    store: &ParamStore<f64>,
    h: f64,
    max_per_tensor: usize,
    build: B,
) -> Result<FdReport>
where
    B: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = bind(&mut g, s, |_| false);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).scalar_value())
    };

    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let bound = bind(&mut g, store, |_| true);
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic = collect_grads(&g, &bound);
    drop(g);

    let mut report = FdReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let numel = store.get(&name).expect("name from store").numel();
        let grad = analytic.get(&name).cloned().unwrap_or_else(|| vec![0.0; numel]);
        let stride = numel.div_ceil(max_per_tensor).max(1);
        let mut i = 0usize;
        while i < numel {
            let mut plus = store.clone();
            plus.get_mut(&name).expect("cloned").data_mut()[i] += h;
            let f_plus = eval(&plus)?;
            let mut minus = store.clone();
            minus.get_mut(&name).expect("cloned").data_mut()[i] -= h;
            let f_minus = eval(&minus)?;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(fd, grad[i]);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]: fd {fd:.3e} vs analytic {:.3e}", grad[i]);
            }
            report.checked += 1;
            i += stride;
        }
    }
    Ok(report)
}
