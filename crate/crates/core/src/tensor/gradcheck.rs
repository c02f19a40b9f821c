//! Finite-difference gradient verification.
//!
//! Runs in `f64` only: central differences `(f(θ+h) − f(θ−h)) / 2h` with
//! `h = 1e-5` leave ~1e-10 truncation error there, far below the tolerances
//! checked. The harness is independent of the backward rules it audits: it
//! re-runs the forward closure from scratch for every probe.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Result, TensorId};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error between analytic and numeric gradients of one parameter
/// tensor: `max_i |a_i − n_i| / max(1, ‖a‖∞, ‖n‖∞)`. The 1 floor keeps
/// finite-difference noise on true-zero gradients from registering as
/// spurious relative error.
fn tensor_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(1.0f64, |m, &v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// Check every trainable parameter of `store` against central differences
/// of the scalar loss produced by `build`. `build` must be a pure function
/// of the store contents.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    build: F,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<TensorId>,
{
    gradcheck_with(store, build, tolerance, step, None)
}

/// Like [`gradcheck`], optionally corrupting the named op's backward rule
/// (negative control: the report must then fail).
pub fn gradcheck_with<F>(
    store: &mut ParamStore<f64>,
    build: F,
    tolerance: f64,
    step: f64,
    corrupt_op: Option<&str>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<TensorId>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    graph.set_corrupt_backward(corrupt_op);
    let loss = build(&mut graph, store)?;
    graph.backward(loss)?;

    let mut analytic: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for &(pid, leaf) in graph.param_leaves() {
        if store.requires_grad(pid) {
            let g = graph.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| {
                vec![0.0; store.numel(pid)]
            });
            analytic.push((pid, g));
        }
    }
    drop(graph);

    let mut entries = Vec::with_capacity(analytic.len());
    for (pid, a) in analytic {
        let n = store.numel(pid);
        let mut numeric = vec![0.0f64; n];
        for i in 0..n {
            let original = store.data(pid)[i];

            store.data_mut(pid)[i] = original + step;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store)?;
            let fp = gp.item(lp);

            store.data_mut(pid)[i] = original - step;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store)?;
            let fm = gm.item(lm);

            store.data_mut(pid)[i] = original;
            numeric[i] = (fp - fm) / (2.0 * step);
        }
        let err = tensor_rel_err(&a, &numeric);
        entries.push(GradCheckEntry {
            param: store.name(pid).to_owned(),
            max_rel_err: err,
            pass: err < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
