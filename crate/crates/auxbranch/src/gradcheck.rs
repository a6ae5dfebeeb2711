//! Finite-difference validation of analytic gradients.
//!
//! This is the oracle every objective in the crate must pass: central
//! differences at 64-bit precision against the graph's reverse-mode result.

use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId};
use crate::params::ParamSet;
use crate::tensor::Precision;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let mark = if e.max_rel_err < self.tol { "ok  " } else { "FAIL" };
            s.push_str(&format!(
                "{mark} {:<28} max_rel_err {:.3e} (analytic {:.6e}, numeric {:.6e} at [{}])\n",
                e.name, e.max_rel_err, e.analytic_at_worst, e.numeric_at_worst, e.worst_index
            ));
        }
        s
    }
}

/// Relative error that degrades to absolute comparison for tiny gradients,
/// where central differences are dominated by cancellation noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of `builder`'s scalar loss w.r.t. every entry of every
/// parameter in `params`, by central differences with step `eps`.
///
/// The builder must be deterministic: it is re-invoked many times and any
/// internal randomness (dropout masks, replacement draws) must replay
/// identically. A builder that produces two different losses on the same
/// parameters is rejected.
pub fn grad_check<F>(builder: F, params: &mut ParamSet, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut DiffGraph, &ParamSet) -> Result<NodeId>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = DiffGraph::new(Precision::F64);
        let loss = builder(&mut g, params)?;
        let v = g.value(loss);
        if v.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.item())
    };

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic(format!("{base_a} vs {base_b}")));
    }

    // Analytic gradients from one reverse pass.
    let mut g = DiffGraph::new(Precision::F64);
    let loss = builder(&mut g, params)?;
    params.zero_grads();
    g.backward_into(loss, params)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut entries = Vec::new();
    let names = params.names();
    for (name, analytic_grad) in names.iter().zip(analytic.iter().map(|(_, g)| g)) {
        let n = params.get(name).expect("listed above").value.len();
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..n {
            let orig = params.get(name).expect("listed above").value.data()[i];
            params.get_mut(name).expect("listed above").value.data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.get_mut(name).expect("listed above").value.data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.get_mut(name).expect("listed above").value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic_grad[i];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        entries.push(worst);
    }

    Ok(GradCheckReport { entries, tol })
}
