//! Central finite-difference verification of analytic gradients.
//!
//! The graph under test is supplied as a builder closure so it can be
//! re-executed at perturbed inputs; perturbations run in parallel, each on
//! its own tape.

use rayon::prelude::*;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// "name[index]" of the worst element.
    pub worst: String,
    pub checked_elements: usize,
}

/// Compares every element's analytic gradient against
/// (f(θ+ε) − f(θ−ε)) / 2ε. Relative error uses
/// |a − n| / max(|a|, |n|, 1e−6).
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    build: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).shape.numel() != 1 {
        return Err(Error::config(format!(
            "grad_check loss must be scalar, got {}",
            tape.value(loss).shape
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = ids.iter().map(|&id| tape.grad(id).cloned()).collect();

    let jobs: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.data.len()).map(move |ei| (pi, ei)))
        .collect();

    let results: Result<Vec<(f64, usize, usize)>> = jobs
        .par_iter()
        .map(|&(pi, ei)| {
            let eval = |delta: f64| -> Result<f64> {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, (_, t))| {
                        let mut t = t.clone();
                        if i == pi {
                            t.data[ei] += delta;
                        }
                        tape.leaf(t, false)
                    })
                    .collect();
                let l = build(&mut tape, &ids)?;
                Ok(tape.value(l).item())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data[ei]);
            // Differences below the central-difference cancellation floor
            // (ulp(f)/2ε ≈ 1e-10 for unit-scale losses) carry no signal.
            let diff = (a - numeric).abs();
            let rel = if diff < 5e-9 {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(1e-6)
            };
            Ok((rel, pi, ei))
        })
        .collect();
    let results = results?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked_elements: results.len(),
    };
    for (rel, pi, ei) in results {
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!("{}[{}]", inputs[pi].0, ei);
        }
    }
    Ok(report)
}
