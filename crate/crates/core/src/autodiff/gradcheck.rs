//! Central finite-difference verification of tape gradients.
//!
//! Always runs in `f64`. For each checked parameter entry the analytic
//! gradient from one backward pass is compared against
//! `(f(x+h) - f(x-h)) / 2h`; entries where both magnitudes are below the
//! dead-band are skipped.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::AutodiffError;

/// Entries with both |analytic| and |fd| below this are skipped.
const DEAD_BAND: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all compared entries.
    pub max_rel_err: f64,
    /// Number of entries actually compared.
    pub compared: usize,
    /// Number of entries skipped by the dead-band.
    pub skipped: usize,
    /// (parameter index, entry index, analytic, fd) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol_rel
    }
}

/// Relative error used throughout: |a - b| / max(|a|, |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Checks the analytic gradient of a scalar-valued tape program against
/// central finite differences.
///
/// `build` receives a fresh tape plus the parameter nodes (registered as
/// differentiable vars in the given order) and returns the loss node.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    h: f64,
    tol_rel: f64,
    mut build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |params: &[Tensor<f64>], build: &mut F| -> Result<(f64, Vec<Option<Tensor<f64>>>), AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| tape.var(p.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { context: "grad_check loss" });
        }
        let mut grads = tape.backward(loss)?;
        let out = ids.iter().map(|&id| grads.take(id)).collect();
        Ok((value, out))
    };

    let (_, analytic) = eval(params, &mut build)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        compared: 0,
        skipped: 0,
        worst: None,
        tol_rel,
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let mut tape_eval = |ps: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = ps
                    .iter()
                    .map(|p| tape.var(p.clone()))
                    .collect::<Result<_, _>>()?;
                let loss = build(&mut tape, &ids)?;
                Ok(tape.value(loss).item())
            };
            let plus = tape_eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = tape_eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi]
                .as_ref()
                .map(|g| g.data()[ei])
                .unwrap_or(0.0);
            if an.abs() < DEAD_BAND && fd.abs() < DEAD_BAND {
                report.skipped += 1;
                continue;
            }
            let rel = relative_error(an, fd);
            report.compared += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei, an, fd));
            }
        }
    }
    Ok(report)
}
