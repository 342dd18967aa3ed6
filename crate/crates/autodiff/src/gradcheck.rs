//! Central finite-difference checks against tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest denominator used when forming relative errors, so that
/// vanishing gradients compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Re-scores every probe with denominator floor `floor`. A central
    /// difference of a loss `L` carries rounding noise near
    /// `f64::EPSILON * |L| / h`, so gradients of that size cannot be
    /// resolved and need an absolute scale.
    pub fn with_floor(mut self, floor: f64) -> Self {
        for p in &mut self.probes {
            p.rel_error = relative_error_floored(p.analytic, p.numeric, floor);
        }
        self
    }

    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `d loss / d inputs[i][j]` from one backward sweep with
/// `(f(x + h) - f(x - h)) / 2h` for every `(i, j)` in `probes`.
///
/// `build` receives a fresh tape and one leaf per input and must return a
/// scalar loss. It is re-run for every perturbation, so it has to be a pure
/// function of the inputs.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    probes: &[(usize, usize)],
    h: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_checks(true);
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves
            .iter()
            .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
            .collect::<Vec<_>>()
    };

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_checks(true);
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for &(i, j) in probes {
        if i >= work.len() || j >= work[i].numel() {
            return Err(TensorError::Contract(format!("probe ({i},{j}) out of range")));
        }
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        report.probes.push(ProbeResult {
            input: i,
            element: j,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(report)
}

/// Every element of every input.
pub fn all_probes(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}
