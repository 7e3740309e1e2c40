//! Finite-difference gradient checking.
//!
//! Central differences with step `h` approximate each partial derivative by
//! `(f(x + h e_j) - f(x - h e_j)) / 2h`; the reverse-mode result must agree
//! within a relative tolerance. The relative error uses an absolute floor in
//! the denominator so that components whose true derivative is ~0 compare
//! against the floor instead of exploding.

use super::{NumError, Shape, Tape, Var};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default floor for the relative-error denominator.
pub const DEFAULT_FLOOR: f64 = 1e-3;
/// Reverse-mode vs finite-difference agreement required of every op.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative disagreement across all checked components.
    pub max_rel_err: f64,
    /// Number of scalar components compared.
    pub checked: usize,
}

/// Compare reverse-mode gradients against central differences for a scalar
/// function of one or more matrix inputs.
///
/// `build` must be a pure function of the tape and the leaves it is handed:
/// it is re-run twice per input component for the numeric side.
pub fn check_gradients<F>(
    inputs: &[(Shape, Vec<f64>)],
    h: f64,
    rel_floor: f64,
    build: F,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    // Reverse-mode pass.
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (shape, values) in inputs {
        vars.push(tape.leaf(*shape, values.clone(), true)?);
    }
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, vals))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; vals.len()]))
        .collect();

    // Numeric pass, one perturbed forward per sign per component.
    let eval = |input_idx: usize, comp: usize, delta: f64| -> Result<f64, NumError> {
        let mut t = Tape::new();
        let mut vs = Vec::with_capacity(inputs.len());
        for (k, (shape, values)) in inputs.iter().enumerate() {
            let mut vals = values.clone();
            if k == input_idx {
                vals[comp] += delta;
            }
            vs.push(t.leaf(*shape, vals, false)?);
        }
        let l = build(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (i, (_, values)) in inputs.iter().enumerate() {
        for j in 0..values.len() {
            let fd = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
            let a = analytic[i][j];
            let denom = a.abs().max(fd.abs()).max(rel_floor);
            max_rel_err = max_rel_err.max((a - fd).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}

/// Absolute-tolerance comparison with a readable failure message.
pub fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tolerance {tol})"
    );
}
