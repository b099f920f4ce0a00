use super::{backward, ParamId, ParamSet, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(floor, |analytic| + |numeric|)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat entry index where the maximum was attained.
    pub worst: Option<(ParamId, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub entries: usize,
}

/// Compares tape gradients against central differences for every scalar of
/// every parameter. `loss` receives the parameters registered in id order and
/// must return a scalar node.
pub fn grad_check<F>(params: &ParamSet, step: f64, loss: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_on(params, step, DEFAULT_FLOOR, Tape::new(), loss)
}

/// As [`grad_check`], with an explicit floor on the relative-error
/// denominator. Derivatives far below the finite-difference roundoff
/// (about `eps * |loss| / step`) are then compared on absolute error.
pub fn grad_check_with_floor<F>(
    params: &ParamSet,
    step: f64,
    floor: f64,
    loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_on(params, step, floor, Tape::new(), loss)
}

const DEFAULT_FLOOR: f64 = 1e-8;

pub(crate) fn grad_check_on<F>(
    params: &ParamSet,
    step: f64,
    floor: f64,
    mut analytic_tape: Tape,
    mut loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let vars = params.register(&mut analytic_tape);
    let out = loss(&mut analytic_tape, &vars)?;
    let grads = backward(&analytic_tape, out)?;

    let mut eval = |p: &ParamSet| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        worst_values: None,
        entries: 0,
    };
    for id in params.ids() {
        let analytic = grads.get(id).map(|g| g.data().to_vec());
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&probe).map_err(|_| TensorError::NonFiniteProbe { param: id.0, entry: j })?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&probe).map_err(|_| TensorError::NonFiniteProbe { param: id.0, entry: j })?;
            probe.get_mut(id).data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFiniteProbe { param: id.0, entry: j });
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((id, j));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
