//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Gradient magnitude, relative to `max(1, |f|)`, below which errors are
    /// measured absolutely: `rel = |a - n| / max(|a|, |n|, floor·max(1, |f|))`.
    /// Central-difference roundoff grows like `eps·|f|/h`, so tiny gradients of
    /// a large objective cannot be resolved relatively.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-6, tol: 1e-5, floor: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every entry of every parameter in `params`.
///
/// `f` records its computation on the tape it is given, reading parameters
/// through the [`Bound`] handles, and returns the scalar output.
pub fn grad_check<F, E>(
    params: &ParamStore<f64>,
    mut f: F,
    config: GradCheckConfig,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut(&Tape<f64>, &Bound) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let (analytic, f0) = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = f(&tape, &bound)?;
        let f0 = scalar_of(&tape, out)?;
        let grads = tape.backward(out)?;
        let grads = bound
            .vars()
            .iter()
            .zip(params.iter())
            .map(|(&v, (_, t))| grads.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect::<Vec<_>>();
        (grads, f0)
    };
    let floor = config.floor * f0.abs().max(1.0);

    let mut work = params.clone();
    let mut eval = |store: &ParamStore<f64>| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = f(&tape, &bound)?;
        Ok(scalar_of(&tape, out)?)
    };

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        entries_checked: 0,
        tol: config.tol,
    };
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + config.h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - config.h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * config.h);
            let err = relative_error(a, numeric, floor);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            report.entries_checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let shape = tape.shape(v);
    if shape.iter().product::<usize>() != 1 {
        return Err(TensorError::Usage(format!(
            "gradient check needs a scalar function, got shape {shape:?}"
        )));
    }
    tape.item(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let report = grad_check(
            &p,
            |tape, b| {
                let x = b.vars()[0];
                let sq = tape.mul(x, x)?;
                Ok::<_, TensorError>(tape.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new([2], vec![0.3, -0.4]).unwrap()).unwrap();
        let report = grad_check(
            &p,
            |tape, _| Ok::<_, TensorError>(tape.constant(Tensor::scalar(5.0))),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new([2], vec![0.3, -0.4]).unwrap()).unwrap();
        let err = grad_check(&p, |_, b| Ok::<_, TensorError>(b.vars()[0]), GradCheckConfig::default());
        assert!(matches!(err, Err(TensorError::Usage(_))));
    }
}
