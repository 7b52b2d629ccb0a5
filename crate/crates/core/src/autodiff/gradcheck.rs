//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

use super::{OpKind, Tape, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
    /// for each input.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights, so
/// every output element contributes a distinct sensitivity.
pub fn project<T: Element>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(shape, |_| lit::<T>(rng.gen_range(-1.0..1.0)));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences with the given `step`. `f` must return a scalar variable
/// and must be deterministic. `fault` optionally corrupts one op family.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    step: f64,
    fault: Option<OpKind>,
    f: F,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    let grads = tape.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(v)
            .data()
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + lit::<T>(step);
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - lit::<T>(step);
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport { relative_errors })
}
