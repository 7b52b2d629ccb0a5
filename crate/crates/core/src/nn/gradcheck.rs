use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::GradCheckReport;
use crate::autodiff::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

use super::context::{Ctx, Mode};
use super::params::{ParamKind, ParamStore};

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn pick(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Central-difference check of a train-mode forward through `store`.
///
/// Gradients are compared for every input and every trainable tensor that
/// receives one; at most `limit` entries per tensor are probed, chosen with
/// `seed`. Reports input errors first, then parameters in store order.
pub fn check_model_gradients<T, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    step: f64,
    limit: usize,
    seed: u64,
    fault: Option<OpKind>,
    f: F,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Ctx<T>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>, values: &[Tensor<T>]| -> Result<f64> {
        let mut ctx = Ctx::new(store, Mode::Train, false);
        let vars: Vec<Var> = values.iter().map(|t| ctx.tape.constant(t.clone())).collect();
        let loss = f(&mut ctx, &vars)?;
        Ok(ctx.tape.value(loss).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut ctx = Ctx::new(store, Mode::Train, true);
    if let Some(kind) = fault {
        ctx.tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.param(t.clone())).collect();
    let loss = f(&mut ctx, &vars)?;
    if ctx.tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(ctx.tape.shape(loss).to_vec()));
    }
    let grads = ctx.tape.backward(loss)?;
    let param_grads = ctx.param_grads(&grads);
    drop(ctx);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_f64 = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect() };
    let mut relative_errors = Vec::new();

    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = to_f64(&grads.wrt(v));
        let idx = pick(values[i].len(), limit, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + lit::<T>(step);
            let plus = eval(store, &values)?;
            values[i].data_mut()[j] = orig - lit::<T>(step);
            let minus = eval(store, &values)?;
            values[i].data_mut()[j] = orig;
            a.push(analytic[j]);
            numeric.push((plus - minus) / (2.0 * step));
        }
        relative_errors.push(relative_error(&a, &numeric));
    }

    let mut probe = store.clone();
    for (id, g) in param_grads {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let analytic = to_f64(&g);
        let idx = pick(g.len(), limit, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = probe.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + lit::<T>(step);
            let plus = eval(&probe, inputs)?;
            probe.value_mut(id).data_mut()[j] = orig - lit::<T>(step);
            let minus = eval(&probe, inputs)?;
            probe.value_mut(id).data_mut()[j] = orig;
            a.push(analytic[j]);
            numeric.push((plus - minus) / (2.0 * step));
        }
        relative_errors.push(relative_error(&a, &numeric));
    }
    Ok(GradCheckReport { relative_errors })
}
