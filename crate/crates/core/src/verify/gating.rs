use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::search::{gate_on_tape, GateMode, GateState};
use crate::space::{fixtures, scale_descriptor, Gating, SpaceKind};
use crate::tensor::Tensor;

use super::{CheckLine, SuiteReport};

/// Backbone output under top-k gates at `alpha`, and the branch
/// evaluations counted per MBlock.
fn gated(
    model: &Model,
    store: &ParamStore<f64>,
    alpha: &[Vec<f64>],
    k: usize,
    mode: GateMode,
    x: &Tensor<f64>,
) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut ctx = Ctx::new(store, Mode::Train, false);
    let mut gates = Vec::new();
    for l in alpha {
        let a = ctx.tape.constant(Tensor::new(vec![l.len()], l.clone())?);
        gates.push(gate_on_tape(&mut ctx.tape, a, k, mode)?.0);
    }
    let input = ctx.input(x.clone());
    let out = model.backbone.forward(&mut ctx, input, Gating::Weighted(&gates))?;
    Ok((ctx.tape.value(out.fmap3).clone(), ctx.branch_evals().to_vec()))
}

/// Draws random `(alpha, k)` pairs and counts those whose straight-through
/// gate differs from the hard mask in any entry.
pub fn straight_through_draws(draws: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..draws {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=n);
        let scale = [1e-3, 1.0, 30.0][rng.gen_range(0..3)];
        let alpha: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let g = GateState::new(&alpha, k)?;
        if g.hhat != g.h {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Sparse top-k gating against the compute-all-then-mask oracle on a
/// desk-scale CDS supernet, for k = 1..=4.
pub fn gating_suite(seed: u64) -> Result<SuiteReport> {
    let template = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25)?;
    let mut store = ParamStore::<f64>::new();
    let model = Model::supernet(&mut store, seed, SpaceKind::Cds, &template, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(vec![2, 3, 64, 32], |_| rng.gen_range(-1.0..1.0));
    let mut lines = Vec::new();
    for k in 1..=4 {
        let alpha: Vec<Vec<f64>> = (0..6).map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (sparse, evals) = gated(&model, &store, &alpha, k, GateMode::Sparse, &x)?;
        let (masked, all) = gated(&model, &store, &alpha, k, GateMode::Masked, &x)?;
        let diff = sparse
            .data()
            .iter()
            .zip(masked.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        lines.push(CheckLine {
            name: format!("top{k}_equals_masked"),
            cases: 1,
            worst: diff,
            passed: sparse == masked && all == vec![12; 6],
        });
        lines.push(CheckLine {
            name: format!("top{k}_branch_count"),
            cases: evals.len(),
            worst: evals.iter().map(|&e| e.abs_diff(k) as f64).fold(0.0, f64::max),
            passed: evals == vec![k; 6],
        });
    }
    let draws = 1000;
    let bad = straight_through_draws(draws, seed)?;
    lines.push(CheckLine {
        name: "straight_through_identity".into(),
        cases: draws,
        worst: bad as f64,
        passed: bad == 0,
    });
    Ok(SuiteReport { suite: "gating", lines })
}
