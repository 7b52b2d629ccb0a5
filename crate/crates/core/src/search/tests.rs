use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::error::Error;
use crate::eval::{planted_features, planted_model, planted_positions, standalone_branch_losses, Dataset, PlantedSpec};
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamStore, Schedule};
use crate::space::{fixtures, scale_descriptor, BranchSpec, Gating, SpaceKind};
use crate::tensor::Tensor;

fn random_alpha(counts: &[usize], seed: u64) -> AlphaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    AlphaParams::new(counts.iter().map(|&c| (0..c).map(|_| n.sample(&mut rng)).collect()).collect()).unwrap()
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 3, h, w], |_| rng.gen_range(-1.0..1.0))
}

fn gated_output(model: &Model, store: &ParamStore<f64>, alpha: &AlphaParams, k: usize, mode: GateMode, x: &Tensor<f64>) -> (Tensor<f64>, Vec<usize>) {
    let mut ctx = Ctx::new(store, Mode::Train, false);
    let mut gates = Vec::new();
    for l in alpha.layers() {
        let a = ctx.tape.constant(Tensor::new(vec![l.len()], l.clone()).unwrap());
        gates.push(gate_on_tape(&mut ctx.tape, a, k, mode).unwrap().0);
    }
    let input = ctx.input(x.clone());
    let out = model.backbone.forward(&mut ctx, input, Gating::Weighted(&gates)).unwrap();
    (ctx.tape.value(out.fmap3).clone(), ctx.branch_evals().to_vec())
}

#[test]
fn sparse_gating_equals_masked_oracle_and_counts_k() {
    let template = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).unwrap();
    let mut store = ParamStore::<f64>::new();
    let model = Model::supernet(&mut store, 3, SpaceKind::Cds, &template, 4).unwrap();
    let x = images(2, 64, 32, 1);
    for k in 1..=4 {
        let alpha = random_alpha(&[12; 6], k as u64);
        let (sparse, evals) = gated_output(&model, &store, &alpha, k, GateMode::Sparse, &x);
        let (masked, all) = gated_output(&model, &store, &alpha, k, GateMode::Masked, &x);
        assert_eq!(sparse, masked, "k = {k}");
        assert_eq!(evals, vec![k; 6]);
        assert_eq!(all, vec![12; 6]);
    }
}

#[test]
fn top1_gating_equals_derived_single_path() {
    let template = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).unwrap();
    let mut store = ParamStore::<f64>::new();
    let model = Model::supernet(&mut store, 5, SpaceKind::Cds, &template, 4).unwrap();
    let alpha = random_alpha(&[12; 6], 9);
    let x = images(2, 64, 32, 2);
    let (gated, _) = gated_output(&model, &store, &alpha, 1, GateMode::Sparse, &x);
    let d = derive(&alpha, SpaceKind::Cds, 0.25, 0.25).unwrap();
    let mut single = ParamStore::<f64>::new();
    let net = Model::from_descriptor(&mut single, 77, &d, 4, crate::neck::NeckVariant::Bl, 0).unwrap();
    assert!(single.copy_matching(&store) > 0);
    let mut ctx = Ctx::new(&single, Mode::Train, false);
    let input = ctx.input(x);
    let out = net.backbone.forward(&mut ctx, input, Gating::Single).unwrap();
    assert_eq!(ctx.tape.value(out.fmap3), &gated);
}

#[test]
fn alpha_gradient_matches_frozen_gate_differences() {
    let template = scale_descriptor(&fixtures::cnet(), 0.125, 0.25).unwrap();
    let mut store = ParamStore::<f64>::new();
    let model = Model::supernet(&mut store, 11, SpaceKind::Cs, &template, 4).unwrap();
    let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
    let x = images(8, 64, 32, 4);
    let mut checked = 0;
    for seed in 0..3 {
        let cfg = SearchConfig { k: 2, ..SearchConfig::default() };
        let searcher = Searcher::new(&model, store.clone(), random_alpha(&[6; 6], seed), cfg).unwrap();
        let r = check_alpha_gradient(&searcher, &x, &labels).unwrap();
        assert!(r.max_error() < 1e-6, "seed {seed}: {:?}", r.relative_errors);
        checked += r.relative_errors.len();
    }
    assert!(checked >= 12);
}

struct Planted {
    train: Dataset<f64>,
    val: Dataset<f64>,
}

fn planted(seed: u64) -> Planted {
    let d = planted_features::<f64>(&PlantedSpec { seed, ..PlantedSpec::default() }).unwrap();
    let (tr, va) = split_train_val(&d.labels, 4, seed).unwrap();
    Planted {
        train: d.subset(&tr).unwrap(),
        val: d.subset(&va).unwrap(),
    }
}

fn planted_cfg(seed: u64, k: usize, steps: usize) -> SearchConfig {
    SearchConfig {
        k,
        epochs: steps,
        seed,
        max_steps: Some(steps),
        ..SearchConfig::default()
    }
}

fn run_planted(seed: u64, cfg: &SearchConfig, branches: usize) -> (SearchOutcome<f64>, Vec<StepRecord>) {
    let task = planted(seed);
    let positions = planted_positions(1, branches, 1);
    let mut store = ParamStore::<f64>::new();
    let model = planted_model(&mut store, seed, &positions, 8, task.train.classes()).unwrap();
    let mut log = Vec::new();
    let out = search(&model, store, AlphaParams::zeros(&[branches]).unwrap(), cfg, &task.train, &task.val, |r| {
        log.push(r.clone())
    })
    .unwrap();
    (out, log)
}

#[test]
fn planted_branch_wins_and_matches_standalone_oracle() {
    let specs = [BranchSpec::Zero, BranchSpec::Identity, BranchSpec::Zero];
    for seed in 0..5 {
        let (out, log) = run_planted(seed, &planted_cfg(seed, 2, 500), 3);
        assert_eq!(out.alpha.argmax(), vec![1], "seed {seed}: {:?}", out.alpha);
        assert!(log.len() <= 500);
        let task = planted(seed);
        let losses = standalone_branch_losses(&specs, &task.train, &task.val, seed, 100).unwrap();
        let best = (0..3).fold(0, |b, j| if losses[j] < losses[b] { j } else { b });
        assert_eq!(best, 1, "{losses:?}");
    }
}

#[test]
fn unselected_branch_receives_gradient_early() {
    let task = planted(0);
    let positions = planted_positions(1, 3, 1);
    let mut store = ParamStore::<f64>::new();
    let model = planted_model(&mut store, 0, &positions, 8, task.train.classes()).unwrap();
    let mut s = Searcher::new(&model, store, AlphaParams::zeros(&[3]).unwrap(), planted_cfg(0, 2, 10)).unwrap();
    let mut seen = false;
    for step in 0..10 {
        let start = (step % 2) * 16;
        let idx: Vec<usize> = (start..start + 16).collect();
        let (x, y) = task.val.batch(&idx).unwrap();
        let pass = s.alpha_step(&x, &y, 3e-4).unwrap();
        let unselected: Vec<usize> = (0..3).filter(|j| !pass.gates[0].selected().contains(j)).collect();
        if unselected.iter().any(|&j| pass.grads[0][j] != 0.0) {
            seen = true;
        }
    }
    assert!(seen);
}

#[test]
fn zero_alpha_rate_freezes_alpha() {
    let cfg = SearchConfig {
        alpha_lr: Schedule::Constant(0.0),
        ..planted_cfg(2, 2, 30)
    };
    let (out, _) = run_planted(2, &cfg, 3);
    assert_eq!(out.alpha, AlphaParams::zeros(&[3]).unwrap());
}

#[test]
fn full_k_matches_masked_run_and_is_deterministic() {
    let sparse = planted_cfg(1, 3, 40);
    let masked = SearchConfig {
        gate_mode: GateMode::Masked,
        ..sparse.clone()
    };
    let (a, la) = run_planted(1, &sparse, 3);
    let (b, lb) = run_planted(1, &masked, 3);
    let (c, lc) = run_planted(1, &sparse, 3);
    assert_eq!(la, lb);
    assert_eq!(la, lc);
    assert_eq!(a.alpha, b.alpha);
    assert_eq!(a.alpha, c.alpha);
    assert_eq!(a.snapshots.last(), Some(&a.alpha));
}

#[test]
fn divergence_names_the_step() {
    let cfg = SearchConfig {
        w_lr: Schedule::Constant(1e200),
        ..planted_cfg(0, 2, 20)
    };
    let task = planted(0);
    let positions = planted_positions(1, 3, 1);
    let mut store = ParamStore::<f64>::new();
    let model = planted_model(&mut store, 0, &positions, 8, task.train.classes()).unwrap();
    let r = search(&model, store, AlphaParams::zeros(&[3]).unwrap(), &cfg, &task.train, &task.val, |_| {});
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

#[test]
fn invalid_k_rejected() {
    let positions = planted_positions(1, 3, 1);
    let mut store = ParamStore::<f64>::new();
    let model = planted_model(&mut store, 0, &positions, 8, 4).unwrap();
    for k in [0, 4] {
        let cfg = SearchConfig { k, ..SearchConfig::default() };
        assert!(Searcher::new(&model, store.clone(), AlphaParams::zeros(&[3]).unwrap(), cfg).is_err());
    }
}
