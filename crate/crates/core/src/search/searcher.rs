//! Alternating first-order updates of network weights and architecture
//! vectors.

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{CyclingSampler, Dataset, PkSampler};
use crate::model::Model;
use crate::neck::{compose_loss, LossMode, TRIPLET_MARGIN};
use crate::nn::{adam_step, apply_updates, AdamConfig, AdamState, Ctx, Mode, ParamId, ParamStore, Schedule, Sgd};
use crate::space::{BranchGate, Gating};
use crate::tensor::{Element, Tensor};

use super::alpha::AlphaParams;
use super::gate::{gate_on_tape, gate_with_bridge, GateMode, GateState};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Branches evaluated per MBlock.
    pub k: usize,
    pub epochs: usize,
    /// Identities per batch.
    pub identities: usize,
    /// Instances per identity in a batch.
    pub instances: usize,
    pub w_lr: Schedule,
    pub momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: Schedule,
    pub adam: AdamConfig,
    pub margin: f64,
    pub gate_mode: GateMode,
    pub seed: u64,
    /// Stop after this many alternating steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let epochs = 40;
        Self {
            k: 2,
            epochs,
            identities: 4,
            instances: 4,
            w_lr: Schedule::Cosine {
                initial: 0.025,
                min: 0.0001,
                epochs,
            },
            momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: Schedule::Step {
                initial: 3e-4,
                milestones: vec![80, 160],
                factor: 0.1,
            },
            adam: AdamConfig::default(),
            margin: TRIPLET_MARGIN,
            gate_mode: GateMode::Sparse,
            seed: 0,
            max_steps: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, branch_counts: &[usize]) -> Result<()> {
        let n = branch_counts.iter().copied().min().unwrap_or(0);
        if self.k == 0 || self.k > n {
            return Err(Error::InvalidArgument(format!("top-k must lie in 1..={n}, got {}", self.k)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("search needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// One alternating step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_t: f64,
    pub l_v: f64,
    pub eta_w: f64,
    pub eta_alpha: f64,
    /// Architecture vectors after the step.
    pub alpha: AlphaParams,
}

impl StepRecord {
    pub fn csv_header(alpha: &AlphaParams) -> String {
        format!("epoch,step,L_T,L_V,eta_w,eta_alpha,{}", alpha.csv_header())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.l_t,
            self.l_v,
            self.eta_w,
            self.eta_alpha,
            self.alpha.csv_values()
        )
    }
}

/// Result of the α-side forward and backward pass.
#[derive(Clone, Debug)]
pub struct AlphaPass<T> {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub gates: Vec<GateState>,
    running: Vec<(ParamId, Tensor<T>)>,
}

/// Supernet weights, architecture vectors and both optimizers.
pub struct Searcher<'m, T> {
    pub model: &'m Model,
    pub store: ParamStore<T>,
    pub alpha: AlphaParams,
    pub cfg: SearchConfig,
    sgd: Sgd<T>,
    adam: Vec<AdamState<f64>>,
    branch_evals: Vec<usize>,
    fault: Option<OpKind>,
}

fn to_tensor<T: Element>(v: &[f64]) -> Tensor<T> {
    Tensor::new(vec![v.len()], v.iter().map(|&x| T::from_f64(x).expect("finite")).collect()).expect("nonempty")
}

impl<'m, T: Element> Searcher<'m, T> {
    pub fn new(model: &'m Model, store: ParamStore<T>, alpha: AlphaParams, cfg: SearchConfig) -> Result<Self> {
        let counts = model.backbone.branch_counts();
        if alpha.branch_counts() != counts {
            return Err(Error::InvalidArgument(format!(
                "architecture vectors {:?} do not match the supernet's branches {counts:?}",
                alpha.branch_counts()
            )));
        }
        cfg.validate(&counts)?;
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(cfg.momentum, cfg.w_weight_decay),
            adam: vec![AdamState::default(); alpha.positions()],
            alpha,
            cfg,
            branch_evals: Vec::new(),
            fault: None,
        })
    }

    /// Corrupts one op family in the architecture backward pass. Only meant
    /// for checking that the gradient suite catches errors.
    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    /// Branch evaluations per MBlock in the most recent step.
    pub fn branch_evals(&self) -> &[usize] {
        &self.branch_evals
    }

    fn gates(&self, tape: &mut Tape<T>, track: bool) -> Result<(Vec<BranchGate>, Vec<GateState>, Vec<Var>)> {
        let (mut gates, mut states, mut vars) = (Vec::new(), Vec::new(), Vec::new());
        for layer in self.alpha.layers() {
            let a = tape.leaf(to_tensor(layer), track);
            let (g, s) = gate_on_tape(tape, a, self.cfg.k, self.cfg.gate_mode)?;
            gates.push(g);
            states.push(s);
            vars.push(a);
        }
        Ok((gates, states, vars))
    }

    fn loss(&self, ctx: &mut Ctx<T>, gates: &[BranchGate], images: &Tensor<T>, labels: &[usize]) -> Result<(Var, f64)> {
        let x = ctx.input(images.clone());
        let bundle = self.model.forward(ctx, x, Gating::Weighted(gates), false)?;
        let (loss, report) = compose_loss(ctx, &bundle, labels, LossMode::Search, self.cfg.margin)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("search loss".into()));
        }
        Ok((loss, report.total))
    }

    /// One SGD step on the network weights; returns the training loss.
    pub fn w_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<f64> {
        let mut ctx = Ctx::new(&self.store, Mode::Train, true);
        let (gates, _, _) = self.gates(&mut ctx.tape, false)?;
        let (loss, value) = self.loss(&mut ctx, &gates, images, labels)?;
        let grads = ctx.tape.backward(loss)?;
        let grads = ctx.param_grads(&grads);
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite("weight gradient".into()));
        }
        let running = ctx.running_stat_updates();
        self.branch_evals = ctx.branch_evals().to_vec();
        drop(ctx);
        self.sgd.step(&mut self.store, &grads, lr);
        apply_updates(&mut self.store, running);
        Ok(value)
    }

    /// Validation loss and its gradient with respect to every α entry.
    pub fn alpha_pass(&self, images: &Tensor<T>, labels: &[usize]) -> Result<AlphaPass<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Train, false);
        if let Some(kind) = self.fault {
            ctx.tape.inject_fault(kind);
        }
        let (gates, states, vars) = self.gates(&mut ctx.tape, true)?;
        let (loss, value) = self.loss(&mut ctx, &gates, images, labels)?;
        let grads = ctx.tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.alpha.branch_counts())
            .map(|(&v, n)| match grads.get(v) {
                Some(g) => g.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
                None => vec![0.0; n],
            })
            .collect();
        Ok(AlphaPass {
            loss: value,
            grads,
            gates: states,
            running: ctx.running_stat_updates(),
        })
    }

    /// Validation loss at `alpha` with every gate's bridge `m` held at
    /// `bridges` and the branch sets fixed to `active`.
    pub fn frozen_gate_loss(
        &self,
        alpha: &AlphaParams,
        bridges: &[Vec<f64>],
        active: &[Vec<usize>],
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<f64> {
        let mut ctx = Ctx::new(&self.store, Mode::Train, false);
        let mut gates = Vec::new();
        for ((layer, m), act) in alpha.layers().iter().zip(bridges).zip(active) {
            let a = ctx.tape.constant(to_tensor(layer));
            let m: Vec<T> = to_tensor::<T>(m).data().to_vec();
            gates.push(gate_with_bridge(&mut ctx.tape, a, &m, act.clone())?);
        }
        Ok(self.loss(&mut ctx, &gates, images, labels)?.1)
    }

    /// One Adam step on α; returns the validation loss.
    pub fn alpha_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<AlphaPass<T>> {
        let mut pass = self.alpha_pass(images, labels)?;
        if pass.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("architecture gradient".into()));
        }
        for (i, g) in pass.grads.iter().enumerate() {
            adam_step(self.alpha.layer_mut(i), g, &mut self.adam[i], lr, &self.cfg.adam);
        }
        self.alpha.check_finite()?;
        apply_updates(&mut self.store, std::mem::take(&mut pass.running));
        Ok(pass)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<T> {
    pub alpha: AlphaParams,
    pub store: ParamStore<T>,
    /// Architecture vectors at the end of every epoch.
    pub snapshots: Vec<AlphaParams>,
    pub steps: usize,
}

/// Runs the alternating search: per training batch one weight step on the
/// training loss, then one α step on a batch drawn from the validation
/// stream. Gates are recomputed from the current α at every forward.
pub fn search<T: Element>(
    model: &Model,
    store: ParamStore<T>,
    alpha: AlphaParams,
    cfg: &SearchConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<SearchOutcome<T>> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut searcher = Searcher::new(model, store, alpha, cfg.clone())?;
    let mut train_sampler = PkSampler::new(&train.labels, cfg.identities, cfg.instances, cfg.seed)?;
    let mut val_stream = CyclingSampler::new(PkSampler::new(
        &val.labels,
        cfg.identities,
        cfg.instances,
        cfg.seed.wrapping_add(1),
    )?);
    let mut snapshots = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let (eta_w, eta_alpha) = (cfg.w_lr.at(epoch), cfg.alpha_lr.at(epoch));
        for batch in train_sampler.epoch() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                snapshots.push(searcher.alpha.clone());
                break 'epochs;
            }
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Divergence { epoch, step },
                other => other,
            };
            let (x, y) = train.batch(&batch)?;
            let l_t = searcher.w_step(&x, &y, eta_w).map_err(diverged)?;
            let (xv, yv) = val.batch(&val_stream.next_batch())?;
            let l_v = searcher.alpha_step(&xv, &yv, eta_alpha).map_err(diverged)?.loss;
            on_step(&StepRecord {
                epoch,
                step,
                l_t,
                l_v,
                eta_w,
                eta_alpha,
                alpha: searcher.alpha.clone(),
            });
            step += 1;
        }
        snapshots.push(searcher.alpha.clone());
    }
    Ok(SearchOutcome {
        alpha: searcher.alpha,
        store: searcher.store,
        snapshots,
        steps: step,
    })
}
