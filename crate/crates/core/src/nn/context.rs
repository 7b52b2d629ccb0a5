use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::{lit, Element, Tensor};

use super::params::{BnParams, LinearParams, ParamId, ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running stats are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// One forward pass: a tape plus lazily materialised parameter leaves.
///
/// Parameters enter the tape on first use, so subnetworks that are never
/// evaluated contribute neither nodes nor gradients.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    leaves: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    bn_outputs: Vec<(BnParams, Var)>,
    branch_evals: Vec<usize>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// `track_params` decides whether trainable parameters require gradients.
    pub fn new(params: &'a ParamStore<T>, mode: Mode, track_params: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            leaves: vec![None; params.len()],
            mode,
            track_params,
            bn_outputs: Vec::new(),
            branch_evals: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        let grad = self.track_params && entry.kind == ParamKind::Trainable;
        let v = self.tape.leaf(entry.value.clone(), grad);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn batch_norm(&mut self, bn: &BnParams, x: Var) -> Result<Var> {
        let (g, b) = (self.p(bn.gamma), self.p(bn.beta));
        match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
                self.bn_outputs.push((*bn, y));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.value(bn.running_mean).data();
                let rv = self.params.value(bn.running_var).data();
                self.tape.batch_norm_eval(x, g, b, rm, rv, BN_EPS)
            }
        }
    }

    pub fn linear(&mut self, lin: &LinearParams, x: Var) -> Result<Var> {
        let w = self.p(lin.weight);
        let b = lin.bias.map(|b| self.p(b));
        self.tape.linear(x, w, b)
    }

    /// Records that one branch subnetwork of MBlock `block` was evaluated.
    pub fn count_branch(&mut self, block: usize) {
        if self.branch_evals.len() <= block {
            self.branch_evals.resize(block + 1, 0);
        }
        self.branch_evals[block] += 1;
    }

    /// Branch evaluations per MBlock during this pass.
    pub fn branch_evals(&self) -> &[usize] {
        &self.branch_evals
    }

    /// Gradients of materialised trainable parameters that lie on a path to
    /// the loss. Parameters without such a path are omitted.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.requires_grad(v).then_some(())?;
                grads.get(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    /// Running-statistic updates implied by this pass's train-mode
    /// normalizations, in evaluation order.
    pub fn running_stat_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        let m = lit::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        let mut out = Vec::new();
        for (bn, y) in &self.bn_outputs {
            let stats = self.tape.batch_stats(*y).expect("train-mode batch norm");
            let blend = |id: ParamId, batch: &[T]| {
                let cur = self.params.value(id);
                let data = cur.data().iter().zip(batch).map(|(&r, &b)| keep * r + m * b).collect();
                (id, Tensor::new(cur.shape().to_vec(), data).expect("same shape"))
            };
            out.push(blend(bn.running_mean, &stats.mean));
            out.push(blend(bn.running_var, &stats.var));
        }
        out
    }
}

/// Applies running-statistic updates produced by [`Ctx::running_stat_updates`].
pub fn apply_updates<T: Element>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, value) in updates {
        *store.value_mut(id) = value;
    }
}
