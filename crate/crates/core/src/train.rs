//! Standalone training of a single-path network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{random_erasing, Dataset, ErasingConfig, PkSampler};
use crate::model::Model;
use crate::neck::{compose_loss, LossMode, LossReport, TRIPLET_MARGIN};
use crate::nn::{apply_updates, Ctx, Mode, ParamStore, Schedule, Sgd};
use crate::space::Gating;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub identities: usize,
    pub instances: usize,
    pub lr: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub erasing: ErasingConfig,
    pub margin: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 30;
        Self {
            epochs,
            identities: 4,
            instances: 4,
            lr: Schedule::Cosine {
                initial: 0.05,
                min: 0.0005,
                epochs,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            erasing: ErasingConfig::default(),
            margin: TRIPLET_MARGIN,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: LossReport,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,L_tri1,L_id1,L_tri2,L_id2,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.step, self.losses.csv_row())
    }
}

/// Erases one rectangle per image of a `(N, C, H, W)` batch, each with the
/// configured probability.
pub fn erase_batch<T: Element>(images: &mut Tensor<T>, cfg: &ErasingConfig, rng: &mut ChaCha8Rng) {
    if cfg.probability <= 0.0 {
        return;
    }
    let s = images.shape().to_vec();
    let plane = s[1] * s[2] * s[3];
    for img in images.data_mut().chunks_mut(plane) {
        random_erasing(img, (s[1], s[2], s[3]), cfg, rng);
    }
}

/// Loss of a single-path network on one batch, without touching the store.
pub fn batch_loss<T: Element>(
    model: &Model,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: LossMode,
    margin: f64,
) -> Result<LossReport> {
    let mut ctx = Ctx::new(store, Mode::Train, false);
    let x = ctx.input(images.clone());
    let bundle = model.forward(&mut ctx, x, Gating::Single, mode == LossMode::Train)?;
    Ok(compose_loss(&mut ctx, &bundle, labels, mode, margin)?.1)
}

/// SGD on the full training objective; returns the number of steps taken.
pub fn train<T: Element>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<usize> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("training needs at least one epoch".into()));
    }
    let mut sampler = PkSampler::new(&data.labels, cfg.identities, cfg.instances, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        for batch in sampler.epoch() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                return Ok(step);
            }
            let (mut x, y) = data.batch(&batch)?;
            erase_batch(&mut x, &cfg.erasing, &mut rng);
            let mut ctx = Ctx::new(&*store, Mode::Train, true);
            let input = ctx.input(x);
            let bundle = model.forward(&mut ctx, input, Gating::Single, true)?;
            let (loss, losses) = compose_loss(&mut ctx, &bundle, &y, LossMode::Train, cfg.margin)?;
            if !losses.total.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let grads = ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&grads);
            if grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step });
            }
            let running = ctx.running_stat_updates();
            drop(ctx);
            sgd.step(store, &grads, lr);
            apply_updates(store, running);
            on_step(&TrainRecord {
                epoch,
                step,
                lr,
                losses,
            });
            step += 1;
        }
    }
    Ok(step)
}
