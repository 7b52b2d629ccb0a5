//! A search task whose best branch is known by construction.
//!
//! Samples are `(dim, 1, 1)` maps of linearly separable class clusters whose
//! scale keeps the triplet margin active. One branch per MBlock passes its
//! input through; the rest output zeros and destroy all class information.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::Model;
use crate::neck::{LossMode, NeckConfig, NeckVariant};
use crate::nn::{ParamBuilder, ParamStore};
use crate::space::{Backbone, BlockConfig, BranchSpec};
use crate::tensor::{lit, Element, Tensor};
use crate::train::{batch_loss, train, TrainConfig};

use super::erasing::ErasingConfig;
use super::synthetic::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the class centres.
    pub spread: f64,
    /// Standard deviation of samples around their centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 12,
            dim: 8,
            spread: 0.05,
            noise: 0.005,
            seed: 0,
        }
    }
}

/// Class-major samples of shape `(N, dim, 1, 1)`.
pub fn planted_features<T: Element>(spec: &PlantedSpec) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centre = Normal::new(0.0, spec.spread).expect("valid spread");
    let jitter = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| centre.sample(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::new();
    for (c, mu) in centres.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(mu.iter().map(|&m| lit::<T>(m + jitter.sample(&mut rng))));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, spec.dim, 1, 1], data)?, labels)
}

/// `branches` per position, the identity at `planted` and zeros elsewhere.
pub fn planted_positions(positions: usize, branches: usize, planted: usize) -> Vec<Vec<BranchSpec>> {
    let row: Vec<BranchSpec> = (0..branches)
        .map(|j| if j == planted { BranchSpec::Identity } else { BranchSpec::Zero })
        .collect();
    vec![row; positions]
}

/// MBlocks applied directly to the features, under the global head.
pub fn planted_model<T: Element>(
    store: &mut ParamStore<T>,
    seed: u64,
    positions: &[Vec<BranchSpec>],
    dim: usize,
    classes: usize,
) -> Result<Model> {
    let mut b = ParamBuilder::new(store, seed);
    let backbone = Backbone::plain(&mut b, dim, positions, &BlockConfig::default())?;
    Model::new(&mut b, backbone, NeckConfig::new(dim, classes, NeckVariant::Bl))
}

/// Training settings for the standalone per-branch runs.
pub fn planted_train_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        erasing: ErasingConfig {
            probability: 0.0,
            ..ErasingConfig::default()
        },
        seed,
        epochs: usize::MAX,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

/// Validation loss of each branch of a one-MBlock space trained alone, under
/// identical seeds and budget. The loss uses batch statistics over the whole
/// validation set.
pub fn standalone_branch_losses(
    branches: &[BranchSpec],
    train_set: &Dataset<f64>,
    val_set: &Dataset<f64>,
    seed: u64,
    steps: usize,
) -> Result<Vec<f64>> {
    let dim = train_set.image_shape()[0];
    let classes = train_set.classes();
    let cfg = planted_train_config(seed, steps);
    branches
        .iter()
        .map(|&spec| {
            let mut store = ParamStore::new();
            let model = planted_model(&mut store, seed, &[vec![spec]], dim, classes)?;
            train(&model, &mut store, train_set, &cfg, |_| {})?;
            let r = batch_loss(&model, &store, &val_set.images, &val_set.labels, LossMode::Search, cfg.margin)?;
            Ok(r.total)
        })
        .collect()
}
