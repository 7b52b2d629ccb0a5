//! Desk-scale end-to-end runs: the planted search task, search quality on
//! a micro space and the neck ablation.

use crate::error::Result;
use crate::eval::{
    evaluate_retrieval, exhaustive_space_oracle, generate_synthetic, micro_candidates, micro_model, planted_features,
    planted_model, planted_positions, spearman, split_train_val, standalone_branch_losses, Dataset, OracleConfig,
    OracleTable, PlantedSpec, RetrievalIndex, RetrievalMetrics, SyntheticSpec,
};
use crate::model::Model;
use crate::neck::NeckVariant;
use crate::nn::{ParamStore, Schedule};
use crate::search::{search, AlphaParams, SearchConfig};
use crate::space::{fixtures, scale_descriptor, ArchitectureDescriptor, BranchSpec};
use crate::tensor::Element;
use crate::train::{train, TrainConfig};

/// Held-out identities for retrieval evaluation come from a different seed
/// stream than the training identities.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Train and validation splits of one synthetic dataset.
pub fn search_splits<T: Element>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = generate_synthetic::<T>(spec)?;
    let (tr, va) = split_train_val(&d.labels, 4, spec.seed)?;
    Ok((d.subset(&tr)?, d.subset(&va)?))
}

/// Branch that carries the signal in the planted task.
pub const PLANTED_BRANCH: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTrial {
    /// Argmax of the learned α.
    pub selected: usize,
    pub steps: usize,
    /// Branch with the lowest standalone validation loss.
    pub oracle_best: usize,
    pub oracle_losses: Vec<f64>,
}

/// Top-`k` search over one MBlock of three branches, of which only the
/// planted one passes the features through, checked against standalone
/// training of each branch.
pub fn planted_trial(seed: u64, k: usize, steps: usize) -> Result<PlantedTrial> {
    let d = planted_features::<f64>(&PlantedSpec {
        seed,
        ..PlantedSpec::default()
    })?;
    let (tr, va) = split_train_val(&d.labels, 4, seed)?;
    let (train_set, val_set) = (d.subset(&tr)?, d.subset(&va)?);
    let positions = planted_positions(1, 3, PLANTED_BRANCH);
    let mut store = ParamStore::new();
    let model = planted_model(&mut store, seed, &positions, train_set.image_shape()[0], train_set.classes())?;
    let cfg = SearchConfig {
        k,
        epochs: steps,
        seed,
        max_steps: Some(steps),
        ..SearchConfig::default()
    };
    let out = search(&model, store, AlphaParams::zeros(&[3])?, &cfg, &train_set, &val_set, |_| {})?;
    let specs: Vec<BranchSpec> = positions[0].clone();
    let losses = standalone_branch_losses(&specs, &train_set, &val_set, seed, 100)?;
    let oracle_best = (0..losses.len()).fold(0, |b, j| if losses[j] < losses[b] { j } else { b });
    Ok(PlantedTrial {
        selected: out.alpha.argmax()[0],
        steps: out.steps,
        oracle_best,
        oracle_losses: losses,
    })
}

#[derive(Clone, Debug)]
pub struct MicroSearchSettings {
    pub data: SyntheticSpec,
    pub width: usize,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub threads: usize,
}

impl MicroSearchSettings {
    pub fn desk(seed: u64) -> Self {
        let epochs = 40;
        Self {
            data: SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
            width: 16,
            search: SearchConfig {
                epochs,
                seed,
                ..SearchConfig::default()
            },
            train: TrainConfig {
                epochs,
                lr: Schedule::Cosine {
                    initial: 0.05,
                    min: 0.0005,
                    epochs,
                },
                seed,
                ..TrainConfig::default()
            },
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MicroSearchResult {
    pub alpha: AlphaParams,
    pub table: OracleTable,
    /// `alpha[0][a] + alpha[1][b]` for every row of the table.
    pub scores: Vec<f64>,
    pub correlation: f64,
}

/// Standalone validation quality of all nine micro architectures.
pub fn micro_oracle(s: &MicroSearchSettings) -> Result<OracleTable> {
    let (train_set, val_set) = search_splits::<f64>(&s.data)?;
    let oracle = OracleConfig {
        width: s.width,
        train: s.train.clone(),
        seed: s.data.seed,
        budget: None,
        threads: s.threads,
    };
    exhaustive_space_oracle(&vec![micro_candidates(); 2], &train_set, &val_set, &oracle)
}

/// Architecture weights learned by searching the micro supernet.
pub fn micro_search(s: &MicroSearchSettings) -> Result<AlphaParams> {
    let (train_set, val_set) = search_splits::<f64>(&s.data)?;
    let space = vec![micro_candidates(); 2];
    let mut store = ParamStore::new();
    let supernet = micro_model(&mut store, s.data.seed, &space, s.width, train_set.classes())?;
    let alpha = AlphaParams::zeros(&[3, 3])?;
    Ok(search(&supernet, store, alpha, &s.search, &train_set, &val_set, |_| {})?.alpha)
}

/// Correlates `alpha[0][a] + alpha[1][b]` with the oracle mAP of `(a, b)`.
pub fn rank_correlation(alpha: AlphaParams, table: OracleTable) -> MicroSearchResult {
    let scores: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.choice.iter().enumerate().map(|(i, &j)| alpha.layer(i)[j]).sum())
        .collect();
    let maps: Vec<f64> = table.rows.iter().map(|r| r.map).collect();
    MicroSearchResult {
        correlation: spearman(&scores, &maps),
        alpha,
        table,
        scores,
    }
}

/// Searches a two-position space of three operations and correlates the
/// learned architecture scores with standalone validation mAP.
pub fn micro_rank_correlation(s: &MicroSearchSettings) -> Result<MicroSearchResult> {
    Ok(rank_correlation(micro_search(s)?, micro_oracle(s)?))
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub data: SyntheticSpec,
    pub descriptor: ArchitectureDescriptor,
    pub partitions: usize,
    pub train: TrainConfig,
}

impl AblationSettings {
    pub fn desk(seed: u64) -> Self {
        Self {
            data: SyntheticSpec {
                identities: 24,
                seed,
                ..SyntheticSpec::default()
            },
            descriptor: scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).expect("valid scale"),
            partitions: 2,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        }
    }
}

/// Trains the descriptor's network with `variant` on one set of identities
/// and evaluates retrieval on unseen identities.
pub fn train_and_evaluate<T: Element>(s: &AblationSettings, variant: NeckVariant) -> Result<RetrievalMetrics> {
    let train_set = generate_synthetic::<T>(&s.data)?;
    let test_set = generate_synthetic::<T>(&SyntheticSpec {
        seed: s.data.seed.wrapping_add(TEST_SEED_OFFSET),
        ..s.data
    })?;
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, s.data.seed, &s.descriptor, train_set.classes(), variant, s.partitions)?;
    train(&model, &mut store, &train_set, &s.train, |_| {})?;
    let emb = model.embed(&store, &test_set.images, 64)?;
    evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, test_set.labels.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_trial_finds_the_planted_branch() {
        let t = planted_trial(3, 2, 200).unwrap();
        assert_eq!(t.selected, PLANTED_BRANCH);
        assert_eq!(t.oracle_best, PLANTED_BRANCH);
        assert!(t.steps <= 200);
    }

    #[test]
    fn rank_correlation_scores_sum_alpha() {
        let mut alpha = AlphaParams::zeros(&[3, 3]).unwrap();
        alpha.layer_mut(0).copy_from_slice(&[0.2, 0.1, -0.3]);
        alpha.layer_mut(1).copy_from_slice(&[0.0, 0.7, -0.45]);
        let rows = crate::eval::enumerate_choices(&[3, 3])
            .into_iter()
            .map(|choice| {
                let map = 0.5 + 0.1 * [0.2, 0.1, -0.3][choice[0]] + 0.1 * [0.0, 0.7, -0.45][choice[1]];
                crate::eval::OracleRow { choice, map, rank1: 0.0 }
            })
            .collect();
        let r = rank_correlation(alpha, OracleTable { rows, complete: true });
        assert_eq!(r.scores[5], 0.1 - 0.45);
        assert!((r.correlation - 1.0).abs() < 1e-12);
    }
}
