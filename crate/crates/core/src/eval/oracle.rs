//! Brute-force ground truth for small search spaces: every architecture
//! trained alone under the same seed and budget.

use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::neck::{NeckConfig, NeckVariant};
use crate::nn::{ParamBuilder, ParamStore};
use crate::space::{Backbone, BlockConfig, BranchSpec, CandidateSpec};
use crate::train::{train, TrainConfig};

use super::metrics::{evaluate_retrieval, RetrievalIndex};
use super::synthetic::Dataset;

pub const ORACLE_LIMIT: usize = 16;

/// The smallest combined block, identity and zero: three operations of
/// clearly different capacity. Zero comes last so that an all-zero α
/// selects the two trainable operations first.
pub fn micro_candidates() -> Vec<BranchSpec> {
    vec![
        BranchSpec::Candidate(CandidateSpec { k1: 3, k2: 5, r: 1 }),
        BranchSpec::Identity,
        BranchSpec::Zero,
    ]
}

/// Stem plus one stage of MBlocks at `width`, under the global head.
pub fn micro_model(
    store: &mut ParamStore<f64>,
    seed: u64,
    positions: &[Vec<BranchSpec>],
    width: usize,
    classes: usize,
) -> Result<Model> {
    let mut b = ParamBuilder::new(store, seed);
    let backbone = Backbone::shallow(&mut b, 3, width, positions, &BlockConfig::default())?;
    Model::new(&mut b, backbone, NeckConfig::new(width, classes, NeckVariant::Bl))
}

/// Every choice of one branch per position, in lexicographic order.
pub fn enumerate_choices(counts: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &n in counts {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |j| {
                    let mut c = prefix.clone();
                    c.push(j);
                    c
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    /// Branch index per position.
    pub choice: Vec<usize>,
    /// Validation mAP after standalone training.
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub rows: Vec<OracleRow>,
    /// False when the time budget ran out before every architecture finished.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub width: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub budget: Option<Duration>,
    pub threads: usize,
}

fn evaluate_choice(
    space: &[Vec<BranchSpec>],
    choice: &[usize],
    train_set: &Dataset<f64>,
    val_set: &Dataset<f64>,
    cfg: &OracleConfig,
) -> Result<OracleRow> {
    let positions: Vec<Vec<BranchSpec>> = space.iter().zip(choice).map(|(p, &j)| vec![p[j]]).collect();
    let mut store = ParamStore::new();
    let model = micro_model(&mut store, cfg.seed, &positions, cfg.width, train_set.classes())?;
    train(&model, &mut store, train_set, &cfg.train, |_| {})?;
    let emb = model.embed(&store, &val_set.images, 64)?;
    let m = evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, val_set.labels.clone())?)?;
    Ok(OracleRow {
        choice: choice.to_vec(),
        map: m.map,
        rank1: m.rank1,
    })
}

/// Trains every architecture of `space` standalone and reports its
/// validation retrieval quality. Architectures are farmed out over
/// `cfg.threads` workers; each result depends only on its own choice.
pub fn exhaustive_space_oracle(
    space: &[Vec<BranchSpec>],
    train_set: &Dataset<f64>,
    val_set: &Dataset<f64>,
    cfg: &OracleConfig,
) -> Result<OracleTable> {
    let counts: Vec<usize> = space.iter().map(Vec::len).collect();
    let choices = enumerate_choices(&counts);
    if choices.len() > ORACLE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "{} architectures exceed the oracle limit of {ORACLE_LIMIT}",
            choices.len()
        )));
    }
    let start = Instant::now();
    let threads = cfg.threads.clamp(1, choices.len());
    let results: Vec<Option<Result<OracleRow>>> = thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|w| {
                let choices = &choices;
                s.spawn(move || {
                    choices
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % threads == w)
                        .map(|(i, c)| {
                            let expired = cfg.budget.is_some_and(|b| start.elapsed() > b);
                            (i, (!expired).then(|| evaluate_choice(space, c, train_set, val_set, cfg)))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut slots: Vec<Option<Result<OracleRow>>> = (0..choices.len()).map(|_| None).collect();
        for w in workers {
            for (i, r) in w.join().expect("oracle worker panicked") {
                slots[i] = r;
            }
        }
        slots
    });
    let mut rows = Vec::new();
    let mut complete = true;
    for r in results {
        match r {
            Some(row) => rows.push(row?),
            None => complete = false,
        }
    }
    Ok(OracleTable { rows, complete })
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of the average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
