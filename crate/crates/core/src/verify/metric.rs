use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{evaluate_retrieval, RetrievalIndex, RetrievalMetrics};
use crate::tensor::Tensor;

use super::{CheckLine, SuiteReport};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Average precision of one query from the definition, with a brute-force
/// rank count: item `g` sits after every item strictly closer and every
/// equally close item with a smaller index. `skip` removes one gallery
/// item. Returns the AP and whether the top item is relevant, or `None`
/// when nothing is relevant.
pub fn reference_average_precision(
    query: &[f64],
    label: usize,
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    skip: Option<usize>,
) -> Option<(f64, bool)> {
    let d: Vec<f64> = gallery.iter().map(|g| sq_dist(query, g)).collect();
    let items: Vec<usize> = (0..gallery.len()).filter(|&i| Some(i) != skip).collect();
    let rank = |i: usize| items.iter().filter(|&&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count() + 1;
    let mut rel: Vec<usize> = items.iter().copied().filter(|&i| gallery_labels[i] == label).collect();
    if rel.is_empty() {
        return None;
    }
    rel.sort_by_key(|&i| rank(i));
    let mut ap = 0.0;
    for &i in &rel {
        let r = rank(i);
        let above = rel.iter().filter(|&&j| rank(j) <= r).count();
        ap += above as f64 / r as f64;
    }
    let top = items.iter().copied().find(|&i| rank(i) == 1)?;
    Some((ap / rel.len() as f64, gallery_labels[top] == label))
}

/// Mean of [`reference_average_precision`] over all queries. With
/// `exclude_self`, query `i` is gallery item `i` and is skipped.
pub fn reference_metrics(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    exclude_self: bool,
) -> Option<RetrievalMetrics> {
    let per: Vec<(f64, bool)> = queries
        .iter()
        .zip(query_labels)
        .enumerate()
        .filter_map(|(i, (q, &l))| reference_average_precision(q, l, gallery, gallery_labels, exclude_self.then_some(i)))
        .collect();
    if per.is_empty() {
        return None;
    }
    let n = per.len() as f64;
    Some(RetrievalMetrics {
        rank1: per.iter().filter(|p| p.1).count() as f64 / n,
        map: per.iter().map(|p| p.0).sum::<f64>() / n,
        evaluated: per.len(),
    })
}

fn rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize, grid: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    (0..n)
        .map(|_| {
            let v = (0..dim)
                .map(|_| if grid { rng.gen_range(0..3) as f64 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            (v, rng.gen_range(0..classes))
        })
        .unzip()
}

fn tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat())
}

/// Compares [`evaluate_retrieval`] with the brute-force definition on
/// `cases` random instances, a third of them with tied distances and a
/// third all-vs-all. Agreement must be exact.
pub fn metric_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut worst = 0.0f64;
    for c in 0..cases {
        let grid = c % 3 == 1;
        let dim = rng.gen_range(1..5);
        let classes = rng.gen_range(2..7);
        let nq = rng.gen_range(1..20);
        let (q, ql) = rows(&mut rng, nq, dim, classes, grid);
        let (got, want) = if c % 3 == 2 {
            let idx = RetrievalIndex::all_vs_all(&tensor(&q)?, ql.clone())?;
            (evaluate_retrieval(&idx).ok(), reference_metrics(&q, &ql, &q, &ql, true))
        } else {
            let ng = rng.gen_range(1..40);
            let (g, gl) = rows(&mut rng, ng, dim, classes, grid);
            let idx = RetrievalIndex::new(&tensor(&q)?, ql.clone(), &tensor(&g)?, gl.clone())?;
            (evaluate_retrieval(&idx).ok(), reference_metrics(&q, &ql, &g, &gl, false))
        };
        match (got, want) {
            (None, None) => {}
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                mismatches += 1;
                worst = worst.max((a.map - b.map).abs()).max((a.rank1 - b.rank1).abs());
            }
            _ => {
                mismatches += 1;
                worst = f64::INFINITY;
            }
        }
    }
    Ok(SuiteReport {
        suite: "metrics",
        lines: vec![CheckLine {
            name: "exact_ap_oracle".into(),
            cases,
            worst,
            passed: mismatches == 0,
        }],
    })
}
