use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Query and gallery embeddings `(N, D)` with their labels.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    query: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    gallery: Vec<Vec<f64>>,
    gallery_labels: Vec<usize>,
    /// Query `i` and gallery item `i` are the same sample.
    shared: bool,
}

fn rows<T: Element>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "embeddings must be (N, D)".into(),
        });
    }
    let d = t.shape()[1];
    Ok(t.data()
        .chunks(d.max(1))
        .take(t.shape()[0])
        .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect())
}

impl RetrievalIndex {
    pub fn new<T: Element>(
        query: &Tensor<T>,
        query_labels: Vec<usize>,
        gallery: &Tensor<T>,
        gallery_labels: Vec<usize>,
    ) -> Result<Self> {
        let (q, g) = (rows(query)?, rows(gallery)?);
        if q.is_empty() || g.is_empty() {
            return Err(Error::InvalidArgument("query and gallery must be nonempty".into()));
        }
        if query.shape()[1] != gallery.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "retrieval",
                lhs: query.shape().to_vec(),
                rhs: gallery.shape().to_vec(),
            });
        }
        if q.len() != query_labels.len() || g.len() != gallery_labels.len() {
            return Err(Error::InvalidArgument("label count differs from embedding count".into()));
        }
        Ok(Self {
            query: q,
            query_labels,
            gallery: g,
            gallery_labels,
            shared: false,
        })
    }

    /// Every sample queries all the others.
    pub fn all_vs_all<T: Element>(embeddings: &Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let mut index = Self::new(embeddings, labels.clone(), embeddings, labels)?;
        index.shared = true;
        Ok(index)
    }

    pub fn queries(&self) -> usize {
        self.query.len()
    }

    /// Gallery positions for query `q`, nearest first; ties keep gallery order.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let dist = |g: &Vec<f64>| -> f64 { self.query[q].iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut ranked: Vec<(f64, usize)> = self
            .gallery
            .iter()
            .enumerate()
            .filter(|&(i, _)| !(self.shared && i == q))
            .map(|(i, g)| (dist(g), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().map(|(_, i)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub map: f64,
    /// Queries with at least one relevant gallery item; the others are skipped.
    pub evaluated: usize,
}

impl RetrievalMetrics {
    pub fn to_csv(&self) -> String {
        format!("metric,value\nrank1,{}\nmAP,{}\nqueries,{}\n", self.rank1, self.map, self.evaluated)
    }
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rank-1 {:.4}  mAP {:.4}  ({} queries)",
            self.rank1, self.map, self.evaluated
        )
    }
}

/// Rank-1 and mean average precision under Euclidean distance.
pub fn evaluate_retrieval(index: &RetrievalIndex) -> Result<RetrievalMetrics> {
    let (mut hits, mut ap_sum, mut evaluated) = (0usize, 0.0, 0usize);
    for q in 0..index.queries() {
        let label = index.query_labels[q];
        let ranked = index.ranking(q);
        let relevant: Vec<bool> = ranked.iter().map(|&g| index.gallery_labels[g] == label).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        evaluated += 1;
        if relevant[0] {
            hits += 1;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (pos, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
            found += 1;
            ap += found as f64 / (pos + 1) as f64;
        }
        ap_sum += ap / total as f64;
    }
    if evaluated == 0 {
        return Err(Error::InvalidArgument("no query has a relevant gallery item".into()));
    }
    Ok(RetrievalMetrics {
        rank1: hits as f64 / evaluated as f64,
        map: ap_sum / evaluated as f64,
        evaluated,
    })
}
