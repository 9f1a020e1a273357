//! Open-set retrieval: cosine distance, Recall@K and the class split.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::error::{FrptError, Result};
use crate::model::FrptParams;
use crate::tensor::Tensor;

/// Parallel lists of embeddings, class labels and unique image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Vec<Vec<f32>>,
    labels: Vec<usize>,
    ids: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Vec<Vec<f32>>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() || labels.len() != ids.len() {
            return Err(FrptError::Shape(format!(
                "index lists differ in length: {} embeddings, {} labels, {} ids",
                embeddings.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(d) = embeddings.first().map(Vec::len) {
            if embeddings.iter().any(|e| e.len() != d) {
                return Err(FrptError::Shape("embeddings differ in width".into()));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(FrptError::InvalidValue(format!("duplicate image id {dup}")));
        }
        Ok(Self { embeddings, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Every embedding multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let embeddings = self.embeddings.iter().map(|e| e.iter().map(|v| v * factor).collect()).collect();
        Self { embeddings, labels: self.labels.clone(), ids: self.ids.clone() }
    }
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn distance_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// `1 − a·b / (‖a‖‖b‖)` in `[0, 2]`; 1 when either vector is zero.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine distance against a zero-norm embedding; using 1");
    }
    distance_with_norms(a, b, na, nb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub k: usize,
    pub recall: f64,
    /// Queries that entered the mean.
    pub queries: usize,
    /// Queries whose class has no other member.
    pub excluded: usize,
}

/// Recall@K for each `k` in `ks`, every image querying all others.
///
/// Candidates are ordered by `(distance, id)`. A query hits at `k` when
/// fewer than `k` negatives precede its best positive, so no full sort is
/// needed.
pub fn recall_at_ks(index: &EmbeddingIndex, ks: &[usize]) -> Result<Vec<Recall>> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(FrptError::InvalidValue(format!("recall needs k >= 1, got {k}")));
    }
    let norms: Vec<f64> = index.embeddings.iter().map(|e| norm(e)).collect();
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero > 0 {
        log::warn!("{zero} zero-norm embeddings; their distances are set to 1");
    }
    let ranks: Vec<Option<usize>> = (0..index.len())
        .into_par_iter()
        .map(|q| {
            let e = &index.embeddings[q];
            let dist = |j: usize| distance_with_norms(e, &index.embeddings[j], norms[q], norms[j]);
            let best = (0..index.len())
                .filter(|&j| j != q && index.labels[j] == index.labels[q])
                .map(|j| (dist(j), index.ids[j]))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))?;
            let ahead = (0..index.len())
                .filter(|&j| j != q && index.labels[j] != index.labels[q])
                .filter(|&j| {
                    let d = dist(j);
                    d < best.0 || (d == best.0 && index.ids[j] < best.1)
                })
                .count();
            Some(ahead)
        })
        .collect();
    let excluded = ranks.iter().filter(|r| r.is_none()).count();
    if excluded > 0 {
        log::info!("{excluded} singleton-class queries excluded from recall");
    }
    let scored: Vec<usize> = ranks.into_iter().flatten().collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = scored.iter().filter(|&&ahead| ahead < k).count();
            let recall = if scored.is_empty() { 0.0 } else { hits as f64 / scored.len() as f64 };
            Recall { k, recall, queries: scored.len(), excluded }
        })
        .collect())
}

pub fn recall_at_k(index: &EmbeddingIndex, k: usize) -> Result<Recall> {
    Ok(recall_at_ks(index, &[k])?[0])
}

/// First half of the canonical class order trains, the rest evaluates. An
/// odd count leaves the extra class in the test half.
pub fn split_dataset(classes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if classes.len() < 2 {
        return Err(FrptError::InvalidValue(format!("need at least 2 classes to split, got {}", classes.len())));
    }
    let half = classes.len() / 2;
    Ok((classes[..half].to_vec(), classes[half..].to_vec()))
}

/// One image with its class label and unique id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub image: Tensor<f32>,
}

/// Embeds every sample, preserving order.
pub fn build_index(samples: &[Sample], backbone: &Backbone, params: &FrptParams) -> Result<EmbeddingIndex> {
    let embeddings = samples.par_iter().map(|s| params.embed(backbone, &s.image)).collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::new(
        embeddings,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.id).collect(),
    )
}
