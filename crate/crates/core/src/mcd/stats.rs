use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::split::{base_split, count_histogram, dataset_labels, DatasetSplit};
use super::McdError;
use crate::scene::Dataset;

/// `Σ_i sqrt(p_i q_i)` over a shared support. Both inputs must be
/// non-negative and sum to 1 within 1e-9.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64, McdError> {
    if p.len() != q.len() {
        return Err(McdError::Distribution(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for d in [p, q] {
        if d.iter().any(|v| !(*v >= 0.0)) {
            return Err(McdError::Distribution("negative or NaN mass".into()));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(McdError::Distribution(format!("mass sums to {total}")));
        }
    }
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum();
    Ok(bc.min(1.0))
}

/// Aligns two symbol tallies on their union support and compares them.
/// Two empty tallies compare as identical.
pub fn tally_similarity(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> Result<f64, McdError> {
    let (ta, tb) = (a.values().sum::<usize>(), b.values().sum::<usize>());
    if ta == 0 && tb == 0 {
        return Ok(1.0);
    }
    if ta == 0 || tb == 0 {
        return Ok(0.0);
    }
    let keys: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let p: Vec<f64> = keys
        .iter()
        .map(|k| *a.get(*k).unwrap_or(&0) as f64 / ta as f64)
        .collect();
    let q: Vec<f64> = keys
        .iter()
        .map(|k| *b.get(*k).unwrap_or(&0) as f64 / tb as f64)
        .collect();
    bhattacharyya(&renormalize(p), &renormalize(q))
}

fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub size: usize,
    pub labels: Vec<usize>,
    pub tokens: BTreeMap<String, usize>,
    pub concepts: BTreeMap<String, usize>,
    /// Coefficients against the same set before the strategy was applied.
    pub label_similarity: f64,
    pub token_similarity: f64,
    pub concept_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub train: SetStats,
    pub validation: SetStats,
    pub test: SetStats,
}

impl DistributionStats {
    pub fn to_json(&self) -> Result<String, McdError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, McdError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Question content symbols (class, attribute, half-plane); the template
/// words around them play the role of a stop-list and are never counted.
fn token_tally(ids: &[usize], dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for &i in ids {
        for t in dataset.triplets[i].question.content_tokens() {
            *m.entry(t).or_insert(0) += 1;
        }
    }
    m
}

/// Source class of every proposal, `background` for distractors.
fn concept_tally(ids: &[usize], dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for &i in ids {
        let t = &dataset.triplets[i];
        for r in &t.regions {
            let key = match r.source {
                Some(s) => format!("class:{}", t.instances[s].class),
                None => "background".to_string(),
            };
            *m.entry(key).or_insert(0) += 1;
        }
    }
    m
}

fn label_similarity(a: &[usize], b: &[usize]) -> Result<f64, McdError> {
    let n = a.len().max(b.len());
    let ta: usize = a.iter().sum();
    let tb: usize = b.iter().sum();
    if ta == 0 && tb == 0 {
        return Ok(1.0);
    }
    if ta == 0 || tb == 0 {
        return Ok(0.0);
    }
    let norm =
        |h: &[usize], t: usize| -> Vec<f64> { (0..n).map(|k| *h.get(k).unwrap_or(&0) as f64 / t as f64).collect() };
    bhattacharyya(&renormalize(norm(a, ta)), &renormalize(norm(b, tb)))
}

/// Histograms of every set plus similarity to the unmodified sets, which are
/// rebuilt from the split's provenance.
pub fn split_report(split: &DatasetSplit, dataset: &Dataset) -> Result<DistributionStats, McdError> {
    let labels = dataset_labels(dataset);
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let base = base_split(dataset, split.provenance.val_fraction, split.provenance.carve_seed)?;
    let set = |ids: &[usize], base_ids: &[usize]| -> Result<SetStats, McdError> {
        let h = count_histogram(ids, &labels, num_labels)?;
        let hb = count_histogram(base_ids, &labels, num_labels)?;
        let tokens = token_tally(ids, dataset);
        let concepts = concept_tally(ids, dataset);
        Ok(SetStats {
            size: ids.len(),
            label_similarity: label_similarity(&h, &hb)?,
            token_similarity: tally_similarity(&tokens, &token_tally(base_ids, dataset))?,
            concept_similarity: tally_similarity(&concepts, &concept_tally(base_ids, dataset))?,
            labels: h,
            tokens,
            concepts,
        })
    };
    Ok(DistributionStats {
        train: set(&split.train, &base.train)?,
        validation: set(&split.validation, &base.validation)?,
        test: set(&split.test, &base.test)?,
    })
}
