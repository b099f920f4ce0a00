use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::McdError;
use crate::rng::{derive_seed, seeded, tag};
use crate::scene::{CountingTriplet, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Thin even labels in train/validation and odd labels in test.
    OddEven,
    /// The mirror image: thin odd labels in train/validation, even in test.
    EvenOdd,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::OddEven => "odd-even",
            StrategyKind::EvenOdd => "even-odd",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = McdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "odd-even" => Ok(StrategyKind::OddEven),
            "even-odd" => Ok(StrategyKind::EvenOdd),
            other => Err(McdError::InvalidStrategy(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStrategy {
    pub kind: StrategyKind,
    /// Removal percentage in `[0, 100]`.
    pub p: f64,
}

impl SplitStrategy {
    pub fn new(kind: StrategyKind, p: f64) -> Result<Self, McdError> {
        if !(0.0..=100.0).contains(&p) {
            return Err(McdError::InvalidStrategy(format!("p = {p} outside [0, 100]")));
        }
        Ok(Self { kind, p })
    }

    /// Parity thinned in train and validation (`true` = even).
    fn train_parity_even(&self) -> bool {
        self.kind == StrategyKind::OddEven
    }

    /// Number of triplets removed from a label bucket of size `n`.
    pub fn removal_count(&self, n: usize) -> usize {
        ((self.p / 100.0) * n as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub dataset_hash: String,
    pub val_fraction: f64,
    pub carve_seed: u64,
    pub strategy: Option<SplitStrategy>,
    pub strategy_seed: u64,
}

/// Triplet-id membership of the three sets, ids sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub provenance: SplitProvenance,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// What the trainer is allowed to see: train and validation triplets only.
#[derive(Clone, Debug)]
pub struct TrainingView<'a> {
    pub train: Vec<&'a CountingTriplet>,
    pub validation: Vec<&'a CountingTriplet>,
}

impl DatasetSplit {
    pub fn training_view<'a>(&self, dataset: &'a Dataset) -> TrainingView<'a> {
        TrainingView {
            train: self.train.iter().map(|&i| &dataset.triplets[i]).collect(),
            validation: self.validation.iter().map(|&i| &dataset.triplets[i]).collect(),
        }
    }

    pub fn test_triplets<'a>(&self, dataset: &'a Dataset) -> Vec<&'a CountingTriplet> {
        self.test.iter().map(|&i| &dataset.triplets[i]).collect()
    }

    pub fn to_json(&self) -> Result<String, McdError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, McdError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Pairwise disjoint sets and image-disjoint train/validation.
    pub fn check_invariants(&self, dataset: &Dataset) -> Result<(), McdError> {
        let sets = [&self.train, &self.validation, &self.test];
        let mut seen = BTreeSet::new();
        for s in sets {
            for &id in s {
                if id >= dataset.len() {
                    return Err(McdError::UnknownId(id));
                }
                if !seen.insert(id) {
                    return Err(McdError::Overlap(format!("triplet {id} appears twice")));
                }
            }
        }
        let train_images: BTreeSet<u64> = self.train.iter().map(|&i| dataset.triplets[i].image_id).collect();
        if let Some(&i) = self
            .validation
            .iter()
            .find(|&&i| train_images.contains(&dataset.triplets[i].image_id))
        {
            return Err(McdError::Overlap(format!(
                "image {} in both train and validation",
                dataset.triplets[i].image_id
            )));
        }
        Ok(())
    }
}

/// Triplet ids of the pool that feeds train/validation (the whole dataset if
/// it declares no `"train"` pool).
fn train_pool(dataset: &Dataset) -> Vec<usize> {
    match dataset.pool("train") {
        Some(r) => r.collect(),
        None => (0..dataset.len()).collect(),
    }
}

/// Holds out `ceil(fraction * images)` whole images of the train pool (at
/// least one, at most all but one); every triplet on a held-out image goes to
/// validation.
pub fn carve_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), McdError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(McdError::InvalidFraction(fraction));
    }
    let ids = train_pool(dataset);
    let images: Vec<u64> = ids
        .iter()
        .map(|&i| dataset.triplets[i].image_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if images.len() < 2 {
        return Err(McdError::TooFewImages(images.len()));
    }
    let want = ((fraction * images.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let want = want.min(images.len() - 1);
    let mut rng = seeded(derive_seed(seed, tag("carve")));
    let held: BTreeSet<u64> = sample(&mut rng, images.len(), want)
        .into_iter()
        .map(|k| images[k])
        .collect();
    let (val, train): (Vec<usize>, Vec<usize>) = ids
        .into_iter()
        .partition(|&i| held.contains(&dataset.triplets[i].image_id));
    Ok((train, val))
}

/// Carved split with no strategy applied; test is the dataset's `"test"` pool.
pub fn base_split(dataset: &Dataset, val_fraction: f64, carve_seed: u64) -> Result<DatasetSplit, McdError> {
    let (train, validation) = carve_validation(dataset, val_fraction, carve_seed)?;
    let test = dataset.pool("test").map(|r| r.collect()).unwrap_or_default();
    Ok(DatasetSplit {
        provenance: SplitProvenance {
            dataset_hash: dataset.hash(),
            val_fraction,
            carve_seed,
            strategy: None,
            strategy_seed: 0,
        },
        train,
        validation,
        test,
    })
}

/// Per-label removal. For odd-even, `round(p/100 * n_k)` triplets of every
/// even label `k` leave train and validation, and likewise for odd labels in
/// test; even-odd swaps the parities. Victims are drawn uniformly without
/// replacement within each (set, label) bucket.
pub fn apply_strategy(
    split: &DatasetSplit,
    labels: &[usize],
    strategy: SplitStrategy,
    seed: u64,
) -> Result<DatasetSplit, McdError> {
    SplitStrategy::new(strategy.kind, strategy.p)?;
    let even_in_train = strategy.train_parity_even();
    let thin = |ids: &[usize], set: &str, drop_even: bool| -> Result<Vec<usize>, McdError> {
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &id in ids {
            let label = *labels.get(id).ok_or(McdError::UnknownId(id))?;
            buckets.entry(label).or_default().push(id);
        }
        let mut removed = BTreeSet::new();
        for (label, members) in &buckets {
            if (label % 2 == 0) != drop_even {
                continue;
            }
            let k = strategy.removal_count(members.len());
            let stream = derive_seed(derive_seed(seed, tag(set)), *label as u64);
            let mut rng = seeded(stream);
            for j in sample(&mut rng, members.len(), k) {
                removed.insert(members[j]);
            }
        }
        Ok(ids.iter().copied().filter(|id| !removed.contains(id)).collect())
    };
    let mut out = split.clone();
    out.train = thin(&split.train, "train", even_in_train)?;
    out.validation = thin(&split.validation, "validation", even_in_train)?;
    out.test = thin(&split.test, "test", !even_in_train)?;
    out.provenance.strategy = Some(strategy);
    out.provenance.strategy_seed = seed;
    Ok(out)
}

/// Rebuilds membership from provenance alone.
pub fn replay_split(dataset: &Dataset, provenance: &SplitProvenance) -> Result<DatasetSplit, McdError> {
    let hash = dataset.hash();
    if hash != provenance.dataset_hash {
        return Err(McdError::HashMismatch {
            expected: provenance.dataset_hash.clone(),
            found: hash,
        });
    }
    let base = base_split(dataset, provenance.val_fraction, provenance.carve_seed)?;
    match provenance.strategy {
        None => Ok(base),
        Some(s) => apply_strategy(&base, &dataset_labels(dataset), s, provenance.strategy_seed),
    }
}

pub fn dataset_labels(dataset: &Dataset) -> Vec<usize> {
    dataset.triplets.iter().map(|t| t.count).collect()
}

/// Exact label tally of `ids`, indexed by label, sized to `num_labels` (grown
/// if a larger label occurs).
pub fn count_histogram(ids: &[usize], labels: &[usize], num_labels: usize) -> Result<Vec<usize>, McdError> {
    let mut h = vec![0usize; num_labels];
    for &id in ids {
        let l = *labels.get(id).ok_or(McdError::UnknownId(id))?;
        if l >= h.len() {
            h.resize(l + 1, 0);
        }
        h[l] += 1;
    }
    Ok(h)
}
