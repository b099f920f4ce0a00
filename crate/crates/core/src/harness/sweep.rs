use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SplitChoice};
use super::run::{build_dataset, run_on, RunRecord};
use super::stats::SeedSummary;
use super::HarnessError;
use crate::scene::Dataset;
use crate::scn::HeadKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub p: f64,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// `ok`, `cached` or `failed`.
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_rmse: Option<f64>,
    pub adjacent_gap: Option<f64>,
    pub error: Option<String>,
}

/// Median and spread over seeds for one (strategy, p, variant) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub strategy: String,
    pub p: f64,
    pub variant: String,
    pub seeds: usize,
    pub median_accuracy: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub variance: Option<f64>,
    pub std_dev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Finished cells are stored here, keyed by config hash, and reused.
    pub cache_dir: Option<PathBuf>,
    /// Cells run concurrently up to this many threads (0 or 1 = serial).
    pub parallelism: usize,
}

/// The config of one sweep cell.
pub fn cell_config(base: &ExperimentConfig, p: f64, head: HeadKind, seed: u64) -> ExperimentConfig {
    let mut c = base.reseeded(seed);
    c.p = p;
    c.model.head = head;
    c
}

/// One run per (p, variant, seed). Cells sharing a seed share one dataset.
/// A failing cell is recorded with its error and the sweep carries on.
pub fn sweep_p(
    base: &ExperimentConfig,
    ps: &[f64],
    variants: &[HeadKind],
    seeds: &[u64],
    options: &SweepOptions,
) -> Result<SweepTable, HarnessError> {
    if base.strategy == SplitChoice::None {
        return Err(HarnessError::Config("a p-sweep needs a strategy".into()));
    }
    if ps.is_empty() || variants.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one p, variant and seed".into(),
        ));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for &p in ps {
            for &head in variants {
                let c = cell_config(base, p, head, seed);
                c.validate()?;
                cells.push((seed, c));
            }
        }
    }
    let cache = options.cache_dir.as_deref();
    if let Some(dir) = cache {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }

    let pending: Vec<bool> = cells.iter().map(|(_, c)| cached(cache, c).is_none()).collect();
    let datasets: BTreeMap<u64, Result<Dataset, String>> = seeds
        .iter()
        .filter(|s| cells.iter().zip(&pending).any(|((seed, _), &p)| p && seed == *s))
        .map(|&s| {
            let c = cell_config(base, 0.0, base.model.head, s);
            (s, build_dataset(&c).map_err(|e| e.to_string()))
        })
        .collect();

    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((seed, config)) = cells.get(i) else { break };
        let row = run_cell(config, *seed, cache, datasets.get(seed));
        results.lock().expect("no poisoned workers")[i] = Some(row);
    };
    let threads = options.parallelism.max(1).min(cells.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(worker);
        }
    });
    let rows = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    Ok(SweepTable { rows })
}

fn cache_path(dir: &Path, config: &ExperimentConfig) -> Option<PathBuf> {
    config.hash().ok().map(|h| dir.join(format!("{h}.json")))
}

fn cached(cache: Option<&Path>, config: &ExperimentConfig) -> Option<RunRecord> {
    let path = cache_path(cache?, config)?;
    let text = std::fs::read_to_string(path).ok()?;
    let record = RunRecord::from_json(&text).ok()?;
    (record.config == *config).then_some(record)
}

fn run_cell(
    config: &ExperimentConfig,
    seed: u64,
    cache: Option<&Path>,
    dataset: Option<&Result<Dataset, String>>,
) -> SweepRow {
    let mut row = SweepRow {
        strategy: config.strategy.as_str().into(),
        p: config.p,
        variant: config.model.head.as_str().into(),
        seed,
        config_hash: config.hash().unwrap_or_default(),
        status: "failed".into(),
        test_accuracy: None,
        val_accuracy: None,
        test_rmse: None,
        adjacent_gap: None,
        error: None,
    };
    let (record, status) = match cached(cache, config) {
        Some(r) => (Ok(r), "cached"),
        None => {
            let r = match dataset {
                Some(Ok(d)) => run_on(config, d).map(|o| o.record),
                Some(Err(e)) => Err(HarnessError::Stage {
                    stage: "data",
                    message: e.clone(),
                }),
                None => Err(HarnessError::Stage {
                    stage: "data",
                    message: "dataset missing".into(),
                }),
            };
            if let (Ok(rec), Some(dir)) = (&r, cache) {
                if let Err(e) = store(dir, config, rec) {
                    row.error = Some(format!("cache write failed: {e}"));
                }
            }
            (r, "ok")
        }
    };
    match record {
        Ok(r) => {
            row.status = status.into();
            row.test_accuracy = Some(r.test.accuracy);
            row.val_accuracy = Some(r.history.best_val_accuracy);
            row.test_rmse = Some(r.test.rmse);
            row.adjacent_gap = r.test.adjacent_gap;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn store(dir: &Path, config: &ExperimentConfig, record: &RunRecord) -> Result<(), HarnessError> {
    let path = cache_path(dir, config).ok_or_else(|| HarnessError::Io("unhashable config".into()))?;
    let tmp = path.with_extension("json.tmp");
    let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    std::fs::write(&tmp, record.canonical_json()?).map_err(io)?;
    std::fs::rename(&tmp, &path).map_err(io)
}

impl SweepTable {
    /// Long format: one line per cell.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.rows)
    }

    /// Per (strategy, p, variant) aggregate over successful seeds, in sweep order.
    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let mut order: Vec<(String, u64, String)> = Vec::new();
        let mut groups: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.strategy.clone(), r.p.to_bits(), r.variant.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            let g = groups.entry(key).or_default();
            if let Some(a) = r.test_accuracy {
                g.push(a);
            }
        }
        order
            .into_iter()
            .map(|key| {
                let s = SeedSummary::of(&groups[&key]);
                SweepSummaryRow {
                    strategy: key.0,
                    p: f64::from_bits(key.1),
                    variant: key.2,
                    seeds: s.n,
                    median_accuracy: s.median,
                    mean_accuracy: s.mean,
                    variance: s.variance,
                    std_dev: s.std_dev,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.summary())
    }

    /// Median test accuracy of a cell, if any seed succeeded.
    pub fn median(&self, p: f64, head: HeadKind) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|r| r.p == p && r.variant == head.as_str())
            .and_then(|r| r.median_accuracy)
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.status == "failed").count()
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Io(e.to_string()))
}
