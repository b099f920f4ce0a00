use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SplitChoice};
use super::run::{build_dataset, run_on, RunRecord};
use super::stats::SeedSummary;
use super::HarnessError;
use crate::scn::HeadKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingRow {
    pub seed: u64,
    pub lambda: f64,
    pub test_accuracy: f64,
    pub grounding_accuracy: f64,
    pub ground_p: Option<f64>,
    pub ap: Option<f64>,
}

/// How often λ = 1 beat λ = 0, and how far apart their task accuracies were.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingComparison {
    pub seeds: usize,
    pub ground_p_wins: usize,
    pub ap_wins: usize,
    pub max_accuracy_gap: f64,
    pub accuracy_tolerance: f64,
    pub accuracy_parity: bool,
    pub ground_p: [SeedSummary; 2],
    pub ap: [SeedSummary; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingStudy {
    pub rows: Vec<GroundingRow>,
    pub comparison: GroundingComparison,
    pub records: Vec<RunRecord>,
}

/// Regression SCN trained with and without the entropy term on the
/// unmodified split, per seed, each scored on a held-out grounding set.
type PairResult = Result<[RunRecord; 2], HarnessError>;

pub fn grounding_study(
    base: &ExperimentConfig,
    seeds: &[u64],
    parallelism: usize,
) -> Result<GroundingStudy, HarnessError> {
    if base.grounding.size == 0 {
        return Err(HarnessError::Config("grounding study needs grounding.size > 0".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Config("grounding study needs at least one seed".into()));
    }
    let configs: Vec<(u64, [ExperimentConfig; 2])> = seeds
        .iter()
        .map(|&s| {
            let mut c = base.reseeded(s);
            c.strategy = SplitChoice::None;
            c.p = 0.0;
            c.model.head = HeadKind::Regression;
            let with = |lambda: f64| {
                let mut c = c.clone();
                c.model.lambda = lambda;
                c
            };
            (s, [with(0.0), with(1.0)])
        })
        .collect();
    for (_, pair) in &configs {
        for c in pair {
            c.validate()?;
        }
    }

    let slots: Mutex<Vec<Option<PairResult>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let Some((_, pair)) = configs.get(i) else { break };
        let result = build_dataset(&pair[0]).and_then(|d| {
            let a = run_on(&pair[0], &d)?.record;
            let b = run_on(&pair[1], &d)?.record;
            Ok([a, b])
        });
        slots.lock().expect("no poisoned workers")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(seeds.len()) {
            s.spawn(worker);
        }
    });

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for ((seed, _), slot) in configs.iter().zip(slots.into_inner().expect("no poisoned workers")) {
        for r in slot.expect("every seed ran")? {
            let g = r.grounding.as_ref().expect("grounding configured");
            let block = g.grounding.as_ref().expect("regression head");
            rows.push(GroundingRow {
                seed: *seed,
                lambda: r.config.model.lambda,
                test_accuracy: r.test.accuracy,
                grounding_accuracy: g.accuracy,
                ground_p: block.ground_p,
                ap: block.ap,
            });
            records.push(r);
        }
    }
    let comparison = compare(&rows, base.grounding.accuracy_tolerance);
    Ok(GroundingStudy {
        rows,
        comparison,
        records,
    })
}

fn compare(rows: &[GroundingRow], tolerance: f64) -> GroundingComparison {
    let pairs: Vec<(&GroundingRow, &GroundingRow)> = rows.chunks(2).map(|c| (&c[0], &c[1])).collect();
    let wins = |f: fn(&GroundingRow) -> Option<f64>| {
        pairs
            .iter()
            .filter(|(off, on)| matches!((f(off), f(on)), (Some(a), Some(b)) if b > a))
            .count()
    };
    let gap = pairs
        .iter()
        .map(|(off, on)| (on.test_accuracy - off.test_accuracy).abs())
        .fold(0.0, f64::max);
    let summary = |lambda_on: bool, f: fn(&GroundingRow) -> Option<f64>| {
        let v: Vec<f64> = pairs
            .iter()
            .filter_map(|(off, on)| f(if lambda_on { on } else { off }))
            .collect();
        SeedSummary::of(&v)
    };
    GroundingComparison {
        seeds: pairs.len(),
        ground_p_wins: wins(|r| r.ground_p),
        ap_wins: wins(|r| r.ap),
        max_accuracy_gap: gap,
        accuracy_tolerance: tolerance,
        accuracy_parity: gap < tolerance,
        ground_p: [summary(false, |r| r.ground_p), summary(true, |r| r.ground_p)],
        ap: [summary(false, |r| r.ap), summary(true, |r| r.ap)],
    }
}

impl GroundingStudy {
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        super::sweep::to_csv(&self.rows)
    }
}
