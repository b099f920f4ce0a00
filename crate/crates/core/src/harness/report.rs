use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grounding::GroundingStudy;
use super::run::{RunRecord, Timings};
use super::sweep::{to_csv, SweepTable};
use super::HarnessError;

/// JSON schema every emitted run record satisfies.
pub const RUN_RECORD_SCHEMA: &str = include_str!("../../schema/run_record.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tool: String,
    pub version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            tool: "countlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// Seeds that produced a report, by role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub data: Vec<u64>,
    pub test: Vec<u64>,
    pub carve: Vec<u64>,
    pub strategy: Vec<u64>,
    pub train: Vec<u64>,
    pub grounding: Vec<u64>,
}

impl SeedManifest {
    fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut m = Self::default();
        for r in records {
            let c = &r.config;
            for (v, s) in [
                (&mut m.data, c.data_seed),
                (&mut m.test, c.test_seed),
                (&mut m.carve, c.carve_seed),
                (&mut m.strategy, c.strategy_seed),
                (&mut m.train, c.train_seed),
                (&mut m.grounding, c.grounding.seed),
            ] {
                if !v.contains(&s) {
                    v.push(s);
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub environment: Environment,
    pub seeds: SeedManifest,
    pub timings: Vec<Timings>,
    pub files: Vec<ManifestFile>,
}

/// Checks a serialized run record against [`RUN_RECORD_SCHEMA`].
pub fn validate_record_json(json: &str) -> Result<(), HarnessError> {
    let schema: serde_json::Value = serde_json::from_str(RUN_RECORD_SCHEMA)?;
    let instance: serde_json::Value = serde_json::from_str(json)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| HarnessError::Schema(e.to_string()))?;
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| format!("{}: {e}", e.instance_path()))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Schema(errors.join("; ")))
    }
}

/// Writes `files` and a manifest into `dir`. Everything is staged in a
/// temporary directory next to `dir` first, so an unwritable destination
/// fails before any output appears.
fn write_bundle(
    dir: &Path,
    kind: &str,
    files: Vec<(String, String)>,
    seeds: SeedManifest,
    timings: Vec<Timings>,
) -> Result<Vec<PathBuf>, HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stage = tempfile::Builder::new()
        .prefix(".countlab-stage-")
        .tempdir_in(&parent)
        .map_err(|e| io(&parent, e))?;
    let manifest = Manifest {
        kind: kind.into(),
        environment: Environment::current(),
        seeds,
        timings,
        files: files
            .iter()
            .map(|(name, body)| ManifestFile {
                name: name.clone(),
                bytes: body.len(),
                sha256: hex::encode(Sha256::digest(body.as_bytes())),
            })
            .collect(),
    };
    let mut all = files;
    all.push(("manifest.json".into(), serde_json::to_string_pretty(&manifest)?));
    for (name, body) in &all {
        let p = stage.path().join(name);
        std::fs::write(&p, body).map_err(|e| io(&p, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for (name, _) in &all {
        let to = dir.join(name);
        std::fs::rename(stage.path().join(name), &to).map_err(|e| io(&to, e))?;
        written.push(to);
    }
    Ok(written)
}

fn history_csv(record: &RunRecord) -> Result<String, HarnessError> {
    to_csv(&record.history.epochs)
}

/// `record.json` (canonical, schema-checked), per-label and history CSVs and
/// a manifest with timings and the environment.
pub fn emit_report(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let json = record.canonical_json()?;
    validate_record_json(&json)?;
    let mut files = vec![
        ("record.json".to_string(), json),
        (
            "per_label_test.csv".to_string(),
            record
                .test
                .per_label_csv()
                .map_err(|e| HarnessError::Io(e.to_string()))?,
        ),
        ("history.csv".to_string(), history_csv(record)?),
    ];
    if let Some(g) = &record.grounding {
        files.push((
            "per_label_grounding.csv".into(),
            g.per_label_csv().map_err(|e| HarnessError::Io(e.to_string()))?,
        ));
    }
    write_bundle(
        dir,
        "run",
        files,
        SeedManifest::from_records([record]),
        record.timings.clone().into_iter().collect(),
    )
}

/// Long and summary sweep tables plus a manifest.
pub fn emit_sweep(table: &SweepTable, seeds: &[u64], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let files = vec![
        ("sweep.csv".to_string(), table.to_csv()?),
        ("sweep_summary.csv".to_string(), table.summary_csv()?),
        ("sweep.json".to_string(), serde_json::to_string_pretty(table)?),
    ];
    let seeds = SeedManifest {
        train: seeds.to_vec(),
        ..SeedManifest::default()
    };
    write_bundle(dir, "sweep", files, seeds, Vec::new())
}

/// Per-seed grounding rows, the comparison, and every underlying record.
pub fn emit_grounding(study: &GroundingStudy, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = vec![
        ("grounding.csv".to_string(), study.to_csv()?),
        (
            "comparison.json".to_string(),
            serde_json::to_string_pretty(&study.comparison)?,
        ),
    ];
    for (i, r) in study.records.iter().enumerate() {
        let json = r.canonical_json()?;
        validate_record_json(&json)?;
        files.push((format!("record_{i}.json"), json));
    }
    let timings = study.records.iter().filter_map(|r| r.timings.clone()).collect();
    write_bundle(
        dir,
        "grounding",
        files,
        SeedManifest::from_records(&study.records),
        timings,
    )
}
