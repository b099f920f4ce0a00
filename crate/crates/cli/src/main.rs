use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use countlab::harness::{
    build_dataset, build_split, emit_grounding, emit_report, emit_sweep, evaluate, evaluate_grounding, grounding_set,
    grounding_study, parse_override, reproduce, run_experiment_full, sweep_p, validate_record_json, ExperimentConfig,
    HarnessError, RunRecord, SweepOptions,
};
use countlab::mcd::split_report;
use countlab::metrics::ReportProvenance;
use countlab::scene::CountingTriplet;
use countlab::scn::{Checkpoint, HeadKind};

#[derive(Parser)]
#[command(name = "countlab", version, about = "Counting experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set trainer.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let pairs = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExperimentConfig::load(self.config.as_deref(), &pairs)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test pools as JSONL
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Carve validation, apply the split strategy, and write the split with its statistics
    Split {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full protocol; writes a report bundle and the checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured test pool
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (p, head, seed) cell and write long and summary tables
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,50,90,100")]
        ps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "regression,classification")]
        heads: Vec<HeadKind>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Per-cell result cache; finished cells are skipped on rerun
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare entropy weight 0 against 1 on GroundP and AP
    Grounding {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a run record and re-emit its report bundle
    Report {
        #[arg(long)]
        record: PathBuf,
        /// Also rerun the record's config and require identical output
        #[arg(long)]
        reproduce: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
}

fn invalid(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, body).with_context(|| path.display().to_string())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { config, out } => {
            let config = config.load()?;
            let d = build_dataset(&config)?;
            d.write(&out).map_err(|e| anyhow!("{}: {e}", out.display()))?;
            println!("{} triplets, sha256 {}", d.triplets.len(), d.hash());
        }
        Command::Split { config, out } => {
            let config = config.load()?;
            let d = build_dataset(&config)?;
            let split = build_split(&config, &d)?;
            let stats = split_report(&split, &d).map_err(|e| anyhow!("split statistics: {e}"))?;
            write(&out.join("split.json"), &split.to_json().map_err(|e| anyhow!("{e}"))?)?;
            write(
                &out.join("split_stats.json"),
                &stats.to_json().map_err(|e| anyhow!("{e}"))?,
            )?;
            println!(
                "train {} validation {} test {}",
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
        }
        Command::Train { config, out } => {
            let config = config.load()?;
            let run = run_experiment_full(&config)?;
            emit_report(&run.record, &out)?;
            write(
                &out.join("checkpoint.json"),
                &run.checkpoint.to_json().map_err(|e| anyhow!("{e}"))?,
            )?;
            println!(
                "selected epoch {}, validation {:.2}%, test {:.2}%",
                run.record.selected_epoch, run.record.history.best_val_accuracy, run.record.test.accuracy
            );
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let config = config.load()?;
            let text = std::fs::read_to_string(&checkpoint).with_context(|| checkpoint.display().to_string())?;
            let ckpt = Checkpoint::from_json(&text).map_err(|e| invalid(anyhow!("{}: {e}", checkpoint.display())))?;
            let model = ckpt.stored_model().map_err(|e| invalid(anyhow!("{e}")))?;
            let d = build_dataset(&config)?;
            let split = build_split(&config, &d)?;
            if ckpt.provenance.dataset_hash != split.provenance.dataset_hash {
                return Err(invalid(anyhow!("checkpoint was trained on a different dataset")));
            }
            let provenance = ReportProvenance {
                checkpoint_hash: ckpt.hash().map_err(|e| anyhow!("{e}"))?,
                split: Some(split.provenance.clone()),
            };
            let mut reports = vec![evaluate(&model, &split.test_triplets(&d), "test", provenance.clone())?];
            if let Some(g) = grounding_set(&config)? {
                let set: Vec<&CountingTriplet> = g.triplets.iter().collect();
                reports.push(evaluate_grounding(
                    &model,
                    &set,
                    config.grounding.ap_threshold,
                    provenance,
                )?);
            }
            let json = serde_json::to_string_pretty(&reports).map_err(anyhow::Error::from)?;
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Sweep {
            config,
            ps,
            heads,
            seeds,
            jobs,
            cache,
            out,
        } => {
            let config = config.load()?;
            let options = SweepOptions {
                cache_dir: cache,
                parallelism: jobs.max(1),
            };
            let table = sweep_p(&config, &ps, &heads, &seeds, &options)?;
            emit_sweep(&table, &seeds, &out)?;
            for row in table.summary() {
                let median = row.median_accuracy.map_or("n/a".into(), |m| format!("{m:.2}%"));
                println!("{} p={} {}: median {median}", row.strategy, row.p, row.variant);
            }
            if table.failed() > 0 {
                return Err(anyhow!("{} of {} cells failed; see sweep.csv", table.failed(), table.rows.len()).into());
            }
        }
        Command::Grounding {
            config,
            seeds,
            jobs,
            out,
        } => {
            let config = config.load()?;
            let study = grounding_study(&config, &seeds, jobs.max(1))?;
            emit_grounding(&study, &out)?;
            let c = &study.comparison;
            println!(
                "entropy weight 1 beats 0 on GroundP in {}/{} seeds, on AP in {}/{}; max accuracy gap {:.2}",
                c.ground_p_wins, c.seeds, c.ap_wins, c.seeds, c.max_accuracy_gap
            );
        }
        Command::Report {
            record,
            reproduce: again,
            out,
        } => {
            let text = std::fs::read_to_string(&record).with_context(|| record.display().to_string())?;
            validate_record_json(&text)?;
            let r = RunRecord::from_json(&text)?;
            if again {
                reproduce(&r)?;
                println!("reproduced byte-identically");
            }
            if let Some(out) = out {
                emit_report(&r, &out)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
