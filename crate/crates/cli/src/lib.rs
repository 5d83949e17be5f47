//! Experiment runner behind the `partialmine` binary: benchmark generation,
//! training, evaluation, ablation suites and gradient checks.

pub mod plan;
pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use partialmine::datagen::{
    read_benchmark, read_dataset, write_benchmark, BenchmarkConfig, DatagenError, Manifest, Split,
    SyntheticBenchmark, MANIFEST_FILE,
};
use partialmine::labels::{category_partition, LabelError};
use partialmine::metrics::MetricsReport;
use partialmine::nn::{GradCheckReport, ModelCheckpoint, NnError};
use partialmine::trainer::{composite_grad_check, evaluate, run_training, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{AblationPlan, Variant};
pub use suite::{ablation_suite, AblationReport};

/// Environment variable that replaces every configured seed.
pub const SEED_ENV: &str = "PARTIALMINE_SEED";

/// Largest accepted gradient-check error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 0 success, 1 usage, 2 data or schema, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Train(TrainError::InvalidConfig(_)) => 1,
            CliError::Train(TrainError::NonFiniteLoss { .. })
            | CliError::Train(TrainError::Nn(NnError::NonFiniteActivation { .. }))
            | CliError::GradCheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Parses a `PARTIALMINE_SEED` value; unset or empty means no override.
pub fn parse_seed_override(value: Option<&str>) -> Result<Option<u64>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
    }
}

pub fn seed_override() -> Result<Option<u64>> {
    parse_seed_override(std::env::var(SEED_ENV).ok().as_deref())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text)?;
    Ok(())
}

/// Input of `generate`: either a full benchmark description or the compact
/// recipe with a sampling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BenchmarkDocument {
    Explicit(BenchmarkConfig),
    Recipe {
        synthetic: SyntheticBenchmark,
        #[serde(default)]
        seed: u64,
    },
}

impl BenchmarkDocument {
    pub fn resolve(self, seed: Option<u64>) -> Result<BenchmarkConfig> {
        Ok(match self {
            BenchmarkDocument::Explicit(mut cfg) => {
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                cfg
            }
            BenchmarkDocument::Recipe { synthetic, seed: s } => synthetic.build(seed.unwrap_or(s))?,
        })
    }
}

pub const BENCHMARK_FILE: &str = "benchmark.json";

/// Writes every (domain, split) CSV, the manifest and the resolved benchmark config.
pub fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<Manifest> {
    let cfg = read_json::<BenchmarkDocument>(config)?.resolve(seed)?;
    let registry = cfg.registry()?;
    let data = cfg.generate()?;
    let manifest = write_benchmark(out, &registry, &data)?;
    write_json(&out.join(BENCHMARK_FILE), &cfg)?;
    Ok(manifest)
}

pub const MODEL_FILE: &str = "model.json";
pub const FINAL_FILE: &str = "final.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const VALIDATION_FILE: &str = "validation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_step: usize,
    pub steps: usize,
    pub validation: MetricsReport,
}

/// Trains on a benchmark directory and writes the best checkpoint, the final
/// state with its optimizer, the loss history and the selecting report.
pub fn train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<TrainSummary> {
    let mut cfg: TrainConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (manifest, domains) = read_benchmark(data)?;
    let outcome = run_training(&cfg, &manifest.registry, manifest.internal_domain, &domains)?;
    fs::create_dir_all(out)?;
    ModelCheckpoint::new(outcome.best.params.clone(), None, None).save(&out.join(MODEL_FILE))?;
    let last = &outcome.final_state;
    ModelCheckpoint::new(last.params.clone(), Some(last.optimizer.clone()), None).save(&out.join(FINAL_FILE))?;
    outcome.history.save_csv(&out.join(HISTORY_FILE))?;
    write_json(&out.join(VALIDATION_FILE), &outcome.best.report)?;
    Ok(TrainSummary {
        best_epoch: outcome.best.epoch,
        best_step: outcome.best.step,
        steps: outcome.history.steps.len(),
        validation: outcome.best.report,
    })
}

/// Scores `data` with a saved model. Category roles come from `manifest`,
/// by default the `manifest.json` next to the CSV.
pub fn eval(model: &Path, data: &Path, report: &Path, manifest: Option<&Path>) -> Result<MetricsReport> {
    let ck = ModelCheckpoint::load(model)?;
    let manifest_path = match manifest {
        Some(p) => p.to_path_buf(),
        None => data.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE),
    };
    let manifest: Manifest = read_json(&manifest_path)?;
    let partition = category_partition(&manifest.registry)?;
    let dataset = read_dataset(data, Split::Test)?;
    let r = evaluate(&ck.params, &dataset, &partition, manifest.internal_domain)?;
    fs::write(report, r.to_json())?;
    Ok(r)
}

pub fn load_plan(path: &Path) -> Result<AblationPlan> {
    read_json(path)
}

/// Runs the plan and writes its report to `out`, or to the plan's own output path.
pub fn ablate(plan_path: &Path, out: Option<&Path>, jobs: usize, seed: Option<u64>) -> Result<AblationReport> {
    let mut plan = load_plan(plan_path)?;
    if let Some(s) = seed {
        plan.seeds = vec![s];
    }
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| plan.output.clone())
        .ok_or_else(|| CliError::Usage("no report path: pass --out or set \"output\" in the plan".into()))?;
    let report = ablation_suite(&plan, jobs)?;
    report.write_csv(fs::File::create(&target)?)?;
    Ok(report)
}

/// Checks the composite objective's gradient at a random tiny model.
pub fn gradcheck(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let r = composite_grad_check(seed, eps)?;
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(r)
    } else {
        Err(CliError::GradCheck(format!(
            "max relative error {:e} at {} (analytic {:e}, numeric {:e})",
            r.max_rel_error, r.worst_path, r.analytic, r.numeric
        )))
    }
}
