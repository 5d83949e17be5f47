//! Runs an ablation plan and assembles its CSV report.

use std::io::Write;

use partialmine::datagen::{read_benchmark, DomainData};
use partialmine::labels::{CategoryId, DomainId, DomainRegistry};
use partialmine::metrics::MetricsReport;
use partialmine::trainer::{domain_probe, evaluate, run_training, ProbeConfig, ProbeResult, TrainError};
use rayon::prelude::*;

use crate::plan::{AblationPlan, BenchmarkSource, RunSpec, Variant};
use crate::CliError;

/// Test-split outcome of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub test: MetricsReport,
    pub best_epoch: usize,
    pub probe: Option<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub lambda_tat: f64,
    pub lambda_ute: f64,
    /// A failed run keeps its error message instead of aborting the suite.
    pub result: Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
}

pub const REPORT_HEADER: [&str; 7] = ["variant", "seed", "lambda_tat", "lambda_ute", "metric", "category", "value"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationReport {
    /// Runs matching `variant`, in plan order.
    pub fn of(&self, variant: Variant) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// One row per category AUC, aggregate, best epoch, probe accuracy, or error.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in &self.runs {
            let key = [
                r.variant.to_string(),
                r.seed.to_string(),
                r.lambda_tat.to_string(),
                r.lambda_ute.to_string(),
            ];
            let mut row = |metric: &str, category: String, value: String| -> csv::Result<()> {
                w.write_record(key.iter().cloned().chain([metric.to_string(), category, value]))
            };
            match &r.result {
                Err(e) => row("error", String::new(), e.clone())?,
                Ok(s) => {
                    for (c, a) in &s.test.per_category {
                        row("auc", c.to_string(), opt(a.auc))?;
                    }
                    row("mean", String::new(), opt(s.test.mean))?;
                    row("mean_common", String::new(), opt(s.test.mean_common))?;
                    row("mean_internal_only", String::new(), opt(s.test.mean_internal_only))?;
                    row("best_epoch", String::new(), s.best_epoch.to_string())?;
                    if let Some(p) = &s.probe {
                        for (c, acc) in &p.per_category {
                            row("probe_accuracy", c.to_string(), acc.to_string())?;
                        }
                        row("probe_mean_accuracy", String::new(), p.mean_accuracy.to_string())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, CliError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

type Loaded = Result<(DomainRegistry, Vec<DomainData>), String>;

fn load_data(source: &BenchmarkSource, seed: u64) -> Loaded {
    match source {
        BenchmarkSource::Synthetic(recipe) => {
            let cfg = recipe.build(seed).map_err(|e| e.to_string())?;
            let registry = cfg.registry().map_err(|e| e.to_string())?;
            let data = cfg.generate().map_err(|e| e.to_string())?;
            Ok((registry, data))
        }
        BenchmarkSource::Directory(dir) => {
            let (manifest, data) = read_benchmark(dir).map_err(|e| e.to_string())?;
            Ok((manifest.registry, data))
        }
    }
}

fn run_one(
    spec: &RunSpec,
    loaded: &Loaded,
    internal: DomainId,
    probe: bool,
) -> Result<RunSummary, String> {
    let (registry, data) = loaded.as_ref().map_err(|e| format!("data: {e}"))?;
    let internal_data = data
        .iter()
        .find(|d| d.domain_id == internal)
        .ok_or_else(|| format!("internal domain {internal} has no data"))?;
    let training: Vec<DomainData> = if spec.variant.internal_only() {
        vec![internal_data.clone()]
    } else {
        data.clone()
    };
    let out = run_training(&spec.config, registry, internal, &training).map_err(|e: TrainError| e.to_string())?;
    let test = evaluate(&out.best.params, &internal_data.test, &out.partition, internal).map_err(|e| e.to_string())?;
    let external = data.iter().find(|d| d.domain_id != internal);
    let probe = match (probe, external) {
        (true, Some(ext)) if !spec.variant.internal_only() && !out.partition.common.is_empty() => {
            let common: Vec<CategoryId> = out.partition.common.iter().copied().collect();
            let cfg = ProbeConfig {
                seed: spec.seed,
                ..ProbeConfig::default()
            };
            Some(
                domain_probe(
                    &out.best.params,
                    (&internal_data.train, &ext.train),
                    (&internal_data.test, &ext.test),
                    &common,
                    &cfg,
                )
                .map_err(|e| e.to_string())?,
            )
        }
        _ => None,
    };
    Ok(RunSummary {
        test,
        best_epoch: out.best.epoch,
        probe,
    })
}

/// Trains every run of `plan` on up to `jobs` worker threads. Rows come
/// back in plan order whatever the scheduling.
pub fn ablation_suite(plan: &AblationPlan, jobs: usize) -> Result<AblationReport, CliError> {
    let runs = plan.runs();
    if runs.is_empty() {
        return Ok(AblationReport::default());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| {
        let seeds: Vec<u64> = match plan.benchmark {
            BenchmarkSource::Directory(_) => vec![0],
            BenchmarkSource::Synthetic(_) => {
                let mut s = plan.seeds.clone();
                s.sort_unstable();
                s.dedup();
                s
            }
        };
        let datasets: Vec<(u64, Loaded)> = seeds
            .par_iter()
            .map(|&s| (s, load_data(&plan.benchmark, s)))
            .collect();
        let data_for = |seed: u64| -> &Loaded {
            let key = match plan.benchmark {
                BenchmarkSource::Directory(_) => 0,
                BenchmarkSource::Synthetic(_) => seed,
            };
            &datasets.iter().find(|(s, _)| *s == key).expect("loaded above").1
        };
        let records = runs
            .par_iter()
            .map(|spec| RunRecord {
                variant: spec.variant,
                seed: spec.seed,
                lambda_tat: spec.config.lambda_tat,
                lambda_ute: spec.config.lambda_ute,
                result: run_one(spec, data_for(spec.seed), plan.internal_domain, plan.probe),
            })
            .collect();
        Ok(AblationReport { runs: records })
    })
}
