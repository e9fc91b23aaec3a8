//! Command-line harness: trials, studies, benchmarks, and cohort files.

use clap::{Parser, Subcommand};
use loggp::control::ControllerKind;
use loggp::harness::config::ExperimentConfig;
use loggp::harness::study::{run_study, study_cohort};
use loggp::harness::trial::run_trial;
use loggp::harness::{bench, export, HarnessError};
use loggp::human::PatientParams;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loggp", version, about = "Online GP learning control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop trial for a cohort patient and export the trace.
    Trial {
        /// Experiment configuration (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Controller variant: low | high | gp | tuned.
        #[arg(long)]
        controller: ControllerKind,
        /// Cohort patient index (0-based).
        #[arg(long)]
        patient: usize,
        /// Trial seed (measurement noise, tree routing, tremor phases).
        #[arg(long)]
        seed: u64,
        /// Output directory (overrides config and LOGGP_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full study protocol over the cohort and the surrogate.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency benchmark: stream synthetic data and report update/predict
    /// percentiles at the given model sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated sizes, e.g. "1e3,1e4,1e5".
        #[arg(long, default_value = "1e3,1e4,1e5")]
        sizes: String,
        /// Skip the exact-GP per-tick cost measurement.
        #[arg(long)]
        no_baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the configured cohort and write it as JSON.
    ExportCohort {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a cohort JSON file and print a short summary.
    ImportCohort {
        #[arg(long)]
        file: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn parse_sizes(spec: &str) -> Result<Vec<usize>, HarnessError> {
    spec.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<usize>().or_else(|_| {
                tok.parse::<f64>()
                    .map_err(|e| HarnessError::Config(format!("bad size '{tok}': {e}")))
                    .and_then(|v| {
                        if v >= 1.0 && v.fract() == 0.0 && v < 1e12 {
                            Ok(v as usize)
                        } else {
                            Err(HarnessError::Config(format!("bad size '{tok}'")))
                        }
                    })
            })
        })
        .collect()
}

fn run() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::Trial { config, controller, patient, seed, out } => {
            let cfg = load_config(config.as_ref())?;
            let cohort = study_cohort(&cfg)?;
            let params = cohort.get(patient).ok_or_else(|| {
                HarnessError::Config(format!(
                    "patient index {patient} out of range (cohort size {})",
                    cohort.len()
                ))
            })?;
            let result = run_trial(&cfg, controller, params, seed)?;
            let dir = cfg.resolve_out_dir(out);
            let stem = format!("trial_p{patient}_{}_s{seed}", controller.label());
            export::write_run_csv(&result.log, &dir.join(format!("{stem}.csv")))?;
            export::write_json(&result.metrics, &dir.join(format!("{stem}_summary.json")))?;
            export::write_json(&result.latency, &dir.join(format!("{stem}_latency.json")))?;
            println!(
                "trial patient={patient} controller={controller} seed={seed}: \
                 sum_abs_error={:.4} m, max_force={:.3} N, failed={}, ticks={}",
                result.metrics.sum_abs_error,
                result.metrics.max_force_norm,
                result.metrics.failed,
                result.metrics.ticks
            );
            println!("wrote {}", dir.join(format!("{stem}.csv")).display());
            Ok(())
        }
        Command::Study { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let dir = cfg.resolve_out_dir(out);
            let output = run_study(&cfg, Some(&dir))?;
            println!(
                "study complete: {} cohort runs (+{} surrogate runs)",
                output.report.total_cohort_runs,
                output.latencies.len() - output.report.total_cohort_runs
            );
            for v in &output.report.variants {
                println!(
                    "  {:<6} error={:?} m (std {:?}), max_force={:?} N, failures={}, \
                     intra={:?}, inter={:?}",
                    v.variant.label(),
                    v.mean_sum_abs_error.map(|x| (x * 100.0).round() / 100.0),
                    v.std_sum_abs_error.map(|x| (x * 100.0).round() / 100.0),
                    v.mean_max_force.map(|x| (x * 100.0).round() / 100.0),
                    v.failures,
                    v.intra_subject_std_error.map(|x| (x * 100.0).round() / 100.0),
                    v.inter_subject_std_error.map(|x| (x * 100.0).round() / 100.0),
                );
            }
            println!("wrote {}", dir.join("summary.json").display());
            Ok(())
        }
        Command::Bench { config, sizes, no_baseline, out } => {
            let cfg = load_config(config.as_ref())?;
            let sizes = parse_sizes(&sizes)?;
            let report = bench::run_bench(&cfg, &sizes, !no_baseline)?;
            for seg in &report.segments {
                println!(
                    "N={:<8} update p50={:.3} ms p99={:.3} ms | predict p50={:.3} ms \
                     p99={:.3} ms | combined p99={:.3} ms max={:.3} ms | over-budget={}",
                    seg.size,
                    seg.stats.update_p50_ms,
                    seg.stats.update_p99_ms,
                    seg.stats.predict_p50_ms,
                    seg.stats.predict_p99_ms,
                    seg.stats.combined_p99_ms,
                    seg.stats.combined_max_ms,
                    seg.stats.over_budget_ticks
                );
            }
            println!("growth ratios between sizes: {:?}", report.growth_ratios);
            if let Some(ms) = report.exact_baseline_ms {
                println!(
                    "exact streaming GP per-tick cost at N={}: {:.1} ms (budget {:.1} ms)",
                    report.segments.last().map_or(0, |s| s.size).min(10_000),
                    ms,
                    report.tick_budget_ms
                );
            }
            let dir = cfg.resolve_out_dir(out);
            export::write_json(&report, &dir.join("bench.json"))?;
            println!("wrote {}", dir.join("bench.json").display());
            Ok(())
        }
        Command::ExportCohort { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let cohort = study_cohort(&cfg)?;
            export::write_json(&cohort, &out)?;
            println!("wrote {} patients to {}", cohort.len(), out.display());
            Ok(())
        }
        Command::ImportCohort { file } => {
            let text = std::fs::read_to_string(&file)?;
            let cohort: Vec<PatientParams> = serde_json::from_str(&text)?;
            if cohort.is_empty() {
                return Err(HarnessError::Config("cohort file contains no patients".into()));
            }
            for (i, p) in cohort.iter().enumerate() {
                let ok = p.stiffness.iter().all(|v| *v >= 0.0)
                    && p.damping.iter().all(|v| *v >= 0.0)
                    && (0.0..=1.0).contains(&p.proficiency)
                    && p.fatigue_timescale > 0.0
                    && p.tremor_amplitude >= 0.0;
                if !ok {
                    return Err(HarnessError::Config(format!("patient {i} out of range")));
                }
            }
            println!(
                "cohort ok: {} patients, dof {}; reference it from a config via \
                 cohort.cohort_file to use it in a study",
                cohort.len(),
                cohort[0].dof()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
