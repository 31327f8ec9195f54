use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use irlgan_core::ebm::{train_ebm_gan, train_ebm_ml, GeneratorKind, MlTarget};
use irlgan_core::gan::train_gan_irl;
use irlgan_core::gcl::{
    max_theta_divergence, train_gcl, train_maxent_exact, BiasMode, RunStatus, TrainReport, SCHEMA_VERSION,
};
use serde::Serialize;

use crate::config::{to_toml, ConfigError, EbmFile, TrajectoryFile};
use crate::output::{content_hash, write_json, write_metrics};
use crate::{Algorithm, Outcome, TrainArgs};

/// Largest per-iteration parameter gap tolerated between paired GAN and GCL runs.
pub const THETA_MATCH_TOL: f64 = 1e-9;
pub const KL_TARGET: f64 = 1e-2;
pub const ML_GAP_FLOOR: f64 = 0.25;

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub algorithm: String,
    pub seed: u64,
    /// Effective config, TOML; feeding it back to `train` repeats the run.
    pub config: String,
    pub config_hash: String,
    pub metrics_path: String,
    #[serde(flatten)]
    pub status: RunStatus,
    pub iterations: usize,
    pub scalars: BTreeMap<String, f64>,
    pub checks: BTreeMap<String, bool>,
    pub final_params: Vec<f64>,
    pub runtime_secs: f64,
}

enum Failure {
    Config(ConfigError),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<irlgan_core::Error> for Failure {
    fn from(e: irlgan_core::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

struct Run {
    seed: u64,
    echo: String,
    report: TrainReport,
    extra: BTreeMap<String, f64>,
    checks: BTreeMap<String, bool>,
}

pub fn run(args: &TrainArgs, seed: Option<u64>, out: Option<PathBuf>) -> Outcome {
    let clock = Instant::now();
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return Outcome::Usage(format!("cannot read {}: {e}", args.config.display())),
    };
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let run = match execute(args.algorithm, &text, &base, seed) {
        Ok(r) => r,
        Err(Failure::Config(e)) => return Outcome::Usage(format!("{}: {e}", args.config.display())),
        Err(Failure::Run(e)) => {
            eprintln!("run failed: {e}");
            return Outcome::Fail;
        }
    };

    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(args.algorithm.name()));
    let metrics = dir.join("metrics.csv");
    let summary_path = dir.join("summary.json");
    let mut summary = summarize(&run, &metrics);
    if let Err(e) = fs::create_dir_all(&dir).and_then(|_| write_metrics(&metrics, &run.report.rows)) {
        eprintln!("cannot write {}: {e}", metrics.display());
        return Outcome::Fail;
    }
    summary.runtime_secs = clock.elapsed().as_secs_f64();
    if let Err(e) = write_json(&summary_path, &summary) {
        eprintln!("cannot write {}: {e}", summary_path.display());
        return Outcome::Fail;
    }

    println!(
        "{} seed {}: {} iterations, final KL {:.4e}",
        summary.algorithm, summary.seed, summary.iterations, run.report.final_kl
    );
    for (k, v) in &summary.scalars {
        println!("  {k:<24} {v:.6e}");
    }
    for (k, v) in &summary.checks {
        println!("  {k:<24} {}", if *v { "pass" } else { "FAIL" });
    }
    println!("wrote {} and {}", metrics.display(), summary_path.display());
    match &run.report.status {
        RunStatus::Completed => Outcome::Pass,
        RunStatus::Diverged { iteration, reason } => {
            eprintln!("diverged at iteration {iteration}: {reason}");
            Outcome::Fail
        }
    }
}

fn execute(algorithm: Algorithm, text: &str, base: &Path, seed: Option<u64>) -> Result<Run, Failure> {
    let mut extra = BTreeMap::new();
    let mut checks = BTreeMap::new();
    match algorithm {
        Algorithm::GanIrl | Algorithm::Gcl | Algorithm::MaxentExact => {
            let mut file = TrajectoryFile::parse(text)?;
            if let Some(s) = seed {
                file.seed = s;
            }
            let cfg = file.build(text)?;
            let report = match algorithm {
                Algorithm::GanIrl => train_gan_irl(&cfg)?,
                Algorithm::Gcl => train_gcl(&cfg)?,
                _ => train_maxent_exact(&cfg)?,
            };
            if algorithm != Algorithm::MaxentExact {
                if cfg.bias_mode == BiasMode::Pinned {
                    let other = if algorithm == Algorithm::GanIrl {
                        train_gcl(&cfg)?
                    } else {
                        train_gan_irl(&cfg)?
                    };
                    let d = max_theta_divergence(&report, &other);
                    extra.insert("max_theta_divergence".into(), d);
                    checks.insert("theta_matches_paired_run".into(), d < THETA_MATCH_TOL);
                }
                let oracle = train_maxent_exact(&cfg)?;
                extra.insert("oracle_final_kl".into(), oracle.final_kl);
                checks.insert("kl_within_2x_oracle".into(), report.final_kl <= 2.0 * oracle.final_kl);
            }
            checks.insert("kl_below_1e-2".into(), report.final_kl < KL_TARGET);
            Ok(Run {
                seed: file.seed,
                echo: to_toml(&file),
                report,
                extra,
                checks,
            })
        }
        Algorithm::EbmGan | Algorithm::EbmMl => {
            let mut file = EbmFile::parse(text)?;
            if let Some(s) = seed {
                file.seed = s;
            }
            file.inline_table(text, base)?;
            let cfg = file.build(text)?;
            let report = if algorithm == Algorithm::EbmGan {
                train_ebm_gan(&cfg)?
            } else {
                train_ebm_ml(&cfg)?
            };
            if algorithm == Algorithm::EbmGan && cfg.generator == GeneratorKind::Factorized {
                let baseline = train_ebm_ml(&irlgan_core::ebm::EbmConfig {
                    ml_target: MlTarget::Generator,
                    ..cfg.clone()
                })?;
                let ml = baseline.scalars["gap_mass"];
                let adv = report.scalars["gap_mass"];
                extra.insert("ml_gap_mass".into(), ml);
                extra.insert("adversarial_gap_mass".into(), adv);
                checks.insert("ml_gap_mass_at_least_0.25".into(), ml >= ML_GAP_FLOOR);
                checks.insert("adversarial_gap_mass_smaller".into(), adv < ml);
            }
            Ok(Run {
                seed: file.seed,
                echo: to_toml(&file),
                report,
                extra,
                checks,
            })
        }
    }
}

fn summarize(run: &Run, metrics: &Path) -> RunSummary {
    let r = &run.report;
    let mut scalars = r.scalars.clone();
    scalars.insert("final_kl".into(), r.final_kl);
    scalars.insert("final_bias".into(), r.final_bias);
    if let Some(last) = r.rows.last() {
        scalars.insert("final_disc_loss".into(), last.disc_loss);
        scalars.insert("final_gen_loss".into(), last.gen_loss);
        scalars.insert("final_log_z".into(), last.log_z);
        scalars.insert("final_grad_norm".into(), last.grad_norm);
    }
    scalars.extend(run.extra.clone());
    let mut checks = run.checks.clone();
    checks.insert("completed".into(), r.completed());
    RunSummary {
        schema_version: SCHEMA_VERSION,
        algorithm: r.algorithm.clone(),
        seed: run.seed,
        config: run.echo.clone(),
        config_hash: content_hash(&run.echo),
        metrics_path: metrics.display().to_string(),
        status: r.status.clone(),
        iterations: r.rows.len(),
        scalars,
        checks,
        final_params: r.final_params.clone(),
        runtime_secs: 0.0,
    }
}
