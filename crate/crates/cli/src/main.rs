//! `lanekeep` — seeded lane-keeping transfer experiments.
//!
//! Stages write into `<out>/runs/<config-hash>/…`; rerunning a stage from
//! the same config reproduces its artifacts byte for byte.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lanekeep_core::error::Error;
use lanekeep_core::eval::PolicyKind;
use lanekeep_core::pipeline::{self, RunConfig, RunPaths};

#[derive(Parser)]
#[command(name = "lanekeep", version, about = "Lane-keeping transfer pipeline")]
struct Cli {
    /// Configuration file (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; runs land in <out>/runs/<config-hash>.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source/target datasets, alignment frames and histograms.
    GenData,
    /// Train the source network (steering + lane-departure heads).
    TrainSource,
    /// Search the crop-alignment grid against labeled target frames.
    AlignCrop,
    /// Train the gated target head and the from-scratch baseline.
    TrainTarget,
    /// Drive policies around the evaluation courses and build the report.
    DriveEval {
        /// Policies to drive.
        #[arg(long, value_delimiter = ',', default_values_t = [
            "expert".to_string(), "bl".to_string(), "sn".to_string(),
            "prop1".to_string(), "prop2".to_string()
        ])]
        policy: Vec<String>,
        /// Courses to drive (1-4).
        #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4])]
        courses: Vec<u8>,
    },
    /// Rebuild the metrics report from persisted trajectories.
    Report,
    /// Verify analytic gradients against finite differences.
    GradCheck {
        /// Seed for the verification network and probe inputs.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of probe inputs.
        #[arg(long, default_value_t = 3)]
        inputs: usize,
        /// Base finite-difference step.
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Run every stage in order.
    FullPipeline {
        #[arg(long, value_delimiter = ',', default_values_t = [
            "expert".to_string(), "bl".to_string(), "sn".to_string(),
            "prop1".to_string(), "prop2".to_string()
        ])]
        policy: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4])]
        courses: Vec<u8>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e) as u8)
        }
    }
}

fn exit_code_of(e: &anyhow::Error) -> i32 {
    e.downcast_ref::<Error>().map(|e| e.exit_code()).unwrap_or(1)
}

fn policies_of(names: &[String]) -> anyhow::Result<Vec<PolicyKind>> {
    let mut kinds = Vec::new();
    for n in names {
        let kind = PolicyKind::parse(n).map_err(anyhow::Error::from)?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

fn validate_courses(courses: &[u8]) -> anyhow::Result<()> {
    for &c in courses {
        if !(1..=4).contains(&c) {
            return Err(Error::InvalidParameter(format!("course {c} out of range 1-4")).into());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }

    if let Command::GradCheck {
        seed,
        inputs,
        epsilon,
    } = &cli.command
    {
        let err = pipeline::run_grad_check(*seed, *inputs, *epsilon)?;
        println!("grad-check: max relative error {err:.3e} over {inputs} inputs (epsilon {epsilon:.0e})");
        if err >= 1e-4 {
            return Err(Error::NonFiniteGradient {
                name: format!("finite-difference mismatch {err:.3e}"),
            }
            .into());
        }
        return Ok(());
    }

    let hash = cfg.hash();
    let paths = RunPaths::new(&cli.out, &hash);
    let _lock = paths.lock()?;
    paths.write_config(&cfg)?;
    println!("run {hash} -> {}", paths.root.display());

    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, &paths)?;
            print_gen_summary(&s);
        }
        Command::TrainSource => {
            let s = pipeline::train_source(&cfg, &paths)?;
            println!(
                "train-source: {} samples, best cycle {}/{} (val loss {:.6})",
                s.samples, s.best_cycle, s.cycles, s.best_val_loss
            );
        }
        Command::AlignCrop => {
            let s = pipeline::align_crop(&cfg, &paths)?;
            println!(
                "align-crop: best (da={}, db={}) r={:.4} over {} cells (origin r={})",
                s.best.delta_a,
                s.best.delta_b,
                s.best_r,
                s.cells,
                s.origin_r.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into()),
            );
        }
        Command::TrainTarget => {
            let s = pipeline::train_target(&cfg, &paths)?;
            println!(
                "train-target: head best cycle {}/{} (val loss {:.6}, mean gate {:.3}); baseline best cycle {}/{} (val loss {:.6})",
                s.proposed.best_cycle,
                s.proposed.cycles,
                s.proposed.best_val_loss,
                s.mean_gate,
                s.baseline.best_cycle,
                s.baseline.cycles,
                s.baseline.best_val_loss
            );
        }
        Command::DriveEval { policy, courses } => {
            validate_courses(&courses)?;
            let kinds = policies_of(&policy)?;
            let report = pipeline::drive_eval(&cfg, &paths, &kinds, &courses)?;
            print_report(&report);
        }
        Command::Report => {
            let report = pipeline::rebuild_report(&cfg, &paths)?;
            print_report(&report);
        }
        Command::FullPipeline { policy, courses } => {
            validate_courses(&courses)?;
            let kinds = policies_of(&policy)?;
            let s = pipeline::gen_data(&cfg, &paths)?;
            print_gen_summary(&s);
            let s = pipeline::train_source(&cfg, &paths)?;
            println!(
                "train-source: best cycle {}/{} (val loss {:.6})",
                s.best_cycle, s.cycles, s.best_val_loss
            );
            let s = pipeline::align_crop(&cfg, &paths)?;
            println!(
                "align-crop: best (da={}, db={}) r={:.4}",
                s.best.delta_a, s.best.delta_b, s.best_r
            );
            let s = pipeline::train_target(&cfg, &paths)?;
            println!(
                "train-target: head val {:.6}, baseline val {:.6}",
                s.proposed.best_val_loss, s.baseline.best_val_loss
            );
            let report = pipeline::drive_eval(&cfg, &paths, &kinds, &courses)?;
            print_report(&report);
        }
        Command::GradCheck { .. } => unreachable!(),
    }
    Ok(())
}

fn print_gen_summary(s: &pipeline::GenDataSummary) {
    println!(
        "gen-data: {} source samples (hist max/median {:.2}), {} target samples (hist max/median {:.2})",
        s.source_samples, s.source_hist_ratio, s.target_samples, s.target_hist_ratio
    );
    println!(
        "gen-data: {} alignment frames; recovery {}/{} episodes converged, high-|ldl| coverage +{} / -{}",
        s.alignment_frames,
        s.recovery_episodes - s.recovery_dropped,
        s.recovery_episodes,
        s.recovery_high_ldl_pos,
        s.recovery_high_ldl_neg
    );
}

fn print_report(report: &lanekeep_core::eval::MetricsReport) {
    println!("runs: {}", report.runs.len());
    print!("{}", report.table_csv("vyr"));
    print!("{}", report.table_csv("d2gt"));
}
