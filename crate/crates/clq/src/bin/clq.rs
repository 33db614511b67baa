//! Command-line interface: training, evaluation, ablation sweeps,
//! gradient and oracle self-checks, plots, and scene dumps.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clq::error::Error;
use clq::harness::{
    self, evaluate::RESULTS_CSV_HEADER, plot, AblationAxis, FusionOverride, RunConfig,
};

#[derive(Parser)]
#[command(name = "clq", version, about = "IoU-guided quality-estimation detector lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + loss curve CSV.
    Train {
        /// Config document; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config's run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score fusion at inference: full (cls x QE) or cls-only.
        #[arg(long, default_value = "full")]
        fusion: String,
        /// Append the result row to this CSV (header written if new).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep (axis: alpha or branch) over seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every registered op and the
    /// composite loss; exit 1 if any error exceeds 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Randomized equivalence checks against the independent reference
    /// implementations; exit 1 on any mismatch.
    OracleSuite {
        #[arg(long, default_value_t = 99)]
        seed: u64,
    },
    /// Render loss curves and an ablation bar chart to SVG (+ CSV echo).
    Plot {
        #[arg(long)]
        loss: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenes as debug dump files.
    DumpScenes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            RunConfig::parse(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Error> {
    let seeds: Result<Vec<u64>, _> = text
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect();
    let seeds = seeds.map_err(|_| Error::Config(format!("bad seed list {text:?}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.scene.seed = seed;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            cfg.out_dir = out_dir.to_string_lossy().into_owned();
            let outcome = harness::train(&cfg, &out_dir)?;
            let last = outcome.reports.last().expect("at least one iteration");
            println!(
                "trained {} iterations; final L_total {:.6} (N_pos {}); checkpoint {}",
                outcome.reports.len(),
                last.l_total,
                last.n_pos,
                outcome.checkpoint_path.display()
            );
            println!("loss curve: {}", outcome.loss_csv_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            fusion,
            out,
        } => {
            let fusion = match fusion.as_str() {
                "full" => FusionOverride::Full,
                "cls-only" => FusionOverride::ClsOnly,
                other => {
                    return Err(Error::Config(format!(
                        "unknown fusion {other:?} (expected full or cls-only)"
                    )))
                }
            };
            let outcome = harness::evaluate_checkpoint_file(&checkpoint, fusion)?;
            println!("{RESULTS_CSV_HEADER}");
            println!("{}", outcome.row.csv_line());
            if let Some(path) = out {
                append_result_row(&path, &outcome.row)?;
            }
            Ok(())
        }
        Command::Ablate {
            axis,
            seeds,
            config,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let cfg = load_config(&config)?;
            let out_root = out.unwrap_or_else(|| PathBuf::from("runs/ablation"));
            let outcome = harness::run_ablation(&cfg, axis, &seeds, &out_root)?;
            println!("{RESULTS_CSV_HEADER}");
            for row in &outcome.rows {
                println!("{}", row.csv_line());
            }
            println!("results: {}", outcome.results_csv.display());
            println!("summary: {}", outcome.summary_csv.display());
            Ok(())
        }
        Command::Gradcheck { draws, seed } => {
            let mut failed = false;
            for (name, err) in clq::autodiff::gradcheck::run_op_checks(draws, seed)? {
                let ok = err <= 1e-4;
                failed |= !ok;
                println!("{} {name}: max rel err {err:.3e}", if ok { "PASS" } else { "FAIL" });
            }
            let composite_draws = draws.min(20);
            let err = harness::composite_gradcheck(composite_draws, seed)?;
            let ok = err <= 1e-4;
            failed |= !ok;
            println!(
                "{} composite loss through aligned head ({composite_draws} draws): max rel err {err:.3e}",
                if ok { "PASS" } else { "FAIL" }
            );
            if failed {
                return Err(Error::Config("gradient check failed".into()));
            }
            Ok(())
        }
        Command::OracleSuite { seed } => {
            let mut failed = false;
            for check in harness::oracle_suite(seed) {
                failed |= !check.passed;
                println!(
                    "{} {}: {}",
                    if check.passed { "PASS" } else { "FAIL" },
                    check.name,
                    check.detail
                );
            }
            if failed {
                return Err(Error::Config("oracle suite failed".into()));
            }
            Ok(())
        }
        Command::Plot { loss, results, out } => {
            std::fs::create_dir_all(&out)?;
            if loss.is_none() && results.is_none() {
                return Err(Error::Config("plot needs --loss and/or --results".into()));
            }
            if let Some(path) = loss {
                let rows = plot::parse_loss_csv(&std::fs::read_to_string(&path)?)?;
                let svg = plot::loss_curves_svg(&rows);
                let target = out.join("loss_curves.svg");
                std::fs::write(&target, svg)?;
                println!("wrote {}", target.display());
            }
            if let Some(path) = results {
                let text = std::fs::read_to_string(&path)?;
                let rows = plot::parse_results_csv(&text)?;
                let svg = plot::ablation_bars_svg(&rows);
                let target = out.join("ablation.svg");
                std::fs::write(&target, svg)?;
                std::fs::write(out.join("ablation.csv"), text)?;
                println!("wrote {}", target.display());
            }
            Ok(())
        }
        Command::DumpScenes { config, count, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let scene_cfg = cfg.seeded_scene();
            for i in 0..count {
                let scene = clq::synthdata::generate_scene(&scene_cfg, i as u64);
                let text = clq::synthdata::write_scene_dump(&scene, &scene_cfg, i as u64);
                std::fs::write(out.join(format!("scene_{i:05}.txt")), text)?;
            }
            println!("wrote {count} scenes under {}", out.display());
            Ok(())
        }
    }
}

fn append_result_row(path: &Path, row: &clq::harness::ResultRow) -> Result<(), Error> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => format!("{RESULTS_CSV_HEADER}\n"),
    };
    text.push_str(&row.csv_line());
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::ConfigParse { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::StrideMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; exit 1 on any usage error
            // except the help/version pseudo-errors
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
