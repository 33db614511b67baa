//! Ablation sweeps: the alpha sweep and the branch sweep
//! (qfl-only / qfl+lqe / qfl+lqe+align), each repeated over seeds, with
//! a mean +/- std summary table and a relative-speed column.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::evaluate::{evaluate_model, FusionOverride, ResultRow, RESULTS_CSV_HEADER};
use super::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    AlphaSweep,
    BranchSweep,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" | "alpha_sweep" => Ok(Self::AlphaSweep),
            "branch" | "branch_sweep" => Ok(Self::BranchSweep),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected alpha or branch)"
            ))),
        }
    }
}

pub const ALPHA_SWEEP_VALUES: [f64; 3] = [0.2, 0.3, 0.4];

/// The sweep's run variants, in row order.
pub fn variants(base: &RunConfig, axis: AblationAxis) -> Vec<RunConfig> {
    match axis {
        AblationAxis::AlphaSweep => ALPHA_SWEEP_VALUES
            .iter()
            .map(|&alpha| {
                let mut cfg = base.clone();
                cfg.name = format!("alpha{alpha:?}");
                cfg.head.alpha = alpha;
                cfg.head.lqe_enabled = true;
                cfg
            })
            .collect(),
        AblationAxis::BranchSweep => {
            let rows: [(&str, bool, bool); 3] = [
                ("qfl", false, false),
                ("qfl_lqe", true, false),
                ("qfl_lqe_align", true, true),
            ];
            rows.iter()
                .map(|&(name, lqe, align)| {
                    let mut cfg = base.clone();
                    cfg.name = name.into();
                    cfg.head.lqe_enabled = lqe;
                    cfg.head.align_enabled = align;
                    // the branch sweep measures branch contributions at
                    // full QE weight; alpha 0.3 compresses the quality
                    // factor below desk-scale seed noise
                    cfg.head.alpha = 1.0;
                    cfg
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub run: String,
    pub alpha: f64,
    pub qfl: bool,
    pub lqe: bool,
    pub align: bool,
    pub seeds: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub ap50_mean: f64,
    pub ap75_mean: f64,
    pub spearman_mean: f64,
    /// Inference throughput relative to the first sweep row.
    pub rel_speed: f64,
}

pub const SUMMARY_CSV_HEADER: &str =
    "run,alpha,qfl,lqe,align,seeds,AP_mean,AP_std,AP50_mean,AP75_mean,spearman_mean,rel_speed";

pub struct AblationOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Train and evaluate every (variant, seed) pair; write `results.csv`
/// and `summary.csv` under `out_root`.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    out_root: &Path,
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_root)?;

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut baseline_speed: Option<f64> = None;

    for variant in variants(base, axis) {
        let mut aps = Vec::new();
        let mut ap50s = Vec::new();
        let mut ap75s = Vec::new();
        let mut spearmans = Vec::new();
        let mut speeds = Vec::new();
        for &seed in seeds {
            let mut cfg = variant.clone();
            cfg.seed = seed;
            cfg.scene.seed = seed;
            let run_dir = out_root.join(format!("{}_s{seed}", cfg.name));
            cfg.out_dir = run_dir.to_string_lossy().into_owned();

            let trained = train(&cfg, &run_dir)?;
            let ckpt = super::checkpoint::read_checkpoint(&trained.checkpoint_path)?;
            let outcome = evaluate_model(&cfg, &ckpt.tensors, FusionOverride::Full)?;

            aps.push(outcome.row.ap);
            ap50s.push(outcome.row.ap50);
            ap75s.push(outcome.row.ap75);
            spearmans.push(outcome.row.spearman);
            speeds.push(outcome.images_per_sec);
            rows.push(outcome.row);
        }
        let speed = mean(&speeds);
        let baseline = *baseline_speed.get_or_insert(speed);
        summary.push(SummaryRow {
            run: variant.name.clone(),
            alpha: variant.head.alpha,
            qfl: true,
            lqe: variant.head.lqe_enabled,
            align: variant.head.align_enabled,
            seeds: seeds.len(),
            ap_mean: mean(&aps),
            ap_std: sample_std(&aps),
            ap50_mean: mean(&ap50s),
            ap75_mean: mean(&ap75s),
            spearman_mean: mean(&spearmans),
            rel_speed: speed / baseline,
        });
    }

    let mut results_text = String::from(RESULTS_CSV_HEADER);
    results_text.push('\n');
    for row in &rows {
        results_text.push_str(&row.csv_line());
        results_text.push('\n');
    }
    let results_csv = out_root.join("results.csv");
    std::fs::write(&results_csv, &results_text)?;

    let mut summary_text = String::from(SUMMARY_CSV_HEADER);
    summary_text.push('\n');
    for s in &summary {
        summary_text.push_str(&format!(
            "{},{:?},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            s.run,
            s.alpha,
            s.qfl,
            s.lqe,
            s.align,
            s.seeds,
            s.ap_mean,
            s.ap_std,
            s.ap50_mean,
            s.ap75_mean,
            s.spearman_mean,
            s.rel_speed
        ));
    }
    let summary_csv = out_root.join("summary.csv");
    std::fs::write(&summary_csv, &summary_text)?;

    Ok(AblationOutcome {
        rows,
        summary,
        results_csv,
        summary_csv,
    })
}
