//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. The branch ablation is shared between the ranking-order and
//! consistency criteria and runs the documented fallback protocol: three
//! seeds first, five when an ordering fails, deciding on the sign of the
//! mean delta.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use clq::autodiff::gradcheck::run_op_checks;
use clq::autodiff::{grad_check, Tensor};
use clq::geometry::BBox;
use clq::harness::{
    self, run_ablation, AblationAxis, FusionOverride, ResultRow, RunConfig,
};
use clq::losses;
use clq::rng::KeyedRng;

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

const GRAD_TOL: f64 = 1e-4;

// ---- criterion 1: gradient fidelity -------------------------------------

#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();
    let mut worst_named: Vec<(String, f64)> = Vec::new();

    for (name, err) in run_op_checks(100, 20_240).unwrap() {
        worst_named.push((format!("op {name}"), err));
    }

    // the three training losses (LQE BCE, QFL, GIoU through decode) at
    // 100 random draws each
    let mut rng = KeyedRng::new(51, 0, "loss-fd");
    let mut lqe_worst = 0.0f64;
    let mut qfl_worst = 0.0f64;
    let mut giou_worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.range_usize(1, 6);
        let p = Tensor::from_values(&[n], (0..n).map(|_| rng.range_f64(0.05, 0.95)).collect())
            .unwrap();
        let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        lqe_worst = lqe_worst.max(grad_check(|| losses::lqe_loss(&p, &t, n), &[&p], 1e-4).unwrap());

        let m = rng.range_usize(2, 8);
        let sigma = Tensor::from_values(&[m], (0..m).map(|_| rng.range_f64(0.05, 0.95)).collect())
            .unwrap();
        let y: Vec<f64> = (0..m)
            .map(|_| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() })
            .collect();
        qfl_worst =
            qfl_worst.max(grad_check(|| losses::qfl(&sigma, &y, 2.0, 2), &[&sigma], 1e-4).unwrap());

        let k = rng.range_usize(1, 4);
        let anchors: Vec<BBox> = (0..k)
            .map(|_| {
                let x = rng.range_f64(0.0, 30.0);
                let y = rng.range_f64(0.0, 30.0);
                BBox::new(x, y, x + rng.range_f64(10.0, 24.0), y + rng.range_f64(10.0, 24.0))
                    .unwrap()
            })
            .collect();
        let dvals: Vec<f64> = (0..4 * k).map(|_| rng.range_f64(-0.3, 0.3)).collect();
        let deltas = Tensor::from_values(&[4, k], dvals).unwrap();
        let base = losses::decode_deltas_graph(&deltas, &anchors).unwrap();
        let targets: Vec<BBox> = (0..k)
            .map(|i| {
                let sign = |r: &mut KeyedRng| if r.uniform() < 0.5 { -1.0 } else { 1.0 };
                let sx = sign(&mut rng) * rng.range_f64(1.0, 2.5);
                let sy = sign(&mut rng) * rng.range_f64(1.0, 2.5);
                let grow = rng.range_f64(0.6, 1.4);
                BBox::new(
                    base.x1.values()[i] + sx,
                    base.y1.values()[i] + sy,
                    base.x2.values()[i] + sx + grow,
                    base.y2.values()[i] + sy + grow,
                )
                .unwrap()
            })
            .collect();
        giou_worst = giou_worst.max(
            grad_check(
                || losses::giou_loss(&losses::decode_deltas_graph(&deltas, &anchors)?, &targets, k),
                &[&deltas],
                1e-4,
            )
            .unwrap(),
        );
    }
    worst_named.push(("lqe bce loss".into(), lqe_worst));
    worst_named.push(("quality focal loss".into(), qfl_worst));
    worst_named.push(("giou loss through decode".into(), giou_worst));

    // weighted total loss through trunk + aligned head
    let composite = harness::composite_gradcheck(100, 20_241).unwrap();
    worst_named.push(("composite total loss through aligned head".into(), composite));

    let elapsed = started.elapsed().as_secs_f64();
    let failed: Vec<&(String, f64)> = worst_named.iter().filter(|(_, e)| *e > GRAD_TOL).collect();
    let overall = worst_named
        .iter()
        .map(|(_, e)| *e)
        .fold(0.0f64, f64::max);
    let pass = failed.is_empty() && elapsed <= 120.0;
    println!(
        "ACCEPTANCE 1 {}: gradient fidelity, {} checks x 100 draws, max rel err {overall:.3e} (tol {GRAD_TOL:.0e}), {elapsed:.1}s (budget 120s)",
        if pass { "PASS" } else { "FAIL" },
        worst_named.len()
    );
    for (name, err) in &worst_named {
        assert!(*err <= GRAD_TOL, "{name}: {err:.3e} exceeds {GRAD_TOL}");
    }
    assert!(elapsed <= 120.0, "criterion 1 runtime {elapsed:.1}s over budget");
}

// ---- criterion 2: oracle equivalence -------------------------------------

#[test]
fn criterion_2_oracle_equivalence() {
    let started = Instant::now();
    let checks = harness::oracle_suite(424_242);
    let elapsed = started.elapsed().as_secs_f64();
    let all_pass = checks.iter().all(|c| c.passed);
    let pass = all_pass && elapsed <= 120.0;
    println!(
        "ACCEPTANCE 2 {}: oracle equivalence ({} checks), {elapsed:.1}s (budget 120s)",
        if pass { "PASS" } else { "FAIL" },
        checks.len()
    );
    for c in &checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(elapsed <= 120.0, "criterion 2 runtime {elapsed:.1}s over budget");
}

// ---- criterion 3: analytic fixtures --------------------------------------

#[test]
fn criterion_3_analytic_fixtures() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    let iou_fixture = clq::geometry::iou(&a, &b);
    assert!((iou_fixture - 1.0 / 7.0).abs() < 1e-12);

    let c = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let d = BBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
    let giou_fixture = clq::geometry::giou(&c, &d).unwrap();
    assert!((giou_fixture - (-7.0 / 9.0)).abs() < 1e-12);

    let qe = clq::head::qe_score(&Tensor::from_values(&[2], vec![0.0, 1.0]).unwrap(), 0.3);
    assert_eq!(qe.values(), vec![0.0, 1.0]);

    let p = Tensor::from_values(&[1], vec![0.7]).unwrap();
    let bce = losses::lqe_loss(&p, &[0.7], 1).unwrap().scalar_value();
    assert!((bce - 0.61086).abs() <= 1e-5);

    println!(
        "ACCEPTANCE 3 PASS: analytic fixtures (iou 1/7 = {iou_fixture:.7}, giou -7/9 = {giou_fixture:.7}, QE endpoints, soft BCE {bce:.5})"
    );
}

// ---- criteria 4 and 5 share the branch ablation ---------------------------

struct BranchData {
    seeds_used: Vec<u64>,
    escalated: bool,
    rows: Vec<ResultRow>,
    primary_wall_secs: f64,
}

fn mean_of(rows: &[ResultRow], run: &str, f: impl Fn(&ResultRow) -> f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.run == run).map(&f).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn branch_data() -> &'static BranchData {
    static DATA: OnceLock<BranchData> = OnceLock::new();
    DATA.get_or_init(|| {
        let base = RunConfig::default();
        let primary_seeds = vec![1u64, 2, 3];
        let started = Instant::now();
        let first = run_ablation(
            &base,
            AblationAxis::BranchSweep,
            &primary_seeds,
            &tmp("acceptance_branch"),
        )
        .unwrap();
        let primary_wall_secs = started.elapsed().as_secs_f64();

        let ordered = |rows: &[ResultRow]| {
            let qfl = mean_of(rows, "qfl", |r| r.ap);
            let lqe = mean_of(rows, "qfl_lqe", |r| r.ap);
            let align = mean_of(rows, "qfl_lqe_align", |r| r.ap);
            lqe > qfl && align > lqe
        };

        if ordered(&first.rows) {
            return BranchData {
                seeds_used: primary_seeds,
                escalated: false,
                rows: first.rows,
                primary_wall_secs,
            };
        }

        // fallback protocol: extend to five seeds, decide on the sign of
        // the mean delta
        let extra = run_ablation(
            &base,
            AblationAxis::BranchSweep,
            &[4, 5],
            &tmp("acceptance_branch_extra"),
        )
        .unwrap();
        let mut rows = first.rows;
        rows.extend(extra.rows);
        BranchData {
            seeds_used: vec![1, 2, 3, 4, 5],
            escalated: true,
            rows,
            primary_wall_secs,
        }
    })
}

#[test]
fn criterion_4_branch_ablation_ordering() {
    let data = branch_data();
    let qfl = mean_of(&data.rows, "qfl", |r| r.ap);
    let lqe = mean_of(&data.rows, "qfl_lqe", |r| r.ap);
    let align = mean_of(&data.rows, "qfl_lqe_align", |r| r.ap);
    let pass = lqe > qfl && align > lqe && data.primary_wall_secs <= 1800.0;
    println!(
        "ACCEPTANCE 4 {}: branch ablation over {} seeds{}: mean AP qfl {qfl:.4} < qfl+lqe {lqe:.4} < qfl+lqe+align {align:.4}; primary sweep {:.0}s (budget 1800s)",
        if pass { "PASS" } else { "FAIL" },
        data.seeds_used.len(),
        if data.escalated { " (escalated to 5-seed sign-of-mean fallback)" } else { "" },
        data.primary_wall_secs,
    );
    assert!(
        lqe > qfl,
        "mean AP(qfl+lqe) {lqe:.4} must exceed mean AP(qfl) {qfl:.4} over seeds {:?}",
        data.seeds_used
    );
    assert!(
        align > lqe,
        "mean AP(qfl+lqe+align) {align:.4} must exceed mean AP(qfl+lqe) {lqe:.4} over seeds {:?}",
        data.seeds_used
    );
    assert!(
        data.primary_wall_secs <= 1800.0,
        "branch sweep took {:.0}s",
        data.primary_wall_secs
    );
}

#[test]
fn criterion_5_score_iou_consistency() {
    let data = branch_data();
    let qfl = mean_of(&data.rows, "qfl", |r| r.spearman);
    let lqe = mean_of(&data.rows, "qfl_lqe", |r| r.spearman);
    let pass = lqe > qfl;
    println!(
        "ACCEPTANCE 5 {}: mean Spearman(score, true IoU) qfl+lqe {lqe:.4} vs qfl-only {qfl:.4} over {} seeds",
        if pass { "PASS" } else { "FAIL" },
        data.seeds_used.len()
    );
    assert!(
        lqe > qfl,
        "qfl+lqe Spearman {lqe:.4} must exceed qfl-only {qfl:.4} over seeds {:?}",
        data.seeds_used
    );
}

// ---- criterion 6: alpha sweep ---------------------------------------------

#[test]
fn criterion_6_alpha_sweep() {
    // one row per (alpha, seed) at the default benchmark
    let base = RunConfig::default();
    let outcome = run_ablation(&base, AblationAxis::AlphaSweep, &[1], &tmp("acceptance_alpha"))
        .unwrap();
    assert_eq!(outcome.rows.len(), 3, "one row per (alpha, seed)");
    let alphas: Vec<f64> = outcome.rows.iter().map(|r| r.alpha).collect();
    assert_eq!(alphas, vec![0.2, 0.3, 0.4]);
    let seen: Vec<(f64, u64)> = outcome.rows.iter().map(|r| (r.alpha, r.seed)).collect();
    let mut dedup = seen.clone();
    dedup.dedup();
    assert_eq!(seen, dedup, "no duplicate (alpha, seed) rows");

    // byte-level determinism of the sweep, shown on a reduced benchmark
    let mut small = RunConfig::default();
    small.train_scenes = 48;
    small.val_scenes = 24;
    small.optim.iterations = 40;
    small.optim.warmup_iters = 5;
    small.optim.lr_decay_steps = vec![32];
    let a = run_ablation(&small, AblationAxis::AlphaSweep, &[7, 8], &tmp("acceptance_alpha_a"))
        .unwrap();
    let b = run_ablation(&small, AblationAxis::AlphaSweep, &[7, 8], &tmp("acceptance_alpha_b"))
        .unwrap();
    let bytes_a = std::fs::read(&a.results_csv).unwrap();
    let bytes_b = std::fs::read(&b.results_csv).unwrap();
    assert_eq!(bytes_a, bytes_b, "alpha sweep must be deterministic");
    assert_eq!(a.rows.len(), 6);

    println!(
        "ACCEPTANCE 6 PASS: alpha sweep emitted one row per (alpha, seed) at alphas {:?} (APs {:?}); reduced sweep byte-identical across reruns",
        alphas,
        outcome.rows.iter().map(|r| (r.alpha, (r.ap * 1e4).round() / 1e4)).collect::<Vec<_>>()
    );
}

// ---- criterion 7: parameter census ----------------------------------------

#[test]
fn criterion_7_lqe_parameter_census() {
    use clq::autodiff::ParamSet;
    use clq::head::{DetectionHead, HeadConfig};

    for width in [4usize, 16, 24] {
        let mut with = HeadConfig::default();
        with.channel_width = width;
        with.lqe_enabled = true;
        let mut without = with.clone();
        without.lqe_enabled = false;

        let count = |cfg: &HeadConfig| {
            let mut params = ParamSet::new();
            let mut rng = KeyedRng::new(9, 0, "census");
            DetectionHead::new(cfg, &mut params, &mut rng).unwrap();
            params.total_scalars()
        };
        let delta = count(&with) - count(&without);
        assert_eq!(
            delta,
            width + 1,
            "LQE must add exactly channels+1 parameters at width {width}"
        );
    }
    println!("ACCEPTANCE 7 PASS: enabling LQE adds exactly channels+1 parameters (one 1x1 projection + bias)");
}

// ---- criterion 8: determinism ----------------------------------------------

#[test]
fn criterion_8_bytewise_determinism() {
    let mut cfg = RunConfig::default();
    cfg.name = "determinism".into();
    cfg.seed = 77;
    cfg.scene.seed = 77;
    cfg.train_scenes = 64;
    cfg.val_scenes = 32;
    cfg.optim.iterations = 120;
    cfg.optim.warmup_iters = 20;
    cfg.optim.lr_decay_steps = vec![100];
    assert!(cfg.deterministic);

    let run = |dir: &str| {
        let out = tmp(dir);
        let trained = harness::train(&cfg, &out).unwrap();
        let loss_bytes = std::fs::read(&trained.loss_csv_path).unwrap();
        let ckpt = harness::read_checkpoint(&trained.checkpoint_path).unwrap();
        let outcome = harness::evaluate_model(&cfg, &ckpt.tensors, FusionOverride::Full).unwrap();
        (loss_bytes, outcome.row.csv_line())
    };
    let (loss_a, row_a) = run("det_a");
    let (loss_b, row_b) = run("det_b");
    let pass = loss_a == loss_b && row_a == row_b;
    println!(
        "ACCEPTANCE 8 {}: two train+evaluate runs produced byte-identical loss CSVs ({} bytes) and result rows ({row_a})",
        if pass { "PASS" } else { "FAIL" },
        loss_a.len()
    );
    assert_eq!(loss_a, loss_b, "loss CSVs must match byte for byte");
    assert_eq!(row_a, row_b, "result rows must match byte for byte");
}

// ---- sanity ceiling (synthdata property; expensive, opt-in) ----------------

/// With zero texture noise and no occlusion a trained model must clear
/// AP50 0.9. Run with: cargo test -p clq --test acceptance -- --ignored
#[test]
#[ignore = "several CPU-minutes; sanity ceiling from the pilot run"]
fn sanity_ceiling_noise_free_ap50() {
    let mut cfg = RunConfig::default();
    cfg.name = "ceiling".into();
    cfg.scene.noise_sigma = 0.0;
    cfg.scene.occlusion = false;
    cfg.head.alpha = 1.0;
    cfg.train_scenes = 800;
    cfg.val_scenes = 200;
    let out = tmp("ceiling");
    let trained = harness::train(&cfg, &out).unwrap();
    let ckpt = harness::read_checkpoint(&trained.checkpoint_path).unwrap();
    let outcome = harness::evaluate_model(&cfg, &ckpt.tensors, FusionOverride::Full).unwrap();
    println!("sanity ceiling: AP50 {:.4}", outcome.row.ap50);
    assert!(outcome.row.ap50 > 0.9, "AP50 {} below the 0.9 ceiling", outcome.row.ap50);
}
