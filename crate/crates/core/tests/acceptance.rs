//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard criterion fails.

mod common;

use common::{brute_force_recall, random_orthogonal};
use distilvpr::gradcheck::{all_configurations, check_case, random_batches};
use distilvpr::manifold::{hyperbolic_distance, mobius_add, BallPoint};
use distilvpr::numeric::{seeded_rng, Matrix, RngStream};
use distilvpr::relational::{scheme_loss, term_count, DistillConfig, Manifold, Reduction, Scheme};
use distilvpr::toy::{run_experiment, ExperimentConfig, ExperimentReport};
use distilvpr::vpr::{ar_at_one_percent, one_percent_k, recall_at_k, GroundTruth};
use distilvpr::{Curvature, Variant};
use std::process::Command;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn point_in_ball(rng: &mut RngStream, dim: usize, c: Curvature, max_radius: f64) -> BallPoint {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = rng.uniform() * max_radius / c.sqrt();
    BallPoint::new(v.iter().map(|x| x * r / n).collect(), c).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn geometry() -> Outcome {
    const CASES: usize = 1000;
    let start = Instant::now();
    let mut rng = seeded_rng(2024);
    let mut worst = [0.0f64; 5];
    let mut flat_worst: f64 = 0.0;
    for _ in 0..CASES {
        let c = Curvature::new(rng.uniform_range(0.1, 2.0)).unwrap();
        let dim = 1 + rng.below(6);
        let p = point_in_ball(&mut rng, dim, c, 0.95);
        let q = point_in_ball(&mut rng, dim, c, 0.95);
        let origin = BallPoint::origin(dim, c);

        // Identities.
        let e1 = max_abs_diff(mobius_add(&origin, &q).unwrap().coords(), q.coords());
        let e2 = max_abs_diff(mobius_add(&p, &origin).unwrap().coords(), p.coords());
        let e3 = max_abs_diff(mobius_add(&p.neg(), &p).unwrap().coords(), &vec![0.0; dim]);
        worst[0] = worst[0].max(e1).max(e2).max(e3);

        // Collinear oracle.
        let a = rng.uniform_range(-0.95, 0.95) / c.sqrt();
        let b = rng.uniform_range(-0.95, 0.95) / c.sqrt();
        let sum = mobius_add(&BallPoint::new(vec![a], c).unwrap(), &BallPoint::new(vec![b], c).unwrap()).unwrap();
        worst[1] = worst[1].max((sum.coords()[0] - (a + b) / (1.0 + c.value() * a * b)).abs());

        // Distance from the origin.
        let nq = q.coords().iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = 2.0 / c.sqrt() * (c.sqrt() * nq).atanh();
        let got = hyperbolic_distance(&origin, &q).unwrap();
        worst[2] = worst[2].max((got - want).abs() / want.max(1.0));

        // Radial additivity along a diameter.
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let nd = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (mut s1, mut s2) = (rng.uniform() * 0.95, rng.uniform() * 0.95);
        if s1 > s2 {
            std::mem::swap(&mut s1, &mut s2);
        }
        let at = |s: f64| BallPoint::new(dir.iter().map(|x| x / nd * s / c.sqrt()).collect(), c).unwrap();
        let (qq, rr) = (at(s1), at(s2));
        let lhs = hyperbolic_distance(&origin, &rr).unwrap();
        let rhs = hyperbolic_distance(&origin, &qq).unwrap() + hyperbolic_distance(&qq, &rr).unwrap();
        worst[3] = worst[3].max((lhs - rhs).abs());

        // Flat limit.
        let tiny = Curvature::new(1e-6).unwrap();
        let x = point_in_ball(&mut rng, dim, Curvature::new(1.0).unwrap(), 1.0);
        let y = point_in_ball(&mut rng, dim, Curvature::new(1.0).unwrap(), 1.0);
        let de = common::dist_euc(x.coords(), y.coords());
        if de > 1e-9 {
            let dh = hyperbolic_distance(
                &BallPoint::new(x.coords().to_vec(), tiny).unwrap(),
                &BallPoint::new(y.coords().to_vec(), tiny).unwrap(),
            )
            .unwrap();
            flat_worst = flat_worst.max((dh - 2.0 * de).abs() / (2.0 * de));
        }
    }
    worst[4] = flat_worst;
    let elapsed = start.elapsed();
    let pass = worst[0] <= 1e-12
        && worst[1] <= 1e-12
        && worst[2] <= 1e-12
        && worst[3] <= 1e-9
        && worst[4] < 1e-3
        && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "{CASES} cases each; identities {:.1e}, collinear {:.1e}, origin distance {:.1e}, radial {:.1e}, flat limit {:.1e}; {:.2?}",
            worst[0], worst[1], worst[2], worst[3], worst[4], elapsed
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = DistillConfig::default();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for n in [2, 3, 5] {
        for c in [2, 4, 8] {
            for seed in 0..5 {
                let (t, s) = random_batches(n, c, seed);
                for (scheme, m) in all_configurations() {
                    let case = check_case(&t, &s, scheme, m, &cfg).unwrap();
                    count += 1;
                    if case.max_rel_error > worst.0 {
                        worst = (case.max_rel_error, format!("{} N={n} C={c} seed={seed}", case.label()));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{count} cases; max relative error {:.2e} ({}); {:.2?}", worst.0, worst.1, elapsed),
    )
}

fn fixtures() -> Outcome {
    let t = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
    let s = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
    let cfg = DistillConfig::default();
    let kind = Manifold::Euclidean.kind(cfg.curvature);
    let tt_ss = scheme_loss(&t, &s, Scheme::TtSs, kind, &cfg).unwrap().value;
    let ts_ss = scheme_loss(&t, &s, Scheme::TsSs, kind, &cfg).unwrap().value;
    outcome(
        (tt_ss - 0.25).abs() < 1e-12 && (ts_ss - 0.25).abs() < 1e-12,
        format!("tt_ss_euc = {tt_ss}, ts_ss_euc = {ts_ss}"),
    )
}

fn invariance() -> Outcome {
    let cfg = DistillConfig::default();
    let sum_cfg = DistillConfig {
        reduction: Reduction::Sum,
        ..cfg.clone()
    };
    let no_diag = DistillConfig {
        include_diagonal: false,
        ..cfg.clone()
    };
    let no_diag_sum = DistillConfig {
        reduction: Reduction::Sum,
        ..no_diag.clone()
    };
    let value = |t: &Matrix, s: &Matrix, scheme: Scheme, m: Option<Manifold>, cfg: &DistillConfig| {
        scheme_loss(t, s, scheme, m.unwrap_or(Manifold::Euclidean).kind(cfg.curvature), cfg)
            .unwrap()
            .value
    };
    let (mut zero, mut perm, mut rot, mut red) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = seeded_rng(5000 + seed);
        let n = 2 + rng.below(5);
        let c = 1 + rng.below(6);
        let t = rng.normal_matrix(n, c, 1.0);
        let s = rng.normal_matrix(n, c, 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let q = random_orthogonal(c, &mut rng);
        let (tr, sr) = (t.matmul(&q).unwrap(), s.matmul(&q).unwrap());
        for (scheme, m) in all_configurations() {
            zero = zero.max(value(&t, &t, scheme, m, &cfg).abs());
            let v = value(&t, &s, scheme, m, &cfg);
            perm = perm.max((v - value(&t.select_rows(&order), &s.select_rows(&order), scheme, m, &cfg)).abs());
            if scheme != Scheme::Direct {
                rot = rot.max((v - value(&tr, &sr, scheme, m, &cfg)).abs());
            }
            for (mean_cfg, sum_cfg) in [(&cfg, &sum_cfg), (&no_diag, &no_diag_sum)] {
                let count = term_count(scheme, n, c, mean_cfg.include_diagonal) as f64;
                let mean = value(&t, &s, scheme, m, mean_cfg);
                let sum = value(&t, &s, scheme, m, sum_cfg);
                red = red.max((sum - mean * count).abs() / sum.abs().max(1.0));
            }
        }
    }
    outcome(
        zero < 1e-10 && perm < 1e-9 && rot < 1e-9 && red < 1e-12,
        format!(
            "100 random batches x 10 configs; S=T {zero:.1e}, permutation {perm:.1e}, rotation {rot:.1e} (relational schemes), sum vs mean*count {red:.1e}"
        ),
    )
}

fn recall() -> Outcome {
    let mut mismatches = 0;
    let mut comparisons = 0;
    for seed in 0..100 {
        let mut rng = seeded_rng(9000 + seed);
        let nq = 1 + rng.below(20);
        let ndb = 1 + rng.below(200);
        let dim = 1 + rng.below(4);
        // Coarse integer coordinates make distance ties common.
        let mut grid = |rows: usize| {
            let data = (0..rows * dim).map(|_| rng.below(4) as f64).collect();
            Matrix::from_vec(rows, dim, data).unwrap()
        };
        let q = grid(nq);
        let db = grid(ndb);
        let mut positives: Vec<Vec<usize>> = (0..nq)
            .map(|_| (0..ndb).filter(|_| rng.uniform() < 0.05).collect())
            .collect();
        if positives.iter().all(|p| p.is_empty()) {
            positives[0].push(rng.below(ndb));
        }
        let truth = GroundTruth::new(positives.clone());
        for k in 1..=ndb.min(30) {
            comparisons += 1;
            if recall_at_k(&q, &db, &truth, k).unwrap() != brute_force_recall(&q, &db, &positives, k).unwrap() {
                mismatches += 1;
            }
        }
        comparisons += 1;
        let k = ((ndb as f64 * 0.01).round() as usize).max(1);
        if ar_at_one_percent(&q, &db, &truth).unwrap() != brute_force_recall(&q, &db, &positives, k).unwrap() {
            mismatches += 1;
        }
    }
    let rule = [(200, 2), (100, 1), (50, 1)];
    let rule_ok = rule.iter().all(|&(db, k)| one_percent_k(db) == k);
    outcome(
        mismatches == 0 && rule_ok,
        format!("100 instances, {comparisons} exact comparisons, {mismatches} mismatches; k-rule 200->{}, 100->{}, 50->{}", one_percent_k(200), one_percent_k(100), one_percent_k(50)),
    )
}

fn toy() -> (Outcome, Outcome) {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();

    let mut decreasing = true;
    let mut strict_early = true;
    for run in &report.runs {
        let first = &run.epochs[0];
        let last = run.epochs.last().unwrap();
        decreasing &= last.total < first.total && last.task_loss < first.task_loss;
        strict_early &= run.epochs.windows(2).take(10).all(|w| w[1].total < w[0].total);
    }

    let zero_cfg = ExperimentConfig {
        distill: DistillConfig {
            lambda_s: 0.0,
            lambda_c: 0.0,
            ..cfg.distill.clone()
        },
        variants: vec![Variant::SC],
        ..cfg.clone()
    };
    let zero = run_experiment(&zero_cfg).unwrap();
    let baseline: Vec<_> = report.runs.iter().filter(|r| r.variant == Variant::None).collect();
    let bit_exact = baseline.len() == zero.runs.len()
        && baseline.iter().zip(&zero.runs).all(|(a, b)| {
            a.final_params == b.final_params
                && a.recall == b.recall
                && a.epochs.iter().zip(&b.epochs).all(|(x, y)| x.task_loss.to_bits() == y.task_loss.to_bits())
        });

    let hard = outcome(
        decreasing && strict_early && bit_exact && elapsed < Duration::from_secs(300),
        format!(
            "{} runs; loss decreases epoch 0 -> final: {decreasing}; strictly over first 10 epochs: {strict_early}; lambda=0 bit-exact baseline: {bit_exact}; {:.2?}",
            report.runs.len(),
            elapsed
        ),
    );
    (hard, soft_check(&report))
}

fn soft_check(report: &ExperimentReport) -> Outcome {
    let summary = report.summary();
    let mean = |v: Variant| summary.iter().find(|s| s.variant == v).unwrap().mean_ar1;
    let table: Vec<String> = summary
        .iter()
        .map(|s| format!("{} {:.2}+-{:.2}", s.variant, s.mean_ar1, s.std_ar1))
        .collect();
    outcome(
        mean(Variant::SC) >= mean(Variant::None),
        format!(
            "mean final AR@1: {}; teacher {:.2}, raw input {:.2}",
            table.join(", "),
            report.teacher_recall.ar_at_1,
            report.input_recall.ar_at_1
        ),
    )
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_distilvpr");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let toy = |out: &std::path::Path| run(&["toy", "--seeds", "7", "--out", out.to_str().unwrap()]);
    let (ta, tb) = (toy(&a), toy(&b));
    let toy_same = ta.status.success()
        && ta.stdout == tb.stdout
        && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let ga = run(&["gradcheck", "--seed", "3"]);
    let gb = run(&["gradcheck", "--seed", "3"]);
    let grad_same = ga.status.success() && ga.stdout == gb.stdout;
    outcome(
        toy_same && grad_same,
        format!("toy --seeds 7 CSV and summary identical: {toy_same}; gradcheck --seed 3 output identical: {grad_same}"),
    )
}

fn main() {
    let mut hard_failures = 0;
    let mut report = |name: &str, o: Outcome, hard: bool| {
        let verdict = match (o.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL (reported only)",
        };
        println!("[{verdict}] {name}: {}", o.detail);
        if hard && !o.pass {
            hard_failures += 1;
        }
    };
    report("geometry oracle suite", geometry(), true);
    report("gradient check", gradients(), true);
    report("hand-computed fixtures", fixtures(), true);
    report("invariance suite", invariance(), true);
    report("recall oracle", recall(), true);
    let (hard, soft) = toy();
    report("toy experiment (hard)", hard, true);
    report("toy experiment (soft: SC >= none)", soft, false);
    report("determinism", determinism(), true);
    if hard_failures > 0 {
        println!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all hard acceptance criteria passed");
}
