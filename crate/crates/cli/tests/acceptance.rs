//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails. `ACCEPTANCE_ONLY=4,5` runs a subset.

use std::process::ExitCode;
use std::time::Instant;

use pntk::active::{self, Acquisition, LookaheadOptions};
use pntk::data::{self, LabeledSet};
use pntk::linalg::{self, Matrix, SymmetricMatrix};
use pntk::net::{Activation, Init, Network, NetworkSpec, Parameterization};
use pntk::ntk::{self, KernelConfig, PntkMode};
use pntk::regress::{self, Jitter, RegressionProblem};
use pntk_cli::commands::{self, REGRESS_SLOPE_BAND};
use pntk_cli::config::{AcquisitionChoice, ExperimentConfig};
use pntk_cli::Artifacts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn spec(d: usize, width: usize, o: usize, act: Activation, seed: u64) -> NetworkSpec {
    NetworkSpec {
        input_dim: d,
        hidden_widths: vec![width, width],
        output_dim: o,
        activation: act,
        init: Init::HeFanInGaussian,
        parameterization: Parameterization::Standard,
        seed,
    }
}

fn inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
    let d: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    max_abs(&d) / max_abs(b.as_slice()).max(1e-300)
}

fn quadratic_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let o = [2, 5, 10][case % 3];
        let width = [16, 64, 256][(case / 3) % 3];
        let net = Network::new(spec(8, width, o, Activation::Relu, 1000 + case as u64)).unwrap();
        let x = inputs(2, 8, &mut rng);
        let theta = ntk::entk_block(&net, x.row(0), x.row(1)).unwrap();
        let modes = [PntkMode::SumOfLogits, PntkMode::SingleLogit(case % o)];
        for mode in modes {
            let v = mode.readout(o).unwrap();
            let q = linalg::dot(&v, &theta.matvec(&v).unwrap());
            let p = ntk::pntk(&net, x.row(0), x.row(1), mode).unwrap();
            worst = worst.max((p - q).abs() / q.abs().max(1e-300));
        }
    }
    (worst <= 1e-10, format!("max relative gap {worst:.2e} over 100 cases (tol 1e-10)"))
}

fn jacobian_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for n in 0..20u64 {
        let width = [16, 32, 48, 64][n as usize % 4];
        let act = if n % 2 == 0 {
            Activation::Gelu
        } else {
            Activation::LeakyRelu { slope: 0.1 }
        };
        let net = Network::new(spec(6, width, 5, act, 2000 + n)).unwrap();
        let x = inputs(1, 6, &mut rng);
        let jac = net.jacobian(x.row(0)).unwrap();
        let theta = net.flat_params();
        let h = 1e-3;
        let mut probe = net.clone();
        let mut at = |k: usize, step: f64| {
            let mut t = theta.clone();
            t[k] += step;
            probe.set_flat_params(&t).unwrap();
            probe.output(x.row(0)).unwrap()
        };
        for _ in 0..50 {
            let k = rng.gen_range(0..theta.len());
            let (p2, p1, m1, m2) = (at(k, 2.0 * h), at(k, h), at(k, -h), at(k, -2.0 * h));
            // Five-point stencil, O(h^4).
            let fd: Vec<f64> = (0..5)
                .map(|a| (-p2[a] + 8.0 * p1[a] - 8.0 * m1[a] + m2[a]) / (12.0 * h))
                .collect();
            let an: Vec<f64> = (0..5).map(|a| jac.get(a, k)).collect();
            let diff: Vec<f64> = fd.iter().zip(&an).map(|(a, b)| a - b).collect();
            let norm = linalg::dot(&an, &an).sqrt();
            if norm > 0.0 {
                worst = worst.max(linalg::dot(&diff, &diff).sqrt() / norm);
            }
        }
    }
    (worst <= 1e-5, format!("max relative column error {worst:.2e} over 20 nets x 50 coordinates (tol 1e-5)"))
}

fn first_layer_diagonality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::new(NetworkSpec {
        hidden_widths: vec![],
        ..spec(7, 1, 10, Activation::Relu, 3)
    })
    .unwrap();
    let x = inputs(12, 7, &mut rng);
    let g = ntk::entk_gram(&net, &x, &KernelConfig::default()).unwrap();
    let mut nonzero = 0;
    let mut checked = 0;
    for i in 0..12 {
        for j in 0..12 {
            let b = g.block(i, j);
            let direct = ntk::entk_block(&net, x.row(i), x.row(j)).unwrap();
            for a in 0..10 {
                for c in 0..10 {
                    if a != c {
                        checked += 2;
                        nonzero += (b.get(a, c) != 0.0) as usize + (direct.get(a, c) != 0.0) as usize;
                    }
                }
            }
        }
    }
    (nonzero == 0, format!("{nonzero} nonzero of {checked} off-diagonal entries at O = 10"))
}

fn sweep_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.widths = vec![64, 128, 256, 512, 1024];
    cfg.sweep.seeds = vec![0, 1, 2, 3, 4];
    cfg.sweep.checkpoints = vec![0];
    cfg.sweep.points = 100;
    cfg
}

fn frobenius_and_eig_sweep() -> (Outcome, Outcome) {
    let report = commands::cmd_sweep(&sweep_config(), &mut Artifacts::disabled("sweep")).unwrap();
    let fro = report.fit("rel_frobenius_diff", 0).unwrap();
    let eig = report.fit("rel_eig_diff_max", 0).unwrap();
    let tracked: Vec<String> = ["rel_eig_diff_min", "rel_eig_diff_cond"]
        .iter()
        .filter_map(|m| report.fit(m, 0))
        .map(|f| format!("{} slope {:.3}", f.metric, f.slope))
        .collect();
    (
        (
            fro.in_band && fro.r2 >= 0.8,
            format!("slope {:.3} in [-0.8, -0.3], r2 {:.3} (>= 0.8); means {:?}", fro.slope, fro.r2, fro.means),
        ),
        (
            eig.in_band,
            format!(
                "slope {:.3} in [-0.8, -0.3], r2 {:.3}; tracked: {}",
                eig.slope,
                eig.r2,
                tracked.join(", ")
            ),
        ),
    )
}

fn regression_convergence() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.classes = 5;
    cfg.data.per_class = 60;
    cfg.data.train_n = 200;
    cfg.data.test_n = 100;
    cfg.sweep.widths = vec![64, 256, 1024];
    cfg.sweep.seeds = vec![0, 1, 2, 3, 4];
    cfg.sweep.checkpoints = vec![0];
    let report = commands::cmd_regress(&cfg, &mut Artifacts::disabled("regress")).unwrap();
    let fit = report.fit("rel_prediction_diff", 0).unwrap();
    let decreasing = fit.means.windows(2).all(|w| w[1] < w[0]);
    let (lo, hi) = REGRESS_SLOPE_BAND;
    (
        decreasing && fit.slope >= lo && fit.slope <= hi,
        format!(
            "means {:?} strictly decreasing: {decreasing}; slope {:.3} in [{lo}, {hi}]",
            fit.means, fit.slope
        ),
    )
}

fn single_output_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = KernelConfig::default();
    let net = Network::new(spec(5, 32, 1, Activation::Relu, 7)).unwrap();
    let x = inputs(20, 5, &mut rng);
    let e = ntk::entk_gram(&net, &x, &cfg).unwrap();
    let p = ntk::pntk_matrix(&net, &x, &x, PntkMode::SumOfLogits, &cfg).unwrap();
    let gram = max_rel(p.matrix(), e.matrix());

    let labels: Vec<usize> = (0..20).map(|_| 0).collect();
    let prob = RegressionProblem::new(x.clone(), data::one_hot(&labels, 1), inputs(8, 5, &mut rng)).unwrap();
    let pe = regress::predict_entk(&net, &prob, &cfg).unwrap();
    let pp = regress::predict_pntk(&net, &prob, PntkMode::SumOfLogits, &cfg).unwrap();
    let pred = max_rel(&pp.predictions, &pe.predictions);

    let lab = LabeledSet::new(x, labels, 1, "acceptance").unwrap();
    let pool = inputs(10, 5, &mut rng);
    let reference = inputs(6, 5, &mut rng);
    let opts = LookaheadOptions::default();
    let se = active::lookahead_scores(&net, &lab, &pool, &reference, Acquisition::Entk, &opts).unwrap();
    let sp = active::lookahead_scores(
        &net,
        &lab,
        &pool,
        &reference,
        Acquisition::Pntk(PntkMode::SumOfLogits),
        &opts,
    )
    .unwrap();
    let diff: Vec<f64> = se.scores.iter().zip(&sp.scores).map(|(a, b)| a - b).collect();
    let scores = max_abs(&diff) / max_abs(&se.scores);
    let worst = gram.max(pred).max(scores);
    (
        worst <= 1e-10,
        format!("gram {gram:.1e}, predictions {pred:.1e}, scores {scores:.1e} (tol 1e-10)"),
    )
}

/// Lower Cholesky factor, textbook loop.
fn cholesky(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    l
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l.get(i, k) * y[k];
        }
        y[i] /= l.get(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l.get(k, i) * y[k];
        }
        y[i] /= l.get(i, i);
    }
    y
}

fn kronecker_route() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = KernelConfig::default();
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let o = 2 + (case as usize % 5);
        let (n, m, d) = (6 + case as usize % 4, 4, 5);
        let net = Network::new(spec(d, 24, o, Activation::Gelu, 800 + case)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..o)).collect();
        let mut prob =
            RegressionProblem::new(inputs(n, d, &mut rng), data::one_hot(&labels, o), inputs(m, d, &mut rng))
                .unwrap();
        prob.jitter = Jitter::Absolute(0.0);
        let got = regress::predict_pntk(&net, &prob, PntkMode::SumOfLogits, &cfg).unwrap();

        let k = ntk::pntk_matrix(&net, &prob.train_inputs, &prob.train_inputs, PntkMode::SumOfLogits, &cfg)
            .unwrap();
        let kx = ntk::pntk_matrix(&net, &prob.test_inputs, &prob.train_inputs, PntkMode::SumOfLogits, &cfg)
            .unwrap();
        let lift = |km: &Matrix| {
            Matrix::from_fn(km.rows() * o, km.cols() * o, |r, c| {
                if r % o == c % o {
                    km.get(r / o, c / o)
                } else {
                    0.0
                }
            })
        };
        let (big, bigx) = (lift(k.matrix()), lift(kx.matrix()));
        let f_train = net.outputs(&prob.train_inputs).unwrap();
        let f_test = net.outputs(&prob.test_inputs).unwrap();
        let resid: Vec<f64> = (0..n * o)
            .map(|r| prob.train_targets.get(r / o, r % o) - f_train.get(r / o, r % o))
            .collect();
        let alpha = cholesky_solve(&cholesky(&big), &resid);
        let fit = bigx.matvec(&alpha).unwrap();
        let expected = Matrix::from_fn(m, o, |i, a| f_test.get(i, a) + fit[i * o + a]);
        worst = worst.max(max_rel(&got.predictions, &expected));
    }
    (worst <= 1e-10, format!("max relative gap {worst:.2e} over 20 instances (tol 1e-10)"))
}

fn resource_arithmetic() -> Outcome {
    let r = commands::cmd_estimate(50000, 10, 8, &mut Artifacts::disabled("estimate")).unwrap();
    let (tb, tib) = (r.entk_terabytes(), r.entk_tebibytes());
    let (gb, gib) = (r.pntk_gigabytes(), r.pntk_gibibytes());
    let inside = |v: f64, lo: f64, hi: f64| v >= lo && v <= hi;
    (
        inside(tb, 1.8, 2.1) && inside(tib, 1.8, 2.1) && inside(gb, 18.0, 21.0) && inside(gib, 18.0, 21.0),
        format!("eNTK {tb:.3} TB / {tib:.3} TiB in [1.8, 2.1]; pNTK {gb:.3} GB / {gib:.3} GiB in [18, 21]"),
    )
}

fn performance_ordering() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.bench.points = vec![200];
    cfg.bench.outputs = vec![10];
    cfg.bench.widths = vec![256];
    cfg.bench.warmup = 1;
    cfg.bench.repetitions = 5;
    let report = commands::cmd_bench(&cfg, &mut Artifacts::disabled("bench")).unwrap();
    let c = &report.cells[0];
    (
        c.ratio <= 0.2,
        format!(
            "median eNTK {:.3}s, pNTK {:.4}s, ratio {:.4} (<= 0.2)",
            c.entk_median, c.pntk_median, c.ratio
        ),
    )
}

fn accuracy_parity() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_n = 1000;
    cfg.data.test_n = 500;
    cfg.sweep.widths = vec![128];
    cfg.sweep.seeds = vec![0];
    cfg.sweep.checkpoints = vec![0];
    let report = commands::cmd_regress(&cfg, &mut Artifacts::disabled("regress")).unwrap();
    let get = |m: &str| report.records.iter().find(|r| r.metric == m).unwrap().value;
    let (e, p) = (get("entk_accuracy"), get("pntk_accuracy"));
    (p >= e - 0.02, format!("pNTK accuracy {p:.4} vs eNTK {e:.4} (floor eNTK - 0.02)"))
}

fn active_learning() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.net.width = 128;
    cfg.active.pool = 500;
    cfg.active.initial_labeled = 100;
    cfg.active.cycles = 5;
    cfg.active.per_cycle = 20;
    cfg.active.acquisitions = vec![AcquisitionChoice::Pntk, AcquisitionChoice::Entk];
    let report = commands::cmd_active(&cfg, &mut Artifacts::disabled("active")).unwrap();
    let p = report.trace(Acquisition::Pntk(PntkMode::SumOfLogits)).unwrap();
    let e = report.trace(Acquisition::Entk).unwrap();
    let gap = (p.final_accuracy() - e.final_accuracy()).abs();
    let ratio = p.total_acq_seconds() / e.total_acq_seconds();
    (
        gap <= 0.03 && ratio < 0.5,
        format!(
            "final accuracy pNTK {:.4} vs eNTK {:.4} (gap {gap:.4} <= 0.03); acquisition time ratio {ratio:.4} (< 0.5)",
            p.final_accuracy(),
            e.final_accuracy()
        ),
    )
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = KernelConfig::default();
    let net = Network::new(spec(5, 32, 4, Activation::Relu, 13)).unwrap();
    let x = inputs(12, 5, &mut rng);
    let t = inputs(6, 5, &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let y = data::one_hot(&labels, 4);
    let mut worst = 0.0f64;
    let k = ntk::pntk_matrix(&net, &x, &x, PntkMode::SumOfLogits, &cfg).unwrap();
    let kx = ntk::pntk_matrix(&net, &t, &x, PntkMode::SumOfLogits, &cfg).unwrap();
    let e = ntk::entk_gram(&net, &x, &cfg).unwrap();
    let ex = ntk::entk_matrix(&net, &t, &x, &cfg).unwrap();
    let (base_p, _) = regress::kernel_regress(&k.symmetric().unwrap(), kx.matrix(), &y, 0.0).unwrap();
    let (base_e, _) = regress::block_kernel_regress(&e.symmetric().unwrap(), ex.matrix(), &y, 0.0).unwrap();
    for c in [0.1, 10.0] {
        let ks = SymmetricMatrix::new(k.matrix().scaled(c)).unwrap();
        let (p, _) = regress::kernel_regress(&ks, &kx.matrix().scaled(c), &y, 0.0).unwrap();
        worst = worst.max(max_rel(&p, &base_p));
        let es = SymmetricMatrix::new(e.matrix().scaled(c)).unwrap();
        let (pe, _) = regress::block_kernel_regress(&es, &ex.matrix().scaled(c), &y, 0.0).unwrap();
        worst = worst.max(max_rel(&pe, &base_e));
    }
    (worst <= 1e-8, format!("max relative change {worst:.2e} for c in {{0.1, 10}} (tol 1e-8)"))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |v| v.contains(&n));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, (ok, detail): Outcome| {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!(
            "{verdict} [{n:>2}] {name}: {detail} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        if !ok {
            failed += 1;
        }
    };
    let single: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "quadratic-form identity", quadratic_form),
        (2, "Jacobian vs finite differences", jacobian_fd),
        (3, "first-layer diagonality", first_layer_diagonality),
        (6, "regression prediction convergence", regression_convergence),
        (7, "single-output degeneracy", single_output_degeneracy),
        (8, "Kronecker-route consistency", kronecker_route),
        (9, "resource arithmetic", resource_arithmetic),
        (10, "performance ordering", performance_ordering),
        (11, "regression accuracy parity", accuracy_parity),
        (12, "active-learning parity and cost", active_learning),
        (13, "regression scale invariance", scale_invariance),
    ];
    for &(n, name, f) in &single[..3] {
        if wanted(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }
    if wanted(4) || wanted(5) {
        let t = Instant::now();
        let (fro, eig) = frobenius_and_eig_sweep();
        if wanted(4) {
            report(4, "Frobenius convergence sweep", t, fro);
        }
        if wanted(5) {
            report(5, "max-eigenvalue convergence sweep", t, eig);
        }
    }
    for &(n, name, f) in &single[3..] {
        if wanted(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
