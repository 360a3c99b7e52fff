//! Acceptance suite: one PASS/FAIL line per criterion.

use phinull::bsde_adjoint::ito_duality_residual;
use phinull::carleman_lab::{conjugation_decomposition, mh_bound_ratio, random_grid};
use phinull::cli::{build_instance, run_config, run_suite, ExperimentConfig, InitialState, Subcommand, SuiteOutput};
use phinull::fixedpoint::{contraction_sweep, picard_iterate, FixedPointConfig};
use phinull::forward_solver::{Drift, LinearData, NonlinearFn};
use phinull::hum_control::{minimize_j, HumConfig};
use phinull::mesh::{CoefficientField, GammaProfile, MeshSpec};
use phinull::weights::{build_psi, weight_fields, RegionBox, WeightParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

type Verdict = (bool, String);

fn assertion(out: &SuiteOutput, name: &str) -> Verdict {
    match out.assertions.iter().find(|a| a.name == name) {
        Some(a) => (a.passed, format!("{name}: {}", a.detail)),
        None => (false, format!("{name}: not evaluated")),
    }
}

fn join(parts: Vec<Verdict>) -> Verdict {
    let ok = parts.iter().all(|p| p.0);
    (ok, parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join(" | "))
}

fn gamma(mesh: MeshSpec) -> CoefficientField {
    CoefficientField::new(mesh, GammaProfile::Constant { value: 0.1 }, None).unwrap()
}

fn c1() -> Verdict {
    let cfg = ExperimentConfig { dims: vec![1, 2], n_values: vec![7, 15], sbp_pairs: 100, ..Default::default() };
    let out = run_suite(Subcommand::OperatorsCheck, &cfg, 11, false).unwrap();
    join(vec![assertion(&out, "summation_by_parts"), assertion(&out, "laplacian_adjointness")])
}

/// `A^2 g - g - c h^2 D^2 g` on a smooth profile, relative to `max |g|`.
fn average_square_residual(n: usize, c: f64) -> f64 {
    let h = 1.0 / (n as f64 + 1.0);
    let g = |x: f64| (3.0 * x).sin().exp();
    let mut worst: f64 = 0.0;
    for j in 1..=n {
        let x = j as f64 * h;
        let a2 = 0.25 * (g(x - h) + 2.0 * g(x) + g(x + h));
        let d2 = (g(x - h) - 2.0 * g(x) + g(x + h)) / (h * h);
        worst = worst.max((a2 - g(x) - c * h * h * d2).abs() / g(x).abs());
    }
    worst
}

fn c2() -> Verdict {
    let cfg = ExperimentConfig { dims: vec![1], n_values: vec![7, 15, 31, 63], sbp_pairs: 1, ..Default::default() };
    let out = run_suite(Subcommand::OperatorsCheck, &cfg, 12, false).unwrap();
    let printed = average_square_residual(15, 0.5);
    let exact = average_square_residual(15, 0.25);
    let mut v = join(vec![assertion(&out, "catalog_slopes"), assertion(&out, "average_square_identity")]);
    v.1.push_str(&format!(
        " | identity checked with h^2/4 (smooth-profile residual {exact:.2e}); the h^2/2 form leaves {printed:.2e}"
    ));
    v
}

fn c3() -> Verdict {
    let mut parts = Vec::new();
    for (d, n) in [(1, 15), (2, 7)] {
        let mesh = MeshSpec::new(d, n).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(d, 0.3, 0.7)).unwrap();
        let cw = weight_fields(&WeightParams::default(), &psi).unwrap();
        let g = gamma(mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(3 + d as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let z = random_grid(mesh, &mut rng);
            let r = conjugation_decomposition(&z, &cw, &g, 0.5).unwrap();
            worst = worst.max(r.residual);
        }
        parts.push((worst <= 1e-10, format!("n = {d}, N = {n}: max residual {worst:.2e}")));
    }
    join(parts)
}

fn c4() -> Verdict {
    let mut ratios = Vec::new();
    let mut gated = true;
    for n in [7, 15, 31] {
        let mesh = MeshSpec::new(1, n).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(1, 0.3, 0.7)).unwrap();
        let cw = weight_fields(&WeightParams::default(), &psi).unwrap();
        let g = gamma(mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let m = mh_bound_ratio(&random_grid(mesh, &mut rng), &cw, &g, 0.5).unwrap();
            gated &= m.tau_h_theta_le_one;
            worst = worst.max(m.ratio.unwrap_or(f64::NAN));
        }
        ratios.push(worst);
    }
    let mx = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = gated && ratios.iter().all(|r| r.is_finite() && *r > 0.0) && mx / mn <= 100.0;
    (ok, format!("ratios {ratios:.3?}, max/min {:.3}, gate held {gated}", mx / mn))
}

fn c5() -> Verdict {
    let hum = HumConfig { cg_tol: 1e-8, ..Default::default() };
    let cfg = ExperimentConfig {
        y0: InitialState::Random,
        source_amp: 1.0,
        a2: 0.3,
        steps: 6,
        hum,
        ..Default::default()
    };
    let mut kkt: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut conv = true;
    for seed in 0..5 {
        let inst = build_instance(&cfg, Subcommand::Hum, 1, 7, seed, false).unwrap();
        let sol = minimize_j(&inst.problem, &inst.weights, &hum).unwrap();
        let d = ito_duality_residual(&inst.problem, &sol.y, &sol.adjoint, &sol.weights, sol.epsilon).unwrap();
        conv &= sol.converged;
        kkt = kkt.max(sol.kkt_residual);
        dual = dual.max(d.residual);
    }
    (conv && kkt <= 1e-6 && dual <= 1e-8, format!("5 instances: max KKT {kkt:.2e}, max duality {dual:.2e}"))
}

fn c6() -> Verdict {
    let cfg = ExperimentConfig { n_values: vec![7, 15], y0: InitialState::Random, source_amp: 0.5, ..Default::default() };
    let gates_ok = cfg.gate_table(Subcommand::Hum).unwrap().iter().all(|r| r.gates.all());
    let out = run_suite(Subcommand::Hum, &cfg, 6, false).unwrap();
    let mut v = join(vec![
        assertion(&out, "inequality_stability_n1"),
        assertion(&out, "terminal_bound_measured_c"),
        assertion(&out, "kkt"),
    ]);
    v.0 &= gates_ok;
    v.1.push_str(&format!(" | gates held {gates_ok}"));
    v
}

fn c7() -> Verdict {
    let cfg = ExperimentConfig { n_values: vec![15], steps: 6, samples: 50, ..Default::default() };
    let out = run_suite(Subcommand::Carleman, &cfg, 7, false).unwrap();
    assertion(&out, "carleman_sweep")
}

fn c8() -> Verdict {
    let base = ExperimentConfig::default();
    let hum = HumConfig::default();
    let fp = FixedPointConfig::default();
    let zero = build_instance(&base, Subcommand::Semilinear, 1, 7, 8, true).unwrap();
    let res = picard_iterate(&zero.problem, &zero.weights, &hum, &fp).unwrap();
    let lin = minimize_j(&zero.problem.with_drift(Drift::Linear(LinearData::zero(zero.mesh))), &zero.weights, &hum).unwrap();
    let identical = res.report.iterations == 1 && lin.y.raw() == res.solution.y.raw() && lin.controls == res.controls;
    let lip = ExperimentConfig { f1: NonlinearFn::Sine { amp: 0.1 }, ..Default::default() };
    let inst = build_instance(&lip, Subcommand::Semilinear, 1, 7, 8, true).unwrap();
    let res = picard_iterate(&inst.problem, &inst.weights, &hum, &fp).unwrap();
    let contracts = res.report.converged && res.report.inner_converged && res.report.contraction_factor < 1.0;
    let (pts, fit) = contraction_sweep(&inst.problem, &inst.weights, &hum, &[4.0, 16.0, 64.0], 4, 8).unwrap();
    let slope_ok = (fit.slope + 1.0).abs() <= 0.3;
    let factors: Vec<String> = pts.iter().map(|p| format!("{:.3e}{}", p.factor, if p.inner_converged { "" } else { " (HUM unconverged)" })).collect();
    (
        identical && contracts && slope_ok,
        format!(
            "F1 = 0 bit-identical in one iteration {identical} | L1 = 0.1 factor {:.3e} converged {} | factors at tau 4, 16, 64: {}, log-log slope {:.3} (target -1 +- 0.3)",
            res.report.contraction_factor, res.report.converged, factors.join(", "), fit.slope
        ),
    )
}

fn c9() -> Verdict {
    let mut parts = Vec::new();
    for (label, f1) in [("linear", NonlinearFn::Zero), ("semilinear", NonlinearFn::Sine { amp: 0.1 })] {
        let cfg = ExperimentConfig { n_values: vec![7, 15, 31], coupling: true, f1, ..Default::default() };
        let out = run_suite(Subcommand::DecaySweep, &cfg, 9, false).unwrap();
        let v = assertion(&out, "decay_n1");
        parts.push((v.0, format!("{label}: {}", v.1)));
    }
    join(parts)
}

fn c10() -> Verdict {
    let root = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_repro");
    let suites = [
        (Subcommand::OperatorsCheck, ExperimentConfig { dims: vec![1, 2], n_values: vec![7], ..Default::default() }),
        (Subcommand::Carleman, ExperimentConfig { n_values: vec![7], samples: 10, ..Default::default() }),
        (Subcommand::Hum, ExperimentConfig { n_values: vec![7], y0: InitialState::Random, source_amp: 1.0, ..Default::default() }),
        (Subcommand::Semilinear, ExperimentConfig { n_values: vec![7], f1: NonlinearFn::Sine { amp: 0.1 }, ..Default::default() }),
        (Subcommand::DecaySweep, ExperimentConfig { n_values: vec![7, 15, 31], ..Default::default() }),
    ];
    let mut parts = Vec::new();
    for (sub, cfg) in suites {
        let mut files = Vec::new();
        for run in 0..2 {
            let dir = root.join(format!("{}_{run}", sub.name()));
            let _ = std::fs::remove_dir_all(&dir);
            run_config(sub, &cfg, &dir, Some(10), false).unwrap();
            let mut names: Vec<_> = std::fs::read_dir(&dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            names.sort();
            files.push(names.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>());
        }
        let same = !files[0].is_empty() && files[0] == files[1];
        parts.push((same, format!("{} ({} csv) identical {same}", sub.name(), files[0].len())));
    }
    join(parts)
}

fn main() {
    let criteria: [(&str, fn() -> Verdict, u64); 10] = [
        ("operator exactness", c1, 10),
        ("weight-calculus slopes", c2, 30),
        ("conjugation identity", c3, 60),
        ("M_h bound", c4, 60),
        ("HUM optimality", c5, 120),
        ("terminal, Carleman and gradient surrogates", c6, 300),
        ("Carleman ratio sweep", c7, 600),
        ("fixed point", c8, 600),
        ("decay sweep", c9, 1200),
        ("reproducibility", c10, 600),
    ];
    let mut failed = Vec::new();
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, detail) = run();
        let dt = t0.elapsed();
        let in_time = dt <= Duration::from_secs(*limit);
        let pass = ok && in_time;
        println!(
            "criterion {:>2} {} [{name}] {:.2}s (limit {limit}s): {detail}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            dt.as_secs_f64()
        );
        if !pass {
            failed.push(k + 1);
        }
    }
    if failed.is_empty() {
        println!("all criteria pass");
    } else {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
