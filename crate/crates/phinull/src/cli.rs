//! Experiment harness: configuration, the five suites, result files and exit codes.

use crate::bsde_adjoint::ito_duality_residual;
use crate::carleman_lab::{
    carleman_ratio, carleman_sweep, conjugation_decomposition, manufactured_samples, mh_bound_ratio, random_grid,
    RatioStatus,
};
use crate::error::{Error, Result};
use crate::fixedpoint::{
    bump_initial, coupled_delta, decay_certificate, fit_kappa, picard_iterate, DecayRecord, FixedPointConfig,
    KappaFit,
};
use crate::forward_solver::{Drift, ForwardProblem, LinearData, NonlinearFn, NonlinearitySpec};
use crate::hum_control::{gradient_energy_estimate, minimize_j, verify_inequalities, EpsilonMode, HumConfig};
use crate::mesh::{
    div_form_laplacian, laplacian_matrix, summation_by_parts_residual, CoefficientField, GammaProfile,
    GridFunction, MeshSpec,
};
use crate::scenario::{AdaptedField, ScenarioTree};
use crate::weights::{asymptotic_check, build_psi, weight_fields, AsymptoticExpr, CarlemanWeights, Gates, RegionBox, WeightParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    OperatorsCheck,
    Carleman,
    Hum,
    Semilinear,
    DecaySweep,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::OperatorsCheck => "operators-check",
            Subcommand::Carleman => "carleman",
            Subcommand::Hum => "hum",
            Subcommand::Semilinear => "semilinear",
            Subcommand::DecaySweep => "decay-sweep",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "operators-check" => Subcommand::OperatorsCheck,
            "carleman" => Subcommand::Carleman,
            "hum" => Subcommand::Hum,
            "semilinear" => Subcommand::Semilinear,
            "decay-sweep" => Subcommand::DecaySweep,
            other => return Err(Error::Config(format!("unknown subcommand {other}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    /// `prod_i sin(pi x_i)`.
    Bump,
    /// Uniform on `[-1, 1]` from the run seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: Vec<usize>,
    pub n_values: Vec<usize>,
    pub steps: usize,
    pub weights: WeightParams,
    /// Control region `(g0_lo, g0_hi)^n`.
    pub g0_lo: f64,
    pub g0_hi: f64,
    pub gamma: GammaProfile,
    pub y0: InitialState,
    /// Constant zeroth-order coefficient of the linear drift.
    pub a2: f64,
    /// Amplitude of a random adapted source; 0 disables it.
    pub source_amp: f64,
    pub f1: NonlinearFn,
    pub f2: NonlinearFn,
    pub hum: HumConfig,
    pub decay_epsilon: EpsilonMode,
    pub fixed_point: FixedPointConfig,
    pub taus: Vec<f64>,
    pub samples: usize,
    pub conjugation_samples: usize,
    pub sbp_pairs: usize,
    /// Set `delta` from `h` so that `tau (delta T)^{-m} h = eps0`.
    pub coupling: bool,
    /// Time for the fixed-time operator checks; `None` means `T/2`.
    pub eval_time: Option<f64>,
    pub cell_budget: f64,
    pub seed: u64,
    pub threads: usize,
    /// Carleman ratios above this are dumped as counterexample candidates.
    pub alarm_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dims: vec![1],
            n_values: vec![7],
            steps: 6,
            weights: WeightParams::default(),
            g0_lo: 0.3,
            g0_hi: 0.7,
            gamma: GammaProfile::Constant { value: 0.1 },
            y0: InitialState::Bump,
            a2: 0.0,
            source_amp: 0.0,
            f1: NonlinearFn::Zero,
            f2: NonlinearFn::Zero,
            hum: HumConfig::default(),
            decay_epsilon: EpsilonMode::SharpPreset,
            fixed_point: FixedPointConfig::default(),
            taus: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            samples: 50,
            conjugation_samples: 20,
            sbp_pairs: 100,
            coupling: true,
            eval_time: None,
            cell_budget: 1e7,
            seed: 0,
            threads: 1,
            alarm_ratio: 1e8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    pub delta: f64,
    pub gates: Gates,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for &d in &self.dims {
            for &n in &self.n_values {
                v.push((d, n));
            }
        }
        v
    }

    pub fn validate(&self, sub: Subcommand) -> Result<()> {
        if self.dims.is_empty() || self.n_values.is_empty() {
            return Err(Error::Config("sweep grid is empty: dims and n_values need entries".into()));
        }
        if self.dims.iter().any(|d| !(1..=3).contains(d)) {
            return Err(Error::Config("dims must lie in 1..=3".into()));
        }
        if self.n_values.iter().any(|&n| n < 3) {
            return Err(Error::Config("n_values entries must be at least 3".into()));
        }
        if self.steps == 0 || self.steps > 24 {
            return Err(Error::Config("steps must lie in 1..=24".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.hum.validate()?;
        if sub == Subcommand::Carleman && (self.taus.is_empty() || self.samples == 0) {
            return Err(Error::Config("carleman needs taus and samples".into()));
        }
        if sub != Subcommand::OperatorsCheck {
            for (d, n) in self.points() {
                let cells = 2f64.powi(self.steps as i32) * (n as f64).powi(d as i32) * self.steps as f64;
                if cells > self.cell_budget {
                    return Err(Error::ResourceCap(format!(
                        "2^K N^n K = {cells:e} exceeds the budget {:e} at n = {d}, N = {n}",
                        self.cell_budget
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn params_for(&self, sub: Subcommand, mesh: MeshSpec) -> WeightParams {
        let mut p = self.weights;
        if sub == Subcommand::DecaySweep && self.coupling {
            p.delta = coupled_delta(&p, mesh.h());
        }
        p
    }

    /// Gate booleans of every sweep point, from the configuration alone.
    pub fn gate_table(&self, sub: Subcommand) -> Result<Vec<GateRow>> {
        self.points()
            .into_iter()
            .map(|(d, n)| {
                let mesh = MeshSpec::new(d, n)?;
                let p = self.params_for(sub, mesh);
                Ok(GateRow { dim: d, n, h: mesh.h(), delta: p.delta, gates: p.gates(mesh.h()) })
            })
            .collect()
    }

    pub fn region(&self, dim: usize) -> RegionBox {
        RegionBox::cube(dim, self.g0_lo, self.g0_hi)
    }

    pub fn tree(&self) -> Result<ScenarioTree> {
        ScenarioTree::new(self.steps, self.weights.t_final)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Assertion {
    Assertion { name: name.into(), passed, detail }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

fn f(v: f64) -> String {
    format!("{v:e}")
}

fn b(v: bool) -> String {
    v.to_string()
}

fn gate_cols(g: &Gates) -> Vec<String> {
    vec![b(g.s_h_le_delta0), b(g.tau_h_theta_le_one), b(g.tau_delta_h_le_eps0)]
}

const GATE_HEADER: [&str; 3] = ["s_h_le_delta0", "tau_h_theta_le_one", "tau_delta_h_le_eps0"];

#[derive(Clone, Debug, Default)]
pub struct SuiteOutput {
    pub summary: serde_json::Value,
    pub tables: Vec<Table>,
    pub assertions: Vec<Assertion>,
    /// Extra files, `(name, contents)`.
    pub dumps: Vec<(String, String)>,
}

impl SuiteOutput {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Apply `f` to every item on `threads` workers; output order follows the input.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                sc.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Problem pieces shared by the solver suites at one `(dim, N)`.
pub struct Instance {
    pub mesh: MeshSpec,
    pub gamma: CoefficientField,
    pub weights: CarlemanWeights,
    pub problem: ForwardProblem,
}

fn point_rng(seed: u64, dim: usize, n: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((dim as u64) << 56) ^ ((n as u64) << 32))
}

pub fn build_instance(cfg: &ExperimentConfig, sub: Subcommand, dim: usize, n: usize, seed: u64, semilinear: bool) -> Result<Instance> {
    let mesh = MeshSpec::new(dim, n)?;
    let gamma = CoefficientField::new(mesh, cfg.gamma, None)?;
    let region = cfg.region(dim);
    let psi = build_psi(mesh, &region)?;
    let weights = weight_fields(&cfg.params_for(sub, mesh), &psi)?;
    let tree = cfg.tree()?;
    let mut rng = point_rng(seed, dim, n);
    let y0 = match cfg.y0 {
        InitialState::Bump => bump_initial(mesh),
        InitialState::Random => random_grid(mesh, &mut rng),
    };
    let drift = if semilinear {
        Drift::Semilinear(NonlinearitySpec::new(cfg.f1.clone(), cfg.f2.clone()))
    } else {
        let mut d = LinearData::zero(mesh);
        d.a2 = GridFunction::constant(mesh, mesh.primal(), cfg.a2);
        if cfg.source_amp != 0.0 {
            let mut v = AdaptedField::zeros(tree, mesh, mesh.primal(), tree.steps);
            for x in v.raw_mut() {
                *x = cfg.source_amp * rng.random_range(-1.0..1.0);
            }
            d.v = Some(v);
        }
        Drift::Linear(d)
    };
    if let Drift::Semilinear(nl) = &drift {
        nl.validate(mesh, 64, seed)?;
    }
    let problem = ForwardProblem::new(mesh, gamma.clone(), region, y0, drift, tree)?;
    Ok(Instance { mesh, gamma, weights, problem })
}

fn spread(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if v.is_empty() {
        1.0
    } else if mn > 0.0 {
        mx / mn
    } else if mx == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Summation by parts, Laplacian adjointness and the weight catalog.
pub fn suite_operators(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::default();
    let mut tab = Table::new("operators", &["dim", "N", "sbp_max", "adjoint_max", "matrix_max"]);
    let mut sbp_all: f64 = 0.0;
    let mut adj_all: f64 = 0.0;
    for (d, n) in cfg.points() {
        let mesh = MeshSpec::new(d, n)?;
        let mut rng = point_rng(seed, d, n);
        let mut sbp: f64 = 0.0;
        for _ in 0..cfg.sbp_pairs {
            let u = random_grid(mesh, &mut rng).dirichlet_extend()?;
            for i in 0..d {
                let lay = mesh.dual(i);
                let v = GridFunction { mesh, layout: lay, values: (0..lay.len()).map(|_| rng.random_range(-1.0..1.0)).collect() };
                sbp = sbp.max(summation_by_parts_residual(&u, &v, i)?);
            }
        }
        let gamma = CoefficientField::new(mesh, cfg.gamma, None)?;
        let (adj, mat) = if mesh.primal_len() <= 512 { adjointness(mesh, &gamma)? } else { (f64::NAN, f64::NAN) };
        if adj.is_finite() {
            adj_all = adj_all.max(adj);
        }
        sbp_all = sbp_all.max(sbp);
        tab.push(vec![d.to_string(), n.to_string(), f(sbp), f(adj), f(mat)]);
    }
    out.tables.push(tab);
    out.assertions.push(check("summation_by_parts", sbp_all <= 1e-12, format!("max relative residual {sbp_all:e}")));
    out.assertions.push(check("laplacian_adjointness", adj_all <= 1e-12, format!("max entrywise asymmetry {adj_all:e}")));
    let mut cat = Table::new("catalog", &["expr", "dim", "N", "h", "remainder", "slope"]);
    let mut slopes = Vec::new();
    let mut ident: f64 = 0.0;
    for &d in &cfg.dims {
        let region = cfg.region(d);
        for expr in [
            AsymptoticExpr::AverageXiRho,
            AsymptoticExpr::DifferenceXiRho,
            AsymptoticExpr::SecondDifferenceRho,
            AsymptoticExpr::AverageSquareIdentity,
        ] {
            let rep = asymptotic_check(expr, &cfg.weights, &region, d, &cfg.n_values, 0)?;
            for (k, &nn) in rep.n_values.iter().enumerate() {
                cat.push(vec![expr.name().into(), d.to_string(), nn.to_string(), f(rep.h[k]), f(rep.remainder[k]), f(rep.slope)]);
            }
            if expr == AsymptoticExpr::AverageSquareIdentity {
                ident = ident.max(rep.remainder.iter().cloned().fold(0.0, f64::max));
            } else if cfg.n_values.len() >= 2 {
                slopes.push((expr.name(), d, rep.slope));
            }
        }
    }
    out.tables.push(cat);
    if !slopes.is_empty() {
        let worst = slopes.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
        out.assertions.push(check("catalog_slopes", worst >= 1.9, format!("smallest log-log slope {worst:.4}")));
    }
    out.assertions.push(check("average_square_identity", ident <= 1e-12, format!("max residual {ident:e}")));
    out.summary = json!({ "sbp_max": sbp_all, "adjoint_max": adj_all, "identity_max": ident, "slopes": slopes });
    Ok(out)
}

/// Entrywise asymmetry of the dense operator and its distance to the band matrix.
pub fn adjointness(mesh: MeshSpec, gamma: &CoefficientField) -> Result<(f64, f64)> {
    let len = mesh.primal_len();
    let mut cols = Vec::with_capacity(len);
    for c in 0..len {
        let mut e = GridFunction::zeros(mesh, mesh.primal());
        e.values[c] = 1.0;
        cols.push(div_form_laplacian(&e.dirichlet_extend()?, gamma)?.values);
    }
    let band = laplacian_matrix(mesh, gamma);
    let scale = cols.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym: f64 = 0.0;
    let mut diff: f64 = 0.0;
    for r in 0..len {
        for c in 0..len {
            asym = asym.max((cols[c][r] - cols[r][c]).abs() / scale);
            diff = diff.max((cols[c][r] + band.get(r, c)).abs().min((cols[c][r] - band.get(r, c)).abs()) / scale);
        }
    }
    Ok((asym, diff))
}

pub fn suite_carleman(cfg: &ExperimentConfig, seed: u64, strict: bool) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::default();
    let t = cfg.eval_time.unwrap_or(0.5 * cfg.weights.t_final);
    let tree = cfg.tree()?;
    let mut conj = Table::new("conjugation", &["dim", "N", "max_residual", "max_expansion_residual"]);
    let mut mh = Table::new("mh_bound", &["dim", "N", "h", "ratio", "tau_h_theta_le_one"]);
    let mut sw = Table::new(
        "carleman_sweep",
        &["dim", "N", "tau", "max_ratio", "mean_ratio", "min_ratio", "s_h", "homogeneity_error", GATE_HEADER[0], GATE_HEADER[1], GATE_HEADER[2]],
    );
    let mut conj_max: f64 = 0.0;
    let mut mh_by_dim: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut sweep_ok = true;
    let mut sweep_notes = Vec::new();
    let points = cfg.points();
    let results = par_map(&points, cfg.threads, |&(d, n)| {
        let mesh = MeshSpec::new(d, n)?;
        let gamma = CoefficientField::new(mesh, cfg.gamma, None)?;
        let region = cfg.region(d);
        let psi = build_psi(mesh, &region)?;
        let cw = weight_fields(&cfg.weights, &psi)?;
        let mut rng = point_rng(seed, d, n);
        let mut worst = (0.0f64, 0.0f64);
        for _ in 0..cfg.conjugation_samples {
            let z = random_grid(mesh, &mut rng);
            let r = conjugation_decomposition(&z, &cw, &gamma, t)?;
            worst = (worst.0.max(r.residual), worst.1.max(r.expansion_residual));
        }
        let z = random_grid(mesh, &mut rng);
        let m = mh_bound_ratio(&z, &cw, &gamma, t)?;
        let taus: Vec<f64> = cfg
            .taus
            .iter()
            .cloned()
            .filter(|&tau| WeightParams { tau, ..cfg.weights }.gates(mesh.h()).s_h_le_delta0)
            .collect();
        if strict && taus.len() != cfg.taus.len() {
            return Err(Error::Config(format!("strict gates: some tau violates s(t) h <= delta0 at N = {n}")));
        }
        let chi = region.mask(mesh).values;
        let sweep = if taus.is_empty() {
            None
        } else {
            Some(carleman_sweep(&cfg.weights, &cw, &gamma, tree, &chi, &taus, cfg.samples, seed)?)
        };
        Ok((d, n, mesh.h(), worst, m, sweep, cw, gamma, chi))
    })?;
    for (d, n, h, worst, m, sweep, cw, gamma, chi) in results {
        conj_max = conj_max.max(worst.0).max(worst.1);
        conj.push(vec![d.to_string(), n.to_string(), f(worst.0), f(worst.1)]);
        let ratio = m.ratio.unwrap_or(f64::NAN);
        mh.push(vec![d.to_string(), n.to_string(), f(h), f(ratio), b(m.tau_h_theta_le_one)]);
        if m.tau_h_theta_le_one {
            match mh_by_dim.iter_mut().find(|e| e.0 == d) {
                Some(e) => e.1.push(ratio),
                None => mh_by_dim.push((d, vec![ratio])),
            }
        }
        let Some(sweep) = sweep else {
            sweep_notes.push(format!("N = {n}: no tau inside the s(t) h <= delta0 gate"));
            continue;
        };
        for pnt in &sweep.points {
            let mut row = vec![
                d.to_string(),
                n.to_string(),
                f(pnt.tau),
                f(pnt.max_ratio),
                f(pnt.mean_ratio),
                f(pnt.min_ratio),
                f(pnt.s_h),
                f(pnt.homogeneity_error),
            ];
            row.extend(gate_cols(&pnt.gates));
            sw.push(row);
            if !pnt.max_ratio.is_finite() || pnt.homogeneity_error > 1e-10 {
                sweep_ok = false;
            }
            if pnt.max_ratio > cfg.alarm_ratio {
                let cwt = weight_fields(&WeightParams { tau: pnt.tau, ..cfg.weights }, &cw.psi)?;
                let samples = manufactured_samples(tree, cw.mesh(), &gamma, cfg.samples, seed)?;
                for (q, mb) in samples.iter().enumerate() {
                    let r = carleman_ratio(mb, &cwt, &chi)?;
                    if r.ratio > cfg.alarm_ratio || r.status == RatioStatus::CounterexampleCandidate {
                        out.dumps.push((format!("counterexample_n{d}_N{n}_tau{}_s{q}.csv", pnt.tau), dump_manufactured(mb)));
                        break;
                    }
                }
            }
        }
        let tail_ok = sweep.non_increasing_after_tau0 && sweep.tau0_index + 1 < sweep.points.len();
        if !tail_ok {
            sweep_ok = false;
        }
        sweep_notes.push(format!(
            "N = {n}: tau0 = {}, non-increasing after tau0 = {}, points after tau0 = {}",
            sweep.tau0,
            sweep.non_increasing_after_tau0,
            sweep.points.len() - 1 - sweep.tau0_index
        ));
    }
    out.assertions.push(check("conjugation_identity", conj_max <= 1e-10, format!("max relative residual {conj_max:e}")));
    for (d, v) in &mh_by_dim {
        if v.len() >= 2 {
            let sp = spread(v);
            out.assertions.push(check(&format!("mh_bound_n{d}"), sp <= 100.0 && v.iter().all(|x| x.is_finite()), format!("max/min over N = {sp:.3}")));
        }
    }
    if !sweep_notes.is_empty() {
        out.assertions.push(check("carleman_sweep", sweep_ok, sweep_notes.join("; ")));
    }
    out.summary = json!({ "conjugation_max": conj_max, "mh": mh_by_dim, "sweep": sweep_notes });
    out.tables.extend([conj, mh, sw]);
    Ok(out)
}

fn dump_manufactured(mb: &crate::carleman_lab::ManufacturedBackward) -> String {
    let mut s = String::from("field,level,node,index,value\n");
    for (name, fld) in [("w", &mb.w), ("f", &mb.f), ("g", &mb.g)] {
        for k in 0..fld.levels {
            for j in 0..ScenarioTree::level_size(k) {
                for (q, v) in fld.node(k, j).iter().enumerate() {
                    let _ = writeln!(s, "{name},{k},{j},{q},{v:e}");
                }
            }
        }
    }
    s
}

fn strict_gate_check(cfg: &ExperimentConfig, sub: Subcommand, strict: bool) -> Result<()> {
    if strict {
        for row in cfg.gate_table(sub)? {
            if !row.gates.all() {
                return Err(Error::Config(format!("strict gates: gates violated at n = {}, N = {}: {:?}", row.dim, row.n, row.gates)));
            }
        }
    }
    Ok(())
}

pub fn suite_hum(cfg: &ExperimentConfig, seed: u64, strict: bool) -> Result<SuiteOutput> {
    strict_gate_check(cfg, Subcommand::Hum, strict)?;
    let mut out = SuiteOutput::default();
    let mut header = vec![
        "dim", "N", "h", "tau", "lambda", "delta", "epsilon", "E_yT", "J_eps", "J_zero", "kkt_res", "duality_res",
        "iterations", "terminal_constant", "carleman_ratio", "gradient_ratio", "gradient_ratio_as_printed",
    ];
    header.extend(GATE_HEADER);
    let mut tab = Table::new("hum", &header);
    let points = cfg.points();
    let rows = par_map(&points, cfg.threads, |&(d, n)| {
        let inst = build_instance(cfg, Subcommand::Hum, d, n, seed, false)?;
        let sol = minimize_j(&inst.problem, &inst.weights, &cfg.hum)?;
        let dual = ito_duality_residual(&inst.problem, &sol.y, &sol.adjoint, &sol.weights, sol.epsilon)?;
        let ineq = verify_inequalities(&sol, &inst.problem, &inst.weights)?;
        let grad = gradient_energy_estimate(&sol, &inst.problem)?;
        Ok((d, n, inst.mesh.h(), inst.weights.params, sol.epsilon, sol.report.terminal_energy, sol.j_eps, sol.j_zero, sol.kkt_residual, sol.converged, dual.residual, sol.iterations, ineq, grad, sol.gates))
    })?;
    let mut kkt_ok = true;
    let mut dual_max: f64 = 0.0;
    let mut by_dim: Vec<(usize, Vec<[f64; 3]>)> = Vec::new();
    let mut bound_rows = Vec::new();
    for (d, n, h, p, eps, ey, j, j0, kkt, conv, dres, it, ineq, grad, gates) in rows {
        kkt_ok &= conv && kkt <= cfg.hum.cg_tol && j <= j0 * (1.0 + 1e-12);
        dual_max = dual_max.max(dres);
        let mut row = vec![
            d.to_string(), n.to_string(), f(h), f(p.tau), f(p.lambda), f(p.delta), f(eps), f(ey), f(j), f(j0), f(kkt), f(dres),
            it.to_string(), f(ineq.terminal_constant), f(ineq.carleman_ratio), f(grad.ratio), f(grad.ratio_as_printed),
        ];
        row.extend(gate_cols(&gates));
        tab.push(row);
        let trip = [ineq.terminal_constant, ineq.carleman_ratio, grad.ratio];
        match by_dim.iter_mut().find(|e| e.0 == d) {
            Some(e) => e.1.push(trip),
            None => by_dim.push((d, vec![trip])),
        }
        bound_rows.push((ineq.terminal_energy, ineq.e_lambda_h * (ineq.source_term + ineq.initial_term), ineq.terminal_constant));
    }
    out.assertions.push(check("kkt", kkt_ok, format!("every solve converged with KKT residual <= {:e} and J <= J(0)", cfg.hum.cg_tol)));
    out.assertions.push(check("ito_duality", dual_max <= 1e-8, format!("max residual {dual_max:e}")));
    let c_meas = bound_rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let holds = bound_rows.iter().all(|r| r.0 <= c_meas * r.1 * (1.0 + 1e-12));
    out.assertions.push(check("terminal_bound_measured_c", holds && c_meas.is_finite(), format!("measured C = {c_meas:e}")));
    let mut spreads = Vec::new();
    for (d, v) in &by_dim {
        let finite = v.iter().flatten().all(|x| x.is_finite());
        let sp: Vec<f64> = (0..3).map(|c| spread(&v.iter().map(|t| t[c]).collect::<Vec<_>>())).collect();
        let ok = finite && (v.len() < 2 || sp.iter().all(|s| *s <= 100.0));
        out.assertions.push(check(&format!("inequality_stability_n{d}"), ok, format!("max/min of terminal, Carleman, gradient ratios: {sp:?}")));
        spreads.push((d, sp));
    }
    out.summary = json!({ "duality_max": dual_max, "measured_c": c_meas, "spreads": spreads });
    out.tables.push(tab);
    Ok(out)
}

pub fn suite_semilinear(cfg: &ExperimentConfig, seed: u64, strict: bool) -> Result<SuiteOutput> {
    strict_gate_check(cfg, Subcommand::Semilinear, strict)?;
    let mut out = SuiteOutput::default();
    let mut tab = Table::new("fixedpoint", &["dim", "N", "iteration", "increment"]);
    let mut header = vec!["dim", "N", "h", "tau", "iterations", "converged", "contraction_factor", "resimulation_error", "ratio_T", "uncontrolled_ratio", "source_ratio"];
    header.extend(GATE_HEADER);
    let mut sum = Table::new("semilinear", &header);
    let points = cfg.points();
    let res = par_map(&points, cfg.threads, |&(d, n)| {
        let inst = build_instance(cfg, Subcommand::Semilinear, d, n, seed, true)?;
        let r = picard_iterate(&inst.problem, &inst.weights, &cfg.hum, &cfg.fixed_point)?;
        let dec = decay_certificate(&r, &inst.problem)?;
        Ok((d, n, inst.mesh.h(), r.report, dec))
    })?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (d, n, h, rep, dec) in res {
        for (k, inc) in rep.increments.iter().enumerate() {
            tab.push(vec![d.to_string(), n.to_string(), (k + 1).to_string(), f(*inc)]);
        }
        let mut row = vec![
            d.to_string(), n.to_string(), f(h), f(rep.tau), rep.iterations.to_string(), b(rep.converged),
            f(rep.contraction_factor), f(rep.resimulation_error), f(dec.ratio_t), f(dec.uncontrolled_ratio), f(dec.source_ratio),
        ];
        row.extend(gate_cols(&dec.gates));
        sum.push(row);
        ok &= rep.converged && rep.inner_converged && rep.contraction_factor < 1.0 && dec.ratio_t <= dec.uncontrolled_ratio;
        notes.push(format!(
            "N = {n}: factor {:.4e}, {} iterations, inner solves converged {}",
            rep.contraction_factor, rep.iterations, rep.inner_converged
        ));
    }
    out.assertions.push(check("fixed_point_contraction", ok, notes.join("; ")));
    out.summary = json!({ "runs": notes });
    out.tables.extend([sum, tab]);
    Ok(out)
}

pub fn suite_decay(cfg: &ExperimentConfig, seed: u64, strict: bool) -> Result<SuiteOutput> {
    strict_gate_check(cfg, Subcommand::DecaySweep, strict)?;
    let mut out = SuiteOutput::default();
    let hum = HumConfig { epsilon: cfg.decay_epsilon, ..cfg.hum };
    let points = cfg.points();
    let mut records: Vec<(usize, DecayRecord)> = par_map(&points, cfg.threads, |&(d, n)| {
        let inst = build_instance(cfg, Subcommand::DecaySweep, d, n, seed, true)?;
        let r = picard_iterate(&inst.problem, &inst.weights, &hum, &cfg.fixed_point)?;
        Ok((d, decay_certificate(&r, &inst.problem)?))
    })?;
    records.sort_by(|a, b| (a.0, a.1.n).cmp(&(b.0, b.1.n)));
    let mut header = vec!["dim", "N", "h", "delta", "tau", "lambda", "epsilon", "ratio_T", "uncontrolled_ratio", "control_u", "control_big_u", "control_ratio", "source_ratio", "converged", "kappa_hat"];
    header.extend(GATE_HEADER);
    let mut tab = Table::new("decay", &header);
    let mut fits: Vec<(usize, Option<KappaFit>)> = Vec::new();
    for &d in &cfg.dims {
        let rows: Vec<DecayRecord> = records.iter().filter(|r| r.0 == d).map(|r| r.1.clone()).collect();
        for (k, r) in rows.iter().enumerate() {
            let running = fit_kappa(&rows[..=k], true).ok().map(|f| f.kappa_hat);
            let mut row = vec![
                d.to_string(), r.n.to_string(), f(r.h), f(r.delta), f(r.tau), f(r.lambda), f(r.epsilon), f(r.ratio_t),
                f(r.uncontrolled_ratio), f(r.control_u), f(r.control_big_u), f(r.control_ratio), f(r.source_ratio), b(r.converged),
                running.map(f).unwrap_or_default(),
            ];
            row.extend(gate_cols(&r.gates));
            tab.push(row);
        }
        let fit = fit_kappa(&rows, true).ok();
        let decreasing = rows.windows(2).all(|w| w[1].ratio_t < w[0].ratio_t);
        let detail = match &fit {
            Some(ft) => format!("kappa_hat = {:.4}, r2 = {:.4}, strictly decreasing = {decreasing}", ft.kappa_hat, ft.r2),
            None => format!("fewer than three gated rows; strictly decreasing = {decreasing}"),
        };
        let ok = decreasing && fit.map(|ft| ft.kappa_hat > 0.0 && ft.r2 >= 0.9).unwrap_or(false);
        out.assertions.push(check(&format!("decay_n{d}"), ok, detail));
        fits.push((d, fit));
    }
    out.summary = json!({ "fits": fits, "records": records.iter().map(|r| &r.1).collect::<Vec<_>>() });
    out.tables.push(tab);
    Ok(out)
}

pub fn run_suite(sub: Subcommand, cfg: &ExperimentConfig, seed: u64, strict: bool) -> Result<SuiteOutput> {
    cfg.validate(sub)?;
    match sub {
        Subcommand::OperatorsCheck => suite_operators(cfg, seed),
        Subcommand::Carleman => suite_carleman(cfg, seed, strict),
        Subcommand::Hum => suite_hum(cfg, seed, strict),
        Subcommand::Semilinear => suite_semilinear(cfg, seed, strict),
        Subcommand::DecaySweep => suite_decay(cfg, seed, strict),
    }
}

fn plot_script(sub: Subcommand, tables: &[Table]) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n");
    for t in tables {
        let (x, y, logs) = match (sub, t.name.as_str()) {
            (Subcommand::DecaySweep, "decay") => ("1/column('h')", "column('ratio_T')", "set logscale y"),
            (Subcommand::Carleman, "carleman_sweep") => ("column('tau')", "column('max_ratio')", "set logscale xy"),
            (Subcommand::Carleman, "mh_bound") => ("column('h')", "column('ratio')", "set logscale xy"),
            (Subcommand::Hum, "hum") => ("column('h')", "column('carleman_ratio')", "set logscale xy"),
            (Subcommand::Semilinear, "fixedpoint") => ("column('iteration')", "column('increment')", "set logscale y"),
            (Subcommand::OperatorsCheck, "catalog") => ("column('h')", "column('remainder')", "set logscale xy"),
            _ => continue,
        };
        let _ = writeln!(s, "unset logscale\n{logs}\nset output '{}.png'\nplot '{}.csv' using ({x}):({y}) with linespoints", t.name, t.name);
    }
    s
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub report: serde_json::Value,
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::ResourceCap(_) => 3,
        Error::Config(_) | Error::Argument(_) | Error::Infeasible(_) | Error::ScaleLimit { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

/// Run one suite and write `report.json`, the CSV tables and `plot.gp` below `out`.
pub fn run_config(sub: Subcommand, cfg: &ExperimentConfig, out: &Path, seed: Option<u64>, strict: bool) -> Result<RunOutcome> {
    let seed = seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(out)?;
    let gates = cfg.gate_table(sub).unwrap_or_default();
    let (code, body) = match run_suite(sub, cfg, seed, strict) {
        Ok(so) => {
            for t in &so.tables {
                std::fs::write(out.join(format!("{}.csv", t.name)), t.to_csv())?;
            }
            for (name, text) in &so.dumps {
                std::fs::write(out.join(name), text)?;
            }
            std::fs::write(out.join("plot.gp"), plot_script(sub, &so.tables))?;
            let passed = so.passed();
            (if passed { 0 } else { 1 }, json!({ "passed": passed, "assertions": so.assertions, "summary": so.summary }))
        }
        Err(e) => (exit_code_for(&e), json!({ "passed": false, "error": e.to_string() })),
    };
    let mut report = json!({ "subcommand": sub.name(), "seed": seed, "exit_code": code, "config": cfg, "gates": gates });
    if let (Some(r), Some(b)) = (report.as_object_mut(), body.as_object()) {
        for (k, v) in b {
            r.insert(k.clone(), v.clone());
        }
    }
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(RunOutcome { exit_code: code, report })
}

/// Entry point used by the binary: load the config and run.
pub fn run(sub: &str, config: &Path, out: &Path, seed: Option<u64>, strict: bool) -> i32 {
    let parsed = Subcommand::from_name(sub).and_then(|s| {
        let text = std::fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
        Ok((s, ExperimentConfig::from_json(&text)?))
    });
    let (s, cfg) = match parsed {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return exit_code_for(&e);
        }
    };
    match run_config(s, &cfg, out, seed, strict) {
        Ok(o) => {
            if let Some(list) = o.report.get("assertions").and_then(|a| a.as_array()) {
                for a in list {
                    let mark = if a["passed"].as_bool() == Some(true) { "ok  " } else { "FAIL" };
                    println!("{mark} {} {}", a["name"].as_str().unwrap_or(""), a["detail"].as_str().unwrap_or(""));
                }
            }
            if let Some(e) = o.report.get("error") {
                eprintln!("{}", e.as_str().unwrap_or(""));
            }
            o.exit_code
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code_for(&e)
        }
    }
}
