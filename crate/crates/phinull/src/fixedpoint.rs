//! Picard iteration for the semilinear system through the linear HUM solve.
//!
//! `G(v) = F_1(t, x, y_v, grad_h y_v)` where `y_v` is the optimal state of the
//! linear system with source `v`. The noise nonlinearity is absorbed afterwards
//! by `U := U* - F_2(y, grad_h y)`.

use crate::error::{Error, Result};
use crate::forward_solver::{centered_gradient, forward_map, Drift, ForwardProblem, LinearData, NonlinearFn, NonlinearitySpec};
use crate::hum_control::{minimize_with, ControlPair, EpsilonMode, HumConfig, HumSolution};
use crate::mesh::GridFunction;
use crate::scenario::{level_pairing, AdaptedField, ScenarioTree};
use crate::stats::{ols, LineFit};
use crate::weights::{weight_fields, CarlemanWeights, Gates, TreeWeights, WeightParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// `||v||^2 = sum dt E <s^-3 lambda^-4 xi^-3 rho^2 v, v>`.
#[derive(Clone, Debug)]
pub struct DtauLambdaNorm {
    pub weights: TreeWeights,
}

impl DtauLambdaNorm {
    pub fn new(weights: TreeWeights) -> Self {
        DtauLambdaNorm { weights }
    }

    pub fn norm_sq(&self, v: &AdaptedField) -> Result<f64> {
        let kk = v.tree.steps.min(v.levels);
        let dt = v.tree.dt();
        let mut acc = 0.0;
        for k in 0..kk {
            acc += dt * level_pairing(v, v, Some(&self.weights.w_u[k]), k)?;
        }
        Ok(acc)
    }

    pub fn norm(&self, v: &AdaptedField) -> Result<f64> {
        Ok(self.norm_sq(v)?.sqrt())
    }

    pub fn distance(&self, a: &AdaptedField, b: &AdaptedField) -> Result<f64> {
        let mut d = a.clone();
        d.axpy(-1.0, b)?;
        self.norm(&d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Multiplier for `tau` after a detected divergence.
    pub tau_growth: f64,
    pub tau_cap: f64,
    /// Consecutive ratios `>= 1` that count as divergence.
    pub divergence_window: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { tol: 1e-8, max_iter: 60, tau_growth: 4.0, tau_cap: 256.0, divergence_window: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    /// `||v_{k+1} - v_k||_D` per iteration of the final run.
    pub increments: Vec<f64>,
    /// Largest ratio of successive increments above the noise floor.
    pub contraction_factor: f64,
    pub converged: bool,
    /// Every inner HUM solve of the final run met its KKT tolerance.
    pub inner_converged: bool,
    pub iterations: usize,
    pub tau: f64,
    /// Values of `tau` abandoned after divergence.
    pub escalations: Vec<f64>,
    pub terminal_energy: f64,
    pub control_u: f64,
    pub control_big_u: f64,
    pub source_norm_sq: f64,
    /// Relative mismatch after re-simulating the semilinear system with the corrected `U`.
    pub resimulation_error: f64,
}

#[derive(Clone, Debug)]
pub struct FixedPointResult {
    pub v: AdaptedField,
    pub solution: HumSolution,
    /// Controls for the semilinear system, `U` corrected for `F_2`.
    pub controls: ControlPair,
    pub weights: CarlemanWeights,
    pub report: FixedPointReport,
}

fn nonlinearity(p: &ForwardProblem) -> Result<&NonlinearitySpec> {
    match &p.drift {
        Drift::Semilinear(nl) => Ok(nl),
        Drift::Linear(_) => Err(Error::Argument("fixed-point loop needs a semilinear problem".into())),
    }
}

/// Linear system with zero coefficients and source `v`; a zero source is dropped.
pub fn linear_instance(p: &ForwardProblem, v: &AdaptedField) -> ForwardProblem {
    let mut d = LinearData::zero(p.mesh);
    if v.max_abs() > 0.0 {
        d.v = Some(v.clone());
    }
    p.with_drift(Drift::Linear(d))
}

/// `f(t_k, x, y, grad_h y)` on levels `0..K`.
pub fn apply_nonlinearity(f: &NonlinearFn, y: &AdaptedField) -> AdaptedField {
    let tree = y.tree;
    let mesh = y.mesh;
    let kk = tree.steps;
    let mut out = AdaptedField::zeros(tree, mesh, mesh.primal(), kk);
    if f.is_zero() {
        return out;
    }
    let lay = mesh.primal();
    let h = mesh.h();
    let width = lay.len();
    let mut grads = vec![vec![0.0; width]; mesh.dim];
    let mut b = vec![0.0; mesh.dim];
    for k in 0..kk {
        let t = tree.time(k);
        for j in 0..ScenarioTree::level_size(k) {
            let node = y.node(k, j);
            for (i, g) in grads.iter_mut().enumerate() {
                centered_gradient(mesh, node, i, g);
            }
            let o = out.node_mut(k, j);
            for q in 0..width {
                let x = lay.point(q, h);
                for i in 0..mesh.dim {
                    b[i] = grads[i][q];
                }
                o[q] = f.eval(t, &x[..mesh.dim], node[q], &b);
            }
        }
    }
    out
}

/// One evaluation of `G`.
pub fn g_map(
    p: &ForwardProblem,
    w: &TreeWeights,
    gates: Gates,
    eps: f64,
    cfg: &HumConfig,
    v: &AdaptedField,
) -> Result<(AdaptedField, HumSolution)> {
    let nl = nonlinearity(p)?;
    let lin = linear_instance(p, v);
    let sol = minimize_with(&lin, w.clone(), gates, eps, cfg)?;
    Ok((apply_nonlinearity(&nl.f1, &sol.y), sol))
}

fn with_tau(cw: &CarlemanWeights, tau: f64) -> Result<CarlemanWeights> {
    let params = WeightParams { tau, ..cw.params };
    weight_fields(&params, &cw.psi)
}

enum Run {
    Done(AdaptedField, HumSolution, FixedPointReport),
    Diverged,
}

fn run_once(
    p: &ForwardProblem,
    cw: &CarlemanWeights,
    hum: &HumConfig,
    cfg: &FixedPointConfig,
) -> Result<Run> {
    let eps = hum.epsilon.resolve(cw)?;
    let w = TreeWeights::new(cw, p.tree.steps, p.tree.dt())?;
    let norm = DtauLambdaNorm::new(w.clone());
    let gates = cw.gates();
    let mut v = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), p.tree.steps);
    let mut rep = FixedPointReport { tau: cw.params.tau, inner_converged: true, ..Default::default() };
    let mut streak = 0;
    loop {
        let (next, sol) = g_map(p, &w, gates, eps, hum, &v)?;
        rep.inner_converged &= sol.converged;
        let vn = norm.norm(&v)?;
        let inc = norm.distance(&next, &v)?;
        rep.iterations += 1;
        if let Some(&prev) = rep.increments.last() {
            let floor = 1e-13 * (1.0 + vn);
            if prev > floor && inc > floor {
                let q = inc / prev;
                rep.contraction_factor = rep.contraction_factor.max(q);
                streak = if q >= 1.0 { streak + 1 } else { 0 };
            }
        }
        rep.increments.push(inc);
        if inc <= cfg.tol * (1.0 + vn) {
            rep.converged = true;
            return Ok(Run::Done(v, sol, rep));
        }
        if streak >= cfg.divergence_window {
            return Ok(Run::Diverged);
        }
        if rep.iterations >= cfg.max_iter {
            return Ok(Run::Done(v, sol, rep));
        }
        v = next;
    }
}

/// Picard loop from `v_0 = 0`, escalating `tau` on divergence.
pub fn picard_iterate(
    p: &ForwardProblem,
    cw: &CarlemanWeights,
    hum: &HumConfig,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    let nl = nonlinearity(p)?.clone();
    let mut cw = cw.clone();
    let mut escalations = Vec::new();
    let (v, sol, mut rep) = loop {
        match run_once(p, &cw, hum, cfg)? {
            Run::Done(v, sol, rep) => break (v, sol, rep),
            Run::Diverged => {
                let tau = cw.params.tau;
                escalations.push(tau);
                let next = tau * cfg.tau_growth;
                if next > cfg.tau_cap {
                    return Err(Error::Divergence(format!(
                        "contraction factor stayed >= 1 up to tau = {tau}; a larger tau is needed"
                    )));
                }
                cw = with_tau(&cw, next)?;
            }
        }
    };
    rep.escalations = escalations;
    let mut controls = sol.controls.clone();
    let f2 = apply_nonlinearity(&nl.f2, &sol.y);
    controls.big_u.axpy(-1.0, &f2)?;
    let (y_re, _) = forward_map(p, &p.y0.values, true, Some(&controls), None)?;
    let mut diff = y_re.clone();
    diff.axpy(-1.0, &sol.y)?;
    let scale = sol.y.max_abs();
    rep.resimulation_error = if scale == 0.0 { diff.max_abs() } else { diff.max_abs() / scale };
    rep.terminal_energy = sol.report.terminal_energy;
    rep.control_u = sol.control_norms.0;
    rep.control_big_u = sol.control_norms.1;
    rep.source_norm_sq = DtauLambdaNorm::new(sol.weights.clone()).norm_sq(&v)?;
    Ok(FixedPointResult { v, solution: sol, controls, weights: cw, report: rep })
}

/// Squared two-point ratio `||G v1 - G v2||^2 / ||v1 - v2||^2`, and whether both inner solves converged.
pub fn two_point_contraction(
    p: &ForwardProblem,
    cw: &CarlemanWeights,
    hum: &HumConfig,
    v1: &AdaptedField,
    v2: &AdaptedField,
) -> Result<(f64, bool)> {
    let eps = hum.epsilon.resolve(cw)?;
    let w = TreeWeights::new(cw, p.tree.steps, p.tree.dt())?;
    let norm = DtauLambdaNorm::new(w.clone());
    let gates = cw.gates();
    let (g1, s1) = g_map(p, &w, gates, eps, hum, v1)?;
    let (g2, s2) = g_map(p, &w, gates, eps, hum, v2)?;
    let num = norm.distance(&g1, &g2)?;
    let den = norm.distance(v1, v2)?;
    if den == 0.0 {
        return Err(Error::Argument("two-point contraction needs distinct sources".into()));
    }
    Ok(((num / den).powi(2), s1.converged && s2.converged))
}

/// Random source scaled to unit `D` norm.
pub fn random_source(p: &ForwardProblem, w: &TreeWeights, rng: &mut ChaCha8Rng) -> Result<AdaptedField> {
    let mut v = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), p.tree.steps);
    for x in v.raw_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    let n = DtauLambdaNorm::new(w.clone()).norm(&v)?;
    v.scale(1.0 / n);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionPoint {
    pub tau: f64,
    /// Largest squared two-point ratio over the sampled pairs.
    pub factor: f64,
    pub mean: f64,
    /// Every inner HUM solve met its KKT tolerance.
    pub inner_converged: bool,
}

/// Two-point contraction factors over a list of `tau` values.
pub fn contraction_sweep(
    p: &ForwardProblem,
    cw: &CarlemanWeights,
    hum: &HumConfig,
    taus: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<(Vec<ContractionPoint>, LineFit)> {
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cwt = with_tau(cw, tau)?;
        let w = TreeWeights::new(&cwt, p.tree.steps, p.tree.dt())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: f64 = 0.0;
        let mut sum = 0.0;
        let mut ok = true;
        for _ in 0..pairs {
            let a = random_source(p, &w, &mut rng)?;
            let b = random_source(p, &w, &mut rng)?;
            let (q, c) = two_point_contraction(p, &cwt, hum, &a, &b)?;
            ok &= c;
            best = best.max(q);
            sum += q;
        }
        out.push(ContractionPoint { tau, factor: best, mean: sum / pairs.max(1) as f64, inner_converged: ok });
    }
    let lx: Vec<f64> = out.iter().map(|c| c.tau.ln()).collect();
    let ly: Vec<f64> = out.iter().map(|c| c.factor.ln()).collect();
    let fit = ols(&lx, &ly);
    Ok((out, fit))
}

/// `delta` with `tau (delta T)^{-m} h = eps0`.
pub fn coupled_delta(p: &WeightParams, h: f64) -> f64 {
    (p.tau * h / p.eps0).powf(1.0 / p.m) / p.t_final
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRecord {
    pub n: usize,
    pub h: f64,
    pub delta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// `E |y(T)|^2 / E |y0|^2` for the controlled state.
    pub ratio_t: f64,
    /// Same ratio without controls.
    pub uncontrolled_ratio: f64,
    pub control_u: f64,
    pub control_big_u: f64,
    /// `E <e^{-4 tau phi} y0, y0>`.
    pub initial_weighted: f64,
    /// Control norms over `initial_weighted`.
    pub control_ratio: f64,
    /// `||v||^2_D` over `initial_weighted`.
    pub source_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gates: Gates,
}

pub fn decay_certificate(res: &FixedPointResult, p: &ForwardProblem) -> Result<DecayRecord> {
    let mesh = p.mesh;
    let cell = mesh.cell();
    let y0n: f64 = cell * p.y0.values.iter().map(|v| v * v).sum::<f64>();
    let (y_free, _) = forward_map(p, &p.y0.values, true, None, None)?;
    let free_t = level_pairing(&y_free, &y_free, None, p.tree.steps)?;
    let w = &res.solution.weights;
    let tau = res.weights.params.tau;
    let init: f64 = cell
        * p.y0.values.iter().zip(&w.phi).map(|(y, f)| (-4.0 * tau * f).exp() * y * y).sum::<f64>();
    let r = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a / b };
    let rep = &res.report;
    Ok(DecayRecord {
        n: mesh.n_interior,
        h: mesh.h(),
        delta: res.weights.params.delta,
        tau,
        lambda: res.weights.params.lambda,
        epsilon: res.solution.epsilon,
        ratio_t: r(rep.terminal_energy, y0n),
        uncontrolled_ratio: r(free_t, y0n),
        control_u: rep.control_u,
        control_big_u: rep.control_big_u,
        initial_weighted: init,
        control_ratio: r(rep.control_u + rep.control_big_u, init),
        source_ratio: r(rep.source_norm_sq, init),
        iterations: rep.iterations,
        converged: rep.converged && rep.inner_converged,
        gates: res.weights.gates(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaFit {
    pub kappa_hat: f64,
    /// `log(1/C)`.
    pub intercept: f64,
    pub r2: f64,
    pub rows: usize,
    pub no_decay: bool,
}

/// Least-squares fit of `-log ratio_t` against `1/h`; the slope is `kappa`.
pub fn fit_kappa(rows: &[DecayRecord], gated_only: bool) -> Result<KappaFit> {
    let sel: Vec<&DecayRecord> = rows.iter().filter(|r| !gated_only || r.gates.all()).collect();
    let pts: Vec<(f64, f64)> = sel.iter().map(|r| (r.h, r.ratio_t)).collect();
    fit_kappa_points(&pts)
}

/// Same fit on raw `(h, ratio)` pairs.
pub fn fit_kappa_points(pts: &[(f64, f64)]) -> Result<KappaFit> {
    if pts.len() < 3 {
        return Err(Error::Argument(format!("a kappa fit needs at least three rows, got {}", pts.len())));
    }
    if let Some((h, r)) = pts.iter().find(|(_, r)| !(*r > 0.0)) {
        return Err(Error::Domain(format!("nonpositive ratio {r} at h = {h}")));
    }
    let x: Vec<f64> = pts.iter().map(|(h, _)| 1.0 / h).collect();
    let y: Vec<f64> = pts.iter().map(|(_, r)| -r.ln()).collect();
    let fit: LineFit = ols(&x, &y);
    Ok(KappaFit {
        kappa_hat: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        rows: pts.len(),
        no_decay: !(fit.slope > 0.0),
    })
}

/// Default penalty for decay sweeps.
pub fn decay_epsilon() -> EpsilonMode {
    EpsilonMode::SharpPreset
}

/// Initial state used by the decay sweeps: `sin(pi x)` products.
pub fn bump_initial(mesh: crate::mesh::MeshSpec) -> GridFunction {
    GridFunction::from_fn(mesh, mesh.primal(), |x| {
        x.iter().map(|v| (std::f64::consts::PI * v).sin()).product()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hum_control::minimize_j;
    use crate::mesh::{CoefficientField, GammaProfile, MeshSpec};
    use crate::weights::{build_psi, RegionBox};

    fn setup(f1: NonlinearFn, f2: NonlinearFn) -> (ForwardProblem, CarlemanWeights) {
        let mesh = MeshSpec::new(1, 7).unwrap();
        let g = CoefficientField::new(mesh, GammaProfile::Constant { value: 0.1 }, None).unwrap();
        let tree = ScenarioTree::new(6, 1.0).unwrap();
        let region = RegionBox::cube(1, 0.3, 0.7);
        let y0 = bump_initial(mesh);
        let p = ForwardProblem::new(mesh, g, region.clone(), y0, Drift::Semilinear(NonlinearitySpec::new(f1, f2)), tree)
            .unwrap();
        let psi = build_psi(mesh, &region).unwrap();
        let cw = weight_fields(&WeightParams::default(), &psi).unwrap();
        (p, cw)
    }

    #[test]
    fn zero_nonlinearity_matches_linear() {
        let (p, cw) = setup(NonlinearFn::Zero, NonlinearFn::Zero);
        let hum = HumConfig::default();
        let res = picard_iterate(&p, &cw, &hum, &FixedPointConfig::default()).unwrap();
        assert_eq!(res.report.iterations, 1);
        assert!(res.report.converged);
        assert_eq!(res.v.max_abs(), 0.0);
        let lin = minimize_j(&p.with_drift(Drift::Linear(LinearData::zero(p.mesh))), &cw, &hum).unwrap();
        assert_eq!(lin.y.raw(), res.solution.y.raw());
        assert_eq!(lin.controls, res.controls);
    }

    #[test]
    fn lipschitz_source_converges() {
        let (p, cw) = setup(NonlinearFn::Linear { a_coef: 0.1, b_coef: vec![0.0] }, NonlinearFn::Zero);
        let res = picard_iterate(&p, &cw, &HumConfig::default(), &FixedPointConfig::default()).unwrap();
        assert!(res.report.converged);
        assert!(res.report.contraction_factor < 1.0);
        let inc = &res.report.increments;
        for k in 1..inc.len() {
            if inc[k - 1] > 1e-13 && inc[k] > 1e-13 {
                assert!(inc[k] <= res.report.contraction_factor * inc[k - 1] * (1.0 + 1e-12));
            }
        }
        let d = decay_certificate(&res, &p).unwrap();
        assert!(d.ratio_t <= d.uncontrolled_ratio);
    }

    #[test]
    fn noise_substitution_reproduces_state() {
        let (p, cw) = setup(NonlinearFn::Sine { amp: 0.1 }, NonlinearFn::Sine { amp: 0.2 });
        let cfg = FixedPointConfig { tol: 1e-13, ..Default::default() };
        let hum = HumConfig { cg_tol: 1e-12, ..Default::default() };
        let res = picard_iterate(&p, &cw, &hum, &cfg).unwrap();
        assert!(res.report.resimulation_error <= 1e-10, "{}", res.report.resimulation_error);
    }

    #[test]
    fn norm_is_homogeneous() {
        let (p, cw) = setup(NonlinearFn::Zero, NonlinearFn::Zero);
        let w = TreeWeights::new(&cw, 6, p.tree.dt()).unwrap();
        let n = DtauLambdaNorm::new(w.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_source(&p, &w, &mut rng).unwrap();
        assert!((n.norm(&v).unwrap() - 1.0).abs() < 1e-14);
        let mut c = v.clone();
        c.scale(-3.5);
        assert!((n.norm(&c).unwrap() - 3.5).abs() < 1e-13);
        let z = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), 6);
        assert_eq!(n.norm(&z).unwrap(), 0.0);
    }

    #[test]
    fn coupling_hits_eps0() {
        let p = WeightParams::default();
        for h in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
            let d = coupled_delta(&p, h);
            let q = WeightParams { delta: d, ..p };
            assert!((q.s_final() * h - p.eps0).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_on_exact_line() {
        let pts: Vec<(f64, f64)> = [8.0_f64, 16.0, 32.0].iter().map(|n| (1.0 / n, (-5.0 * n).exp())).collect();
        let f = fit_kappa_points(&pts).unwrap();
        assert!((f.kappa_hat - 5.0).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let flat = fit_kappa_points(&[(0.5, 0.3), (0.25, 0.3), (0.125, 0.3)]).unwrap();
        assert_eq!(flat.kappa_hat, 0.0);
        assert!(flat.no_decay);
        assert!(fit_kappa_points(&pts[..2]).is_err());
        assert!(fit_kappa_points(&[(0.5, 0.3), (0.25, 0.0), (0.125, 0.3)]).is_err());
    }

    #[test]
    fn kappa_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|n: &f64| (1.0 / n, (-0.5 * n).exp() * (1.0 + rng.random_range(-0.1..0.1))))
            .collect();
        let f = fit_kappa_points(&pts).unwrap();
        assert!((f.kappa_hat - 0.5).abs() < 0.1);
    }

    #[test]
    fn zero_initial_gives_zero_ratio() {
        let (p, cw) = setup(NonlinearFn::Sine { amp: 0.1 }, NonlinearFn::Zero);
        let p = p.with_y0(GridFunction::zeros(p.mesh, p.mesh.primal()));
        let res = picard_iterate(&p, &cw, &HumConfig::default(), &FixedPointConfig::default()).unwrap();
        let d = decay_certificate(&res, &p).unwrap();
        assert_eq!(d.ratio_t, 0.0);
    }
}
