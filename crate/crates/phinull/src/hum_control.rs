//! Penalized HUM control for the linear tree system.
//!
//! The functional
//!
//! ```text
//! J(u, U) = 1/2 sum dt E <W_u u, u> + 1/2 sum dt E <W_U U, U>
//!         + 1/2 sum dt E <rho^2 y, y> + 1/(2 eps) E |y_K|^2
//! ```
//!
//! is minimized by conjugate gradients in the inner product weighted by
//! `W_u = s^-3 lambda^-4 xi^-3 rho^2` and `W_U = s^-2 lambda^-2 xi^-3 rho^2`.
//! In that metric the Hessian is `I + W^{-1} L^T Q L` and the gradient at `c`
//! is `c + W^{-1}(chi z, Z)`, so a zero gradient is exactly the control formula.

use crate::bsde_adjoint::{solve_backward, AdjointPair};
use crate::error::{Error, Result};
use crate::forward_solver::{diagnostics, forward_map, ForwardProblem, SolveReport};
use crate::scenario::{level_pairing, AdaptedField, ScenarioTree};
use crate::weights::{CarlemanWeights, Gates, TreeWeights};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct ControlPair {
    /// Interior control on levels `0..K`, zero outside `M_0`.
    pub u: AdaptedField,
    /// Noise control on levels `0..K`.
    pub big_u: AdaptedField,
}

impl ControlPair {
    pub fn zeros(p: &ForwardProblem) -> Self {
        let f = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), p.tree.steps);
        ControlPair { u: f.clone(), big_u: f }
    }

    pub fn check(&self, p: &ForwardProblem) -> Result<()> {
        for f in [&self.u, &self.big_u] {
            if f.tree != p.tree || f.layout != p.mesh.primal() || f.levels < p.tree.steps {
                return Err(Error::Tree("controls must be primal fields on levels 0..K".into()));
            }
        }
        let w = self.u.width();
        for node in self.u.raw().chunks_exact(w) {
            if node.iter().zip(&p.chi).any(|(v, c)| *c == 0.0 && *v != 0.0) {
                return Err(Error::Domain("interior control is nonzero outside the control region".into()));
            }
        }
        Ok(())
    }

    /// Zero `u` outside `M_0`.
    pub fn mask_u(&mut self, p: &ForwardProblem) {
        let w = self.u.width();
        for node in self.u.raw_mut().chunks_exact_mut(w) {
            for (v, c) in node.iter_mut().zip(&p.chi) {
                *v *= c;
            }
        }
    }

    /// `(sum dt E <W_u u, u>, sum dt E <W_U U, U>)`.
    pub fn weighted_norms(&self, w: &TreeWeights) -> Result<(f64, f64)> {
        let kk = self.u.tree.steps;
        let dt = self.u.tree.dt();
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..kk {
            a += dt * level_pairing(&self.u, &self.u, Some(&w.w_u[k]), k)?;
            b += dt * level_pairing(&self.big_u, &self.big_u, Some(&w.w_big_u[k]), k)?;
        }
        Ok((a, b))
    }

    fn dot(&self, other: &ControlPair, w: &TreeWeights) -> f64 {
        let kk = self.u.tree.steps;
        let dt = self.u.tree.dt();
        let mut acc = 0.0;
        for k in 0..kk {
            acc += dt * level_pairing(&self.u, &other.u, Some(&w.w_u[k]), k).unwrap_or(f64::NAN);
            acc += dt * level_pairing(&self.big_u, &other.big_u, Some(&w.w_big_u[k]), k).unwrap_or(f64::NAN);
        }
        acc
    }

    fn axpy(&mut self, a: f64, x: &ControlPair) {
        for (s, v) in self.u.raw_mut().iter_mut().zip(x.u.raw()) {
            *s += a * v;
        }
        for (s, v) in self.big_u.raw_mut().iter_mut().zip(x.big_u.raw()) {
            *s += a * v;
        }
    }

    fn xpby(&mut self, b: f64, x: &ControlPair) {
        for (s, v) in self.u.raw_mut().iter_mut().zip(x.u.raw()) {
            *s = v + b * *s;
        }
        for (s, v) in self.big_u.raw_mut().iter_mut().zip(x.big_u.raw()) {
            *s = v + b * *s;
        }
    }
}

/// How the penalty `eps` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonMode {
    Explicit { value: f64 },
    /// `h^-2 exp(-2 s(T) (lambda - 1) e^{6 lambda (m+1)})` with unit constant.
    FullPreset,
    /// `h^-2 exp(2 s(T) max phi)`.
    SharpPreset,
}

impl EpsilonMode {
    pub fn resolve(&self, w: &CarlemanWeights) -> Result<f64> {
        let p = &w.params;
        let h = w.mesh().h();
        let eps = match *self {
            EpsilonMode::Explicit { value } => value,
            EpsilonMode::FullPreset => full_e_lambda_h(w, 1.0)?,
            EpsilonMode::SharpPreset => {
                let sf = w.s(p.t_final)?;
                let pmax = w.phi.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (2.0 * sf * pmax).exp() / (h * h)
            }
        };
        if !(eps.is_finite() && eps > 0.0 && (1.0 / eps).is_finite()) {
            return Err(Error::Domain(format!("penalty {eps} is not a usable positive number")));
        }
        Ok(eps)
    }
}

/// `C h^-2 exp(-2 s(T) (lambda - 1) e^{6 lambda (m+1)})`.
pub fn full_e_lambda_h(w: &CarlemanWeights, c: f64) -> Result<f64> {
    let p = &w.params;
    let h = w.mesh().h();
    let sf = w.s(p.t_final)?;
    let ex = -2.0 * sf * (p.lambda - 1.0) * (6.0 * p.lambda * (p.m + 1.0)).exp();
    if ex > 700.0 {
        return Err(Error::ScaleLimit { param: "E_lambda_h".into(), exponent: ex, limit: 700.0 });
    }
    Ok(c * ex.exp() / (h * h))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumConfig {
    pub epsilon: EpsilonMode,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for HumConfig {
    fn default() -> Self {
        HumConfig { epsilon: EpsilonMode::Explicit { value: 1.0 }, cg_tol: 1e-8, cg_max_iter: 400 }
    }
}

impl HumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol > 0.0 && self.cg_tol <= 1e-4) {
            return Err(Error::Config(format!("cg_tol {} outside (0, 1e-4]", self.cg_tol)));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::Config("cg_max_iter must be positive".into()));
        }
        if let EpsilonMode::Explicit { value } = self.epsilon {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("epsilon {value} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HumSolution {
    pub controls: ControlPair,
    pub y: AdaptedField,
    pub adjoint: AdjointPair,
    pub report: SolveReport,
    pub weights: TreeWeights,
    pub gates: Gates,
    pub epsilon: f64,
    pub j_eps: f64,
    /// `J` at zero controls.
    pub j_zero: f64,
    /// `(sum dt E W_u |u|^2, sum dt E W_U |U|^2)`.
    pub control_norms: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Adjoint of a trajectory with sources `rho^2 y` and terminal `y_K / eps`.
pub fn hum_adjoint(p: &ForwardProblem, w: &TreeWeights, eps: f64, y: &AdaptedField) -> Result<AdjointPair> {
    let kk = p.tree.steps;
    let mut src = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), kk);
    let width = y.width();
    for k in 0..kk {
        let rho2 = &w.rho2[k];
        let yl = y.level(k);
        for (node, out) in yl.chunks_exact(width).zip(src.level_mut(k).chunks_exact_mut(width)) {
            for q in 0..width {
                out[q] = rho2[q] * node[q];
            }
        }
    }
    let terminal: Vec<f64> = y.level(kk).iter().map(|v| v / eps).collect();
    solve_backward(p, &terminal, Some(&src))
}

/// `-W^{-1} (chi z, Z)`, the control formula for a given adjoint.
pub fn control_formula(p: &ForwardProblem, w: &TreeWeights, adj: &AdjointPair) -> ControlPair {
    let mut c = ControlPair::zeros(p);
    let kk = p.tree.steps;
    let width = p.mesh.primal_len();
    for k in 0..kk {
        for j in 0..ScenarioTree::level_size(k) {
            let z = adj.z.node(k, j);
            let bz = adj.big_z.node(k, j);
            let u = c.u.node_mut(k, j);
            for q in 0..width {
                u[q] = -p.chi[q] * z[q] / w.w_u[k][q];
            }
            let bu = c.big_u.node_mut(k, j);
            for q in 0..width {
                bu[q] = -bz[q] / w.w_big_u[k][q];
            }
        }
    }
    c
}

/// `J_eps(c)` together with the trajectory it produces.
pub fn evaluate_j(p: &ForwardProblem, w: &TreeWeights, eps: f64, c: &ControlPair) -> Result<(f64, AdaptedField)> {
    let (j, y, _) = evaluate_j_report(p, w, eps, c)?;
    Ok((j, y))
}

fn evaluate_j_report(
    p: &ForwardProblem,
    w: &TreeWeights,
    eps: f64,
    c: &ControlPair,
) -> Result<(f64, AdaptedField, SolveReport)> {
    let (y, rep) = forward_map(p, &p.y0.values, true, Some(c), Some(w))?;
    let (a, b) = c.weighted_norms(w)?;
    let kk = p.tree.steps;
    let dt = p.tree.dt();
    let mut st = 0.0;
    for k in 0..kk {
        st += dt * level_pairing(&y, &y, Some(&w.rho2[k]), k)?;
    }
    let term = level_pairing(&y, &y, None, kk)? / eps;
    Ok((0.5 * (a + b + st + term), y, rep))
}

fn hessian(p: &ForwardProblem, w: &TreeWeights, eps: f64, x: &ControlPair) -> Result<ControlPair> {
    let zero = vec![0.0; p.mesh.primal_len()];
    let (y, _) = forward_map(p, &zero, false, Some(x), None)?;
    let adj = hum_adjoint(p, w, eps, &y)?;
    let mut out = x.clone();
    out.axpy(-1.0, &control_formula(p, w, &adj));
    Ok(out)
}

fn relative_gap(c: &ControlPair, formula: &ControlPair, w: &TreeWeights) -> f64 {
    let mut d = c.clone();
    d.axpy(-1.0, formula);
    let num = d.dot(&d, w).sqrt();
    let den = formula.dot(formula, w).sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn minimize_j(p: &ForwardProblem, cw: &CarlemanWeights, cfg: &HumConfig) -> Result<HumSolution> {
    cfg.validate()?;
    p.linear()?;
    let eps = cfg.epsilon.resolve(cw)?;
    let w = TreeWeights::new(cw, p.tree.steps, p.tree.dt())?;
    minimize_with(p, w, cw.gates(), eps, cfg)
}

/// Minimization with precomputed tree weights and penalty.
pub fn minimize_with(
    p: &ForwardProblem,
    w: TreeWeights,
    gates: Gates,
    eps: f64,
    cfg: &HumConfig,
) -> Result<HumSolution> {
    cfg.validate()?;
    let (y_free, _) = forward_map(p, &p.y0.values, true, None, None)?;
    let adj_free = hum_adjoint(p, &w, eps, &y_free)?;
    let b = control_formula(p, &w, &adj_free);
    let bnorm = b.dot(&b, &w).sqrt();
    let mut x = ControlPair::zeros(p);
    let mut iterations = 0;
    let mut converged = true;
    if bnorm > 0.0 {
        converged = false;
        let mut r = b.clone();
        let mut d = r.clone();
        let mut rr = r.dot(&r, &w);
        let inner = 0.1 * cfg.cg_tol;
        while iterations < cfg.cg_max_iter {
            let hd = hessian(p, &w, eps, &d)?;
            let dhd = d.dot(&hd, &w);
            if !(dhd > 0.0) {
                return Err(Error::Solve(format!("Hessian lost positivity at iteration {iterations}")));
            }
            let alpha = rr / dhd;
            x.axpy(alpha, &d);
            r.axpy(-alpha, &hd);
            iterations += 1;
            let rr_new = r.dot(&r, &w);
            let xn = x.dot(&x, &w).sqrt();
            if rr_new.sqrt() <= inner * xn {
                converged = true;
                break;
            }
            d.xpby(rr_new / rr, &r);
            rr = rr_new;
        }
    }
    let (j_eps, y, report) = evaluate_j_report(p, &w, eps, &x)?;
    let adjoint = hum_adjoint(p, &w, eps, &y)?;
    let formula = control_formula(p, &w, &adjoint);
    let kkt_residual = relative_gap(&x, &formula, &w);
    let j_zero = evaluate_j(p, &w, eps, &ControlPair::zeros(p))?.0;
    let control_norms = x.weighted_norms(&w)?;
    Ok(HumSolution {
        controls: x,
        y,
        adjoint,
        report,
        weights: w,
        gates,
        epsilon: eps,
        j_eps,
        j_zero,
        control_norms,
        iterations,
        converged: converged && kkt_residual <= cfg.cg_tol,
        kkt_residual,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub trivially_satisfied: bool,
    /// `E |y(T)|^2`.
    pub terminal_energy: f64,
    /// `sum dt E s^-3 lambda^-4 xi^-3 rho^2 |v|^2`.
    pub source_term: f64,
    /// `<tau^-1 lambda^-2 e^{-2 lambda (6m+1)} e^{-4 tau phi} y0, y0>`.
    pub initial_term: f64,
    /// Unit-constant `E_{lambda,h}`.
    pub e_lambda_h: f64,
    /// Measured constant `E|y(T)|^2 / (E_{lambda,h} (source + initial))`.
    pub terminal_constant: f64,
    pub gradient_trace: f64,
    pub weighted_state: f64,
    pub control_u: f64,
    pub control_big_u: f64,
    /// `(1/eps) E |y(T)|^2`, reported beside the four weighted terms.
    pub terminal_penalty: f64,
    pub carleman_lhs: f64,
    pub carleman_rhs: f64,
    pub carleman_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn data_terms(p: &ForwardProblem, w: &TreeWeights) -> Result<(f64, f64)> {
    let kk = p.tree.steps;
    let dt = p.tree.dt();
    let mut source = 0.0;
    if let Some(v) = &p.linear()?.v {
        for k in 0..kk {
            source += dt * level_pairing(v, v, Some(&w.w_u[k]), k)?;
        }
    }
    let (tau, lam, m) = (w.tau, w.lambda, w.m);
    let c = (-2.0 * lam * (6.0 * m + 1.0)).exp() / (tau * lam * lam);
    let initial = p.mesh.cell()
        * p.y0
            .values
            .iter()
            .zip(&w.phi)
            .map(|(y, f)| c * (-4.0 * tau * f).exp() * y * y)
            .sum::<f64>();
    Ok((source, initial))
}

pub fn verify_inequalities(sol: &HumSolution, p: &ForwardProblem, cw: &CarlemanWeights) -> Result<InequalityReport> {
    let w = &sol.weights;
    let (source, initial) = data_terms(p, w)?;
    let e = full_e_lambda_h(cw, 1.0)?;
    let rep = diagnostics(p, &sol.y, Some(w))?;
    let (cu, cbu) = sol.control_norms;
    let lhs = rep.gradient_trace + rep.weighted_state + cu + cbu;
    let rhs = source + initial;
    let trivially = rhs == 0.0 && lhs == 0.0 && rep.terminal_energy == 0.0;
    Ok(InequalityReport {
        trivially_satisfied: trivially,
        terminal_energy: rep.terminal_energy,
        source_term: source,
        initial_term: initial,
        e_lambda_h: e,
        terminal_constant: ratio(rep.terminal_energy, e * rhs),
        gradient_trace: rep.gradient_trace,
        weighted_state: rep.weighted_state,
        control_u: cu,
        control_big_u: cbu,
        terminal_penalty: rep.terminal_energy / sol.epsilon,
        carleman_lhs: lhs,
        carleman_rhs: rhs,
        carleman_ratio: ratio(lhs, rhs),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub lhs: f64,
    pub terminal: f64,
    pub initial: f64,
    pub source: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Initial-data term with `e^{+4 tau phi}`.
    pub initial_as_printed: f64,
    pub ratio_as_printed: f64,
}

/// Weighted gradient trace against terminal, initial and source terms.
pub fn gradient_energy_estimate(sol: &HumSolution, p: &ForwardProblem) -> Result<GradientEstimate> {
    let w = &sol.weights;
    let kk = p.tree.steps;
    let dt = p.tree.dt();
    let h = p.mesh.h();
    let lhs = diagnostics(p, &sol.y, Some(w))?.gradient_trace;
    let sf = w.s[kk];
    let ew: Vec<f64> = w.phi.iter().map(|f| (2.0 * sf * f).exp()).collect();
    let terminal = level_pairing(&sol.y, &sol.y, Some(&ew), kk)? / (h * sol.epsilon).powi(2);
    let (tau, lam) = (w.tau, w.lambda);
    let cell = p.mesh.cell();
    let init = |sign: f64| {
        cell * p.y0
            .values
            .iter()
            .zip(w.phi.iter().zip(&w.xi))
            .map(|(y, (f, x))| (sign * 4.0 * tau * f).exp() * y * y / (tau * tau * lam * lam * x.powi(3)))
            .sum::<f64>()
    };
    let initial = init(-1.0);
    let initial_as_printed = init(1.0);
    let mut source = 0.0;
    if let Some(v) = &p.linear()?.v {
        for k in 0..kk {
            let s = w.s[k];
            let wt: Vec<f64> = w.w_u[k].iter().map(|c| c / s).collect();
            source += dt * level_pairing(v, v, Some(&wt), k)?;
        }
    }
    let rhs = terminal + initial + source;
    let rhs_p = terminal + initial_as_printed + source;
    Ok(GradientEstimate {
        lhs,
        terminal,
        initial,
        source,
        rhs,
        ratio: ratio(lhs, rhs),
        initial_as_printed,
        ratio_as_printed: ratio(lhs, rhs_p),
    })
}
