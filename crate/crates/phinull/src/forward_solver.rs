//! Semi-implicit Euler-Maruyama stepping of the controlled forward equation
//! on the scenario tree:
//!
//! `(I - dt Lap) y_{k+1}^{c} = y_k + dt (drift_k + chi u_k) + dB^{c} (diffusion_k + U_k)`
//!
//! with the Laplacian implicit and everything else frozen at `t_k`.

use crate::error::{Error, Result};
use crate::hum_control::ControlPair;
use crate::mesh::{laplacian_matrix, BandCholesky, BandMatrix, CoefficientField, GridFunction, MeshSpec};
use crate::scenario::{AdaptedField, ScenarioTree};
use crate::weights::{RegionBox, TreeWeights};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

/// Factorized `I - dt sum_i D_i(gamma_i D_i .)`, shared by every node.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub dt: f64,
    matrix: BandMatrix,
    chol: BandCholesky,
}

impl Propagator {
    pub fn new(mesh: MeshSpec, gamma: &CoefficientField, dt: f64) -> Result<Self> {
        let lap = laplacian_matrix(mesh, gamma);
        let mut a = BandMatrix::zeros(lap.size, lap.bw);
        for r in 0..lap.size {
            for c in r.saturating_sub(lap.bw)..=r {
                let v = -dt * lap.get(r, c) + if r == c { 1.0 } else { 0.0 };
                if v != 0.0 {
                    a.add(r, c, v);
                }
            }
        }
        let chol = BandCholesky::factor(&a)?;
        Ok(Propagator { dt, matrix: a, chol })
    }

    /// Solves in place and returns the relative residual.
    pub fn solve(&self, x: &mut [f64]) -> f64 {
        let rhs = x.to_vec();
        self.chol.solve_in_place(x);
        let mut ax = vec![0.0; x.len()];
        self.matrix.matvec(x, &mut ax);
        let num: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = rhs.iter().map(|b| b * b).sum();
        if den == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }
}

/// `A_i D_i y` for a primal vector with Dirichlet data: `(y_{+} - y_{-}) / 2h` along axis `i`.
pub fn centered_gradient(mesh: MeshSpec, y: &[f64], i: usize, out: &mut [f64]) {
    let lay = mesh.primal();
    let stride = lay.stride(i);
    let nn = mesh.n_interior;
    let c = 0.5 / mesh.h();
    for p in 0..y.len() {
        let j = (p / stride) % nn;
        let up = if j + 1 < nn { y[p + stride] } else { 0.0 };
        let dn = if j > 0 { y[p - stride] } else { 0.0 };
        out[p] = c * (up - dn);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearFn {
    Zero,
    /// `a_coef * a + sum_i b_coef[i] * b_i`.
    Linear { a_coef: f64, b_coef: Vec<f64> },
    /// `amp * sin(a)`.
    Sine { amp: f64 },
    /// `amp * (sin(a) + sum_i sin(b_i)) / sqrt(1 + n)`.
    SineGradient { amp: f64 },
}

impl NonlinearFn {
    pub fn eval(&self, _t: f64, _x: &[f64], a: f64, b: &[f64]) -> f64 {
        match self {
            NonlinearFn::Zero => 0.0,
            NonlinearFn::Linear { a_coef, b_coef } => {
                a_coef * a + b_coef.iter().zip(b).map(|(c, g)| c * g).sum::<f64>()
            }
            NonlinearFn::Sine { amp } => amp * a.sin(),
            NonlinearFn::SineGradient { amp } => {
                let n = b.len() as f64;
                amp * (a.sin() + b.iter().map(|g| g.sin()).sum::<f64>()) / (1.0 + n).sqrt()
            }
        }
    }

    /// Lipschitz constant in `(a, b)` for the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        match self {
            NonlinearFn::Zero => 0.0,
            NonlinearFn::Linear { a_coef, b_coef } => {
                (a_coef * a_coef + b_coef.iter().map(|c| c * c).sum::<f64>()).sqrt()
            }
            NonlinearFn::Sine { amp } => amp.abs(),
            NonlinearFn::SineGradient { amp } => amp.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NonlinearFn::Zero)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub f1: NonlinearFn,
    pub f2: NonlinearFn,
    pub l1: f64,
    pub l2: f64,
}

impl NonlinearitySpec {
    pub fn new(f1: NonlinearFn, f2: NonlinearFn) -> Self {
        let (l1, l2) = (f1.lipschitz(), f2.lipschitz());
        NonlinearitySpec { f1, f2, l1, l2 }
    }

    /// Checks `F_i(t, x, 0, 0) = 0` on the grid and the declared Lipschitz bounds
    /// against `pairs` random samples.
    pub fn validate(&self, mesh: MeshSpec, pairs: usize, seed: u64) -> Result<()> {
        use rand::{Rng, SeedableRng};
        let zero_b = vec![0.0; mesh.dim];
        let lay = mesh.primal();
        for p in 0..lay.len() {
            let x = lay.point(p, mesh.h());
            for f in [&self.f1, &self.f2] {
                if f.eval(0.0, &x[..mesh.dim], 0.0, &zero_b) != 0.0 {
                    return Err(Error::Argument("nonlinearity does not vanish at zero".into()));
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (f, l) in [(&self.f1, self.l1), (&self.f2, self.l2)] {
            for _ in 0..pairs {
                let a1: f64 = rng.random_range(-3.0..3.0);
                let a2: f64 = rng.random_range(-3.0..3.0);
                let b1: Vec<f64> = (0..mesh.dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b2: Vec<f64> = (0..mesh.dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let x = [0.5; 3];
                let df = (f.eval(0.0, &x[..mesh.dim], a1, &b1) - f.eval(0.0, &x[..mesh.dim], a2, &b2)).abs();
                let dist = ((a1 - a2).powi(2)
                    + b1.iter().zip(&b2).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
                .sqrt();
                if dist > 0.0 && df / dist > l * (1.0 + 1e-6) + 1e-300 {
                    return Err(Error::Argument(format!(
                        "empirical Lipschitz ratio {} exceeds declared {l}",
                        df / dist
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic coefficients of the linear drift `sum_i a1_i A_i D_i y + a2 y + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearData {
    pub a1: Vec<GridFunction>,
    pub a2: GridFunction,
    pub v: Option<AdaptedField>,
}

impl LinearData {
    pub fn zero(mesh: MeshSpec) -> Self {
        LinearData {
            a1: (0..mesh.dim).map(|_| GridFunction::zeros(mesh, mesh.primal())).collect(),
            a2: GridFunction::zeros(mesh, mesh.primal()),
            v: None,
        }
    }

    pub fn has_first_order(&self) -> bool {
        self.a1.iter().any(|a| a.max_abs() > 0.0)
    }
}

#[derive(Clone, Debug)]
pub enum Drift {
    Linear(LinearData),
    Semilinear(NonlinearitySpec),
}

#[derive(Clone, Debug)]
pub struct ForwardProblem {
    pub mesh: MeshSpec,
    pub gamma: CoefficientField,
    pub region: RegionBox,
    /// Indicator of `M_0` on the primal mesh.
    pub chi: Vec<f64>,
    pub y0: GridFunction,
    pub drift: Drift,
    pub tree: ScenarioTree,
    pub prop: Arc<Propagator>,
}

impl ForwardProblem {
    pub fn new(
        mesh: MeshSpec,
        gamma: CoefficientField,
        region: RegionBox,
        y0: GridFunction,
        drift: Drift,
        tree: ScenarioTree,
    ) -> Result<Self> {
        y0.expect_layout(&mesh.primal())?;
        if y0.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state".into()));
        }
        if let Drift::Linear(d) = &drift {
            if d.a1.len() != mesh.dim {
                return Err(Error::Argument("need one first-order coefficient per direction".into()));
            }
            for a in d.a1.iter().chain(std::iter::once(&d.a2)) {
                a.expect_layout(&mesh.primal())?;
                if a.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("linear coefficients".into()));
                }
            }
            if let Some(v) = &d.v {
                if v.layout != mesh.primal() || v.levels < tree.steps || v.tree != tree {
                    return Err(Error::Tree("source must be a primal field on levels 0..K".into()));
                }
            }
        }
        let chi = region.mask(mesh).values;
        let prop = Arc::new(Propagator::new(mesh, &gamma, tree.dt())?);
        Ok(ForwardProblem { mesh, gamma, region, chi, y0, drift, tree, prop })
    }

    pub fn with_drift(&self, drift: Drift) -> Self {
        ForwardProblem { drift, ..self.clone() }
    }

    pub fn with_y0(&self, y0: GridFunction) -> Self {
        ForwardProblem { y0, ..self.clone() }
    }

    pub fn linear(&self) -> Result<&LinearData> {
        match &self.drift {
            Drift::Linear(d) => Ok(d),
            Drift::Semilinear(_) => Err(Error::Argument("problem is not linear".into())),
        }
    }

    /// Max norms of `a1` and `a2`.
    pub fn coefficient_bounds(&self) -> (f64, f64) {
        match &self.drift {
            Drift::Linear(d) => (
                d.a1.iter().map(|a| a.max_abs()).fold(0.0, f64::max),
                d.a2.max_abs(),
            ),
            Drift::Semilinear(_) => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// `E ||y(T)||^2`.
    pub terminal_energy: f64,
    /// `sum_k dt E <rho_k^2 y_k, y_k>`.
    pub weighted_state: f64,
    /// `sum_i sum_k dt E <s^-2 lambda^-2 xi^-3 rho^2 (D_i y_k)^2>`.
    pub gradient_trace: f64,
    pub max_solve_residual: f64,
}

/// Right-hand side pieces of one step at a node: `(b, n)` with children `M(b +- sqrt(dt) n)`.
fn step_rhs(
    p: &ForwardProblem,
    k: usize,
    j: usize,
    y: &[f64],
    controls: Option<&ControlPair>,
    include_source: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mesh = p.mesh;
    let dt = p.tree.dt();
    let len = y.len();
    let mut b = y.to_vec();
    let mut n = vec![0.0; len];
    match &p.drift {
        Drift::Linear(d) => {
            let mut g = vec![0.0; len];
            for (i, a1) in d.a1.iter().enumerate() {
                if a1.max_abs() == 0.0 {
                    continue;
                }
                centered_gradient(mesh, y, i, &mut g);
                for q in 0..len {
                    b[q] += dt * a1.values[q] * g[q];
                }
            }
            for q in 0..len {
                b[q] += dt * d.a2.values[q] * y[q];
            }
            if include_source {
                if let Some(v) = &d.v {
                    for (bq, vq) in b.iter_mut().zip(v.node(k, j)) {
                        *bq += dt * vq;
                    }
                }
            }
        }
        Drift::Semilinear(nl) => {
            let t = p.tree.time(k);
            let grads: Vec<Vec<f64>> = (0..mesh.dim)
                .map(|i| {
                    let mut g = vec![0.0; len];
                    centered_gradient(mesh, y, i, &mut g);
                    g
                })
                .collect();
            let lay = mesh.primal();
            let h = mesh.h();
            let mut bq = vec![0.0; mesh.dim];
            for q in 0..len {
                let x = lay.point(q, h);
                for i in 0..mesh.dim {
                    bq[i] = grads[i][q];
                }
                if !nl.f1.is_zero() {
                    b[q] += dt * nl.f1.eval(t, &x[..mesh.dim], y[q], &bq);
                }
                if !nl.f2.is_zero() {
                    n[q] += nl.f2.eval(t, &x[..mesh.dim], y[q], &bq);
                }
            }
        }
    }
    if let Some(c) = controls {
        for (q, (uq, cq)) in c.u.node(k, j).iter().zip(&p.chi).enumerate() {
            b[q] += dt * cq * uq;
        }
        for (nq, uq) in n.iter_mut().zip(c.big_u.node(k, j)) {
            *nq += uq;
        }
    }
    (b, n)
}

/// One step from `y_k` at node `(k, j)`; returns the `+` and `-` children and
/// the worse of the two solve residuals.
pub fn step(
    p: &ForwardProblem,
    k: usize,
    j: usize,
    y: &[f64],
    controls: Option<&ControlPair>,
) -> Result<([Vec<f64>; 2], f64)> {
    step_inner(p, k, j, y, controls, true)
}

fn step_inner(
    p: &ForwardProblem,
    k: usize,
    j: usize,
    y: &[f64],
    controls: Option<&ControlPair>,
    include_source: bool,
) -> Result<([Vec<f64>; 2], f64)> {
    if k >= p.tree.steps {
        return Err(Error::Tree(format!("cannot step from terminal level {k}")));
    }
    let (b, n) = step_rhs(p, k, j, y, controls, include_source);
    let sd = p.tree.sqrt_dt();
    let mut plus: Vec<f64> = b.iter().zip(&n).map(|(x, z)| x + sd * z).collect();
    let mut minus: Vec<f64> = b.iter().zip(&n).map(|(x, z)| x - sd * z).collect();
    let r1 = p.prop.solve(&mut plus);
    let r2 = p.prop.solve(&mut minus);
    if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("forward step at level {k}")));
    }
    Ok(([plus, minus], r1.max(r2)))
}

/// Full tree trajectory from the problem's own `y0` and source.
pub fn solve_forward(
    p: &ForwardProblem,
    controls: Option<&ControlPair>,
    weights: Option<&TreeWeights>,
) -> Result<(AdaptedField, SolveReport)> {
    forward_map(p, &p.y0.values, true, controls, weights)
}

/// Tree trajectory from `y0`, optionally dropping the linear source `v`.
pub fn forward_map(
    p: &ForwardProblem,
    y0: &[f64],
    include_source: bool,
    controls: Option<&ControlPair>,
    weights: Option<&TreeWeights>,
) -> Result<(AdaptedField, SolveReport)> {
    let tree = p.tree;
    let kk = tree.steps;
    if let Some(c) = controls {
        c.check(p)?;
    }
    let mut y = AdaptedField::zeros(tree, p.mesh, p.mesh.primal(), kk + 1);
    y.node_mut(0, 0).copy_from_slice(y0);
    let mut worst: f64 = 0.0;
    for k in 0..kk {
        for j in 0..ScenarioTree::level_size(k) {
            let yk = y.node(k, j).to_vec();
            let ([a, b], r) = step_inner(p, k, j, &yk, controls, include_source)?;
            worst = worst.max(r);
            y.node_mut(k + 1, 2 * j).copy_from_slice(&a);
            y.node_mut(k + 1, 2 * j + 1).copy_from_slice(&b);
        }
    }
    let mut rep = diagnostics(p, &y, weights)?;
    rep.max_solve_residual = worst;
    Ok((y, rep))
}

pub fn diagnostics(p: &ForwardProblem, y: &AdaptedField, weights: Option<&TreeWeights>) -> Result<SolveReport> {
    use crate::scenario::level_pairing;
    let kk = p.tree.steps;
    let dt = p.tree.dt();
    let mut rep = SolveReport { terminal_energy: level_pairing(y, y, None, kk)?, ..Default::default() };
    if let Some(w) = weights {
        let mesh = p.mesh;
        for k in 0..kk {
            rep.weighted_state += dt * level_pairing(y, y, Some(&w.rho2[k]), k)?;
            for j in 0..ScenarioTree::level_size(k) {
                let node = y.node_fn(k, j).dirichlet_extend()?;
                for i in 0..mesh.dim {
                    let d = crate::mesh::difference(&node, i)?;
                    let s: f64 = d.values.iter().zip(&w.w_grad[k][i]).map(|(v, c)| c * v * v).sum();
                    rep.gradient_trace += dt * s * mesh.cell() / ScenarioTree::level_size(k) as f64;
                }
            }
        }
    }
    Ok(rep)
}

/// Terminal states of forward Monte Carlo paths with zero controls.
pub fn simulate_paths(p: &ForwardProblem, increments: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let kk = p.tree.steps;
    let mut out = Vec::with_capacity(increments.len());
    for path in increments {
        if path.len() != kk {
            return Err(Error::Argument("path length differs from tree steps".into()));
        }
        let mut y = p.y0.values.clone();
        for (k, &db) in path.iter().enumerate() {
            // node index 0 is only used for deterministic sources
            let (b, n) = step_rhs(p, k, 0, &y, None, false);
            let mut next: Vec<f64> = b.iter().zip(&n).map(|(x, z)| x + db * z).collect();
            p.prop.solve(&mut next);
            y = next;
        }
        out.push(y);
    }
    Ok(out)
}

/// Per-level CSV of `E[y]` and `E[y^2]` at every primal point.
pub fn write_trajectory_csv(y: &AdaptedField, mut w: impl Write) -> Result<()> {
    writeln!(w, "level,t,point,mean,second_moment")?;
    let width = y.width();
    for k in 0..y.levels {
        let n = ScenarioTree::level_size(k) as f64;
        let mut mean = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for j in 0..ScenarioTree::level_size(k) {
            for (q, v) in y.node(k, j).iter().enumerate() {
                mean[q] += v / n;
                sq[q] += v * v / n;
            }
        }
        for q in 0..width {
            writeln!(w, "{k},{:e},{q},{:e},{:e}", y.tree.time(k), mean[q], sq[q])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{discrete_gradient, GammaProfile};
    use crate::scenario::{expectation_at, level_pairing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(nn: usize, steps: usize, y0: GridFunction, drift: Drift) -> ForwardProblem {
        problem_t(nn, steps, 1.0, y0, drift)
    }

    fn problem_t(nn: usize, steps: usize, t: f64, y0: GridFunction, drift: Drift) -> ForwardProblem {
        let mesh = MeshSpec::new(1, nn).unwrap();
        let g = CoefficientField::new(mesh, GammaProfile::Constant { value: 1.0 }, None).unwrap();
        let tree = ScenarioTree::new(steps, t).unwrap();
        ForwardProblem::new(mesh, g, RegionBox::cube(1, 0.3, 0.7), y0, drift, tree).unwrap()
    }

    #[test]
    fn centered_gradient_matches_operator() {
        let mesh = MeshSpec::new(2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = GridFunction::from_values(
            mesh,
            mesh.primal(),
            (0..25).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let g = discrete_gradient(&y.dirichlet_extend().unwrap()).unwrap();
        for i in 0..2 {
            let mut out = vec![0.0; 25];
            centered_gradient(mesh, &y.values, i, &mut out);
            for (a, b) in out.iter().zip(&g[i].values) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let mesh = MeshSpec::new(1, 7).unwrap();
        let p = problem(7, 4, GridFunction::zeros(mesh, mesh.primal()), Drift::Linear(LinearData::zero(mesh)));
        let ([a, b], _) = step(&p, 0, 0, &vec![0.0; 7], None).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
        let (y, rep) = solve_forward(&p, None, None).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(rep.terminal_energy, 0.0);
    }

    #[test]
    fn heat_decay_matches_first_mode() {
        let pi = std::f64::consts::PI;
        let mesh = MeshSpec::new(1, 15).unwrap();
        let y0 = GridFunction::from_fn(mesh, mesh.primal(), |x| (pi * x[0]).sin());
        let h = mesh.h();
        let mu = (4.0 / (h * h)) * (pi * h / 2.0).sin().powi(2);
        let tf = 0.25;
        let mut errs = Vec::new();
        for steps in [6, 12] {
            let p = problem_t(15, steps, tf, y0.clone(), Drift::Linear(LinearData::zero(mesh)));
            let (y, _) = solve_forward(&p, None, None).unwrap();
            let ey = expectation_at(&y, steps).unwrap();
            let want = (-mu * tf).exp();
            let err = ey
                .values
                .iter()
                .zip(&y0.values)
                .map(|(a, b)| (a - want * b).abs())
                .fold(0.0, f64::max)
                / want;
            assert!(err <= mu * mu * tf * (tf / steps as f64), "err {err}");
            errs.push(err);
        }
        assert!(errs[1] < errs[0]);
    }

    #[test]
    fn uncontrolled_energy_decreases() {
        let mesh = MeshSpec::new(1, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = GridFunction::from_values(mesh, mesh.primal(), (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = problem(9, 6, y0, Drift::Linear(LinearData::zero(mesh)));
        let (y, _) = solve_forward(&p, None, None).unwrap();
        let e: Vec<f64> = (0..=6).map(|k| level_pairing(&y, &y, None, k).unwrap()).collect();
        for k in 0..6 {
            assert!(e[k + 1] < e[k]);
        }
    }

    #[test]
    fn semilinear_linear_case_matches_linear_path() {
        let mesh = MeshSpec::new(1, 7).unwrap();
        let y0 = GridFunction::from_fn(mesh, mesh.primal(), |x| x[0] * (1.0 - x[0]));
        let nl = NonlinearitySpec::new(
            NonlinearFn::Linear { a_coef: 0.1, b_coef: vec![0.0] },
            NonlinearFn::Zero,
        );
        let lin = LinearData { a2: GridFunction::constant(mesh, mesh.primal(), 0.1), ..LinearData::zero(mesh) };
        let p1 = problem(7, 5, y0.clone(), Drift::Semilinear(nl));
        let p2 = problem(7, 5, y0, Drift::Linear(lin));
        let (a, _) = solve_forward(&p1, None, None).unwrap();
        let (b, _) = solve_forward(&p2, None, None).unwrap();
        for (x, z) in a.raw().iter().zip(b.raw()) {
            assert!((x - z).abs() < 1e-10);
        }
    }

    #[test]
    fn nonlinearity_checks() {
        let mesh = MeshSpec::new(2, 4).unwrap();
        let nl = NonlinearitySpec::new(NonlinearFn::SineGradient { amp: 0.3 }, NonlinearFn::Sine { amp: 0.2 });
        nl.validate(mesh, 200, 1).unwrap();
        let mut bad = nl.clone();
        bad.l1 = 0.01;
        assert!(bad.validate(mesh, 200, 1).is_err());
    }

    #[test]
    fn monte_carlo_paths_are_reproducible() {
        let mesh = MeshSpec::new(1, 5).unwrap();
        let y0 = GridFunction::constant(mesh, mesh.primal(), 1.0);
        let nl = NonlinearitySpec::new(NonlinearFn::Zero, NonlinearFn::Sine { amp: 0.5 });
        let p = problem(5, 4, y0, Drift::Semilinear(nl));
        let inc = crate::scenario::PathSampler { steps: 4, dt: 0.25, seed: 3 }.increments(4);
        let a = simulate_paths(&p, &inc).unwrap();
        let b = simulate_paths(&p, &inc).unwrap();
        assert_eq!(a, b);
    }
}
