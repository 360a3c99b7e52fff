//! Carleman weight system: the auxiliary function psi, the spatial weights
//! xi and phi, the time profile theta and the space-time weights r, rho.

use crate::error::{Error, Result};
use crate::mesh::{average_any, difference_any, Axis, GridFunction, Layout, MeshSpec};
use crate::stats::ols;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

/// Largest exponent accepted for `rho^2 = e^{-2 s phi}`.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub tau: f64,
    pub m: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    /// Explicit time exponent; `None` uses `tau lambda^2 e^{lambda(6m-4)}`.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Required floor of `|grad psi|` outside `G_1`.
    #[serde(default)]
    pub alpha: f64,
    /// Bound for `tau (delta T)^{-m} h`.
    pub eps0: f64,
    /// Bound for `s(t) h`.
    pub delta0: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            lambda: 0.3,
            tau: 1.0,
            m: 0.5,
            delta: 0.25,
            t_final: 1.0,
            sigma: Some(3.0),
            alpha: 0.0,
            eps0: 0.25,
            delta0: 1.0,
        }
    }
}

impl WeightParams {
    pub fn sigma_formula(&self) -> f64 {
        self.tau * self.lambda * self.lambda * (self.lambda * (6.0 * self.m - 4.0)).exp()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| self.sigma_formula())
    }

    /// `lambda e^{6 lambda (m+1)}`.
    pub fn shift(&self) -> f64 {
        self.lambda * (6.0 * self.lambda * (self.m + 1.0)).exp()
    }

    pub fn theta_max(&self) -> f64 {
        2.0_f64.max((self.delta * self.t_final).powf(-self.m))
    }

    pub fn s_max(&self) -> f64 {
        self.tau * self.theta_max()
    }

    /// `s(T) = tau (delta T)^{-m}`.
    pub fn s_final(&self) -> f64 {
        self.tau * (self.delta * self.t_final).powf(-self.m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.lambda > 0.0) {
            return bad(format!("lambda = {} must be positive", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        if !(self.m > 0.0) {
            return bad(format!("m = {} must be positive", self.m));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("delta = {} outside (0, 1/2)", self.delta));
        }
        if !(self.t_final > 0.0) {
            return bad("T must be positive".into());
        }
        if !(self.t_final / 4.0 + self.delta * self.t_final < 1.0) {
            return bad("T/4 + delta T must be below 1 so that theta rises on [T/2, T]".into());
        }
        if !(self.sigma() > 2.0) {
            return bad(format!("sigma = {} must exceed 2", self.sigma()));
        }
        if !(self.eps0 > 0.0 && self.delta0 > 0.0) {
            return bad("gate bounds eps0 and delta0 must be positive".into());
        }
        Ok(())
    }

    pub fn gates(&self, h: f64) -> Gates {
        Gates {
            s_h_le_delta0: self.s_max() * h <= self.delta0,
            tau_h_theta_le_one: self.s_max() * h <= 1.0,
            tau_delta_h_le_eps0: self.s_final() * h <= self.eps0 * (1.0 + 1e-12),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gates {
    /// `s(t) h <= delta0` for all t.
    pub s_h_le_delta0: bool,
    /// `tau h max theta <= 1`.
    pub tau_h_theta_le_one: bool,
    /// `tau (delta T)^{-m} h <= eps0`.
    pub tau_delta_h_le_eps0: bool,
}

impl Gates {
    pub fn all(&self) -> bool {
        self.s_h_le_delta0 && self.tau_h_theta_le_one && self.tau_delta_h_le_eps0
    }
}

/// Open axis-aligned box in (0,1)^n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RegionBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        RegionBox { lo, hi }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        RegionBox { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&a, &b))| v > a && v < b)
    }

    pub fn shrink(&self, by: f64) -> RegionBox {
        RegionBox {
            lo: self.lo.iter().map(|v| v + by).collect(),
            hi: self.hi.iter().map(|v| v - by).collect(),
        }
    }

    /// Indicator of the box on the primal mesh.
    pub fn mask(&self, mesh: MeshSpec) -> GridFunction {
        GridFunction::from_fn(mesh, mesh.primal(), |x| if self.contains(x) { 1.0 } else { 0.0 })
    }
}

/// `psi = prod_i sin(pi w_i(x_i))` with `w(x) = x + beta x (1 - x)` placing the
/// single critical point at the centre of `G_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiField {
    pub mesh: MeshSpec,
    pub g0: RegionBox,
    pub g1: RegionBox,
    pub centre: Vec<f64>,
    pub beta: Vec<f64>,
    pub psi: GridFunction,
    pub grad_floor: f64,
}

impl PsiField {
    fn factor(&self, i: usize, x: f64) -> (f64, f64, f64) {
        let b = self.beta[i];
        let w = x + b * x * (1.0 - x);
        let w1 = 1.0 + b * (1.0 - 2.0 * x);
        let w2 = -2.0 * b;
        let (sn, cs) = (PI * w).sin_cos();
        (sn, PI * w1 * cs, PI * w2 * cs - PI * PI * w1 * w1 * sn)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (0..self.mesh.dim).map(|i| self.factor(i, x[i]).0).product()
    }

    /// `(d_i psi, d_i^2 psi)` at `x`.
    pub fn deriv(&self, i: usize, x: &[f64]) -> (f64, f64) {
        let mut rest = 1.0;
        for j in 0..self.mesh.dim {
            if j != i {
                rest *= self.factor(j, x[j]).0;
            }
        }
        let (_, d1, d2) = self.factor(i, x[i]);
        (d1 * rest, d2 * rest)
    }

    pub fn grad_norm(&self, x: &[f64]) -> f64 {
        (0..self.mesh.dim)
            .map(|i| self.deriv(i, x).0.powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn build_psi(mesh: MeshSpec, g0: &RegionBox) -> Result<PsiField> {
    let dim = mesh.dim;
    if g0.lo.len() != dim || g0.hi.len() != dim {
        return Err(Error::Argument("control region dimension mismatch".into()));
    }
    let h = mesh.h();
    for i in 0..dim {
        if !(0.0 <= g0.lo[i] && g0.lo[i] < g0.hi[i] && g0.hi[i] <= 1.0) {
            return Err(Error::Infeasible(format!("G0 axis {} is not a sub-interval of (0,1)", i + 1)));
        }
        if g0.hi[i] - g0.lo[i] < 3.0 * h {
            return Err(Error::Infeasible(format!(
                "G0 axis {} spans fewer than 3 grid cells",
                i + 1
            )));
        }
    }
    let narrow = (0..dim).map(|i| g0.hi[i] - g0.lo[i]).fold(f64::INFINITY, f64::min);
    let g1 = g0.shrink((2.0 * h).min(0.25 * narrow));
    if (0..dim).any(|i| g1.lo[i] >= g1.hi[i]) {
        return Err(Error::Infeasible("G0 too small to contain G1 at this h".into()));
    }
    let centre: Vec<f64> = (0..dim).map(|i| 0.5 * (g1.lo[i] + g1.hi[i])).collect();
    let mut beta = Vec::with_capacity(dim);
    for &c in &centre {
        let b = (0.5 - c) / (c * (1.0 - c));
        if !(b.abs() < 1.0) {
            return Err(Error::Infeasible(format!(
                "centre {c} of G1 too far from 1/2 for a monotone warp"
            )));
        }
        beta.push(b);
    }
    let mut field = PsiField {
        mesh,
        g0: g0.clone(),
        g1,
        centre,
        beta,
        psi: GridFunction::zeros(mesh, mesh.closure()),
        grad_floor: f64::INFINITY,
    };
    let closure = mesh.closure();
    let mut vals = GridFunction::from_fn(mesh, closure, |x| field.value(x));
    // exact zeros on the boundary
    let nn = mesh.n_interior + 1;
    for p in 0..closure.len() {
        let idx = closure.multi_index(p);
        if idx[..dim].iter().any(|&j| j == 0 || j == nn) {
            vals.values[p] = 0.0;
        }
    }
    field.psi = vals;
    let primal = mesh.primal();
    for p in 0..primal.len() {
        let x = primal.point(p, h);
        if !field.g1.contains(&x[..dim]) {
            field.grad_floor = field.grad_floor.min(field.grad_norm(&x[..dim]));
        }
    }
    Ok(field)
}

/// Time profile: `1 + (1 - 4t/T)^sigma` on `[0, T/4]`, 1 on `[T/4, T/2]`, a
/// quintic Hermite bridge on `[T/2, 3T/4]`, `(T - t + delta T)^{-m}` after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub t_final: f64,
    pub sigma: f64,
    pub m: f64,
    pub delta: f64,
    coef: [f64; 3],
}

impl Theta {
    pub fn new(p: &WeightParams) -> Result<Self> {
        let t = p.t_final;
        let l = t / 4.0;
        let a = t / 4.0 + p.delta * t;
        let e = a.powf(-p.m) - 1.0;
        let d = p.m * a.powf(-p.m - 1.0) * l;
        let s = p.m * (p.m + 1.0) * a.powf(-p.m - 2.0) * l * l;
        let coef = [
            10.0 * e - 4.0 * d + 0.5 * s,
            -15.0 * e + 7.0 * d - s,
            6.0 * e - 3.0 * d + 0.5 * s,
        ];
        let th = Theta { t_final: t, sigma: p.sigma(), m: p.m, delta: p.delta, coef };
        let scale = d.abs().max(1.0) / l;
        for k in 0..=2000 {
            let tt = t / 2.0 + l * k as f64 / 2000.0;
            if th.d1(tt)? < -1e-12 * scale {
                return Err(Error::Domain(format!(
                    "theta bridge decreases near t = {tt}; adjust m or delta"
                )));
            }
        }
        Ok(th)
    }

    fn check(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.t_final;
        if !(t >= -tol && t <= self.t_final + tol) {
            return Err(Error::Domain(format!("t = {t} outside [0, {}]", self.t_final)));
        }
        Ok(())
    }

    fn poly(&self, u: f64) -> (f64, f64, f64) {
        let [c3, c4, c5] = self.coef;
        (
            1.0 + u * u * u * (c3 + u * (c4 + u * c5)),
            u * u * (3.0 * c3 + u * (4.0 * c4 + u * 5.0 * c5)),
            u * (6.0 * c3 + u * (12.0 * c4 + u * 20.0 * c5)),
        )
    }

    fn all(&self, t: f64) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        let tf = self.t_final;
        let t = t.clamp(0.0, tf);
        let sg = self.sigma;
        Ok(if t <= tf / 4.0 {
            let b = (1.0 - 4.0 * t / tf).max(0.0);
            (
                1.0 + b.powf(sg),
                -(4.0 * sg / tf) * b.powf(sg - 1.0),
                (16.0 * sg * (sg - 1.0) / (tf * tf)) * b.powf(sg - 2.0),
            )
        } else if t <= tf / 2.0 {
            (1.0, 0.0, 0.0)
        } else if t < 0.75 * tf {
            let l = tf / 4.0;
            let (p, p1, p2) = self.poly((t - tf / 2.0) / l);
            (p, p1 / l, p2 / (l * l))
        } else {
            let a = tf - t + self.delta * tf;
            let m = self.m;
            (a.powf(-m), m * a.powf(-m - 1.0), m * (m + 1.0) * a.powf(-m - 2.0))
        })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        Ok(self.all(t)?.0)
    }

    pub fn d1(&self, t: f64) -> Result<f64> {
        Ok(self.all(t)?.1)
    }

    pub fn d2(&self, t: f64) -> Result<f64> {
        Ok(self.all(t)?.2)
    }

    /// Sampled `max |theta_t| / theta^2` over `[T/2, T]`.
    pub fn growth_constant(&self, samples: usize) -> f64 {
        let tf = self.t_final;
        (0..=samples)
            .map(|k| {
                let t = tf / 2.0 + 0.5 * tf * k as f64 / samples as f64;
                let (v, d, _) = self.all(t).expect("inside horizon");
                d.abs() / (v * v)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct CarlemanWeights {
    pub params: WeightParams,
    pub psi: PsiField,
    pub theta: Theta,
    /// `xi` and `phi` on the closure.
    pub xi: GridFunction,
    pub phi: GridFunction,
}

pub fn weight_fields(p: &WeightParams, psi: &PsiField) -> Result<CarlemanWeights> {
    p.validate()?;
    let theta = Theta::new(p)?;
    let lam = p.lambda;
    let xi = psi.psi.map(|v| (lam * (v + 6.0 * p.m)).exp());
    let shift = p.shift();
    let phi = xi.map(|v| v - shift);
    let phi_abs = phi.max_abs();
    let exponent = 2.0 * p.s_max() * phi_abs;
    if !exponent.is_finite() || exponent > EXP_LIMIT {
        let param = if 2.0 * phi_abs > EXP_LIMIT {
            "lambda/m"
        } else if 2.0 * p.tau * 2.0 * phi_abs > EXP_LIMIT {
            "tau"
        } else {
            "delta"
        };
        return Err(Error::ScaleLimit { param: param.into(), exponent, limit: EXP_LIMIT });
    }
    if p.alpha > 0.0 && psi.grad_floor < p.alpha {
        return Err(Error::Infeasible(format!(
            "measured gradient floor {} below alpha {}",
            psi.grad_floor, p.alpha
        )));
    }
    Ok(CarlemanWeights { params: *p, psi: psi.clone(), theta, xi, phi })
}

impl CarlemanWeights {
    pub fn mesh(&self) -> MeshSpec {
        self.psi.mesh
    }

    pub fn s(&self, t: f64) -> Result<f64> {
        Ok(self.params.tau * self.theta.eval(t)?)
    }

    /// `s_t = tau theta_t`.
    pub fn s_t(&self, t: f64) -> Result<f64> {
        Ok(self.params.tau * self.theta.d1(t)?)
    }

    pub fn xi_at(&self, x: &[f64]) -> f64 {
        (self.params.lambda * (self.psi.value(x) + 6.0 * self.params.m)).exp()
    }

    pub fn phi_at(&self, x: &[f64]) -> f64 {
        self.xi_at(x) - self.params.shift()
    }

    /// `d_i^2 phi = xi (lambda^2 (d_i psi)^2 + lambda d_i^2 psi)`.
    pub fn phi_dd(&self, i: usize, x: &[f64]) -> f64 {
        let lam = self.params.lambda;
        let (d1, d2) = self.psi.deriv(i, x);
        self.xi_at(x) * (lam * lam * d1 * d1 + lam * d2)
    }

    pub fn xi_on(&self, layout: Layout) -> GridFunction {
        GridFunction::from_fn(self.mesh(), layout, |x| self.xi_at(x))
    }

    pub fn phi_on(&self, layout: Layout) -> GridFunction {
        GridFunction::from_fn(self.mesh(), layout, |x| self.phi_at(x))
    }

    pub fn r_on(&self, t: f64, layout: Layout) -> Result<GridFunction> {
        let s = self.s(t)?;
        Ok(self.phi_on(layout).map(|f| (s * f).exp()))
    }

    pub fn rho_on(&self, t: f64, layout: Layout) -> Result<GridFunction> {
        let s = self.s(t)?;
        Ok(self.phi_on(layout).map(|f| (-s * f).exp()))
    }

    /// Pointwise check of `phi <= -(lambda - 1) e^{6 lambda (m+1)}`.
    pub fn phi_bound_holds(&self) -> bool {
        let p = &self.params;
        let bound = -(p.lambda - 1.0) * (6.0 * p.lambda * (p.m + 1.0)).exp();
        self.phi.values.iter().all(|&v| v <= bound)
    }

    pub fn gates(&self) -> Gates {
        self.params.gates(self.mesh().h())
    }

    /// CSV with columns `x_multi_index, psi, xi, phi` over the closure.
    pub fn write_fields_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "x_multi_index,psi,xi,phi")?;
        let lay = self.psi.psi.layout;
        for p in 0..lay.len() {
            let idx = lay.multi_index(p);
            let label: Vec<String> = idx[..lay.dim].iter().map(|j| j.to_string()).collect();
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                label.join(":"),
                self.psi.psi.values[p],
                self.xi.values[p],
                self.phi.values[p]
            )?;
        }
        Ok(())
    }

    pub fn write_theta_csv(&self, samples: usize, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,theta,theta_t,theta_tt")?;
        for k in 0..=samples {
            let t = self.params.t_final * k as f64 / samples as f64;
            let (a, b, c) = self.theta.all(t)?;
            writeln!(w, "{t:e},{a:e},{b:e},{c:e}")?;
        }
        Ok(())
    }
}

/// Weights sampled at the tree times `t_k = k dt`, `k = 0..=K`.
#[derive(Clone, Debug)]
pub struct TreeWeights {
    pub lambda: f64,
    pub tau: f64,
    pub m: f64,
    pub s: Vec<f64>,
    /// `rho^2` on the primal mesh per level.
    pub rho2: Vec<Vec<f64>>,
    /// `s^{-3} lambda^{-4} xi^{-3} rho^2` on the primal mesh per level.
    pub w_u: Vec<Vec<f64>>,
    /// `s^{-2} lambda^{-2} xi^{-3} rho^2` on the primal mesh per level.
    pub w_big_u: Vec<Vec<f64>>,
    /// `s^{-2} lambda^{-2} xi^{-3} rho^2` on dual mesh `i`, indexed `[k][i]`.
    pub w_grad: Vec<Vec<Vec<f64>>>,
    pub xi: Vec<f64>,
    pub phi: Vec<f64>,
}

impl TreeWeights {
    pub fn new(w: &CarlemanWeights, steps: usize, dt: f64) -> Result<Self> {
        let mesh = w.mesh();
        let p = w.params;
        let lam = p.lambda;
        let primal = mesh.primal();
        let xi = w.xi_on(primal).values;
        let phi = w.phi_on(primal).values;
        let duals: Vec<(Vec<f64>, Vec<f64>)> = (0..mesh.dim)
            .map(|i| (w.xi_on(mesh.dual(i)).values, w.phi_on(mesh.dual(i)).values))
            .collect();
        let mut out = TreeWeights {
            lambda: lam,
            tau: p.tau,
            m: p.m,
            s: Vec::new(),
            rho2: Vec::new(),
            w_u: Vec::new(),
            w_big_u: Vec::new(),
            w_grad: Vec::new(),
            xi: xi.clone(),
            phi: phi.clone(),
        };
        for k in 0..=steps {
            let t = if k == steps { p.t_final } else { k as f64 * dt };
            let s = w.s(t)?;
            let rho2: Vec<f64> = phi.iter().map(|f| (-2.0 * s * f).exp()).collect();
            let c3 = 1.0 / (s.powi(3) * lam.powi(4));
            let c2 = 1.0 / (s * s * lam * lam);
            out.w_u.push(rho2.iter().zip(&xi).map(|(r, x)| c3 * r / x.powi(3)).collect());
            out.w_big_u.push(rho2.iter().zip(&xi).map(|(r, x)| c2 * r / x.powi(3)).collect());
            out.w_grad.push(
                duals
                    .iter()
                    .map(|(dx, dp)| {
                        dx.iter()
                            .zip(dp)
                            .map(|(x, f)| c2 * (-2.0 * s * f).exp() / x.powi(3))
                            .collect()
                    })
                    .collect(),
            );
            out.rho2.push(rho2);
            out.s.push(s);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymptoticExpr {
    /// `r A_i^2 rho - r rho - (h^2/4) r D_i^2 rho`, exactly zero.
    AverageSquareIdentity,
    /// `r^2 A_i(xi^{-3} rho^2) - xi^{-3}`.
    AverageXiRho,
    /// `r^2 D_i(a xi^{-3} rho^2) - r^2 d_i(a xi^{-3} rho^2)` with `a = 1 + x_i/2`.
    DifferenceXiRho,
    /// `r D_i^2 rho - r d_i^2 rho`.
    SecondDifferenceRho,
}

impl AsymptoticExpr {
    pub const ALL: [AsymptoticExpr; 4] = [
        AsymptoticExpr::AverageSquareIdentity,
        AsymptoticExpr::AverageXiRho,
        AsymptoticExpr::DifferenceXiRho,
        AsymptoticExpr::SecondDifferenceRho,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AsymptoticExpr::AverageSquareIdentity => "rA2rho-rrho-h2/4rD2rho",
            AsymptoticExpr::AverageXiRho => "r2A(xi-3rho2)-xi-3",
            AsymptoticExpr::DifferenceXiRho => "r2D(a xi-3rho2)-r2d(a xi-3rho2)",
            AsymptoticExpr::SecondDifferenceRho => "rD2rho-rd2rho",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s || format!("{e:?}") == s)
            .ok_or_else(|| Error::Argument(format!("expression {s} not in catalog")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub expr: AsymptoticExpr,
    pub n_values: Vec<usize>,
    pub h: Vec<f64>,
    pub remainder: Vec<f64>,
    pub slope: f64,
    /// For the identity entry: the residual obtained with `h^2/2` in place of `h^2/4`.
    pub half_variant: Option<Vec<f64>>,
}

/// Layout equal to the closure except that axis `i` reaches one node further out.
fn extended_closure(mesh: MeshSpec, i: usize) -> Layout {
    mesh.closure().with_axis(i, Axis::extended(mesh.n_interior, 1))
}

fn remainder_at(
    expr: AsymptoticExpr,
    w: &CarlemanWeights,
    i: usize,
) -> Result<(f64, Option<f64>)> {
    let mesh = w.mesh();
    let p = &w.params;
    let t = p.t_final / 2.0;
    let s = w.s(t)?;
    let h = mesh.h();
    let lam = p.lambda;
    let closure = mesh.closure();
    let dual = mesh.dual(i);
    match expr {
        AsymptoticExpr::AverageSquareIdentity => {
            let ext = extended_closure(mesh, i);
            let rho = w.rho_on(t, ext)?;
            let a2 = average_any(&average_any(&rho, i)?, i)?;
            let d2 = difference_any(&difference_any(&rho, i)?, i)?;
            let r = w.r_on(t, closure)?;
            let rho_c = rho.restrict(&closure)?;
            let mut quarter: f64 = 0.0;
            let mut half: f64 = 0.0;
            for k in 0..closure.len() {
                let base = r.values[k] * (a2.values[k] - rho_c.values[k]);
                let corr = r.values[k] * d2.values[k] * h * h;
                quarter = quarter.max((base - 0.25 * corr).abs());
                half = half.max((base - 0.5 * corr).abs());
            }
            Ok((quarter, Some(half)))
        }
        AsymptoticExpr::AverageXiRho => {
            let xi = w.xi_on(closure);
            let rho = w.rho_on(t, closure)?;
            let f = xi.zip_with(&rho, |x, r| r * r / (x * x * x))?;
            let af = average_any(&f, i)?.restrict(&dual)?;
            let r = w.r_on(t, dual)?;
            let xid = w.xi_on(dual);
            let mut m: f64 = 0.0;
            for k in 0..dual.len() {
                let rr = r.values[k];
                m = m.max((rr * rr * af.values[k] - xid.values[k].powi(-3)).abs());
            }
            Ok((m, None))
        }
        AsymptoticExpr::DifferenceXiRho => {
            let a = |x: &[f64]| 1.0 + 0.5 * x[i];
            let g = GridFunction::from_fn(mesh, closure, |x| {
                let xi = w.xi_at(x);
                let rho = (-s * w.phi_at(x)).exp();
                a(x) * rho * rho / (xi * xi * xi)
            });
            let dg = difference_any(&g, i)?.restrict(&dual)?;
            let r = w.r_on(t, dual)?;
            let mut m: f64 = 0.0;
            for k in 0..dual.len() {
                let xp = dual.point(k, h);
                let x = &xp[..mesh.dim];
                let xi = w.xi_at(x);
                let dpsi = w.psi.deriv(i, x).0;
                let exact = 0.5 * xi.powi(-3) - 3.0 * a(x) * lam * dpsi * xi.powi(-3)
                    - 2.0 * s * a(x) * lam * dpsi * xi.powi(-2);
                let rr = r.values[k];
                m = m.max((rr * rr * dg.values[k] - exact).abs());
            }
            Ok((m, None))
        }
        AsymptoticExpr::SecondDifferenceRho => {
            let ext = extended_closure(mesh, i);
            let rho = w.rho_on(t, ext)?;
            let primal = mesh.primal();
            let d2 = difference_any(&difference_any(&rho, i)?, i)?.restrict(&primal)?;
            let r = w.r_on(t, primal)?;
            let mut m: f64 = 0.0;
            for k in 0..primal.len() {
                let xp = primal.point(k, h);
                let x = &xp[..mesh.dim];
                let xi = w.xi_at(x);
                let (d1, dd) = w.psi.deriv(i, x);
                let exact = s * s * lam * lam * xi * xi * d1 * d1
                    - s * lam * lam * xi * d1 * d1
                    - s * lam * xi * dd;
                m = m.max((r.values[k] * d2.values[k] - exact).abs());
            }
            Ok((m, None))
        }
    }
}

/// Remainder of a catalog expansion at `t = T/2` over a sweep of `N`, with the
/// log-log slope against `h`.
pub fn asymptotic_check(
    expr: AsymptoticExpr,
    p: &WeightParams,
    g0: &RegionBox,
    dim: usize,
    n_values: &[usize],
    direction: usize,
) -> Result<AsymptoticReport> {
    let mut hs = Vec::new();
    let mut rem = Vec::new();
    let mut half = Vec::new();
    for &nn in n_values {
        let mesh = MeshSpec::new(dim, nn)?;
        mesh.check_direction(direction)?;
        let psi = build_psi(mesh, g0)?;
        let w = weight_fields(p, &psi)?;
        let (r, hv) = remainder_at(expr, &w, direction)?;
        hs.push(mesh.h());
        rem.push(r);
        if let Some(v) = hv {
            half.push(v);
        }
    }
    let slope = if rem.iter().all(|&r| r > 0.0) && rem.len() >= 2 {
        let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ly: Vec<f64> = rem.iter().map(|r| r.ln()).collect();
        ols(&lx, &ly).slope
    } else {
        f64::NAN
    };
    Ok(AsymptoticReport {
        expr,
        n_values: n_values.to_vec(),
        h: hs,
        remainder: rem,
        slope,
        half_variant: if half.is_empty() { None } else { Some(half) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(dim: usize, nn: usize) -> CarlemanWeights {
        let mesh = MeshSpec::new(dim, nn).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(dim, 0.3, 0.7)).unwrap();
        weight_fields(&WeightParams::default(), &psi).unwrap()
    }

    #[test]
    fn theta_endpoints() {
        let p = WeightParams::default();
        let th = Theta::new(&p).unwrap();
        assert_eq!(th.eval(0.0).unwrap(), 2.0);
        assert_eq!(th.eval(0.5).unwrap(), 1.0);
        let want = (p.delta * p.t_final).powf(-p.m);
        assert!((th.eval(1.0).unwrap() - want).abs() < 1e-14 * want);
        assert!(th.eval(1.5).is_err());
        assert!(th.eval(-0.1).is_err());
    }

    #[test]
    fn theta_smooth_junctions() {
        for (m, d) in [(0.5, 0.25), (1.0, 0.1), (2.0, 0.3)] {
            let p = WeightParams { m, delta: d, ..WeightParams::default() };
            let th = Theta::new(&p).unwrap();
            let e = 1e-9;
            for tj in [0.25, 0.5, 0.75] {
                let a = th.all(tj - e).unwrap();
                let b = th.all(tj + e).unwrap();
                let sc = 1.0 + a.0.abs();
                assert!((a.0 - b.0).abs() < 1e-7 * sc, "value jump at {tj}");
                assert!((a.1 - b.1).abs() < 1e-6 * (1.0 + a.1.abs()), "slope jump at {tj}");
                assert!((a.2 - b.2).abs() < 1e-5 * (1.0 + a.2.abs()), "curvature jump at {tj}");
            }
            assert!(th.growth_constant(500).is_finite());
        }
    }

    #[test]
    fn theta_first_piece_bounds() {
        let p = WeightParams::default();
        let th = Theta::new(&p).unwrap();
        for k in 0..100 {
            let t = 0.5 * k as f64 / 100.0;
            let v = th.eval(t).unwrap();
            assert!((1.0..=2.0).contains(&v));
            assert!(th.d1(t).unwrap().abs() <= 4.0 * th.sigma / p.t_final + 1e-12);
        }
    }

    #[test]
    fn sigma_gate() {
        let p = WeightParams { sigma: None, ..WeightParams::default() };
        assert!(p.validate().is_err());
        let p = WeightParams { sigma: None, lambda: 1.2, m: 1.0, ..WeightParams::default() };
        assert!(p.sigma() > 2.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn psi_properties() {
        let mesh = MeshSpec::new(1, 15).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(1, 0.3, 0.7)).unwrap();
        assert_eq!(psi.psi.boundary_max_abs().unwrap(), 0.0);
        let inner = psi.psi.restrict(&mesh.primal()).unwrap();
        assert!(inner.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!((psi.value(&psi.centre) - 1.0).abs() < 1e-15);
        assert!(psi.grad_floor > 0.0);
        // centered-difference oracle for the gradient floor
        let h = mesh.h();
        let mut fd_floor = f64::INFINITY;
        for p in 0..mesh.primal_len() {
            let x = mesh.primal().point(p, h)[0];
            if !psi.g1.contains(&[x]) {
                let e = 1e-6;
                let g = (psi.value(&[x + e]) - psi.value(&[x - e])) / (2.0 * e);
                fd_floor = fd_floor.min(g.abs());
            }
        }
        assert!((fd_floor - psi.grad_floor).abs() < 1e-6 * psi.grad_floor);
    }

    #[test]
    fn psi_critical_point_inside_g1_2d() {
        let mesh = MeshSpec::new(2, 9).unwrap();
        let g0 = RegionBox::new(vec![0.45, 0.2], vec![0.85, 0.6]);
        let psi = build_psi(mesh, &g0).unwrap();
        assert!(psi.g1.contains(&psi.centre));
        for i in 0..2 {
            assert!(psi.deriv(i, &psi.centre).0.abs() < 1e-12);
        }
        assert!(psi.grad_floor > 0.0);
    }

    #[test]
    fn psi_infeasible() {
        let mesh = MeshSpec::new(1, 15).unwrap();
        let h = mesh.h();
        let tiny = RegionBox::cube(1, 0.5, 0.5 + 2.5 * h);
        assert!(matches!(build_psi(mesh, &tiny), Err(Error::Infeasible(_))));
        let far = RegionBox::cube(1, 0.02, 0.3);
        assert!(matches!(build_psi(mesh, &far), Err(Error::Infeasible(_))));
    }

    #[test]
    fn boundary_phi_value() {
        let w = desk(1, 7);
        let p = w.params;
        let want = (6.0 * p.lambda * p.m).exp() - p.shift();
        assert!((w.phi.values[0] - want).abs() < 1e-13 * want.abs());
        assert!(w.phi_bound_holds());
    }

    #[test]
    fn phi_bound_full_scale() {
        // lambda = 1.2, m = 1 with a tiny tau stays representable
        let mesh = MeshSpec::new(1, 7).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(1, 0.3, 0.7)).unwrap();
        let p = WeightParams { lambda: 1.2, m: 1.0, tau: 1e-5, sigma: Some(3.0), ..WeightParams::default() };
        let w = weight_fields(&p, &psi).unwrap();
        let bound = -(0.2) * (12.0_f64 * 1.2).exp();
        let max_phi = w.phi.values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max_phi <= bound);
        assert!(w.phi_bound_holds());
    }

    #[test]
    fn scale_limit_guard() {
        let mesh = MeshSpec::new(1, 7).unwrap();
        let psi = build_psi(mesh, &RegionBox::cube(1, 0.3, 0.7)).unwrap();
        let p = WeightParams { lambda: 1.2, m: 1.0, tau: 1.0, sigma: Some(3.0), ..WeightParams::default() };
        assert!(matches!(weight_fields(&p, &psi), Err(Error::ScaleLimit { .. })));
    }

    #[test]
    fn r_rho_product_is_one() {
        let w = desk(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lay = w.mesh().closure();
        for _ in 0..100 {
            let t = rng.random_range(0.0..1.0);
            let r = w.r_on(t, lay).unwrap();
            let rho = w.rho_on(t, lay).unwrap();
            let k = rng.random_range(0..lay.len());
            assert!((r.values[k] * rho.values[k] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn xi_range() {
        let w = desk(1, 15);
        let p = w.params;
        let lo = (6.0 * p.lambda * p.m).exp();
        let hi = (p.lambda * (1.0 + 6.0 * p.m)).exp();
        assert!(w.xi.values.iter().all(|&v| v >= lo * (1.0 - 1e-15) && v <= hi * (1.0 + 1e-15)));
        assert!(lo > 1.0);
    }

    #[test]
    fn identity_entry_exact() {
        let p = WeightParams::default();
        let g0 = RegionBox::cube(1, 0.3, 0.7);
        let rep =
            asymptotic_check(AsymptoticExpr::AverageSquareIdentity, &p, &g0, 1, &[7, 15], 0).unwrap();
        assert!(rep.remainder.iter().all(|&r| r < 1e-12));
        assert!(rep.half_variant.unwrap().iter().all(|&r| r > 1e-6));
    }

    #[test]
    fn catalog_names_round_trip() {
        for e in AsymptoticExpr::ALL {
            assert_eq!(AsymptoticExpr::from_name(e.name()).unwrap(), e);
        }
        assert!(AsymptoticExpr::from_name("nope").is_err());
    }

    #[test]
    fn gates_follow_h() {
        let p = WeightParams::default();
        let g = p.gates(1.0 / 8.0);
        assert!(g.s_h_le_delta0 && g.tau_h_theta_le_one);
        assert!(g.tau_delta_h_le_eps0);
        assert!(!p.gates(0.6).all());
    }
}
