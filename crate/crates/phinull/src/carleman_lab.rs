//! Numerical checks of the backward Carleman estimate and of the conjugated
//! operator decomposition.

use crate::error::{Error, Result};
use crate::forward_solver::Propagator;
use crate::mesh::{
    average, average_any, difference, difference_any, div_form_laplacian, Axis, CoefficientField, GridFunction,
    Layout, MeshSpec,
};
use crate::scenario::{cond_expectation, level_pairing, martingale_integrand, AdaptedField, ScenarioTree};
use crate::weights::{weight_fields, CarlemanWeights, Gates, WeightParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Adapted `w` with `f`, `g` such that
/// `w_{k+1} - w_k + dt Lap w_k = f_k dt + g_k dB_k` on every edge of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ManufacturedBackward {
    /// Levels `0..=K`.
    pub w: AdaptedField,
    /// Levels `0..K`.
    pub f: AdaptedField,
    /// Levels `0..K`.
    pub g: AdaptedField,
}

fn laplacian_node(mesh: MeshSpec, gamma: &CoefficientField, v: &[f64]) -> Result<Vec<f64>> {
    let z = GridFunction::from_values(mesh, mesh.primal(), v.to_vec())?.dirichlet_extend()?;
    Ok(div_form_laplacian(&z, gamma)?.values)
}

pub fn manufacture(w: &AdaptedField, gamma: &CoefficientField) -> Result<ManufacturedBackward> {
    let tree = w.tree;
    let kk = tree.steps;
    let mesh = w.mesh;
    if w.layout != mesh.primal() || w.levels != kk + 1 {
        return Err(Error::Tree("manufactured w must be primal on levels 0..=K".into()));
    }
    let dt = tree.dt();
    let mut f = AdaptedField::zeros(tree, mesh, mesh.primal(), kk);
    let mut g = AdaptedField::zeros(tree, mesh, mesh.primal(), kk);
    for k in 0..kk {
        for j in 0..ScenarioTree::level_size(k) {
            let e = cond_expectation(w, k, j)?.values;
            let q = martingale_integrand(w, k, j)?.values;
            let wk = w.node(k, j);
            let lap = laplacian_node(mesh, gamma, wk)?;
            let out = f.node_mut(k, j);
            for p in 0..wk.len() {
                out[p] = (e[p] - wk[p]) / dt + lap[p];
            }
            g.node_mut(k, j).copy_from_slice(&q);
        }
    }
    Ok(ManufacturedBackward { w: w.clone(), f, g })
}

impl ManufacturedBackward {
    /// Rebuild `w` from `w_K`, `f` and `g` and return the largest relative mismatch.
    pub fn reconstruct(&self, gamma: &CoefficientField) -> Result<f64> {
        let tree = self.w.tree;
        let mesh = self.w.mesh;
        let kk = tree.steps;
        let dt = tree.dt();
        let sd = tree.sqrt_dt();
        let prop = Propagator::new(mesh, gamma, dt)?;
        let mut rebuilt = AdaptedField::zeros(tree, mesh, mesh.primal(), kk + 1);
        rebuilt.level_mut(kk).copy_from_slice(self.w.level(kk));
        let scale = self.w.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for k in (0..kk).rev() {
            for j in 0..ScenarioTree::level_size(k) {
                let mut e = cond_expectation(&rebuilt, k, j)?.values;
                let fk = self.f.node(k, j);
                for p in 0..e.len() {
                    e[p] -= dt * fk[p];
                }
                prop.solve(&mut e);
                let gk = self.g.node(k, j);
                for (c, sign) in [(2 * j, 1.0), (2 * j + 1, -1.0)] {
                    let child = rebuilt.node(k + 1, c);
                    let mean = cond_expectation(&rebuilt, k, j)?.values;
                    for p in 0..e.len() {
                        worst = worst.max((child[p] - mean[p] - sign * sd * gk[p]).abs() / scale);
                    }
                }
                rebuilt.node_mut(k, j).copy_from_slice(&e);
            }
        }
        for (a, b) in rebuilt.raw().iter().zip(self.w.raw()) {
            worst = worst.max((a - b).abs() / scale);
        }
        Ok(worst)
    }
}

/// Independent uniform values on every node of levels `0..=K`.
pub fn random_adapted(tree: ScenarioTree, mesh: MeshSpec, rng: &mut ChaCha8Rng) -> AdaptedField {
    let mut w = AdaptedField::zeros(tree, mesh, mesh.primal(), tree.steps + 1);
    for x in w.raw_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioStatus {
    Finite,
    /// Both sides vanish.
    Degenerate,
    /// Zero right side with a positive left side.
    CounterexampleCandidate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarlemanRatio {
    /// `sum dt E s^3 lambda^4 xi^3 r^2 |w|^2`.
    pub weighted_state: f64,
    /// `sum_i sum dt E s lambda^2 xi r^2 |D_i w|^2`.
    pub weighted_gradient: f64,
    /// `tau^2 lambda^3 e^{2 lambda (6m+1)} E e^{4 tau phi} |w_0|^2`.
    pub initial_state: f64,
    /// `sum_i E e^{4 tau phi} |D_i w_0|^2`.
    pub initial_gradient: f64,
    pub observation: f64,
    pub source_f: f64,
    pub source_g: f64,
    /// `h^-2 E e^{2 s(T) phi} |w_K|^2`.
    pub terminal: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub status: RatioStatus,
    pub gates: Gates,
}

fn dual_gradient_energy(mesh: MeshSpec, node: &[f64], weight: &[Vec<f64>]) -> Result<f64> {
    let z = GridFunction::from_values(mesh, mesh.primal(), node.to_vec())?.dirichlet_extend()?;
    let mut acc = 0.0;
    for (i, wt) in weight.iter().enumerate() {
        let d = difference(&z, i)?;
        acc += d.values.iter().zip(wt).map(|(v, c)| c * v * v).sum::<f64>();
    }
    Ok(acc * mesh.cell())
}

/// Both sides of the backward Carleman estimate with time integrals taken at left endpoints.
pub fn carleman_ratio(mb: &ManufacturedBackward, cw: &CarlemanWeights, chi: &[f64]) -> Result<CarlemanRatio> {
    let tree = mb.w.tree;
    let mesh = mb.w.mesh;
    let kk = tree.steps;
    let dt = tree.dt();
    let p = &cw.params;
    let lam = p.lambda;
    let primal = mesh.primal();
    let xi = cw.xi_on(primal).values;
    let phi = cw.phi_on(primal).values;
    let duals: Vec<(Vec<f64>, Vec<f64>)> =
        (0..mesh.dim).map(|i| (cw.xi_on(mesh.dual(i)).values, cw.phi_on(mesh.dual(i)).values)).collect();
    let mut ws = 0.0;
    let mut wg = 0.0;
    let mut obs = 0.0;
    let mut sf = 0.0;
    let mut sg = 0.0;
    for k in 0..kk {
        let s = cw.s(tree.time(k))?;
        let r2: Vec<f64> = phi.iter().map(|f| (2.0 * s * f).exp()).collect();
        let c3: Vec<f64> = r2.iter().zip(&xi).map(|(r, x)| s.powi(3) * lam.powi(4) * x.powi(3) * r).collect();
        let c3m: Vec<f64> = c3.iter().zip(chi).map(|(c, m)| c * m).collect();
        let cg: Vec<f64> = r2.iter().zip(&xi).map(|(r, x)| s * s * lam * lam * x * x * r).collect();
        ws += dt * level_pairing(&mb.w, &mb.w, Some(&c3), k)?;
        obs += dt * level_pairing(&mb.w, &mb.w, Some(&c3m), k)?;
        sf += dt * level_pairing(&mb.f, &mb.f, Some(&r2), k)?;
        sg += dt * level_pairing(&mb.g, &mb.g, Some(&cg), k)?;
        let gw: Vec<Vec<f64>> = duals
            .iter()
            .map(|(dx, dp)| dx.iter().zip(dp).map(|(x, f)| s * lam * lam * x * (2.0 * s * f).exp()).collect())
            .collect();
        let n = ScenarioTree::level_size(k);
        let mut acc = 0.0;
        for j in 0..n {
            acc += dual_gradient_energy(mesh, mb.w.node(k, j), &gw)?;
        }
        wg += dt * acc / n as f64;
    }
    let tau = p.tau;
    let c0 = tau * tau * lam.powi(3) * (2.0 * lam * (6.0 * p.m + 1.0)).exp();
    let e4: Vec<f64> = phi.iter().map(|f| c0 * (4.0 * tau * f).exp()).collect();
    let is = level_pairing(&mb.w, &mb.w, Some(&e4), 0)?;
    let g4: Vec<Vec<f64>> = duals.iter().map(|(_, dp)| dp.iter().map(|f| (4.0 * tau * f).exp()).collect()).collect();
    let ig = dual_gradient_energy(mesh, mb.w.node(0, 0), &g4)?;
    let sfin = cw.s(p.t_final)?;
    let et: Vec<f64> = phi.iter().map(|f| (2.0 * sfin * f).exp()).collect();
    let h = mesh.h();
    let term = level_pairing(&mb.w, &mb.w, Some(&et), kk)? / (h * h);
    let parts = [ws, wg, is, ig, obs, sf, sg, term];
    if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFinite("Carleman sums must be finite and nonnegative".into()));
    }
    let lhs = ws + wg + is + ig;
    let rhs = obs + sf + sg + term;
    let (ratio, status) = if rhs > 0.0 {
        (lhs / rhs, RatioStatus::Finite)
    } else if lhs == 0.0 {
        (0.0, RatioStatus::Degenerate)
    } else {
        (f64::INFINITY, RatioStatus::CounterexampleCandidate)
    };
    Ok(CarlemanRatio {
        weighted_state: ws,
        weighted_gradient: wg,
        initial_state: is,
        initial_gradient: ig,
        observation: obs,
        source_f: sf,
        source_g: sg,
        terminal: term,
        lhs,
        rhs,
        ratio,
        status,
        gates: cw.gates(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    /// Largest `s(t) h` over the time grid.
    pub s_h: f64,
    pub gates: Gates,
    /// Largest relative change of a ratio under `w -> 3 w`.
    pub homogeneity_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    /// Sample index of the detected `tau_0`, the peak of the max ratio.
    pub tau0_index: usize,
    pub tau0: f64,
    pub non_increasing_after_tau0: bool,
}

/// Max ratio over `samples` random manufactured `w` for each `tau`.
/// The `samples` random manufactured solutions a sweep with `seed` uses.
pub fn manufactured_samples(
    tree: ScenarioTree,
    mesh: MeshSpec,
    gamma: &CoefficientField,
    samples: usize,
    seed: u64,
) -> Result<Vec<ManufacturedBackward>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| manufacture(&random_adapted(tree, mesh, &mut rng), gamma)).collect()
}

pub fn carleman_sweep(
    params: &WeightParams,
    cw_base: &CarlemanWeights,
    gamma: &CoefficientField,
    tree: ScenarioTree,
    chi: &[f64],
    taus: &[f64],
    samples: usize,
    seed: u64,
) -> Result<SweepSummary> {
    if taus.is_empty() || samples == 0 {
        return Err(Error::Config("sweep needs at least one tau and one sample".into()));
    }
    let mesh = cw_base.mesh();
    let mbs = manufactured_samples(tree, mesh, gamma, samples, seed)?;
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cw = weight_fields(&WeightParams { tau, ..*params }, &cw_base.psi)?;
        let mut mx: f64 = 0.0;
        let mut mn = f64::INFINITY;
        let mut sum = 0.0;
        let mut herr: f64 = 0.0;
        for (q, mb) in mbs.iter().enumerate() {
            let r = carleman_ratio(mb, &cw, chi)?;
            if q == 0 {
                let mut scaled = mb.clone();
                for f in [&mut scaled.w, &mut scaled.f, &mut scaled.g] {
                    f.scale(3.0);
                }
                let r3 = carleman_ratio(&scaled, &cw, chi)?;
                herr = herr.max((r3.ratio - r.ratio).abs() / r.ratio.abs().max(f64::MIN_POSITIVE));
            }
            mx = mx.max(r.ratio);
            mn = mn.min(r.ratio);
            sum += r.ratio;
        }
        let s_h = (0..=tree.steps)
            .map(|k| cw.s(tree.time(k)).map(|s| s * mesh.h()))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        points.push(SweepPoint {
            tau,
            max_ratio: mx,
            mean_ratio: sum / samples as f64,
            min_ratio: mn,
            s_h,
            gates: cw.gates(),
            homogeneity_error: herr,
        });
    }
    let (tau0_index, _) = points
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, p)| if p.max_ratio > bv { (i, p.max_ratio) } else { (bi, bv) });
    let non_increasing = points[tau0_index..].windows(2).all(|w| w[1].max_ratio <= w[0].max_ratio);
    Ok(SweepSummary { tau0: points[tau0_index].tau, tau0_index, non_increasing_after_tau0: non_increasing, points })
}

/// Pieces of `r Lap(rho z)` and of the remainder `M_h` at a fixed time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugationPieces {
    /// Direct composition `r sum_i D_i(gamma_i D_i(rho z))`.
    pub direct: GridFunction,
    pub c1: GridFunction,
    pub c2: GridFunction,
    pub b2: GridFunction,
    pub r_h: GridFunction,
    pub c4: GridFunction,
    pub c5: GridFunction,
    pub b3: GridFunction,
    pub m_h: GridFunction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugationReport {
    /// `max |direct + M_h - (C1 + C2 + C4 + C5 + B2 + B3)|` over the largest piece.
    pub residual: f64,
    /// `max |direct - (C1 + C2 + B2 + R_h)|` over the largest piece.
    pub expansion_residual: f64,
    pub scale: f64,
}

fn ext_layout(mesh: MeshSpec) -> Layout {
    Layout::uniform(mesh.dim, Axis::extended(mesh.n_interior, 1))
}

fn twice(
    u: &GridFunction,
    i: usize,
    first: fn(&GridFunction, usize) -> Result<GridFunction>,
    second: fn(&GridFunction, usize) -> Result<GridFunction>,
    target: &Layout,
) -> Result<GridFunction> {
    second(&first(u, i)?, i)?.restrict(target)
}

fn acc(out: &mut GridFunction, terms: &[f64]) {
    for (o, t) in out.values.iter_mut().zip(terms) {
        *o += t;
    }
}

pub fn conjugation_pieces(z: &GridFunction, cw: &CarlemanWeights, gamma: &CoefficientField, t: f64) -> Result<ConjugationPieces> {
    let mesh = cw.mesh();
    if z.mesh != mesh {
        return Err(Error::Argument("z and the weights live on different meshes".into()));
    }
    z.expect_layout(&mesh.primal())?;
    let h = mesh.h();
    let q = 0.25 * h * h;
    let primal = mesh.primal();
    let closure = mesh.closure();
    let s = cw.s(t)?;
    let zc = z.dirichlet_extend()?;
    let rho_c = cw.rho_on(t, closure)?;
    let rho_e = cw.rho_on(t, ext_layout(mesh))?;
    let r_p = cw.r_on(t, primal)?.values;
    let r_c = cw.r_on(t, closure)?;
    let direct = div_form_laplacian(&rho_c.mul(&zc)?, gamma)?.map(|v| v);
    let direct = GridFunction { values: direct.values.iter().zip(&r_p).map(|(a, r)| a * r).collect(), ..direct };
    let zero = || GridFunction::zeros(mesh, primal);
    let (mut c1, mut c2, mut b2, mut r_h, mut c4, mut c5, mut b3) =
        (zero(), zero(), zero(), zero(), zero(), zero(), zero());
    let len = primal.len();
    for i in 0..mesh.dim {
        let a2z = twice(&zc, i, average_any, average_any, &primal)?.values;
        let daz = twice(&zc, i, average_any, difference_any, &primal)?.values;
        let d2z = twice(&zc, i, difference_any, difference_any, &primal)?.values;
        let a2r = twice(&rho_c, i, average_any, average_any, &primal)?.values;
        let dar = twice(&rho_c, i, average_any, difference_any, &primal)?.values;
        let d2r = twice(&rho_c, i, difference_any, difference_any, &primal)?.values;
        let gd = &gamma.gamma[i];
        let ag = average_any(gd, i)?.restrict(&primal)?.values;
        let dg = difference_any(gd, i)?.restrict(&primal)?.values;
        let gp = gamma.sample(mesh, i, primal).values;
        let flux = difference(&zc, i)?.mul(gd)?;
        let dgdz = difference_any(&flux, i)?.restrict(&primal)?.values;
        let mut t1 = vec![0.0; len];
        let mut t2 = vec![0.0; len];
        let mut t3 = vec![0.0; len];
        let mut t4 = vec![0.0; len];
        for p in 0..len {
            let r = r_p[p];
            t1[p] = r * a2r[p] * dgdz[p];
            t2[p] = gp[p] * r * d2r[p] * a2z[p];
            t3[p] = 2.0 * gp[p] * r * dar[p] * daz[p];
            let da = ag[p] - gp[p];
            t4[p] = (da * r * d2r[p] + dg[p] * r * dar[p]) * a2z[p]
                + 2.0 * da * r * dar[p] * daz[p]
                + q * dg[p] * r * d2r[p] * daz[p]
                + q * dg[p] * r * dar[p] * d2z[p];
        }
        acc(&mut c1, &t1);
        acc(&mut c2, &t2);
        acc(&mut b2, &t3);
        acc(&mut r_h, &t4);
        // r D_i^2 rho on the closure needs rho one node outside.
        let rd2 = twice(&rho_e, i, difference_any, difference_any, &closure)?.mul(&r_c)?;
        let az = average(&zc, i)?;
        let inner4 = difference(&rd2, i)?.mul(gd)?.mul(&az)?;
        let t5 = difference_any(&inner4, i)?.restrict(&primal)?.values;
        let gc = gamma.sample(mesh, i, closure);
        let inner5 = difference(&gc.mul(&rd2)?, i)?.mul(&az)?;
        let t6 = difference_any(&inner5, i)?.restrict(&primal)?.values;
        acc(&mut c4, &t5.iter().map(|v| q * v).collect::<Vec<_>>());
        acc(&mut c5, &t6.iter().map(|v| q * v).collect::<Vec<_>>());
        let mut t7 = vec![0.0; len];
        for p in 0..len {
            let x = primal.point(p, h);
            t7[p] = -2.0 * s * gp[p] * cw.phi_dd(i, &x[..mesh.dim]) * z.values[p];
        }
        acc(&mut b3, &t7);
    }
    let m_h = c4.add(&c5)?.add(&b3)?.sub(&r_h)?;
    Ok(ConjugationPieces { direct, c1, c2, b2, r_h, c4, c5, b3, m_h })
}

pub fn conjugation_decomposition(
    z: &GridFunction,
    cw: &CarlemanWeights,
    gamma: &CoefficientField,
    t: f64,
) -> Result<ConjugationReport> {
    let pc = conjugation_pieces(z, cw, gamma, t)?;
    let scale = [&pc.direct, &pc.c1, &pc.c2, &pc.b2, &pc.r_h, &pc.c4, &pc.c5, &pc.b3, &pc.m_h]
        .iter()
        .map(|g| g.max_abs())
        .fold(0.0, f64::max);
    let full = pc
        .direct
        .add(&pc.m_h)?
        .sub(&pc.c1)?
        .sub(&pc.c2)?
        .sub(&pc.c4)?
        .sub(&pc.c5)?
        .sub(&pc.b2)?
        .sub(&pc.b3)?
        .max_abs();
    let exp = pc.direct.sub(&pc.c1)?.sub(&pc.c2)?.sub(&pc.b2)?.sub(&pc.r_h)?.max_abs();
    let rel = |v: f64| if scale == 0.0 { v } else { v / scale };
    Ok(ConjugationReport { residual: rel(full), expansion_residual: rel(exp), scale })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhBound {
    pub mh_sq: f64,
    pub bound: f64,
    /// `None` when both vanish.
    pub ratio: Option<f64>,
    pub tau_h_theta_le_one: bool,
}

/// `||M_h z||^2 / (s^2 ||z||^2 + h^2 s^2 sum_i ||D_i z||^2)`.
pub fn mh_bound_ratio(z: &GridFunction, cw: &CarlemanWeights, gamma: &CoefficientField, t: f64) -> Result<MhBound> {
    let mesh = cw.mesh();
    let pc = conjugation_pieces(z, cw, gamma, t)?;
    let s = cw.s(t)?;
    let h = mesh.h();
    let mh_sq = crate::mesh::l2h_norm_sq(&pc.m_h);
    let zc = z.dirichlet_extend()?;
    let mut grad = 0.0;
    for i in 0..mesh.dim {
        grad += crate::mesh::l2h_norm_sq(&difference(&zc, i)?);
    }
    let bound = s * s * crate::mesh::l2h_norm_sq(z) + h * h * s * s * grad;
    let ratio = if bound == 0.0 && mh_sq == 0.0 { None } else { Some(mh_sq / bound) };
    Ok(MhBound { mh_sq, bound, ratio, tau_h_theta_le_one: cw.gates().tau_h_theta_le_one })
}

/// Uniform random primal function.
pub fn random_grid(mesh: MeshSpec, rng: &mut ChaCha8Rng) -> GridFunction {
    let lay = mesh.primal();
    GridFunction { mesh, layout: lay, values: (0..lay.len()).map(|_| rng.random_range(-1.0..1.0)).collect() }
}
