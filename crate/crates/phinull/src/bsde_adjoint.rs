//! Backward sweep defined as the exact transpose of the forward tree map.
//!
//! With `M = (I - dt Lap)^{-1}` and a source `w_k` plus terminal `w_K`:
//!
//! ```text
//! zeta_K = w_K
//! z_k    = M E_k[zeta_{k+1}]
//! Z_k    = M E_k[dB_k zeta_{k+1}] / dt
//! zeta_k = (I + dt A_k)^T z_k + dt w_k
//! ```
//!
//! so that `E<w_K, y_K> + sum dt E<w_k, y_k> = <zeta_0, y_0> + sum dt E<z_k, v_k + chi u_k> + sum dt E<Z_k, U_k>`.

use crate::error::{Error, Result};
use crate::forward_solver::{centered_gradient, ForwardProblem, LinearData};
use crate::hum_control::ControlPair;
use crate::scenario::{cond_expectation, level_pairing, martingale_integrand, AdaptedField, ScenarioTree};
use crate::weights::TreeWeights;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointPair {
    /// `z_k` on levels `0..=K`, with `z_K = zeta_K`.
    pub z: AdaptedField,
    /// `Z_k` on levels `0..K`.
    pub big_z: AdaptedField,
    /// Pre-propagation state `zeta_k` on levels `0..=K`.
    pub zeta: AdaptedField,
}

/// `(I + dt A_k)^T z = z + dt (-sum_i A_i D_i(a1_i z) + a2 z)`.
pub fn transpose_drift(p: &ForwardProblem, d: &LinearData, z: &[f64]) -> Vec<f64> {
    let dt = p.tree.dt();
    let len = z.len();
    let mut out = z.to_vec();
    let mut tmp = vec![0.0; len];
    let mut g = vec![0.0; len];
    for (i, a1) in d.a1.iter().enumerate() {
        if a1.max_abs() == 0.0 {
            continue;
        }
        for q in 0..len {
            tmp[q] = a1.values[q] * z[q];
        }
        centered_gradient(p.mesh, &tmp, i, &mut g);
        for q in 0..len {
            out[q] -= dt * g[q];
        }
    }
    for q in 0..len {
        out[q] += dt * d.a2.values[q] * z[q];
    }
    out
}

/// `terminal` holds the leaf level contiguously; `sources` must cover levels `0..K`.
pub fn solve_backward(
    p: &ForwardProblem,
    terminal: &[f64],
    sources: Option<&AdaptedField>,
) -> Result<AdjointPair> {
    let d = p.linear()?;
    let tree = p.tree;
    let kk = tree.steps;
    let mesh = p.mesh;
    let lay = mesh.primal();
    let width = lay.len();
    if terminal.len() != ScenarioTree::level_size(kk) * width {
        return Err(Error::Tree("terminal data must cover every leaf".into()));
    }
    if let Some(s) = sources {
        if s.levels < kk || s.layout != lay || s.tree != tree {
            return Err(Error::Tree("sources must be primal fields on levels 0..K".into()));
        }
    }
    let dt = tree.dt();
    let mut zeta = AdaptedField::zeros(tree, mesh, lay, kk + 1);
    let mut z = AdaptedField::zeros(tree, mesh, lay, kk + 1);
    let mut big_z = AdaptedField::zeros(tree, mesh, lay, kk);
    zeta.level_mut(kk).copy_from_slice(terminal);
    z.level_mut(kk).copy_from_slice(terminal);
    for k in (0..kk).rev() {
        for j in 0..ScenarioTree::level_size(k) {
            let mut e = cond_expectation(&zeta, k, j)?.values;
            let mut q = martingale_integrand(&zeta, k, j)?.values;
            p.prop.solve(&mut e);
            p.prop.solve(&mut q);
            let mut zk = transpose_drift(p, d, &e);
            if let Some(s) = sources {
                for (a, b) in zk.iter_mut().zip(s.node(k, j)) {
                    *a += dt * b;
                }
            }
            if e.iter().chain(&q).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("backward step at level {k}")));
            }
            z.node_mut(k, j).copy_from_slice(&e);
            big_z.node_mut(k, j).copy_from_slice(&q);
            zeta.node_mut(k, j).copy_from_slice(&zk);
        }
    }
    Ok(AdjointPair { z, big_z, zeta })
}

/// Relative gap of the general pairing identity for arbitrary controls.
pub fn pairing_identity_residual(
    p: &ForwardProblem,
    y: &AdaptedField,
    adj: &AdjointPair,
    terminal: &[f64],
    sources: Option<&AdaptedField>,
    controls: Option<&ControlPair>,
) -> Result<f64> {
    let tree = p.tree;
    let kk = tree.steps;
    let dt = tree.dt();
    let cell = p.mesh.cell();
    let leaves = ScenarioTree::level_size(kk);
    let yk = y.level(kk);
    let mut lhs = cell * yk.iter().zip(terminal).map(|(a, b)| a * b).sum::<f64>() / leaves as f64;
    if let Some(s) = sources {
        for k in 0..kk {
            lhs += dt * level_pairing(y, s, None, k)?;
        }
    }
    let mut rhs = cell * p.y0.values.iter().zip(adj.zeta.node(0, 0)).map(|(a, b)| a * b).sum::<f64>();
    let d = p.linear()?;
    for k in 0..kk {
        if let Some(v) = &d.v {
            rhs += dt * level_pairing(&adj.z, v, None, k)?;
        }
        if let Some(c) = controls {
            rhs += dt * level_pairing(&adj.z, &c.u, Some(&p.chi), k)?;
            rhs += dt * level_pairing(&adj.big_z, &c.big_u, None, k)?;
        }
    }
    let scale = lhs.abs() + rhs.abs();
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub terminal: f64,
    pub state: f64,
    pub control_u: f64,
    pub control_big_u: f64,
    pub source: f64,
    pub initial: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Residual of
/// `(1/eps) E|y_K|^2 + sum dt E rho^2 |y|^2 + sum dt E s^3 lambda^4 xi^3 r^2 |z|^2 1_{M0}
///  + sum dt E s^2 lambda^2 xi^3 r^2 |Z|^2 = sum dt E z v + <y_0, zeta_0>`.
pub fn ito_duality_residual(
    p: &ForwardProblem,
    y: &AdaptedField,
    adj: &AdjointPair,
    weights: &TreeWeights,
    epsilon: f64,
) -> Result<DualityReport> {
    y.check_compatible(&adj.z)?;
    let tree = p.tree;
    let kk = tree.steps;
    let dt = tree.dt();
    let terminal = level_pairing(y, y, None, kk)? / epsilon;
    let mut state = 0.0;
    let mut cu = 0.0;
    let mut cbu = 0.0;
    let mut source = 0.0;
    let d = p.linear()?;
    for k in 0..kk {
        state += dt * level_pairing(y, y, Some(&weights.rho2[k]), k)?;
        let inv_u: Vec<f64> = weights.w_u[k].iter().zip(&p.chi).map(|(w, c)| c / w).collect();
        let inv_bu: Vec<f64> = weights.w_big_u[k].iter().map(|w| 1.0 / w).collect();
        cu += dt * level_pairing(&adj.z, &adj.z, Some(&inv_u), k)?;
        cbu += dt * level_pairing(&adj.big_z, &adj.big_z, Some(&inv_bu), k)?;
        if let Some(v) = &d.v {
            source += dt * level_pairing(&adj.z, v, None, k)?;
        }
    }
    let initial = p.mesh.cell()
        * p.y0.values.iter().zip(adj.zeta.node(0, 0)).map(|(a, b)| a * b).sum::<f64>();
    let lhs = terminal + state + cu + cbu;
    let rhs = source + initial;
    let scale = lhs.abs() + rhs.abs();
    let residual = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    Ok(DualityReport { terminal, state, control_u: cu, control_big_u: cbu, source, initial, lhs, rhs, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_solver::{forward_map, Drift};
    use crate::mesh::{CoefficientField, GammaProfile, GridFunction, MeshSpec};
    use crate::weights::RegionBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn problem(rng: &mut ChaCha8Rng, with_source: bool) -> ForwardProblem {
        let mesh = MeshSpec::new(1, 7).unwrap();
        let g = CoefficientField::new(mesh, GammaProfile::Affine { base: 0.5, slope: 0.3 }, None).unwrap();
        let tree = ScenarioTree::new(4, 1.0).unwrap();
        let lay = mesh.primal();
        let a1 = vec![GridFunction::from_values(mesh, lay, random(rng, 7)).unwrap()];
        let a2 = GridFunction::from_values(mesh, lay, random(rng, 7)).unwrap();
        let v = if with_source {
            let mut v = AdaptedField::zeros(tree, mesh, lay, 4);
            for x in v.raw_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
            Some(v)
        } else {
            None
        };
        let y0 = GridFunction::from_values(mesh, lay, random(rng, 7)).unwrap();
        ForwardProblem::new(mesh, g, RegionBox::cube(1, 0.3, 0.7), y0, Drift::Linear(LinearData { a1, a2, v }), tree)
            .unwrap()
    }

    #[test]
    fn zero_data_gives_zero_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = problem(&mut rng, false);
        let adj = solve_backward(&p, &vec![0.0; 16 * 7], None).unwrap();
        assert_eq!(adj.z.max_abs(), 0.0);
        assert_eq!(adj.big_z.max_abs(), 0.0);
    }

    #[test]
    fn pairing_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = problem(&mut rng, true);
        let mut c = ControlPair::zeros(&p);
        for x in c.u.raw_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in c.big_u.raw_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        c.mask_u(&p);
        let (y, _) = forward_map(&p, &p.y0.values, true, Some(&c), None).unwrap();
        let terminal = random(&mut rng, 16 * 7);
        let mut src = AdaptedField::zeros(p.tree, p.mesh, p.mesh.primal(), 4);
        for x in src.raw_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let adj = solve_backward(&p, &terminal, Some(&src)).unwrap();
        let r = pairing_identity_residual(&p, &y, &adj, &terminal, Some(&src), Some(&c)).unwrap();
        assert!(r < 1e-12, "residual {r}");
    }

    #[test]
    fn martingale_part_matches_children() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = problem(&mut rng, false);
        let terminal = random(&mut rng, 16 * 7);
        let adj = solve_backward(&p, &terminal, None).unwrap();
        let sd = p.tree.sqrt_dt();
        for k in 0..4 {
            for j in 0..(1 << k) {
                let mut plus = adj.zeta.node(k + 1, 2 * j).to_vec();
                let mut minus = adj.zeta.node(k + 1, 2 * j + 1).to_vec();
                p.prop.solve(&mut plus);
                p.prop.solve(&mut minus);
                for q in 0..7 {
                    let zq = adj.z.node(k, j)[q];
                    let bz = adj.big_z.node(k, j)[q];
                    assert!((plus[q] - zq - bz * sd).abs() < 1e-12 * (1.0 + plus[q].abs()));
                    assert!((minus[q] - zq + bz * sd).abs() < 1e-12 * (1.0 + minus[q].abs()));
                }
            }
        }
    }
}
