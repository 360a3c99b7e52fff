//! Tensor meshes on (0,1)^n, grid functions and the half-step operators.
//!
//! Every axis of a grid is an arithmetic run of points in units of `h`:
//! integer nodes `lo, lo+1, ...` or half nodes `lo+1/2, lo+3/2, ...`.
//! The primal mesh uses integer nodes `1..=N`, the closure `0..=N+1` and
//! the dual mesh in direction `i` the half nodes `1/2..=N+1/2`. Applying
//! `A_i` or `D_i` flips the node type of axis `i` and drops one point.
//! Values are stored lexicographically with direction 1 fastest.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub dim: usize,
    pub n_interior: usize,
}

impl MeshSpec {
    pub fn new(dim: usize, n_interior: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Argument(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        if n_interior == 0 {
            return Err(Error::Argument("need at least one interior point".into()));
        }
        Ok(Self { dim, n_interior })
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n_interior + 1) as f64
    }

    /// `h^n`, the cell volume used by every discrete integral.
    pub fn cell(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn primal_len(&self) -> usize {
        self.n_interior.pow(self.dim as u32)
    }

    pub fn dual_len(&self) -> usize {
        (self.n_interior + 1) * self.n_interior.pow(self.dim as u32 - 1)
    }

    pub fn closure_len(&self) -> usize {
        (self.n_interior + 2).pow(self.dim as u32)
    }

    pub fn check_direction(&self, i: usize) -> Result<()> {
        if i >= self.dim {
            Err(Error::Argument(format!(
                "direction {} invalid for dimension {}",
                i + 1,
                self.dim
            )))
        } else {
            Ok(())
        }
    }

    pub fn primal(&self) -> Layout {
        Layout::uniform(self.dim, Axis::primal(self.n_interior))
    }

    pub fn closure(&self) -> Layout {
        Layout::uniform(self.dim, Axis::closure(self.n_interior))
    }

    /// Dual mesh in direction `i` (zero based), primal in the others.
    pub fn dual(&self, i: usize) -> Layout {
        self.primal().with_axis(i, Axis::dual(self.n_interior))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub half: bool,
    pub lo: i64,
    pub count: usize,
}

impl Axis {
    pub fn primal(n: usize) -> Self {
        Axis { half: false, lo: 1, count: n }
    }
    pub fn closure(n: usize) -> Self {
        Axis { half: false, lo: 0, count: n + 2 }
    }
    pub fn dual(n: usize) -> Self {
        Axis { half: true, lo: 0, count: n + 1 }
    }
    /// Integer nodes `-w..=N+1+w`.
    pub fn extended(n: usize, w: usize) -> Self {
        Axis { half: false, lo: -(w as i64), count: n + 2 + 2 * w }
    }

    pub fn coord(&self, j: usize, h: f64) -> f64 {
        let base = self.lo as f64 + j as f64 + if self.half { 0.5 } else { 0.0 };
        base * h
    }

    fn stepped(&self) -> Option<Axis> {
        if self.count < 2 {
            return None;
        }
        Some(if self.half {
            Axis { half: false, lo: self.lo + 1, count: self.count - 1 }
        } else {
            Axis { half: true, lo: self.lo, count: self.count - 1 }
        })
    }

    fn contains(&self, other: &Axis) -> bool {
        self.half == other.half
            && other.lo >= self.lo
            && other.lo + other.count as i64 <= self.lo + self.count as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dim: usize,
    pub axes: [Axis; MAX_DIM],
}

impl Layout {
    pub fn uniform(dim: usize, a: Axis) -> Self {
        let pad = Axis { half: false, lo: 0, count: 1 };
        let mut axes = [pad; MAX_DIM];
        for ax in axes.iter_mut().take(dim) {
            *ax = a;
        }
        Layout { dim, axes }
    }

    pub fn with_axis(mut self, i: usize, a: Axis) -> Self {
        self.axes[i] = a;
        self
    }

    pub fn len(&self) -> usize {
        self.axes[..self.dim].iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, i: usize) -> usize {
        self.axes[..i].iter().map(|a| a.count).product()
    }

    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for d in 0..self.dim {
            idx[d] = flat % self.axes[d].count;
            flat /= self.axes[d].count;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for d in (0..self.dim).rev() {
            flat = flat * self.axes[d].count + idx[d];
        }
        flat
    }

    pub fn point(&self, flat: usize, h: f64) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; MAX_DIM];
        for d in 0..self.dim {
            x[d] = self.axes[d].coord(idx[d], h);
        }
        x
    }

    pub fn contains(&self, other: &Layout) -> bool {
        self.dim == other.dim && (0..self.dim).all(|d| self.axes[d].contains(&other.axes[d]))
    }

    pub fn tag(&self, mesh: &MeshSpec) -> String {
        if *self == mesh.primal() {
            return "primal".into();
        }
        if *self == mesh.closure() {
            return "closure".into();
        }
        for i in 0..self.dim {
            if *self == mesh.dual(i) {
                return format!("dual-{}", i + 1);
            }
        }
        let parts: Vec<String> = self.axes[..self.dim]
            .iter()
            .map(|a| format!("{}{}:{}", if a.half { "h" } else { "i" }, a.lo, a.count))
            .collect();
        format!("custom[{}]", parts.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stencil {
    Average,
    Difference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub mesh: MeshSpec,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(mesh: MeshSpec, layout: Layout) -> Self {
        GridFunction { mesh, layout, values: vec![0.0; layout.len()] }
    }

    pub fn constant(mesh: MeshSpec, layout: Layout, c: f64) -> Self {
        GridFunction { mesh, layout, values: vec![c; layout.len()] }
    }

    pub fn from_values(mesh: MeshSpec, layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Argument(format!(
                "{} values for a layout of {} points",
                values.len(),
                layout.len()
            )));
        }
        Ok(GridFunction { mesh, layout, values })
    }

    pub fn from_fn(mesh: MeshSpec, layout: Layout, f: impl Fn(&[f64]) -> f64) -> Self {
        let h = mesh.h();
        let values = (0..layout.len())
            .map(|p| f(&layout.point(p, h)[..layout.dim]))
            .collect();
        GridFunction { mesh, layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tag(&self) -> String {
        self.layout.tag(&self.mesh)
    }

    pub fn expect_layout(&self, layout: &Layout) -> Result<()> {
        if self.layout != *layout {
            return Err(Error::TagMismatch {
                expected: layout.tag(&self.mesh),
                got: self.tag(),
            });
        }
        Ok(())
    }

    fn same_layout(&self, other: &GridFunction) -> Result<()> {
        if self.mesh != other.mesh {
            return Err(Error::TagMismatch {
                expected: format!("{:?}", self.mesh),
                got: format!("{:?}", other.mesh),
            });
        }
        other.expect_layout(&self.layout)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            mesh: self.mesh,
            layout: self.layout,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.same_layout(other)?;
        Ok(GridFunction {
            mesh: self.mesh,
            layout: self.layout,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sub-grid of `self` on `target`, which must be contained in the current layout.
    pub fn restrict(&self, target: &Layout) -> Result<GridFunction> {
        if *target == self.layout {
            return Ok(self.clone());
        }
        if !self.layout.contains(target) {
            return Err(Error::TagMismatch {
                expected: format!("superset of {}", target.tag(&self.mesh)),
                got: self.tag(),
            });
        }
        let mut off = [0usize; MAX_DIM];
        for d in 0..target.dim {
            off[d] = (target.axes[d].lo - self.layout.axes[d].lo) as usize;
        }
        let mut values = Vec::with_capacity(target.len());
        let mut src = [0usize; MAX_DIM];
        for p in 0..target.len() {
            let idx = target.multi_index(p);
            for d in 0..target.dim {
                src[d] = idx[d] + off[d];
            }
            values.push(self.values[self.layout.flat_index(&src)]);
        }
        Ok(GridFunction { mesh: self.mesh, layout: *target, values })
    }

    /// Zero-pad a primal function onto the closure (homogeneous Dirichlet data).
    pub fn dirichlet_extend(&self) -> Result<GridFunction> {
        self.expect_layout(&self.mesh.primal())?;
        let closure = self.mesh.closure();
        let mut out = GridFunction::zeros(self.mesh, closure);
        let mut dst = [0usize; MAX_DIM];
        for p in 0..self.len() {
            let idx = self.layout.multi_index(p);
            for d in 0..self.layout.dim {
                dst[d] = idx[d] + 1;
            }
            out.values[closure.flat_index(&dst)] = self.values[p];
        }
        Ok(out)
    }

    /// Largest magnitude on the boundary of a closure function.
    pub fn boundary_max_abs(&self) -> Result<f64> {
        self.expect_layout(&self.mesh.closure())?;
        let nn = self.mesh.n_interior + 1;
        let mut m: f64 = 0.0;
        for p in 0..self.len() {
            let idx = self.layout.multi_index(p);
            if idx[..self.layout.dim].iter().any(|&j| j == 0 || j == nn) {
                m = m.max(self.values[p].abs());
            }
        }
        Ok(m)
    }

    fn stencil(&self, i: usize, kind: Stencil) -> Result<GridFunction> {
        self.mesh.check_direction(i)?;
        let ax = self.layout.axes[i];
        let out_ax = ax.stepped().ok_or_else(|| {
            Error::Argument(format!("axis {} has too few points for a stencil", i + 1))
        })?;
        let out_layout = self.layout.with_axis(i, out_ax);
        let inner = self.layout.stride(i);
        let outer: usize = self.layout.axes[i + 1..self.layout.dim]
            .iter()
            .map(|a| a.count)
            .product();
        let cin = ax.count;
        let cout = out_ax.count;
        let inv_h = 1.0 / self.mesh.h();
        let mut values = vec![0.0; out_layout.len()];
        for o in 0..outer {
            for j in 0..cout {
                let lo = (o * cin + j) * inner;
                let hi = lo + inner;
                let dst = (o * cout + j) * inner;
                for t in 0..inner {
                    let (a, b) = (self.values[lo + t], self.values[hi + t]);
                    values[dst + t] = match kind {
                        Stencil::Average => 0.5 * (b + a),
                        Stencil::Difference => (b - a) * inv_h,
                    };
                }
            }
        }
        Ok(GridFunction { mesh: self.mesh, layout: out_layout, values })
    }
}

/// `A_i u(x) = (u(x + h/2 e_i) + u(x - h/2 e_i)) / 2` on any layout.
pub fn average_any(u: &GridFunction, i: usize) -> Result<GridFunction> {
    u.stencil(i, Stencil::Average)
}

/// `D_i u(x) = (u(x + h/2 e_i) - u(x - h/2 e_i)) / h` on any layout.
pub fn difference_any(u: &GridFunction, i: usize) -> Result<GridFunction> {
    u.stencil(i, Stencil::Difference)
}

/// `A_i u` for a closure function, returned on the dual mesh `M_i*`.
pub fn average(u: &GridFunction, i: usize) -> Result<GridFunction> {
    u.mesh.check_direction(i)?;
    u.expect_layout(&u.mesh.closure())?;
    average_any(u, i)?.restrict(&u.mesh.dual(i))
}

/// `D_i u` for a closure function, returned on the dual mesh `M_i*`.
pub fn difference(u: &GridFunction, i: usize) -> Result<GridFunction> {
    u.mesh.check_direction(i)?;
    u.expect_layout(&u.mesh.closure())?;
    difference_any(u, i)?.restrict(&u.mesh.dual(i))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaProfile {
    Constant { value: f64 },
    /// `gamma_i(x) = base + slope * x_i`.
    Affine { base: f64, slope: f64 },
}

impl GammaProfile {
    pub fn value(&self, _i: usize, x: &[f64]) -> f64 {
        match *self {
            GammaProfile::Constant { value } => value,
            GammaProfile::Affine { base, slope } => base + slope * x[_i],
        }
    }

    pub fn grad_sq(&self, _i: usize, _x: &[f64]) -> f64 {
        match *self {
            GammaProfile::Constant { .. } => 0.0,
            GammaProfile::Affine { slope, .. } => slope * slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    pub profile: GammaProfile,
    /// `gamma[i]` sampled on the dual mesh in direction `i`.
    pub gamma: Vec<GridFunction>,
    pub gamma0: f64,
    pub reg: f64,
}

impl CoefficientField {
    /// Samples the profile and checks positivity and `reg(gamma) <= gamma0`.
    /// Without an explicit bound the measured `reg(gamma)` is used.
    pub fn new(mesh: MeshSpec, profile: GammaProfile, gamma0: Option<f64>) -> Result<Self> {
        let mut gamma = Vec::with_capacity(mesh.dim);
        let mut reg: f64 = 0.0;
        let h = mesh.h();
        for i in 0..mesh.dim {
            let lay = mesh.dual(i);
            let g = GridFunction::from_fn(mesh, lay, |x| profile.value(i, x));
            for p in 0..lay.len() {
                let v = g.values[p];
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Argument(format!(
                        "gamma_{} = {v} is not positive at a dual node",
                        i + 1
                    )));
                }
                let pt = lay.point(p, h);
                reg = reg.max(v + 1.0 / v + profile.grad_sq(i, &pt[..mesh.dim]));
            }
            gamma.push(g);
        }
        let gamma0 = match gamma0 {
            Some(g0) if reg > g0 => {
                return Err(Error::Argument(format!(
                    "reg(gamma) = {reg} exceeds declared bound {g0}"
                )))
            }
            Some(g0) => g0,
            None => reg,
        };
        Ok(CoefficientField { profile, gamma, gamma0, reg })
    }

    /// `gamma_i` sampled on an arbitrary layout.
    pub fn sample(&self, mesh: MeshSpec, i: usize, layout: Layout) -> GridFunction {
        let prof = self.profile;
        GridFunction::from_fn(mesh, layout, |x| prof.value(i, x))
    }
}

/// `sum_i D_i(gamma_i D_i y)` on the primal mesh for a closure function `y`.
pub fn div_form_laplacian(y: &GridFunction, gamma: &CoefficientField) -> Result<GridFunction> {
    let mesh = y.mesh;
    y.expect_layout(&mesh.closure())?;
    if gamma.gamma.len() != mesh.dim {
        return Err(Error::Argument("coefficient field dimension mismatch".into()));
    }
    let mut out = GridFunction::zeros(mesh, mesh.primal());
    for i in 0..mesh.dim {
        let flux = difference(y, i)?.mul(&gamma.gamma[i])?;
        let term = difference_any(&flux, i)?;
        term.expect_layout(&mesh.primal())?;
        for (o, t) in out.values.iter_mut().zip(&term.values) {
            *o += t;
        }
    }
    Ok(out)
}

/// Component `i` of `grad_h y = A_i D_i y` on the primal mesh.
pub fn discrete_gradient(y: &GridFunction) -> Result<Vec<GridFunction>> {
    let mesh = y.mesh;
    y.expect_layout(&mesh.closure())?;
    (0..mesh.dim)
        .map(|i| average_any(&difference_any(y, i)?, i)?.restrict(&mesh.primal()))
        .collect()
}

/// `h^n sum u v` over matching layouts (uniform weight on dual meshes, too).
pub fn l2h_inner(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    u.same_layout(v)?;
    Ok(u.mesh.cell() * u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>())
}

pub fn l2h_norm_sq(u: &GridFunction) -> f64 {
    u.mesh.cell() * u.values.iter().map(|a| a * a).sum::<f64>()
}

/// Relative residual of `<D_i u, v> + <u, D_i v> - boundary = 0` for a closure
/// function `u` and a dual-`i` function `v`.
pub fn summation_by_parts_residual(u: &GridFunction, v: &GridFunction, i: usize) -> Result<f64> {
    let mesh = u.mesh;
    mesh.check_direction(i)?;
    u.expect_layout(&mesh.closure())?;
    v.expect_layout(&mesh.dual(i))?;
    let du = difference(u, i)?;
    let dv = difference_any(v, i)?;
    let up = u.restrict(&mesh.primal())?;
    let a = l2h_inner(&du, v)?;
    let b = l2h_inner(&up, &dv)?;
    // boundary contribution h^{n-1} sum u(1) v(N+1/2) - u(0) v(1/2)
    let nn = mesh.n_interior;
    let face = |axis_u: Axis, axis_v: Axis| -> Result<f64> {
        let lu = mesh.closure().with_axis(i, axis_u);
        let lu = primal_except(mesh, lu, i);
        let lv = mesh.dual(i).with_axis(i, axis_v);
        let fu = u.restrict(&lu)?;
        let fv = v.restrict(&lv)?;
        Ok(fu.values.iter().zip(&fv.values).map(|(a, b)| a * b).sum::<f64>())
    };
    let hi = face(
        Axis { half: false, lo: nn as i64 + 1, count: 1 },
        Axis { half: true, lo: nn as i64, count: 1 },
    )?;
    let lo = face(Axis { half: false, lo: 0, count: 1 }, Axis { half: true, lo: 0, count: 1 })?;
    let boundary = mesh.h().powi(mesh.dim as i32 - 1) * (hi - lo);
    let scale = (l2h_norm_sq(&du) * l2h_norm_sq(v)).sqrt()
        + (l2h_norm_sq(&up) * l2h_norm_sq(&dv)).sqrt()
        + boundary.abs();
    let res = (a + b - boundary).abs();
    Ok(if scale == 0.0 { res } else { res / scale })
}

fn primal_except(mesh: MeshSpec, mut lay: Layout, i: usize) -> Layout {
    for d in 0..mesh.dim {
        if d != i {
            lay.axes[d] = Axis::primal(mesh.n_interior);
        }
    }
    lay
}

/// Dense symmetric band matrix stored by rows of the lower band.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    pub size: usize,
    pub bw: usize,
    /// `data[r][k]` holds entry `(r, r - k)` for `k <= bw`.
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(size: usize, bw: usize) -> Self {
        BandMatrix { size, bw, data: vec![0.0; size * (bw + 1)] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.bw {
            0.0
        } else {
            self.data[r * (self.bw + 1) + (r - c)]
        }
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        assert!(r - c <= self.bw, "entry outside band");
        self.data[r * (self.bw + 1) + (r - c)] += v;
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.size {
            let mut acc = self.data[r * (self.bw + 1)] * x[r];
            let c0 = r.saturating_sub(self.bw);
            for c in c0..r {
                let a = self.data[r * (self.bw + 1) + (r - c)];
                acc += a * x[c];
            }
            y[r] = acc;
        }
        for r in 0..self.size {
            let c0 = r.saturating_sub(self.bw);
            for c in c0..r {
                y[c] += self.data[r * (self.bw + 1) + (r - c)] * x[r];
            }
        }
    }
}

/// Assembles `sum_i D_i(gamma_i D_i .)` on the primal mesh under Dirichlet data.
pub fn laplacian_matrix(mesh: MeshSpec, gamma: &CoefficientField) -> BandMatrix {
    let primal = mesh.primal();
    let nn = mesh.n_interior;
    let bw = nn.pow(mesh.dim as u32 - 1);
    let h2 = mesh.h() * mesh.h();
    let mut a = BandMatrix::zeros(primal.len(), bw);
    for p in 0..primal.len() {
        let idx = primal.multi_index(p);
        for i in 0..mesh.dim {
            let dual = mesh.dual(i);
            let mut di = idx;
            let left = gamma.gamma[i].values[dual.flat_index(&di)] / h2;
            di[i] += 1;
            let right = gamma.gamma[i].values[dual.flat_index(&di)] / h2;
            a.add(p, p, -(left + right));
            if idx[i] + 1 < nn {
                a.add(p, p + primal.stride(i), right);
            }
        }
    }
    a
}

/// Banded Cholesky factor of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn factor(a: &BandMatrix) -> Result<Self> {
        let (n, bw) = (a.size, a.bw);
        let w = bw + 1;
        let mut l = a.clone();
        for j in 0..n {
            let mut d = l.data[j * w];
            for k in j.saturating_sub(bw)..j {
                let v = l.data[j * w + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) {
                return Err(Error::Solve(format!("matrix not positive definite at row {j}")));
            }
            let d = d.sqrt();
            l.data[j * w] = d;
            for r in j + 1..(j + w).min(n) {
                let mut v = l.data[r * w + (r - j)];
                for k in r.saturating_sub(bw)..j {
                    v -= l.data[r * w + (r - k)] * l.data[j * w + (j - k)];
                }
                l.data[r * w + (r - j)] = v / d;
            }
        }
        Ok(BandCholesky { l })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.l.size, self.l.bw);
        let w = bw + 1;
        let d = &self.l.data;
        for r in 0..n {
            let mut v = x[r];
            for c in r.saturating_sub(bw)..r {
                v -= d[r * w + (r - c)] * x[c];
            }
            x[r] = v / d[r * w];
        }
        for r in (0..n).rev() {
            let mut v = x[r];
            for c in r + 1..(r + w).min(n) {
                v -= d[c * w + (c - r)] * x[c];
            }
            x[r] = v / d[r * w];
        }
    }
}

impl fmt::Display for GridFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.tag(), self.len())
    }
}

/// Writes the flat CSV form: a header row, one metadata row, then one value per line.
pub fn write_grid_csv(u: &GridFunction, direction: usize, mut w: impl Write) -> Result<()> {
    writeln!(w, "mesh_tag,n,N,direction")?;
    writeln!(w, "{},{},{},{}", u.tag(), u.mesh.dim, u.mesh.n_interior, direction)?;
    for v in &u.values {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

/// Reads the CSV written by [`write_grid_csv`] for a primal, closure or dual layout.
pub fn read_grid_csv(r: impl BufRead) -> Result<GridFunction> {
    let mut lines = r.lines();
    let bad = |m: &str| Error::Config(format!("grid csv: {m}"));
    let header = lines.next().ok_or_else(|| bad("empty"))??;
    if header.trim() != "mesh_tag,n,N,direction" {
        return Err(bad("unexpected header"));
    }
    let meta = lines.next().ok_or_else(|| bad("missing metadata row"))??;
    let f: Vec<&str> = meta.trim().split(',').collect();
    if f.len() != 4 {
        return Err(bad("metadata row needs four fields"));
    }
    let dim: usize = f[1].parse().map_err(|_| bad("n"))?;
    let nn: usize = f[2].parse().map_err(|_| bad("N"))?;
    let mesh = MeshSpec::new(dim, nn)?;
    let layout = match f[0] {
        "primal" => mesh.primal(),
        "closure" => mesh.closure(),
        t if t.starts_with("dual-") => {
            let i: usize = t[5..].parse().map_err(|_| bad("dual direction"))?;
            mesh.check_direction(i.wrapping_sub(1))?;
            mesh.dual(i - 1)
        }
        _ => return Err(bad("unsupported mesh tag")),
    };
    let mut values = Vec::with_capacity(layout.len());
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("value on line {}", k + 3)))?,
        );
    }
    GridFunction::from_values(mesh, layout, values)
}
