//! Binomial scenario tree for the driving Brownian motion and adapted fields.
//!
//! Level `k` holds `2^k` nodes. Node `j` at level `k` has children `2j`
//! (increment `+sqrt(dt)`) and `2j+1` (increment `-sqrt(dt)`), each with
//! probability 1/2. Field data is stored level-major.

use crate::error::{Error, Result};
use crate::mesh::{GridFunction, Layout, MeshSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub steps: usize,
    pub t_final: f64,
}

impl ScenarioTree {
    pub fn new(steps: usize, t_final: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("tree needs at least one step".into()));
        }
        if steps > 24 {
            return Err(Error::ResourceCap(format!("{steps} tree levels")));
        }
        if !(t_final > 0.0) {
            return Err(Error::Argument("horizon must be positive".into()));
        }
        Ok(ScenarioTree { steps, t_final })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt().sqrt()
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_final
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn level_size(k: usize) -> usize {
        1 << k
    }

    pub fn node_count(&self) -> usize {
        (1 << (self.steps + 1)) - 1
    }

    /// Increment on the edge into node `j` of a level `k >= 1`.
    pub fn increment(&self, j: usize) -> f64 {
        if j % 2 == 0 {
            self.sqrt_dt()
        } else {
            -self.sqrt_dt()
        }
    }

    pub fn manifest(&self, seed: Option<u64>) -> TreeManifest {
        TreeManifest { k: self.steps, dt: self.dt(), t_final: self.t_final, seed, node_count: self.node_count() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeManifest {
    #[serde(rename = "K")]
    pub k: usize,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub seed: Option<u64>,
    pub node_count: usize,
}

/// Grid function per tree node on levels `0..levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedField {
    pub tree: ScenarioTree,
    pub mesh: MeshSpec,
    pub layout: Layout,
    pub levels: usize,
    data: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(tree: ScenarioTree, mesh: MeshSpec, layout: Layout, levels: usize) -> Self {
        assert!(levels <= tree.steps + 1);
        let nodes = (1usize << levels) - 1;
        AdaptedField { tree, mesh, layout, levels, data: vec![0.0; nodes * layout.len()] }
    }

    /// Same grid function at every node of every level.
    pub fn deterministic(tree: ScenarioTree, levels: usize, f: &GridFunction) -> Self {
        let mut a = Self::zeros(tree, f.mesh, f.layout, levels);
        for k in 0..levels {
            for j in 0..ScenarioTree::level_size(k) {
                a.node_mut(k, j).copy_from_slice(&f.values);
            }
        }
        a
    }

    pub fn width(&self) -> usize {
        self.layout.len()
    }

    fn offset(&self, k: usize, j: usize) -> usize {
        debug_assert!(k < self.levels && j < (1 << k));
        ((1usize << k) - 1 + j) * self.width()
    }

    pub fn node(&self, k: usize, j: usize) -> &[f64] {
        let o = self.offset(k, j);
        &self.data[o..o + self.width()]
    }

    pub fn node_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        let o = self.offset(k, j);
        let w = self.width();
        &mut self.data[o..o + w]
    }

    pub fn node_fn(&self, k: usize, j: usize) -> GridFunction {
        GridFunction { mesh: self.mesh, layout: self.layout, values: self.node(k, j).to_vec() }
    }

    /// Values of all nodes on level `k`, contiguous.
    pub fn level(&self, k: usize) -> &[f64] {
        let o = self.offset(k, 0);
        &self.data[o..o + (1 << k) * self.width()]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        let o = self.offset(k, 0);
        let w = self.width();
        &mut self.data[o..o + (1 << k) * w]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn check_compatible(&self, other: &AdaptedField) -> Result<()> {
        if self.tree != other.tree || self.mesh != other.mesh || self.layout != other.layout {
            return Err(Error::Tree("adapted fields live on different trees or meshes".into()));
        }
        Ok(())
    }

    pub fn axpy(&mut self, a: f64, x: &AdaptedField) -> Result<()> {
        self.check_compatible(x)?;
        if self.levels != x.levels {
            return Err(Error::Tree("level count mismatch".into()));
        }
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_parent(f: &AdaptedField, k: usize, j: usize) -> Result<()> {
    if k + 1 >= f.levels {
        return Err(Error::Tree(format!("node at level {k} has no stored children")));
    }
    if j >= ScenarioTree::level_size(k) {
        return Err(Error::Tree(format!("node {j} outside level {k}")));
    }
    Ok(())
}

/// `E[f_{k+1} | node (k, j)] = (f(child+) + f(child-)) / 2`.
pub fn cond_expectation(f: &AdaptedField, k: usize, j: usize) -> Result<GridFunction> {
    check_parent(f, k, j)?;
    let (a, b) = (f.node(k + 1, 2 * j), f.node(k + 1, 2 * j + 1));
    Ok(GridFunction {
        mesh: f.mesh,
        layout: f.layout,
        values: a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect(),
    })
}

/// `E[f_{k+1} dB_k | node (k, j)] / dt`, the exact martingale-representation integrand.
pub fn martingale_integrand(f: &AdaptedField, k: usize, j: usize) -> Result<GridFunction> {
    check_parent(f, k, j)?;
    let (a, b) = (f.node(k + 1, 2 * j), f.node(k + 1, 2 * j + 1));
    let c = 0.5 / f.tree.sqrt_dt();
    Ok(GridFunction {
        mesh: f.mesh,
        layout: f.layout,
        values: a.iter().zip(b).map(|(x, y)| c * (x - y)).collect(),
    })
}

/// Probability-weighted average of the level-`k` nodes.
pub fn expectation_at(f: &AdaptedField, k: usize) -> Result<GridFunction> {
    if k >= f.levels {
        return Err(Error::Tree(format!("level {k} not stored")));
    }
    let w = f.width();
    let n = ScenarioTree::level_size(k);
    let mut out = vec![0.0; w];
    for j in 0..n {
        for (o, v) in out.iter_mut().zip(f.node(k, j)) {
            *o += v;
        }
    }
    let p = 1.0 / n as f64;
    for o in &mut out {
        *o *= p;
    }
    Ok(GridFunction { mesh: f.mesh, layout: f.layout, values: out })
}

/// `E <w f, g>_{L^2_h}` on level `k`. A missing weight means 1.
pub fn level_pairing(f: &AdaptedField, g: &AdaptedField, weight: Option<&[f64]>, k: usize) -> Result<f64> {
    f.check_compatible(g)?;
    if k >= f.levels || k >= g.levels {
        return Err(Error::Tree(format!("level {k} not stored")));
    }
    let w = f.width();
    let (a, b) = (f.level(k), g.level(k));
    let mut acc = 0.0;
    for (na, nb) in a.chunks_exact(w).zip(b.chunks_exact(w)) {
        acc += match weight {
            Some(wt) => na
                .iter()
                .zip(nb)
                .zip(wt)
                .map(|((x, y), c)| c * x * y)
                .sum::<f64>(),
            None => na.iter().zip(nb).map(|(x, y)| x * y).sum::<f64>(),
        };
    }
    Ok(acc * f.mesh.cell() / ScenarioTree::level_size(k) as f64)
}

/// `sum_{k < K} dt E <w_k f_k, g_k>` with the weight at the left endpoint `t_k`.
pub fn space_time_pairing(
    f: &AdaptedField,
    g: &AdaptedField,
    weight: &dyn Fn(usize) -> Option<Vec<f64>>,
) -> Result<f64> {
    let dt = f.tree.dt();
    let mut acc = 0.0;
    for k in 0..f.tree.steps.min(f.levels).min(g.levels) {
        let w = weight(k);
        acc += dt * level_pairing(f, g, w.as_deref(), k)?;
    }
    Ok(acc)
}

/// Gaussian increments for forward-only Monte Carlo runs, in antithetic pairs.
#[derive(Clone, Debug)]
pub struct PathSampler {
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
}

impl PathSampler {
    /// `paths` rows of `steps` increments; rows `2p` and `2p+1` are mirror images.
    pub fn increments(&self, paths: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sd = self.dt.sqrt();
        let mut out = Vec::with_capacity(paths);
        while out.len() < paths {
            let row: Vec<f64> = (0..self.steps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            let mirror: Vec<f64> = row.iter().map(|v| -v).collect();
            out.push(row);
            if out.len() < paths {
                out.push(mirror);
            }
        }
        out
    }
}
