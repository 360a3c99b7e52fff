//! Forward and backward tree maps against a dense nalgebra re-implementation.

use nalgebra::{DMatrix, DVector};
use phinull::bsde_adjoint::solve_backward;
use phinull::forward_solver::{forward_map, Drift, ForwardProblem, LinearData};
use phinull::hum_control::ControlPair;
use phinull::mesh::{difference, difference_any, div_form_laplacian, CoefficientField, GammaProfile, GridFunction, MeshSpec};
use phinull::scenario::ScenarioTree;
use phinull::weights::RegionBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 7;
const K: usize = 4;
const GAMMA: f64 = 0.1;

struct Dense {
    m: DMatrix<f64>,
    b: DMatrix<f64>,
    chi: DVector<f64>,
    dt: f64,
}

fn setup() -> (ForwardProblem, Dense) {
    let mesh = MeshSpec::new(1, N).unwrap();
    let h = mesh.h();
    let tree = ScenarioTree::new(K, 1.0).unwrap();
    let dt = tree.dt();
    let g = CoefficientField::new(mesh, GammaProfile::Constant { value: GAMMA }, None).unwrap();
    let mut d = LinearData::zero(mesh);
    let xs: Vec<f64> = (1..=N).map(|j| j as f64 * h).collect();
    d.a1[0] = GridFunction { mesh, layout: mesh.primal(), values: xs.iter().map(|x| 0.5 - x).collect() };
    d.a2 = GridFunction { mesh, layout: mesh.primal(), values: xs.iter().map(|x| (3.0 * x).cos()).collect() };
    let region = RegionBox::cube(1, 0.3, 0.7);
    let y0 = GridFunction { mesh, layout: mesh.primal(), values: xs.iter().map(|x| x * (1.0 - x)).collect() };
    let p = ForwardProblem::new(mesh, g, region.clone(), y0, Drift::Linear(d.clone()), tree).unwrap();

    let lap = DMatrix::from_fn(N, N, |r, c| {
        let v = GAMMA / (h * h);
        if r == c {
            -2.0 * v
        } else if r.abs_diff(c) == 1 {
            v
        } else {
            0.0
        }
    });
    let grad = DMatrix::from_fn(N, N, |r, c| {
        if c == r + 1 {
            0.5 / h
        } else if r == c + 1 {
            -0.5 / h
        } else {
            0.0
        }
    });
    let a1 = DMatrix::from_diagonal(&DVector::from_vec(d.a1[0].values.clone()));
    let a2 = DMatrix::from_diagonal(&DVector::from_vec(d.a2.values.clone()));
    let id = DMatrix::<f64>::identity(N, N);
    let m = (&id - dt * &lap).try_inverse().unwrap();
    let b = &id + dt * (a1 * grad + a2);
    let chi = DVector::from_iterator(N, xs.iter().map(|&x| if (0.3..=0.7).contains(&x) { 1.0 } else { 0.0 }));
    (p, Dense { m, b, chi, dt })
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn control_mask_matches_region() {
    let (p, d) = setup();
    assert_eq!(p.chi, d.chi.as_slice());
}

#[test]
fn forward_map_matches_dense_recursion() {
    let (p, d) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut c = ControlPair::zeros(&p);
    for x in c.u.raw_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in c.big_u.raw_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    c.mask_u(&p);
    let (y, _) = forward_map(&p, &p.y0.values, true, Some(&c), None).unwrap();
    let sd = d.dt.sqrt();
    let mut level = vec![DVector::from_vec(p.y0.values.clone())];
    let mut worst: f64 = 0.0;
    for k in 0..K {
        let mut next = Vec::new();
        for (j, yk) in level.iter().enumerate() {
            let u = DVector::from_vec(c.u.node(k, j).to_vec()).component_mul(&d.chi);
            let bu = DVector::from_vec(c.big_u.node(k, j).to_vec());
            let base = &d.b * yk + d.dt * u;
            next.push(&d.m * (&base + sd * &bu));
            next.push(&d.m * (&base - sd * &bu));
        }
        for (j, v) in next.iter().enumerate() {
            let lib = DVector::from_vec(y.node(k + 1, j).to_vec());
            worst = worst.max((lib - v).amax() / v.amax().max(1e-300));
        }
        level = next;
    }
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn backward_map_is_dense_transpose() {
    let (p, d) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let leaves = ScenarioTree::level_size(K);
    let terminal = random(&mut rng, leaves * N);
    let adj = solve_backward(&p, &terminal, None).unwrap();
    let sd = d.dt.sqrt();
    let mt = d.m.transpose();
    let bt = d.b.transpose();
    let mut zeta: Vec<DVector<f64>> = terminal.chunks(N).map(|c| DVector::from_vec(c.to_vec())).collect();
    let mut worst: f64 = 0.0;
    for k in (0..K).rev() {
        let mut up = Vec::new();
        for j in 0..ScenarioTree::level_size(k) {
            let (zp, zm) = (&zeta[2 * j], &zeta[2 * j + 1]);
            let z = &mt * ((zp + zm) * 0.5);
            let big_z = &mt * ((zp - zm) / (2.0 * sd));
            let zk = &bt * &z;
            for (lib, ora) in [(adj.z.node(k, j), &z), (adj.big_z.node(k, j), &big_z), (adj.zeta.node(k, j), &zk)] {
                let lib = DVector::from_vec(lib.to_vec());
                worst = worst.max((lib - ora).amax() / ora.amax().max(1e-300));
            }
            up.push(zk);
        }
        zeta = up;
    }
    assert!(worst <= 1e-12, "{worst:e}");

    // terminal pairing against y0 alone: zeta_0 = E[(M B)^K]^T w
    let mut fwd = DMatrix::<f64>::identity(N, N);
    for _ in 0..K {
        fwd = &d.m * &d.b * fwd;
    }
    let mean: DVector<f64> = terminal.chunks(N).map(|c| DVector::from_vec(c.to_vec())).fold(DVector::zeros(N), |a, v| a + v)
        / leaves as f64;
    let expect = fwd.transpose() * mean;
    let got = DVector::from_vec(adj.zeta.node(0, 0).to_vec());
    assert!((got - &expect).amax() <= 1e-12 * expect.amax(), "zeta0 mismatch");
}

fn unit(mesh: MeshSpec, layout: phinull::mesh::Layout, c: usize) -> GridFunction {
    let mut e = GridFunction::zeros(mesh, layout);
    e.values[c] = 1.0;
    e
}

#[test]
fn difference_is_minus_transpose_of_divergence() {
    for (dim, n) in [(1, 7), (2, 5), (2, 7)] {
        let mesh = MeshSpec::new(dim, n).unwrap();
        let len = mesh.primal_len();
        for i in 0..dim {
            let dual = mesh.dual(i);
            let dmat = DMatrix::from_fn(dual.len(), len, |r, c| {
                difference(&unit(mesh, mesh.primal(), c).dirichlet_extend().unwrap(), i).unwrap().values[r]
            });
            let div = DMatrix::from_fn(len, dual.len(), |r, c| {
                difference_any(&unit(mesh, dual, c), i).unwrap().restrict(&mesh.primal()).unwrap().values[r]
            });
            let gap = (&dmat + div.transpose()).amax() / dmat.amax();
            assert!(gap <= 1e-12, "dim {dim}, N {n}, direction {i}: {gap:e}");
        }
    }
}

#[test]
fn laplacian_is_negative_definite() {
    for (dim, n, profile) in [
        (1, 7, GammaProfile::Constant { value: 0.1 }),
        (1, 7, GammaProfile::Affine { base: 0.2, slope: 0.5 }),
        (2, 5, GammaProfile::Affine { base: 0.1, slope: 0.3 }),
    ] {
        let mesh = MeshSpec::new(dim, n).unwrap();
        let g = CoefficientField::new(mesh, profile, None).unwrap();
        let len = mesh.primal_len();
        let mut a = DMatrix::zeros(len, len);
        for c in 0..len {
            let col = div_form_laplacian(&unit(mesh, mesh.primal(), c).dirichlet_extend().unwrap(), &g).unwrap();
            a.set_column(c, &DVector::from_vec(col.values));
        }
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        let eig = a.symmetric_eigen();
        let top = eig.eigenvalues.max();
        assert!(top < 0.0, "largest eigenvalue {top}");
    }
}

#[test]
fn constant_laplacian_spectrum() {
    let mesh = MeshSpec::new(1, N).unwrap();
    let h = mesh.h();
    let g = CoefficientField::new(mesh, GammaProfile::Constant { value: GAMMA }, None).unwrap();
    let mut a = DMatrix::zeros(N, N);
    for c in 0..N {
        let col = div_form_laplacian(&unit(mesh, mesh.primal(), c).dirichlet_extend().unwrap(), &g).unwrap();
        a.set_column(c, &DVector::from_vec(col.values));
    }
    let mut got: Vec<f64> = a.symmetric_eigen().eigenvalues.iter().cloned().collect();
    got.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (k, ev) in got.iter().enumerate() {
        let s = (std::f64::consts::PI * (k + 1) as f64 * h / 2.0).sin();
        let exact = -4.0 * GAMMA / (h * h) * s * s;
        assert!((ev - exact).abs() <= 1e-10 * exact.abs());
    }
}
