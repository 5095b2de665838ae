use geoinvert::forward::eikonal::fast_marching_seeded;
use geoinvert::forward::{
    build_attenuation_layer, dipole_matrix, point_matrix, DcProblem, EikonalProblem, ForwardProblem, HelmholtzProblem,
    Side,
};
use geoinvert::mesh::TensorMesh;
use geoinvert::sparse::{CsrMatrix, SolverSpec};
use geoinvert::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shifted(m: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    m.iter().zip(v).map(|(a, b)| a + eps * b).collect()
}

/// Relative error between a central difference and `J v`.
fn fd_error(p: &mut dyn ForwardProblem, m: &[f64], v: &[f64], eps: f64) -> f64 {
    p.forward(m).unwrap();
    let jv = p.sens_matvec(m, v).unwrap();
    let dp = p.forward(&shifted(m, v, eps)).unwrap();
    let dm = p.forward(&shifted(m, v, -eps)).unwrap();
    let fd: Vec<f64> = dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let diff: Vec<f64> = fd.iter().zip(&jv).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&jv)
}

fn adjoint_error(p: &mut dyn ForwardProblem, m: &[f64], rng: &mut ChaCha8Rng, pairs: usize) -> f64 {
    p.forward(m).unwrap();
    (0..pairs)
        .map(|_| {
            let v: Vec<f64> = (0..p.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..p.n_data()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = dot(&p.sens_matvec(m, &v).unwrap(), &w);
            let b = dot(&v, &p.sens_tmatvec(m, &w).unwrap());
            (a - b).abs() / a.abs().max(b.abs())
        })
        .fold(0.0, f64::max)
}

/// Least-squares slope of `log ‖F(m+εv) − F(m) − εJv‖` against `log ε`.
fn taylor_slope(p: &mut dyn ForwardProblem, m: &[f64], v: &[f64], eps: &[f64]) -> f64 {
    let d0 = p.forward(m).unwrap();
    let jv = p.sens_matvec(m, v).unwrap();
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .map(|&e| {
            let d = p.forward(&shifted(m, v, e)).unwrap();
            let r: Vec<f64> = d.iter().zip(&d0).zip(&jv).map(|((a, b), c)| a - b - e * c).collect();
            (e.ln(), norm(&r).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn dc_8x8() -> (DcProblem, Vec<f64>) {
    let mesh = TensorMesh::uniform(&[8, 8], &[1.0, 1.0]).unwrap();
    let src = dipole_matrix(&mesh, &[(vec![0.5, 7.5], vec![7.5, 7.5]), (vec![2.5, 7.5], vec![5.5, 0.5])]).unwrap();
    let rec = dipole_matrix(
        &mesh,
        &[(vec![1.5, 7.5], vec![3.5, 7.5]), (vec![4.5, 7.5], vec![6.5, 7.5]), (vec![0.5, 0.5], vec![7.5, 3.5])],
    )
    .unwrap();
    let sigma: Vec<f64> = (0..64).map(|k| 1.0 + 0.5 * ((k as f64) * 0.41).sin()).collect();
    (DcProblem::new(mesh, src, rec, SolverSpec::direct()).unwrap(), sigma)
}

fn helmholtz_16x8() -> (HelmholtzProblem, Vec<f64>) {
    let mesh = TensorMesh::uniform(&[16, 8], &[0.1, 0.1]).unwrap();
    let n = mesh.n_cells();
    let gamma = build_attenuation_layer(&mesh, 3, 2.0, Some(Side { axis: 1, upper: false })).unwrap();
    let src = point_matrix(&mesh, &[vec![0.45, 0.05], vec![1.15, 0.05]]).unwrap();
    let rec = point_matrix(&mesh, &[vec![0.35, 0.05], vec![0.75, 0.05], vec![1.25, 0.05], vec![0.85, 0.45]]).unwrap();
    let m: Vec<f64> = (0..n).map(|k| 0.25 + 0.05 * ((k as f64) * 0.23).cos()).collect();
    let p = HelmholtzProblem::new(mesh, &vec![1.0; n], gamma, 2.0 * std::f64::consts::PI * 2.0, src, rec, SolverSpec::direct())
        .unwrap();
    (p, m)
}

fn eikonal_12x12() -> (EikonalProblem, Vec<f64>) {
    let mesh = TensorMesh::uniform(&[12, 12], &[1.0, 1.0]).unwrap();
    let rec = point_matrix(
        &mesh,
        &[vec![11.5, 3.5], vec![11.5, 8.5], vec![6.5, 11.5], vec![0.5, 10.5], vec![8.5, 6.5]],
    )
    .unwrap();
    let m: Vec<f64> = (0..144)
        .map(|k| {
            let (x, y) = ((k % 12) as f64, (k / 12) as f64);
            0.3 + 0.1 * (0.37 * x + 0.1).sin() * (0.29 * y + 0.4).cos() + 0.01 * x
        })
        .collect();
    (EikonalProblem::new(mesh, vec![13, 12 * 7 + 2], rec).unwrap(), m)
}

#[test]
fn dc_sensitivities() {
    let (mut p, m) = dc_8x8();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert!(fd_error(&mut p, &m, &v, 1e-6) <= 1e-5);
    assert!(adjoint_error(&mut p, &m, &mut rng, 20) <= 1e-11);
    assert!(taylor_slope(&mut p, &m, &v, &[1e-1, 5e-2, 2.5e-2, 1.25e-2]) >= 1.9);
}

#[test]
fn helmholtz_sensitivities() {
    let (mut p, m) = helmholtz_16x8();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v: Vec<f64> = (0..m.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
    assert!(fd_error(&mut p, &m, &v, 1e-6) <= 1e-5);
    assert!(adjoint_error(&mut p, &m, &mut rng, 20) <= 1e-10);
    assert!(taylor_slope(&mut p, &m, &v, &[1e-1, 5e-2, 2.5e-2, 1.25e-2]) >= 1.9);
}

#[test]
fn eikonal_sensitivities() {
    let (mut p, m) = eikonal_12x12();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..144).map(|_| rng.random_range(-0.05..0.05)).collect();
    assert!(fd_error(&mut p, &m, &v, 1e-6) <= 1e-5);
    assert!(adjoint_error(&mut p, &m, &mut rng, 20) <= 1e-11);
    assert!(taylor_slope(&mut p, &m, &v, &[1e-2, 5e-3, 2.5e-3, 1.25e-3]) >= 1.9);
    let mut seeded = p.clone().with_source_radius(2.5);
    assert!(fd_error(&mut seeded, &m, &v, 1e-6) <= 1e-5);
    assert!(adjoint_error(&mut seeded, &m, &mut rng, 5) <= 1e-11);
    p.forward(&m).unwrap();
    let jv = p.sens_matvec(&m, &v).unwrap();
    let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
    let j2 = p.sens_matvec(&m, &v2).unwrap();
    assert!(jv.iter().zip(&j2).all(|(a, b)| (2.0 * a - b).abs() <= 1e-13 * b.abs().max(1e-3)));
}

/// Fitted order of the max-norm error against the exact distance, with a
/// fixed physical seeding radius around the source.
#[test]
fn eikonal_refinement_order() {
    let mut pts = Vec::new();
    for n in [31usize, 63, 127, 255] {
        let h = 1.0 / n as f64;
        let mesh = TensorMesh::uniform(&[n, n], &[h, h]).unwrap();
        let src = mesh.cell_index(&[n / 2, n / 2]);
        let s = fast_marching_seeded(&mesh, &vec![1.0; n * n], src, 0.1).unwrap();
        let xs = mesh.cell_center(src);
        let err = (0..n * n)
            .map(|i| {
                let x = mesh.cell_center(i);
                let d = ((x[0] - xs[0]).powi(2) + (x[1] - xs[1]).powi(2)).sqrt();
                (s.times[i] - d).abs()
            })
            .fold(0.0, f64::max);
        pts.push((h.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    println!("eikonal refinement slope {slope:.3}");
    assert!((0.8..=1.2).contains(&slope), "slope {slope}");
}

/// Expanding padding widths around a uniform core.
fn padded_axis(core: usize, h: f64, pad: usize, factor: f64) -> Vec<f64> {
    let side: Vec<f64> = (1..=pad).map(|k| h * factor.powi(k as i32)).collect();
    let mut w: Vec<f64> = side.iter().rev().copied().collect();
    w.extend(std::iter::repeat_n(h, core));
    w.extend(side);
    w
}

#[test]
fn dc_half_space_dipole_matches_analytic_potential() {
    // Surface at y = 0 (insulating), earth below; the sides and bottom are
    // pushed far away with geometric padding.
    let wx = padded_axis(80, 1.0, 14, 1.3);
    let mut wy = vec![1.0; 40];
    wy.extend((1..=14).map(|k| 1.3f64.powi(k)));
    let x0 = -wx.iter().sum::<f64>() / 2.0;
    let mesh = TensorMesh::new(vec![wx, wy], vec![x0, 0.0]).unwrap();
    let (a, b) = (-10.5, 10.5);
    let src = dipole_matrix(&mesh, &[(vec![a, 0.5], vec![b, 0.5])]).unwrap();
    let sigma = 0.5;
    let recs: Vec<(Vec<f64>, Vec<f64>)> =
        [-30.5, -20.5, -5.5, 4.5, 16.5].iter().map(|&x| (vec![x, 0.5], vec![x + 2.0, 0.5])).collect();
    let rec = dipole_matrix(&mesh, &recs).unwrap();
    let n = mesh.n_cells();
    let mut p = DcProblem::new(mesh, src, rec, SolverSpec::direct()).unwrap();
    let d = p.forward(&vec![sigma; n]).unwrap();
    // Line source on the insulating surface of a 2D half-space:
    // u(x) = −(1/(π σ)) ln r + const.
    let pot = |x: f64| -((x - a).abs().ln() - (x - b).abs().ln()) / (std::f64::consts::PI * sigma);
    for ((m, nn), got) in recs.iter().zip(&d) {
        let want = pot(m[0]) - pot(nn[0]);
        assert!((got - want).abs() <= 0.05 * want.abs(), "receiver at {}: {got} vs {want}", m[0]);
    }
}

#[test]
fn dc_survey_data_shape() {
    let n = 30;
    let mesh = TensorMesh::uniform(&[n, n], &[1.0, 1.0]).unwrap();
    let c = |i: usize, j: usize| vec![i as f64 + 0.5, j as f64 + 0.5];
    let mut src = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            src.push((c(3 + 6 * i, 3 + 6 * j), c(5 + 6 * i, 3 + 6 * j)));
            src.push((c(3 + 6 * i, 3 + 6 * j), c(3 + 6 * i, 5 + 6 * j)));
        }
    }
    let mut rec = Vec::new();
    for j in 0..29 {
        for i in 0..29 {
            rec.push((c(i, j), c(i + 1, j)));
        }
    }
    for j in 0..29 {
        for i in 0..29 {
            rec.push((c(i, j), c(i, j + 1)));
        }
    }
    let mut p =
        DcProblem::new(mesh.clone(), dipole_matrix(&mesh, &src).unwrap(), dipole_matrix(&mesh, &rec).unwrap(), SolverSpec::direct())
            .unwrap();
    let d = p.forward(&vec![1.0; n * n]).unwrap();
    assert_eq!((p.n_receivers(), p.n_sources()), (1682, 32));
    assert_eq!(d.len(), 1682 * 32);
}

#[test]
fn helmholtz_residual_on_64x32() {
    let mesh = TensorMesh::uniform(&[64, 32], &[0.05, 0.05]).unwrap();
    let n = mesh.n_cells();
    let gamma = build_attenuation_layer(&mesh, 8, 3.0, Some(Side { axis: 1, upper: false })).unwrap();
    let src = point_matrix(&mesh, &[vec![1.6, 0.025], vec![0.8, 0.025]]).unwrap();
    let mut p = HelmholtzProblem::new(mesh, &vec![1.0; n], gamma, 2.0 * std::f64::consts::PI * 3.0, src, CsrMatrix::zeros(0, n), SolverSpec::direct())
        .unwrap();
    let m: Vec<f64> = (0..n).map(|k| 0.2 + 0.02 * ((k as f64) * 0.01).sin()).collect();
    p.forward(&m).unwrap();
    let h = p.assemble(&m).unwrap();
    let fields = p.fields().unwrap();
    for j in 0..2 {
        let u = fields.column(j);
        let r = h.spmv(&u).unwrap();
        let mut q = vec![Complex64::new(0.0, 0.0); n];
        for (c, v) in p.sources().row(j) {
            q[c] = Complex64::new(v, 0.0);
        }
        let res: f64 = r.iter().zip(&q).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let qn: f64 = q.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(res / qn <= 1e-8);
    }
}

/// With a point source in the middle, the padded boundary must carry only a
/// small fraction of the amplitude seen at the same place in a much larger
/// domain without absorption.
#[test]
fn absorbing_layer_suppresses_boundary_amplitude() {
    let h = 0.05;
    let omega = 2.0 * std::f64::consts::PI * 4.0;
    let run = |nx: usize, pad: usize, strength: f64| {
        let mesh = TensorMesh::uniform(&[nx, nx], &[h, h]).unwrap();
        let n = mesh.n_cells();
        let gamma = build_attenuation_layer(&mesh, pad, strength, None).unwrap();
        let mid = nx as f64 * h / 2.0;
        let src = point_matrix(&mesh, &[vec![mid, mid]]).unwrap();
        let mut p = HelmholtzProblem::new(mesh.clone(), &vec![1.0; n], gamma, omega, src, CsrMatrix::zeros(0, n), SolverSpec::direct())
            .unwrap();
        p.forward(&vec![1.0; n]).unwrap();
        (mesh, p.fields().unwrap().column(0))
    };
    let (small, nx) = (run(61, 12, 4.0), 61);
    let (big, bx) = (run(141, 0, 0.0), 141);
    let offset = (bx - nx) / 2;
    let mut ratio: f64 = 0.0;
    for j in 0..nx {
        let i = 0;
        let a = small.1[small.0.cell_index(&[i, j])].norm();
        let b = big.1[big.0.cell_index(&[i + offset, j + offset])].norm();
        ratio = ratio.max(a / b);
    }
    println!("boundary amplitude ratio {ratio:.4}");
    assert!(ratio <= 0.05, "ratio {ratio}");
}
