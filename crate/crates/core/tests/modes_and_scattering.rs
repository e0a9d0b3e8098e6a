//! Plasmon-mode fields, localization scans and the scaled scattering system.

use mnp::mie::{curl_fd, SphereMode};
use mnp::plasmon::{
    almost_sure_statistic, contrast_parameter, fit_slope, localization_scan, plasmon_field, ModeDensity, PlasmonMode,
};
use mnp::potentials::{assemble_all, CorrectionBases, MaterialConfig};
use mnp::scatter::{
    assemble_system_with, dipole_fields, dipole_incident_trace, eval_scattered_fields, solve_scatter, weak_resonance_indicator,
    RhsVector,
};
use mnp::specfun::{cnorm3, CVec3, C64};
use mnp::spectral::working_norm;
use mnp::surface::{Flavor, ShCoeffs, SurfaceGrid, TangentField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: &CVec3, b: &CVec3) -> f64 {
    let d: f64 = (0..3).map(|c| (a[c] - b[c]).norm_sqr()).sum::<f64>().sqrt();
    d / cnorm3(b)
}

#[test]
fn sphere_plasmon_fields_agree_with_quadrature() {
    let grid = SurfaceGrid::sphere(1.0, 24).unwrap();
    for n in 1..=5 {
        for l in [1u8, 2] {
            let exact = PlasmonMode::sphere(l, n, 0, 1.0, 1.0).unwrap();
            let ModeDensity::Sphere(sm) = exact.density else { unreachable!() };
            let d = sm.density(5).unwrap();
            let s = exact.scale;
            let quad = PlasmonMode {
                density: ModeDensity::Field(TangentField::new(d.x.scaled(C64::new(s, 0.0)), d.v.scaled(C64::new(s, 0.0)), d.flavor).unwrap()),
                ..exact.clone()
            };
            for x in [[0.0, 0.0, 2.0], [0.3, -0.2, 0.35], [1.1, 0.9, -1.2]] {
                let (e1, h1) = plasmon_field(&exact, &x, None).unwrap();
                let (e2, h2) = plasmon_field(&quad, &x, Some(&grid)).unwrap();
                assert!(rel(&e2, &e1) < 1e-6, "l={l} n={n} x={x:?}: E {:e}", rel(&e2, &e1));
                assert!(rel(&h2, &h1) < 1e-6, "l={l} n={n} x={x:?}: H {:e}", rel(&h2, &h1));
            }
        }
    }
}

#[test]
fn zero_density_gives_zero_field() {
    let grid = SurfaceGrid::sphere(1.0, 8).unwrap();
    let mode = PlasmonMode::sphere(2, 1, 0, 1.0, 1.0).unwrap();
    let zero = PlasmonMode {
        density: ModeDensity::Field(TangentField::zeros(4, Flavor::Curl)),
        ..mode
    };
    let (e, h) = plasmon_field(&zero, &[0.0, 0.0, 3.0], Some(&grid)).unwrap();
    assert_eq!(cnorm3(&e), 0.0);
    assert_eq!(cnorm3(&h), 0.0);
}

#[test]
fn near_boundary_point_is_refused() {
    let grid = SurfaceGrid::sphere(1.0, 8).unwrap();
    let mode = PlasmonMode::sphere(2, 1, 0, 1.0, 1.0).unwrap();
    let ModeDensity::Sphere(sm) = mode.density else { unreachable!() };
    let quad = PlasmonMode {
        density: ModeDensity::Field(sm.density(4).unwrap()),
        ..mode
    };
    assert!(plasmon_field(&quad, &[0.0, 0.0, 1.01], Some(&grid)).is_err());
}

#[test]
fn sphere_mode_ratios_approach_one_half() {
    let pts_ext: Vec<[f64; 3]> = vec![[0.0, 1.2, 1.6], [1.6, 0.0, -1.2], [2.0, 0.0, 0.0]];
    let pts_int: Vec<[f64; 3]> = pts_ext.iter().map(|p| p.map(|c| c / 4.0)).collect();
    for pts in [pts_ext, pts_int] {
        let modes: Vec<PlasmonMode> = (1..=12).map(|n| PlasmonMode::sphere(2, n, 0, 1.0, 1.0).unwrap()).collect();
        let rep = localization_scan(&modes, &pts, 0.4, None).unwrap();
        for n in 8..12 {
            let ratio = rep.e_norms[n] / rep.e_norms[n - 1];
            assert!((ratio - 0.5).abs() < 0.05, "n={n}: ratio {ratio}");
        }
        assert!(rep.plateau);
        let idx: Vec<f64> = (8..=12).map(|n| n as f64).collect();
        let logs: Vec<f64> = (7..12).map(|j| rep.e_norms[j].ln()).collect();
        assert!((fit_slope(&idx, &logs) / 0.5f64.ln() - 1.0).abs() < 0.1);
    }
}

#[test]
fn localization_scan_rejects_points_in_tube() {
    let modes = vec![PlasmonMode::sphere(2, 1, 0, 1.0, 1.0).unwrap()];
    assert!(localization_scan(&modes, &[[0.0, 0.0, 1.2]], 0.5, None).is_err());
}

#[test]
fn square_summable_random_sequence_passes_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c: Vec<f64> = (1..=1_000_000)
        .map(|j| {
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            s * (j as f64).powf(-0.6)
        })
        .collect();
    let t = almost_sure_statistic(&c, 0.5, &[0.9, 0.7, 0.5], &[10_000, 100_000, 1_000_000], 0.05).unwrap();
    assert!(t.verdict, "{:?}", t.fractions);
}

fn sphere_setup(l: usize) -> (SurfaceGrid, mnp::potentials::ScalarOperators, CorrectionBases) {
    let g = SurfaceGrid::sphere(1.0, 16).unwrap();
    let ops = assemble_all(&g, l).unwrap();
    let b = CorrectionBases::assemble(&g, l).unwrap();
    (g, ops, b)
}

fn log2_slope(a: f64, b: f64) -> f64 {
    (a / b).log2()
}

#[test]
fn dipole_trace_scalings() {
    let (g, _, _) = sphere_setup(8);
    let m0 = MaterialConfig::from_tau(0.3, 1.0, 0.0).unwrap();
    let r0 = dipole_incident_trace(&[0.0, 0.5, 3.0], &[1.0, 0.0, 0.3], &m0, &g, 8).unwrap();
    assert!(r0.gradient_fraction <= 1e-6, "{:e}", r0.gradient_fraction);
    assert_eq!(r0.h_trace_norm, 0.0);
    let h: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&d| {
            let m = MaterialConfig { delta: d, ..m0 };
            dipole_incident_trace(&[0.0, 0.5, 3.0], &[1.0, 0.0, 0.3], &m, &g, 8).unwrap().h_trace_norm
        })
        .collect();
    for w in h.windows(2) {
        let s = log2_slope(w[0], w[1]);
        assert!((s - 1.0).abs() <= 0.1, "slope {s}");
    }
    let z = dipole_incident_trace(&[0.0, 0.5, 3.0], &[0.0; 3], &m0, &g, 8).unwrap();
    assert_eq!(working_norm(&z.e) + working_norm(&z.h), 0.0);
}

#[test]
fn correction_norm_vanishes_linearly() {
    let (_, ops, b) = sphere_setup(6);
    let base = MaterialConfig::from_tau(0.5, 1.0, 1.0).unwrap();
    let s0 = assemble_system_with(&ops, Some(&b), &base, 0).unwrap();
    let norms: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&d| {
            let s = assemble_system_with(&ops, Some(&b), &MaterialConfig { delta: d, ..base }, 2).unwrap();
            s.correction_norm(&s0)
        })
        .collect();
    for w in norms.windows(2) {
        assert!(log2_slope(w[0], w[1]) >= 1.0 - 1e-9, "{norms:?}");
    }
}

#[test]
fn weak_resonance_indicator_examples() {
    let (_, ops, b) = sphere_setup(8);
    let mode = SphereMode::new(2, 1, 0, 1.0).unwrap().density(8).unwrap();
    let ind = |tau: f64, d: f64| {
        let m = MaterialConfig::from_tau(tau, 1.0, d).unwrap();
        weak_resonance_indicator(&assemble_system_with(&ops, Some(&b), &m, 2).unwrap(), &mode).unwrap()
    };
    let res: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&d| ind(0.5, d)).collect();
    assert!(res.windows(2).all(|w| log2_slope(w[0], w[1]) >= 1.0), "{res:?}");
    assert!(ind(0.5, 0.0) <= 1e-8);
    // (φ, ωφ) with ‖φ‖ = 1 has norm √2; the order-0 action scales it by λ(τ) − 1/6.
    let bound = (contrast_parameter(0.6) - 1.0 / 6.0).abs() * 2f64.sqrt();
    for d in [0.1, 0.05, 0.025, 0.0] {
        assert!(ind(0.6, d) >= bound * (1.0 - 1e-9), "delta {d}");
    }
}

fn curl_rhs(l: usize, v: ShCoeffs) -> RhsVector {
    RhsVector {
        e: TangentField::curl(v),
        h: TangentField::zeros(l, Flavor::Curl),
        gradient_fraction: 0.0,
        e_trace_norm: 0.0,
        h_trace_norm: 0.0,
    }
}

#[test]
fn order_zero_solve_is_diagonal_on_sphere() {
    let l = 8;
    let (g, ops, _) = sphere_setup(l);
    let tau = 10.0;
    let m = MaterialConfig::from_tau(tau, 1.0, 0.0).unwrap();
    let sys = assemble_system_with(&ops, None, &m, 0).unwrap();
    let lt = contrast_parameter(tau);
    // Right-hand side in the eigenspace nearest to λ(τ): norm = ‖rhs‖ / min gap.
    let gap_min = sys.eigenvalues.iter().map(|e| (lt - e).abs()).fold(f64::INFINITY, f64::min);
    let rhs = curl_rhs(l, ShCoeffs::unit(l, l, 2));
    let sol = solve_scatter(&sys, &rhs).unwrap();
    let expect = working_norm(&rhs.e) / gap_min;
    assert!((sol.norm / expect - 1.0).abs() < 0.1);
    // Dipole right-hand side: the diagonal formula holds degree by degree.
    let rhs = dipole_incident_trace(&[0.0, 0.0, 4.0], &[1.0, 0.0, 0.0], &m, &g, l).unwrap();
    let sol = solve_scatter(&sys, &rhs).unwrap();
    let mut c = rhs.e.v.clone();
    for (k, z) in c.coeffs.iter_mut().enumerate().skip(1) {
        let (n, _) = mnp::specfun::sh_degree_order(k);
        *z /= C64::new(lt - 1.0 / (2.0 * (2 * n + 1) as f64), 0.0);
    }
    let d: f64 = c.coeffs.iter().zip(&sol.psi.v.coeffs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    assert!(d < 1e-8 * c.norm());
    // Zero right-hand side gives zero densities.
    let zero = curl_rhs(l, ShCoeffs::zeros(l));
    assert_eq!(solve_scatter(&sys, &zero).unwrap().norm, 0.0);
}

#[test]
fn detuning_blow_up_ratio() {
    let l = 8;
    let (g, ops, _) = sphere_setup(l);
    let norm = |eta: f64| {
        let m = MaterialConfig::from_tau(0.5 + eta, 1.0, 0.0).unwrap();
        let sys = assemble_system_with(&ops, None, &m, 0).unwrap();
        let rhs = dipole_incident_trace(&[0.0, 0.0, 10.0], &[1.0, 0.0, 0.0], &m, &g, l).unwrap();
        solve_scatter(&sys, &rhs).unwrap().norm
    };
    let r = norm(1e-3) / norm(1e-2);
    assert!((r / 10.0 - 1.0).abs() < 0.2, "ratio {r}");
}

#[test]
fn scattered_field_paths() {
    let grid = SurfaceGrid::sphere(1.0, 20).unwrap();
    let m = MaterialConfig::from_tau(0.5, 1.0, 0.0).unwrap();
    let x = [0.4, -0.8, 1.9];
    // Zero densities return the incident field exactly.
    let inc = dipole_fields(&[0.0, 0.0, 5.0], &[1.0, 0.0, 0.0], &MaterialConfig { delta: 1.0, ..m }, &x);
    let z = TangentField::zeros(5, Flavor::Curl);
    let (e, h) = eval_scattered_fields(&z, &z, &x, &m, &grid, Some(inc)).unwrap();
    assert_eq!(e, inc.0);
    assert_eq!(h, inc.1);
    // Single sphere modes: compare with the closed forms.
    let psi = SphereMode::new(2, 2, 1, 1.0).unwrap();
    let phi = SphereMode::new(1, 3, 0, 1.0).unwrap();
    for x in [[0.4, -0.8, 1.9], [0.1, 0.2, -0.3]] {
        let inside = mnp::specfun::norm3(&x) < 1.0;
        let (mu, k) = if inside { (m.mu_c, m.k_c()) } else { (m.mu_e, m.k_e()) };
        let (e, h) = eval_scattered_fields(&psi.density(5).unwrap(), &phi.density(5).unwrap(), &x, &m, &grid, None).unwrap();
        let sp = |mode: SphereMode, op| mnp::mie::exact_sphere_potential(mode, k.re, &x, op).unwrap();
        use mnp::mie::SphereOp::{CurlCurlS, CurlS};
        let i = C64::new(0.0, 1.0);
        let (a1, a2, b1, b2) = (sp(psi, CurlS), sp(psi, CurlCurlS), sp(phi, CurlS), sp(phi, CurlCurlS));
        let ee: CVec3 = std::array::from_fn(|c| mu * a1[c] + b2[c]);
        let hh: CVec3 = std::array::from_fn(|c| -i / m.omega * a2[c] - i / (m.omega * mu) * k * k * b1[c]);
        assert!(rel(&e, &ee) < 1e-6 && rel(&h, &hh) < 1e-6, "x={x:?}");
    }
    // Exterior Maxwell residual by finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = TangentField::curl(ShCoeffs::random(5, &mut rng, 1.0, true));
    let b = TangentField::curl(ShCoeffs::random(5, &mut rng, 1.0, true));
    let x = [0.7, 1.1, -1.3 + rng.random_range(0.0..0.1)];
    let (_, h) = eval_scattered_fields(&a, &b, &x, &m, &grid, None).unwrap();
    let curl_e = curl_fd(|y| eval_scattered_fields(&a, &b, y, &m, &grid, None).unwrap().0, &x, 1e-3);
    let iwmh: CVec3 = std::array::from_fn(|c| C64::new(0.0, 1.0) * m.omega * m.mu_e * h[c]);
    assert!(rel(&curl_e, &iwmh) < 1e-3);
}
