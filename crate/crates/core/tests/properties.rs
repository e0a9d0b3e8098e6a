//! Property-based checks of the structural invariants.

use std::sync::OnceLock;

use mnp::mie::SphereMode;
use mnp::plasmon::{almost_sure_statistic, contrast_parameter, resonance_tau};
use mnp::potentials::{assemble_all, HelmholtzProjector, MaterialConfig, OffSurfaceEvaluator, ScalarOperators};
use mnp::scatter::{assemble_system_with, green};
use mnp::specfun::{sh_len, ynm, RadialSet, C64};
use mnp::spectral::{field_spectrum, kstar_pencil, potential_gram, projected_mstar_residual, SpectralOperator};
use mnp::surface::{ShCoeffs, SurfaceGrid, SurfaceSpec, TangentField};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    grid: SurfaceGrid,
    ops: ScalarOperators,
}

fn perturbed() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let grid = SurfaceGrid::perturbed_sphere(0.05, 2, 0, 16).unwrap();
        let ops = assemble_all(&grid, 8).unwrap();
        Fixture { grid, ops }
    })
}

fn sphere() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let grid = SurfaceGrid::sphere(1.0, 12).unwrap();
        let ops = assemble_all(&grid, 6).unwrap();
        Fixture { grid, ops }
    })
}

fn coeffs(l: usize, seed: u64, decay: f64) -> ShCoeffs {
    ShCoeffs::random(l, &mut ChaCha8Rng::seed_from_u64(seed), decay, true)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bessel_three_term_recurrence(n in 1usize..40, z in 0.1f64..20.0) {
        let r = RadialSet::new(n + 1, z);
        for f in [&r.j, &r.y] {
            let lhs = f[n - 1] + f[n + 1];
            let rhs = (2 * n + 1) as f64 * f[n] / z;
            let scale = lhs.abs().max(rhs.abs()).max(f[n - 1].abs()).max(f[n + 1].abs());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale, "n={} z={}", n, z);
        }
    }

    #[test]
    fn harmonics_finite_to_degree_sixty(n in 0usize..=60, frac in -1.0f64..=1.0, t in 0.0f64..std::f64::consts::PI, p in 0.0f64..std::f64::consts::TAU) {
        let m = (frac * n as f64).round() as i64;
        let d = [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()];
        prop_assert!(ynm(n, m, &d).unwrap().is_finite());
    }

    #[test]
    fn resonance_roundtrip(lambda in -0.49f64..0.49) {
        let tau = resonance_tau(lambda).unwrap();
        prop_assert!(tau > 0.0);
        prop_assert!((contrast_parameter(tau) - lambda).abs() < 1e-12);
    }

    #[test]
    fn green_scaling_consistency(k in 0.1f64..5.0, delta in 0.01f64..1.0,
                                 x in prop::array::uniform3(-2.0f64..2.0), y in prop::array::uniform3(-2.0f64..2.0)) {
        prop_assume!(((x[0]-y[0]).powi(2) + (x[1]-y[1]).powi(2) + (x[2]-y[2]).powi(2)).sqrt() > 1e-3);
        let k = C64::new(k, 0.0);
        let a = green(k, &x, &y);
        let b = green(k * delta, &x.map(|v| v / delta), &y.map(|v| v / delta)) / delta;
        prop_assert!((a - b).norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn statistic_fractions_bounded_and_monotone_in_sigma(seed in 0u64..1000) {
        let c: Vec<f64> = (1..=400).map(|j| ((j as u64 * 2654435761 + seed) % 997) as f64 / 997.0 / (j as f64).sqrt()).collect();
        let t = almost_sure_statistic(&c, 0.5, &[0.5, 0.25, 0.1], &[100, 200, 400], 0.05).unwrap();
        for row in &t.fractions {
            prop_assert!(row.iter().all(|f| (0.0..=1.0).contains(f)));
        }
        for k in 0..3 {
            prop_assert!(t.fractions[0][k] <= t.fractions[1][k] && t.fractions[1][k] <= t.fractions[2][k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gauss_identity_on_random_surfaces(n in 1usize..5, frac in -1.0f64..=1.0, eps in -0.1f64..0.1) {
        let m = (frac * n as f64).round() as i64;
        let g = SurfaceSpec::perturbed_sphere(eps, n, m, 14).build().unwrap();
        for c in 0..3 {
            let s: f64 = g.normals.iter().zip(&g.area_weights).map(|(v, w)| v[c] * w).sum();
            prop_assert!(s.abs() <= 1e-8);
        }
    }

    #[test]
    fn integration_by_parts(seed in 0u64..10_000) {
        let f = perturbed();
        let u = coeffs(6, seed, 1.0);
        let field = TangentField::curl(coeffs(6, seed + 1, 1.0)).with_flavor(mnp::surface::Flavor::Div);
        let fx = TangentField::gradient(coeffs(6, seed + 2, 1.0));
        let gu = f.grid.surface_grad(&u).unwrap();
        for tf in [field, fx] {
            let nodes = f.grid.tangent_field_nodes(&tf).unwrap();
            let div = f.grid.div_nodes(&nodes).unwrap();
            let un = f.grid.sh_synthesis(&u).unwrap();
            let mut a = C64::new(0.0, 0.0);
            let mut scale = 0.0;
            for i in 0..f.grid.len() {
                let w = f.grid.area_weights[i];
                let gdot: C64 = (0..3).map(|c| gu[i][c] * nodes[i][c]).sum();
                a += (gdot + un[i] * div[i]) * w;
                scale += (gdot.norm() + (un[i] * div[i]).norm()) * w;
            }
            prop_assert!(a.norm() <= 1e-8 * scale, "{:e}", a.norm() / scale);
        }
    }

    #[test]
    fn helmholtz_projection_reconstructs_band_limited_fields(seed in 0u64..10_000) {
        let f = sphere();
        let tf = TangentField::new(coeffs(6, seed, 1.0), coeffs(6, seed + 7, 1.0), mnp::surface::Flavor::Div).unwrap();
        let nodes = f.grid.tangent_field_nodes(&tf).unwrap();
        let p = HelmholtzProjector::new(&f.grid, 6).unwrap().project(&nodes, mnp::surface::Flavor::Div).unwrap();
        let err = (p.x.as_dvector() - tf.x.as_dvector()).norm() + (p.v.as_dvector() - tf.v.as_dvector()).norm();
        prop_assert!(err <= 1e-8 * (tf.x.norm() + tf.v.norm()));
    }

    #[test]
    fn divergence_commutes_with_vector_potential(seed in 0u64..10_000, t in 0.3f64..2.8, p in 0.0f64..6.2, r in 1.6f64..3.0) {
        let f = perturbed();
        let x = coeffs(6, seed, 1.0);
        let field = TangentField::gradient(x.clone());
        let div = f.grid.laplace_beltrami(&x).unwrap();
        let mut ev = OffSurfaceEvaluator::new(&f.grid);
        ev.push_field(&field).unwrap();
        ev.push_scalar(&f.grid.sh_analysis(&div, f.grid.l_quad).unwrap()).unwrap();
        let pt = [r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos()];
        let k = C64::new(0.7, 0.0);
        let lhs = ev.div_fields(k, &pt).unwrap()[0];
        let rhs = ev.scalar_fields(k, &pt).unwrap()[0].0;
        prop_assert!((lhs - rhs).norm() <= 1e-7 * rhs.norm().max(1e-3 * lhs.norm()), "{:e} vs {:e}", lhs, rhs);
    }

    #[test]
    fn order_zero_block_diagonalizes_sphere_modes(n in 1usize..=6, frac in -1.0f64..=1.0, tau in 0.05f64..5.0) {
        prop_assume!((tau - 1.0).abs() > 1e-3);
        let f = sphere();
        let m = (frac * n as f64).round() as i64;
        let mat = MaterialConfig::from_tau(tau, 1.0, 0.0).unwrap();
        let sys = assemble_system_with(&f.ops, None, &mat, 0).unwrap();
        let phi = SphereMode::new(2, n, m, 1.0).unwrap().density(6).unwrap();
        let (r0, r1) = sys.apply(&phi, &phi).unwrap();
        let factor = C64::new(contrast_parameter(tau) - 1.0 / (2.0 * (2 * n + 1) as f64), 0.0);
        for r in [r0, r1] {
            let d = (r.v.as_dvector() - phi.v.as_dvector() * factor).norm() + r.x.norm();
            prop_assert!(d <= 1e-8 * phi.v.norm());
        }
    }

    #[test]
    fn curl_mode_expansion_converges(seed in 0u64..10_000) {
        let f = perturbed();
        let set = field_spectrum(&f.ops, SpectralOperator::MCurl).unwrap();
        let g = potential_gram(&f.ops).unwrap();
        let v = coeffs(8, seed, 1.5);
        let vv = DVector::from_iterator(sh_len(8) - 1, v.coeffs[1..].iter().copied());
        let gn = |w: &DVector<C64>| (w.adjoint() * &g * w)[(0, 0)].re.sqrt();
        let mut acc = DVector::<C64>::zeros(vv.len());
        let mut prev = f64::INFINITY;
        for j in 0..set.len() {
            let e = DVector::from_iterator(vv.len(), set.vectors[j].coeffs[1..].iter().copied());
            let c = (e.adjoint() * &g * &vv)[(0, 0)];
            acc += e * c;
            let err = gn(&(&vv - &acc)) / gn(&vv);
            prop_assert!(err <= prev + 1e-12);
            prev = err;
        }
        prop_assert!(prev <= 1e-4);
    }
}

#[test]
fn negative_single_layer_gram_is_positive_definite() {
    for f in [sphere(), perturbed()] {
        let (_, b) = kstar_pencil(&f.ops);
        let h = (&b + b.adjoint()) * C64::new(0.5, 0.0);
        let min = h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "{min}");
    }
}

#[test]
fn preimages_are_eigenvectors_of_projected_adjoint() {
    let f = perturbed();
    let set = field_spectrum(&f.ops, SpectralOperator::MCurl).unwrap();
    let r = projected_mstar_residual(&set, &f.ops, &f.grid, 15).unwrap();
    assert!(r <= 1e-6, "{r:e}");
}

#[test]
fn sphere_eigenvalue_decay_rate() {
    let f = sphere();
    let set = mnp::spectral::np_spectrum(&f.ops).unwrap();
    // Degree n occupies sorted positions n² + 1 ..= (n+1)², so at j = (n+1)² the scaled value
    // 4√j λ_j equals (2n+2)/(2n+1), decreasing to one: λ_j ~ 1/(4√j).
    let mut prev = f64::INFINITY;
    for n in 1..=6 {
        let j = (n + 1) * (n + 1);
        let ratio = set.eigenvalues[j - 1].abs() * 4.0 * (j as f64).sqrt();
        let expect = (2 * n + 2) as f64 / (2 * n + 1) as f64;
        assert!((ratio - expect).abs() < 1e-6, "n={n}: {ratio} vs {expect}");
        assert!(ratio < prev);
        prev = ratio;
    }
}
