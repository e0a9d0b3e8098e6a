//! Plasmon modes, their electromagnetic fields, and localization diagnostics.
//!
//! A mode is an eigenpair `(λ, φ)` of the MNP operator on curl fields together with the
//! contrast `τ` at which `(1−τ)/(2(1+τ)) = λ`. Its fields are
//! `E = μ∇×S⃗^k[φ] + ∇×∇×S⃗^k[φ]` and
//! `H = −(i/ω)∇×∇×S⃗^k[φ] − (i/(ωμ))k²∇×S⃗^k[φ]`, with the exterior `(μ_e, k_e)` or
//! interior `(μ_c, k_c)` material pair depending on the side of the surface.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mie::{exact_sphere_potential, Ratio, SphereMode, SphereOp};
use crate::potentials::{MaterialConfig, OffSurfaceEvaluator};
use crate::specfun::{cnorm3, norm3, CVec3, Vec3, C64};
use crate::spectral::{SpectralOperator, SpectralSet};
use crate::surface::{SurfaceGrid, TangentField};

/// `τ = (1−2λ)/(1+2λ)`, the contrast at which `λ` is resonant.
pub fn resonance_tau(lambda: f64) -> Result<f64> {
    if !(lambda > -0.5 && lambda < 0.5) {
        return Err(Error::invalid("lambda", "must lie in (-1/2, 1/2)"));
    }
    Ok((1.0 - 2.0 * lambda) / (1.0 + 2.0 * lambda))
}

/// Exact rational version of [`resonance_tau`].
pub fn resonance_tau_ratio(lambda: Ratio) -> Result<Ratio> {
    // λ = p/q ⇒ τ = (q − 2p)/(q + 2p).
    let (p, q) = (lambda.num, lambda.den);
    if !(2 * p > -q && 2 * p < q) {
        return Err(Error::invalid("lambda", "must lie in (-1/2, 1/2)"));
    }
    Ratio::new(q - 2 * p, q + 2 * p)
}

/// `(1−τ)/(2(1+τ))`, the spectral parameter of the contrast `τ`.
pub fn contrast_parameter(tau: f64) -> f64 {
    (1.0 - tau) / (2.0 * (1.0 + tau))
}

/// Density of a plasmon mode.
#[derive(Debug, Clone)]
pub enum ModeDensity {
    /// Vector spherical harmonic on a sphere (exact evaluation).
    Sphere(SphereMode),
    /// Tangent field on a general surface (quadrature evaluation).
    Field(TangentField),
}

/// A weak plasmon mode with its resonant material snapshot.
#[derive(Debug, Clone)]
pub struct PlasmonMode {
    pub index: usize,
    pub lambda: f64,
    pub tau: f64,
    pub density: ModeDensity,
    /// Factor applied to the density so that it has unit `curl_Ninv` (or `grad_Qinv`) norm.
    pub scale: f64,
    pub materials: MaterialConfig,
}

impl PlasmonMode {
    /// Sphere mode `(l, n, m)` on a radius-`r` sphere at its resonant contrast, scaled to
    /// unit symmetrizing norm: the potential `∓(r/√(n(n+1)))Y_n^m` has squared norm
    /// `(2n+1)r³/(n(n+1))`.
    pub fn sphere(l: u8, n: usize, m: i64, r: f64, omega: f64) -> Result<Self> {
        let mode = SphereMode::new(l, n, m, r)?;
        let lambda = crate::mie::sphere_mnp_eigenvalue(l, n)?;
        let tau = resonance_tau(lambda)?;
        let nn = (n * (n + 1)) as f64;
        Ok(PlasmonMode {
            index: n,
            lambda,
            tau,
            density: ModeDensity::Sphere(mode),
            scale: (nn / ((2 * n + 1) as f64 * r.powi(3))).sqrt(),
            materials: MaterialConfig::from_tau(tau, omega, 1.0)?,
        })
    }

    /// Mode `j` of a curl-field spectral set.
    pub fn from_spectrum(set: &SpectralSet, j: usize, omega: f64) -> Result<Self> {
        if set.operator != SpectralOperator::MCurl {
            return Err(Error::KindMismatch {
                expected: "M_curl spectrum".into(),
                found: format!("{:?}", set.operator),
            });
        }
        let lambda = *set
            .eigenvalues
            .get(j)
            .ok_or_else(|| Error::invalid("mode", format!("index {j} out of range")))?;
        let tau = resonance_tau(lambda)?;
        Ok(PlasmonMode {
            index: j,
            lambda,
            tau,
            density: ModeDensity::Field(set.field(j)?),
            scale: 1.0,
            materials: MaterialConfig::from_tau(tau, omega, 1.0)?,
        })
    }

    /// `(μ, k)` on the side of the surface containing `x`.
    fn side(&self, inside: bool) -> (C64, C64) {
        if inside {
            (self.materials.mu_c, self.materials.k_c())
        } else {
            (self.materials.mu_e, self.materials.k_e())
        }
    }
}

/// `(E, H)` from `(∇×S⃗[φ], ∇×∇×S⃗[φ])` for material `(μ, k)` at frequency `ω`.
pub fn fields_from_potentials(c1: &CVec3, c2: &CVec3, mu: C64, k: C64, omega: f64) -> (CVec3, CVec3) {
    let i = C64::new(0.0, 1.0);
    let e = std::array::from_fn(|c| mu * c1[c] + c2[c]);
    let h = std::array::from_fn(|c| -i / omega * c2[c] - i / (omega * mu) * k * k * c1[c]);
    (e, h)
}

fn is_inside(grid: Option<&SurfaceGrid>, mode: &PlasmonMode, x: &Vec3) -> Result<bool> {
    let r = norm3(x);
    match (&mode.density, grid) {
        (ModeDensity::Sphere(s), _) => Ok(r < s.r),
        (ModeDensity::Field(_), Some(g)) => {
            if r == 0.0 {
                return Ok(true);
            }
            let d = [x[0] / r, x[1] / r, x[2] / r];
            Ok(r < g.rho_at(&d))
        }
        (ModeDensity::Field(_), None) => Err(Error::invalid("grid", "a surface grid is required for field densities")),
    }
}

/// Electric and magnetic fields of a plasmon mode at `x`.
pub fn plasmon_field(mode: &PlasmonMode, x: &Vec3, grid: Option<&SurfaceGrid>) -> Result<(CVec3, CVec3)> {
    let inside = is_inside(grid, mode, x)?;
    let (mu, k) = mode.side(inside);
    let omega = mode.materials.omega;
    match &mode.density {
        ModeDensity::Sphere(s) => {
            let a = mode.scale;
            let c1 = exact_sphere_potential(*s, k.re, x, SphereOp::CurlS)?.map(|z| z * a);
            let c2 = exact_sphere_potential(*s, k.re, x, SphereOp::CurlCurlS)?.map(|z| z * a);
            Ok(fields_from_potentials(&c1, &c2, mu, k, omega))
        }
        ModeDensity::Field(f) => {
            let g = grid.ok_or_else(|| Error::invalid("grid", "a surface grid is required for field densities"))?;
            let mut ev = OffSurfaceEvaluator::new(g);
            ev.push_field(f)?;
            let (c1, c2) = ev.curl_fields(k, x)?[0];
            Ok(fields_from_potentials(&c1, &c2, mu, k, omega))
        }
    }
}

/// Counting fractions of the almost-sure decay definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticTable {
    pub kappa: f64,
    pub sigmas: Vec<f64>,
    pub ns: Vec<usize>,
    /// `fractions[s][k] = #{j ≤ N_k : |c_j| > σ_s j^{−κ}} / N_k`.
    pub fractions: Vec<Vec<f64>>,
    pub threshold: f64,
    /// True when, for every `σ`, the fraction is non-increasing in `N` and below the
    /// threshold at the largest `N`.
    pub verdict: bool,
}

/// Evaluate the counting statistic of `c_j = o(j^{−κ})` almost surely on finite data.
pub fn almost_sure_statistic(c: &[f64], kappa: f64, sigma_grid: &[f64], n_grid: &[usize], threshold: f64) -> Result<StatisticTable> {
    if sigma_grid.is_empty() || n_grid.is_empty() {
        return Err(Error::invalid("grid", "sigma and N grids must be non-empty"));
    }
    if !(kappa >= 0.0) {
        return Err(Error::invalid("kappa", "must be non-negative"));
    }
    let nmax = *n_grid.iter().max().unwrap_or(&0);
    if c.len() < nmax {
        return Err(Error::invalid("c", format!("sequence has {} terms but N = {nmax} was requested", c.len())));
    }
    if n_grid.contains(&0) {
        return Err(Error::invalid("N", "grid values must be positive"));
    }
    let mut ns = n_grid.to_vec();
    ns.sort_unstable();
    let mut fractions = Vec::with_capacity(sigma_grid.len());
    let mut verdict = true;
    for &s in sigma_grid {
        // Prefix counts of exceedances.
        let mut count = 0usize;
        let mut row = Vec::with_capacity(ns.len());
        let mut k = 0;
        for (j, cj) in c.iter().enumerate().take(nmax) {
            let jj = (j + 1) as f64;
            if cj.abs() > s * jj.powf(-kappa) {
                count += 1;
            }
            while k < ns.len() && ns[k] == j + 1 {
                row.push(count as f64 / ns[k] as f64);
                k += 1;
            }
        }
        let monotone = row.windows(2).all(|w| w[1] <= w[0] + 1e-15);
        let last = *row.last().unwrap_or(&1.0);
        verdict &= monotone && last < threshold;
        fractions.push(row);
    }
    Ok(StatisticTable {
        kappa,
        sigmas: sigma_grid.to_vec(),
        ns,
        fractions,
        threshold,
        verdict,
    })
}

/// Field norms of a mode family over a point cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub points: Vec<Vec3>,
    pub distances: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    /// `|E_j(x_p)|` and `|H_j(x_p)|`, indexed `[j][p]`.
    pub e_abs: Vec<Vec<f64>>,
    pub h_abs: Vec<Vec<f64>>,
    /// Root-mean-square norms over the cloud.
    pub e_norms: Vec<f64>,
    pub h_norms: Vec<f64>,
    /// `Σ_{i≤j}(‖E_i‖² + ‖H_i‖²)`.
    pub partial_sums: Vec<f64>,
    /// Increment of the partial sums over the last quarter of the modes, relative to the total.
    pub last_quartile_growth: f64,
    pub plateau: bool,
    /// Least-squares slope of `log ‖E_j‖` against the mode index.
    pub log_slope: f64,
}

impl DecayReport {
    /// CSV rows `mode,lambda,tau,point,dist,abs_e,abs_h`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,lambda,tau,point,dist,abs_e,abs_h\n");
        for j in 0..self.lambdas.len() {
            for p in 0..self.points.len() {
                s.push_str(&format!(
                    "{j},{:.15e},{:.15e},{p},{:.15e},{:.15e},{:.15e}\n",
                    self.lambdas[j], self.taus[j], self.distances[p], self.e_abs[j][p], self.h_abs[j][p]
                ));
            }
        }
        s
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Distance from `x` to the surface: the grid's tubular distance, or `| |x| − r |` for
/// sphere modes without a grid.
fn distance_to_surface(modes: &[PlasmonMode], grid: Option<&SurfaceGrid>, x: &Vec3) -> Result<f64> {
    if let Some(g) = grid {
        return Ok(g.tubular_distance(x));
    }
    match modes.first().map(|m| &m.density) {
        Some(ModeDensity::Sphere(s)) => Ok((norm3(x) - s.r).abs()),
        _ => Err(Error::invalid("grid", "a surface grid is required for field densities")),
    }
}

/// Field norms of every mode over a point cloud outside the `eps`-tube of the surface.
pub fn localization_scan(modes: &[PlasmonMode], points: &[Vec3], eps: f64, grid: Option<&SurfaceGrid>) -> Result<DecayReport> {
    if modes.is_empty() || points.is_empty() {
        return Err(Error::invalid("modes", "need at least one mode and one point"));
    }
    let mut distances = Vec::with_capacity(points.len());
    for (p, x) in points.iter().enumerate() {
        let d = distance_to_surface(modes, grid, x)?;
        if !(d > eps) {
            return Err(Error::invalid("points", format!("point {p} lies inside the {eps}-tube (distance {d:.3e})")));
        }
        distances.push(d);
    }
    let all_fields = modes.iter().all(|m| matches!(m.density, ModeDensity::Field(_)));
    let values: Vec<Vec<(f64, f64)>> = if all_fields {
        let g = grid.ok_or_else(|| Error::invalid("grid", "a surface grid is required for field densities"))?;
        let mut ev = OffSurfaceEvaluator::new(g);
        for m in modes {
            if let ModeDensity::Field(f) = &m.density {
                ev.push_field(f)?;
            }
        }
        // [p][j]
        let per_point: Vec<Vec<(f64, f64)>> = points
            .par_iter()
            .map(|x| -> Result<Vec<(f64, f64)>> {
                let inside = is_inside(grid, &modes[0], x)?;
                let ks: Vec<C64> = modes.iter().map(|m| m.side(inside).1).collect();
                let pots = if inside {
                    ev.curl_fields_each(&ks, x)?
                } else {
                    ev.curl_fields(ks[0], x)?
                };
                Ok(modes
                    .iter()
                    .zip(&pots)
                    .map(|(m, (c1, c2))| {
                        let (mu, k) = m.side(inside);
                        let (e, h) = fields_from_potentials(c1, c2, mu, k, m.materials.omega);
                        let (e, h) = (e.map(|z| z * m.scale), h.map(|z| z * m.scale));
                        (cnorm3(&e), cnorm3(&h))
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        (0..modes.len()).map(|j| per_point.iter().map(|row| row[j]).collect()).collect()
    } else {
        modes
            .par_iter()
            .map(|m| {
                points
                    .iter()
                    .map(|x| plasmon_field(m, x, grid).map(|(e, h)| (cnorm3(&e), cnorm3(&h))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    };
    let np = points.len() as f64;
    let e_abs: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|v| v.0).collect()).collect();
    let h_abs: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|v| v.1).collect()).collect();
    let rms = |v: &Vec<f64>| (v.iter().map(|a| a * a).sum::<f64>() / np).sqrt();
    let e_norms: Vec<f64> = e_abs.iter().map(rms).collect();
    let h_norms: Vec<f64> = h_abs.iter().map(rms).collect();
    let mut partial_sums = Vec::with_capacity(modes.len());
    let mut acc = 0.0;
    for (e, h) in e_norms.iter().zip(&h_norms) {
        acc += e * e + h * h;
        partial_sums.push(acc);
    }
    let total = acc;
    let q = (3 * modes.len()) / 4;
    let before = if q == 0 { 0.0 } else { partial_sums[q - 1] };
    let last_quartile_growth = if total > 0.0 { (total - before) / total } else { 0.0 };
    let idx: Vec<f64> = (0..modes.len()).map(|j| modes[j].index as f64).collect();
    let logs: Vec<f64> = e_norms.iter().map(|v| v.max(1e-300).ln()).collect();
    Ok(DecayReport {
        points: points.to_vec(),
        distances,
        lambdas: modes.iter().map(|m| m.lambda).collect(),
        taus: modes.iter().map(|m| m.tau).collect(),
        e_abs,
        h_abs,
        e_norms,
        h_norms,
        partial_sums,
        last_quartile_growth,
        plateau: last_quartile_growth <= 0.05,
        log_slope: fit_slope(&idx, &logs),
    })
}

/// Deterministic probe cloud of `n` points at distance `≥ distance` from the surface:
/// every fifth point lies inside the particle when it is thick enough, the rest outside.
pub fn probe_cloud(grid: &SurfaceGrid, n: usize, distance: f64) -> Result<Vec<Vec3>> {
    if n == 0 || !(distance > 0.0) {
        return Err(Error::invalid("n_points", "need a positive count and distance"));
    }
    let min_rho = grid.rho.iter().cloned().fold(f64::INFINITY, f64::min);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let s = (1.0 - z * z).sqrt();
        let ph = golden * i as f64;
        let d = [s * ph.cos(), s * ph.sin(), z];
        let interior = min_rho - 1.3 * distance;
        let mut r = if i % 5 == 0 && interior > 0.05 {
            interior
        } else {
            grid.rho_at(&d) + distance * (1.2 + 0.3 * (i % 3) as f64)
        };
        let outside = r > min_rho;
        let mut x = d.map(|c| c * r);
        for _ in 0..50 {
            if grid.tubular_distance(&x) >= distance {
                break;
            }
            r = if outside { r + 0.1 * distance } else { 0.9 * r };
            x = d.map(|c| c * r);
        }
        pts.push(x);
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resonance_values() {
        assert!((resonance_tau(1.0 / 6.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((resonance_tau(-1.0 / 6.0).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(resonance_tau(0.0).unwrap(), 1.0);
        assert!(MaterialConfig::from_tau(resonance_tau(0.0).unwrap(), 1.0, 1.0).is_err());
        assert!(resonance_tau(0.5).is_err());
        assert!(resonance_tau(-0.7).is_err());
        assert_eq!(resonance_tau_ratio(Ratio { num: 1, den: 6 }).unwrap(), Ratio { num: 1, den: 2 });
    }

    #[test]
    fn statistic_trivial_sequences() {
        let n = 4000;
        let inv: Vec<f64> = (1..=n).map(|j| 1.0 / j as f64).collect();
        let t = almost_sure_statistic(&inv, 0.5, &[0.5, 0.2], &[1000, 2000, 4000], 0.05).unwrap();
        assert!(t.verdict);
        let ones = vec![1.0; n];
        let t = almost_sure_statistic(&ones, 0.5, &[0.5, 0.2], &[1000, 2000, 4000], 0.05).unwrap();
        assert!(!t.verdict);
        assert!(t.fractions.iter().flatten().all(|f| (*f - 1.0).abs() < 1e-15));
        assert!(almost_sure_statistic(&ones, 0.5, &[], &[10], 0.05).is_err());
        assert!(almost_sure_statistic(&ones[..5], 0.5, &[0.5], &[10], 0.05).is_err());
    }

    #[test]
    fn sphere_field_maxwell_residual() {
        let mode = PlasmonMode::sphere(2, 2, 1, 1.0, 1.0).unwrap();
        let x = [0.9, -0.6, 1.4];
        let (_, h) = plasmon_field(&mode, &x, None).unwrap();
        let curl_e = crate::mie::curl_fd(|y| plasmon_field(&mode, y, None).unwrap().0, &x, 1e-3);
        let i = C64::new(0.0, 1.0);
        let w = mode.materials.omega;
        let mu = mode.materials.mu_e;
        let res: f64 = (0..3).map(|c| (curl_e[c] - i * w * mu * h[c]).norm_sqr()).sum::<f64>().sqrt();
        let scale = cnorm3(&curl_e);
        assert!(res / scale < 1e-3, "{:e}", res / scale);
    }
}
