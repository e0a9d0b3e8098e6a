//! Closed-form sphere results: MNP spectra, exact vector layer potentials of vector
//! spherical harmonic densities, and TE/TM multipole fields.
//!
//! For a sphere of radius `r` and a density `φ_{l,n}^m(ŷ)` the fields
//! `∇×S⃗^k[φ]` and `∇×∇×S⃗^k[φ]` are single multipoles; the radial factors below are
//! obtained from the addition theorem of the outgoing Green's function and checked in the
//! test suite against direct quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{sh_index, vector_sph, CVec3, HarmonicTable, RadialSet, Vec3, VectorHarmonic, C64};
use crate::potentials::{offboundary_eval, Density, FieldValue, PotentialKind};
use crate::surface::{ShCoeffs, SurfaceGrid, TangentField};

/// Exact rational number with a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub num: i64,
    pub den: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if den == 0 {
            return Err(Error::invalid("den", "zero denominator"));
        }
        let g = gcd(num, den).max(1);
        let s = if den < 0 { -1 } else { 1 };
        Ok(Ratio {
            num: s * num / g,
            den: s * den / g,
        })
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::ops::Neg for Ratio {
    type Output = Ratio;

    fn neg(self) -> Ratio {
        Ratio {
            num: -self.num,
            den: self.den,
        }
    }
}

/// A vector spherical harmonic on a sphere of radius `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereMode {
    pub l: u8,
    pub n: usize,
    pub m: i64,
    pub r: f64,
}

impl SphereMode {
    pub fn new(l: u8, n: usize, m: i64, r: f64) -> Result<Self> {
        if l != 1 && l != 2 {
            return Err(Error::invalid("l", "must be 1 or 2"));
        }
        if n < 1 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if m.unsigned_abs() as usize > n {
            return Err(Error::invalid("m", "|m| must not exceed n"));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid("r", "radius must be positive"));
        }
        Ok(SphereMode { l, n, m, r })
    }

    /// The density `φ_{l,n}^m(ŷ)` on the sphere as a tangent field of degree `lmax`.
    ///
    /// On the radius-`r` sphere `∇_∂D = ∇_S / r`, so `φ_1 = (r/s) ∇_∂D Y` and
    /// `φ_2 = ν × φ_1 = −curl⃗((r/s) Y)` with `s = √(n(n+1))`.
    pub fn density(&self, lmax: usize) -> Result<TangentField> {
        if self.n > lmax {
            return Err(Error::Resolution {
                requested: self.n,
                available: lmax,
            });
        }
        let s = ((self.n * (self.n + 1)) as f64).sqrt();
        let mut c = ShCoeffs::zeros(lmax);
        c.coeffs[sh_index(self.n, self.m)] = C64::new(self.r / s, 0.0);
        if self.l == 1 {
            Ok(TangentField::gradient(c))
        } else {
            Ok(TangentField::curl(c.scaled(C64::new(-1.0, 0.0))))
        }
    }
}

/// `λ_{1,n} = −1/(2(2n+1))`, `λ_{2,n} = 1/(2(2n+1))` as exact rationals.
pub fn sphere_mnp_eigenvalue_ratio(l: u8, n: usize) -> Result<Ratio> {
    if n < 1 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let r = Ratio::new(1, 2 * (2 * n as i64 + 1))?;
    match l {
        1 => Ok(-r),
        2 => Ok(r),
        _ => Err(Error::invalid("l", "must be 1 or 2")),
    }
}

/// Eigenvalue of the MNP operator on the unit-sphere mode `φ_{l,n}^m`.
pub fn sphere_mnp_eigenvalue(l: u8, n: usize) -> Result<f64> {
    Ok(sphere_mnp_eigenvalue_ratio(l, n)?.to_f64())
}

/// `σ(K*)` on the sphere as exact rationals `1/(2(2n+1))`, `n = 0..=nmax`.
pub fn sphere_np_spectrum(nmax: usize) -> Vec<Ratio> {
    (0..=nmax)
        .map(|n| Ratio {
            num: 1,
            den: 2 * (2 * n as i64 + 1),
        })
        .collect()
}

/// Which vector potential to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereOp {
    #[serde(rename = "curlS")]
    CurlS,
    #[serde(rename = "curlcurlS")]
    CurlCurlS,
}

/// Exact `∇×S⃗^k[φ_{l,n}^m]` or `∇×∇×S⃗^k[φ_{l,n}^m]` at `x` for a radius-`r` sphere.
pub fn exact_sphere_potential(mode: SphereMode, k: f64, x: &Vec3, which: SphereOp) -> Result<CVec3> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::invalid("k", "wavenumber must be positive"));
    }
    let rp = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let r = mode.r;
    if !(rp > 0.0) || (rp - r).abs() <= 1e-12 * r {
        return Err(Error::invalid("x", "point must lie off the sphere and away from the origin"));
    }
    let n = mode.n;
    let xh = [x[0] / rp, x[1] / rp, x[2] / rp];
    let vh = |l: u8| vector_sph(VectorHarmonic { l, n, m: mode.m }, &xh);
    let p1 = vh(1)?;
    let p2 = vh(2)?;
    let yv = HarmonicTable::new(n, &xh, false).y[sh_index(n, mode.m)];
    let s = ((n * (n + 1)) as f64).sqrt();
    let at_r = RadialSet::new(n, k * r);
    let at_x = RadialSet::new(n, k * rp);
    let i = C64::new(0.0, 1.0);
    // Radial factors: (outer, inner) pairs of (plain, composite) functions.
    let exterior = rp > r;
    let (f_out, cf_out, f_in, cf_in): (C64, C64, C64, C64) = if exterior {
        (at_x.h(n), at_x.ch(n), C64::new(at_r.j[n], 0.0), C64::new(at_r.cj(n), 0.0))
    } else {
        (C64::new(at_x.j[n], 0.0), C64::new(at_x.cj(n), 0.0), at_r.h(n), at_r.ch(n))
    };
    let comb = |a: C64, va: &CVec3, b: C64| -> CVec3 { std::array::from_fn(|c| a * va[c] + b * yv * xh[c]) };
    let out = match (mode.l, which) {
        (1, SphereOp::CurlS) => {
            let a = i * k * r * f_out * cf_in;
            p2.map(|v| v * a)
        }
        (2, SphereOp::CurlS) => {
            // (i k r²/r') [𝓑(kr') b(kr) φ_1 + s b(kr') b(kr) Y x̂] with the outgoing/regular pairing.
            let a = i * k * r * r / rp * cf_out * f_in;
            let b = i * k * r * r * s / rp * f_out * f_in;
            comb(a, &p1, b)
        }
        (1, SphereOp::CurlCurlS) => {
            let a = -i * k * r / rp * cf_out * cf_in;
            let b = -i * k * r * s / rp * f_out * cf_in;
            comb(a, &p1, b)
        }
        (2, SphereOp::CurlCurlS) => {
            let a = -i * k * k * k * r * r * f_out * f_in;
            p2.map(|v| v * a)
        }
        _ => return Err(Error::invalid("l", "must be 1 or 2")),
    };
    Ok(out)
}

/// Multipole selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultipoleKind {
    #[serde(rename = "TE_ext")]
    TeExt,
    #[serde(rename = "TM_ext")]
    TmExt,
    #[serde(rename = "TE_int")]
    TeInt,
    #[serde(rename = "TM_int")]
    TmInt,
}

/// Medium parameters for multipole fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    pub omega: f64,
    pub eps: C64,
    pub mu: C64,
}

/// `(E, H)` of a TE/TM multipole of degree `n`, order `m`, wavenumber `k` at `x`.
///
/// The generating field is `F = −√(n(n+1)) b_n(k|x|) φ_{2,n}^m(x̂)` with `b = h^{(1)}`
/// (exterior) or `b = j` (interior); its curl is
/// `(√(n(n+1))/|x|) 𝓑_n φ_{1,n}^m + (n(n+1)/|x|) b_n Y_n^m x̂`.
/// TE: `E = F`, `H = −(i/(ωμ)) ∇×F`; TM: `E = (i/(ωε)) ∇×F`, `H = F`.
pub fn multipole(kind: MultipoleKind, n: usize, m: i64, k: f64, medium: &Medium, x: &Vec3) -> Result<(CVec3, CVec3)> {
    if n < 1 || m.unsigned_abs() as usize > n {
        return Err(Error::invalid("n", "need n ≥ 1 and |m| ≤ n"));
    }
    let rp = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if !(rp > 0.0) {
        return Err(Error::invalid("x", "multipoles are evaluated away from the origin"));
    }
    let xh = [x[0] / rp, x[1] / rp, x[2] / rp];
    let p1 = vector_sph(VectorHarmonic { l: 1, n, m }, &xh)?;
    let p2 = vector_sph(VectorHarmonic { l: 2, n, m }, &xh)?;
    let yv = HarmonicTable::new(n, &xh, false).y[sh_index(n, m)];
    let rs = RadialSet::new(n, k * rp);
    let ext = matches!(kind, MultipoleKind::TeExt | MultipoleKind::TmExt);
    let (b, cb) = if ext {
        (rs.h(n), rs.ch(n))
    } else {
        (C64::new(rs.j[n], 0.0), C64::new(rs.cj(n), 0.0))
    };
    let nn = (n * (n + 1)) as f64;
    let s = nn.sqrt();
    let f: CVec3 = p2.map(|v| -s * b * v);
    let cf: CVec3 = std::array::from_fn(|c| s / rp * cb * p1[c] + nn / rp * b * yv * xh[c]);
    let i = C64::new(0.0, 1.0);
    Ok(match kind {
        MultipoleKind::TeExt | MultipoleKind::TeInt => {
            let a = -i / (medium.mu * medium.omega);
            (f, cf.map(|v| a * v))
        }
        MultipoleKind::TmExt | MultipoleKind::TmInt => {
            let a = i / (medium.eps * medium.omega);
            (cf.map(|v| a * v), f)
        }
    })
}

/// Central-difference curl of a complex vector field.
pub fn curl_fd<F: Fn(&Vec3) -> CVec3>(f: F, x: &Vec3, h: f64) -> CVec3 {
    let d = |a: usize, b: usize| -> C64 {
        // ∂_a F_b
        let mut xp = *x;
        let mut xm = *x;
        xp[a] += h;
        xm[a] -= h;
        (f(&xp)[b] - f(&xm)[b]) / (2.0 * h)
    };
    [d(1, 2) - d(2, 1), d(2, 0) - d(0, 2), d(0, 1) - d(1, 0)]
}

/// One exact-formula oracle: a density family, potential and side of the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub l: u8,
    pub op: SphereOp,
    pub exterior: bool,
    /// Largest relative discrepancy over all `(n, m)` with `n ≤ n_max`.
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the eight closed-form sphere potentials with direct quadrature on `grid`
/// (a sphere) at `|x| = r/2` and `|x| = 2r`, for all modes with `n ≤ n_max`.
pub fn oracle_suite(grid: &SurfaceGrid, n_max: usize, k: f64, tol: f64) -> Result<Vec<OracleRow>> {
    let r = grid
        .sphere_radius()
        .ok_or_else(|| Error::invalid("surface", "the oracle suite needs a sphere"))?;
    if n_max < 1 {
        return Err(Error::invalid("n_max", "must be at least 1"));
    }
    if !(k > 0.0) {
        return Err(Error::invalid("k", "must be positive"));
    }
    let dirs: [Vec3; 3] = [[0.36, 0.48, 0.8], [-0.6, 0.0, -0.8], [0.0, -0.28, 0.96]];
    let mut rows = Vec::new();
    for l in [1u8, 2] {
        for op in [SphereOp::CurlS, SphereOp::CurlCurlS] {
            for exterior in [false, true] {
                let rad = if exterior { 2.0 * r } else { 0.5 * r };
                let which = match op {
                    SphereOp::CurlS => PotentialKind::CurlSVec,
                    SphereOp::CurlCurlS => PotentialKind::CurlCurlSVec,
                };
                let mut worst: f64 = 0.0;
                for n in 1..=n_max {
                    for m in -(n as i64)..=(n as i64) {
                        let mode = SphereMode::new(l, n, m, r)?;
                        let dens = mode.density(n_max)?;
                        let (mut num, mut den) = (0.0, 0.0);
                        for d in &dirs {
                            let x = d.map(|c| c * rad);
                            let exact = exact_sphere_potential(mode, k, &x, op)?;
                            let quad = match offboundary_eval(Density::Tangent(&dens), C64::new(k, 0.0), &x, which, grid)? {
                                FieldValue::Vector(v) => v,
                                FieldValue::Scalar(_) => unreachable!("vector potential requested"),
                            };
                            num += (0..3).map(|c| (exact[c] - quad[c]).norm_sqr()).sum::<f64>();
                            den += (0..3).map(|c| exact[c].norm_sqr()).sum::<f64>();
                        }
                        worst = worst.max((num / den).sqrt());
                    }
                }
                rows.push(OracleRow {
                    l,
                    op,
                    exterior,
                    max_rel_err: worst,
                    pass: worst <= tol,
                });
            }
        }
    }
    Ok(rows)
}
