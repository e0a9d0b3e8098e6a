//! Scalar and vector spherical harmonics, spherical Bessel/Hankel functions
//! and Gauss–Legendre rules.
//!
//! Harmonics are complex and orthonormal on the unit sphere with the
//! Condon–Shortley phase, `Y_n^{-m} = (-1)^m conj(Y_n^m)`. Coefficient vectors
//! are stored in `(n, m)` lexicographic order, see [`sh_index`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Vec3 = [f64; 3];
pub type CVec3 = [C64; 3];

/// Position of `(n, m)` in a lexicographically ordered coefficient vector.
#[inline]
pub fn sh_index(n: usize, m: i64) -> usize {
    ((n * n + n) as i64 + m) as usize
}

/// Inverse of [`sh_index`].
pub fn sh_degree_order(idx: usize) -> (usize, i64) {
    let n = (idx as f64).sqrt().floor() as usize;
    let n = if (n + 1) * (n + 1) <= idx { n + 1 } else { n };
    (n, idx as i64 - (n * n + n) as i64)
}

/// Number of coefficients up to and including degree `l`.
#[inline]
pub fn sh_len(l: usize) -> usize {
    (l + 1) * (l + 1)
}

#[inline]
fn tri(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

/// Fully normalized associated Legendre functions `P̄_n^m(cos θ)` for `0 ≤ m ≤ n ≤ lmax`,
/// including the `1/√(4π)` factor and Condon–Shortley phase, together with their
/// θ-derivatives and the quotients `P̄_n^m / sin θ` (regular for m ≥ 1).
#[derive(Debug, Clone)]
pub struct Legendre {
    pub lmax: usize,
    pub p: Vec<f64>,
    pub dp: Vec<f64>,
    pub d2p: Vec<f64>,
    pub p_over_sin: Vec<f64>,
}

impl Legendre {
    pub fn new(lmax: usize, cos_t: f64, sin_t: f64) -> Self {
        let len = tri(lmax + 1, 0);
        let mut p = vec![0.0; len];
        // Sectoral seeds and the three-term recurrence in n for each order m.
        let mut pmm = 1.0 / (4.0 * PI).sqrt();
        for m in 0..=lmax {
            if m > 0 {
                pmm *= -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * sin_t;
            }
            p[tri(m, m)] = pmm;
            if m < lmax {
                p[tri(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * cos_t * pmm;
            }
            for n in (m + 2)..=lmax {
                let nf = n as f64;
                let mf = m as f64;
                let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
                let b = (((nf - 1.0) * (nf - 1.0) - mf * mf) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0)).sqrt();
                p[tri(n, m)] = a * (cos_t * p[tri(n - 1, m)] - b * p[tri(n - 2, m)]);
            }
        }
        // dP/dθ from the neighbouring orders (no division by sin θ).
        let mut dp = vec![0.0; len];
        for n in 1..=lmax {
            let nf = n as f64;
            for m in 0..=n {
                let mf = m as f64;
                let up = if m < n {
                    ((nf - mf) * (nf + mf + 1.0)).sqrt() * p[tri(n, m + 1)]
                } else {
                    0.0
                };
                let down = if m == 0 {
                    -(nf * (nf + 1.0)).sqrt() * p[tri(n, 1)]
                } else {
                    ((nf + mf) * (nf - mf + 1.0)).sqrt() * p[tri(n, m - 1)]
                };
                dp[tri(n, m)] = 0.5 * (up - down);
            }
        }
        // The same neighbour-order formula applied to dP/dθ gives d²P/dθ², pole-safe.
        let mut d2p = vec![0.0; len];
        for n in 1..=lmax {
            let nf = n as f64;
            for m in 0..=n {
                let mf = m as f64;
                let up = if m < n {
                    ((nf - mf) * (nf + mf + 1.0)).sqrt() * dp[tri(n, m + 1)]
                } else {
                    0.0
                };
                let down = if m == 0 {
                    -(nf * (nf + 1.0)).sqrt() * dp[tri(n, 1)]
                } else {
                    ((nf + mf) * (nf - mf + 1.0)).sqrt() * dp[tri(n, m - 1)]
                };
                d2p[tri(n, m)] = 0.5 * (up - down);
            }
        }
        let mut p_over_sin = vec![0.0; len];
        if sin_t.abs() > 1e-150 {
            for m in 1..=lmax {
                for n in m..=lmax {
                    p_over_sin[tri(n, m)] = p[tri(n, m)] / sin_t;
                }
            }
        } else {
            // Pole limit: only m = 1 survives; P̄/sin θ → ±dP̄/dθ.
            let sgn = if cos_t > 0.0 { 1.0 } else { -1.0 };
            for n in 1..=lmax {
                p_over_sin[tri(n, 1)] = sgn * dp[tri(n, 1)];
            }
        }
        Legendre {
            lmax,
            p,
            dp,
            d2p,
            p_over_sin,
        }
    }

    #[inline]
    pub fn p(&self, n: usize, m: usize) -> f64 {
        self.p[tri(n, m)]
    }
    #[inline]
    pub fn dp(&self, n: usize, m: usize) -> f64 {
        self.dp[tri(n, m)]
    }
    #[inline]
    pub fn d2p(&self, n: usize, m: usize) -> f64 {
        self.d2p[tri(n, m)]
    }
    #[inline]
    pub fn p_over_sin(&self, n: usize, m: usize) -> f64 {
        self.p_over_sin[tri(n, m)]
    }
}

/// Polar angles of a (not necessarily normalized) direction: `(cos θ, sin θ, φ)`.
pub fn polar_angles(d: &Vec3) -> (f64, f64, f64) {
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let rho = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let cos_t = d[2] / r;
    let sin_t = rho / r;
    let phi = if rho > 0.0 { d[1].atan2(d[0]) } else { 0.0 };
    (cos_t, sin_t, phi)
}

/// Local spherical frame `(r̂, e_θ, e_φ)` at polar angles.
pub fn spherical_frame(cos_t: f64, sin_t: f64, phi: f64) -> (Vec3, Vec3, Vec3) {
    let (sp, cp) = phi.sin_cos();
    (
        [sin_t * cp, sin_t * sp, cos_t],
        [cos_t * cp, cos_t * sp, -sin_t],
        [-sp, cp, 0.0],
    )
}

/// All harmonics up to degree `l` (and their surface gradients on the unit sphere)
/// evaluated at one direction.
#[derive(Debug, Clone)]
pub struct HarmonicTable {
    pub l: usize,
    /// `Y_n^m` in lexicographic order.
    pub y: Vec<C64>,
    /// `∇_S Y_n^m` (tangential on the unit sphere), same order.
    pub grad: Vec<CVec3>,
}

impl HarmonicTable {
    pub fn new(l: usize, dir: &Vec3, with_grad: bool) -> Self {
        let (ct, st, phi) = polar_angles(dir);
        let leg = Legendre::new(l, ct, st);
        let (_, et, ep) = spherical_frame(ct, st, phi);
        let mut y = vec![C64::new(0.0, 0.0); sh_len(l)];
        let mut grad = if with_grad {
            vec![[C64::new(0.0, 0.0); 3]; sh_len(l)]
        } else {
            Vec::new()
        };
        let eim: Vec<C64> = (0..=l).map(|m| C64::from_polar(1.0, m as f64 * phi)).collect();
        for n in 0..=l {
            for m in 0..=n {
                let e = eim[m];
                let pv = leg.p(n, m);
                let ypos = e * pv;
                let sgn = if m % 2 == 0 { 1.0 } else { -1.0 };
                y[sh_index(n, m as i64)] = ypos;
                if m > 0 {
                    y[sh_index(n, -(m as i64))] = ypos.conj() * sgn;
                }
                if with_grad {
                    let dth = e * leg.dp(n, m);
                    let dph = e * C64::new(0.0, m as f64) * leg.p_over_sin(n, m);
                    let g: CVec3 = std::array::from_fn(|k| dth * et[k] + dph * ep[k]);
                    grad[sh_index(n, m as i64)] = g;
                    if m > 0 {
                        grad[sh_index(n, -(m as i64))] = std::array::from_fn(|k| g[k].conj() * sgn);
                    }
                }
            }
        }
        HarmonicTable { l, y, grad }
    }
}

/// Orthonormal spherical harmonic `Y_n^m` at a unit direction.
pub fn ynm(n: usize, m: i64, dir: &Vec3) -> Result<C64> {
    if m.unsigned_abs() as usize > n {
        return Err(Error::invalid("m", format!("|m| = {} exceeds n = {}", m.abs(), n)));
    }
    let t = HarmonicTable::new(n, dir, false);
    Ok(t.y[sh_index(n, m)])
}

/// Index of a vector spherical harmonic: `l = 1` gradient type, `l = 2` rotated type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorHarmonic {
    pub l: u8,
    pub n: usize,
    pub m: i64,
}

/// `φ_{1,n}^m = ∇_S Y_n^m / √(n(n+1))` and `φ_{2,n}^m = x̂ × φ_{1,n}^m` at a unit direction.
pub fn vector_sph(h: VectorHarmonic, dir: &Vec3) -> Result<CVec3> {
    if h.n == 0 {
        return Err(Error::invalid("n", "vector harmonics need n >= 1"));
    }
    if h.m.unsigned_abs() as usize > h.n {
        return Err(Error::invalid("m", "|m| exceeds n"));
    }
    if h.l != 1 && h.l != 2 {
        return Err(Error::invalid("l", "must be 1 or 2"));
    }
    let t = HarmonicTable::new(h.n, dir, true);
    let g = t.grad[sh_index(h.n, h.m)];
    let s = 1.0 / ((h.n * (h.n + 1)) as f64).sqrt();
    let phi1: CVec3 = std::array::from_fn(|k| g[k] * s);
    if h.l == 1 {
        return Ok(phi1);
    }
    let r = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let xh = [dir[0] / r, dir[1] / r, dir[2] / r];
    Ok(cross_rc(&xh, &phi1))
}

/// Real × complex cross product.
#[inline]
pub fn cross_rc(a: &Vec3, b: &CVec3) -> CVec3 {
    [
        b[2] * a[1] - b[1] * a[2],
        b[0] * a[2] - b[2] * a[0],
        b[1] * a[0] - b[0] * a[1],
    ]
}

/// Complex × complex cross product.
#[inline]
pub fn cross_cc(a: &CVec3, b: &CVec3) -> CVec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn dot_rc(a: &Vec3, b: &CVec3) -> C64 {
    b[0] * a[0] + b[1] * a[1] + b[2] * a[2]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean norm of a complex 3-vector.
#[inline]
pub fn cnorm3(a: &CVec3) -> f64 {
    (a[0].norm_sqr() + a[1].norm_sqr() + a[2].norm_sqr()).sqrt()
}

/// Gauss–Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

// ---------------------------------------------------------------------------
// Radial functions
// ---------------------------------------------------------------------------

/// Which radial function to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadialTag {
    BesselJ,
    Hankel1,
    CompositeJ,
    CompositeH,
}

/// A radial function together with its order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadialKind {
    pub tag: RadialTag,
    pub n: usize,
}

/// Spherical Bessel `j_0..=j_nmax` at `z > 0` by backward continued fraction for the
/// ratios `j_n / j_{n-1}`, anchored at the closed form of `j_0`.
pub fn sph_bessel_j(nmax: usize, z: f64) -> Vec<f64> {
    let mut j = vec![0.0; nmax + 1];
    let (s, c) = z.sin_cos();
    if z < 1e-3 {
        // Short power series is more accurate than the closed forms here.
        for (n, jn) in j.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut dfact = 1.0;
            for k in 0..n {
                term *= z;
                dfact *= (2 * k + 3) as f64;
            }
            let lead = term / dfact;
            let z2 = z * z;
            let n2 = 2.0 * n as f64;
            *jn = lead * (1.0 - z2 / (2.0 * (n2 + 3.0)) + z2 * z2 / (8.0 * (n2 + 3.0) * (n2 + 5.0)));
        }
        return j;
    }
    j[0] = s / z;
    if nmax == 0 {
        return j;
    }
    let start = nmax.max(z.ceil() as usize) + 30 + (4.0 * (nmax.max(z as usize) as f64).sqrt()) as usize;
    let mut ratio = vec![0.0; start + 2];
    for n in (1..=start).rev() {
        ratio[n] = z / ((2 * n + 1) as f64 - z * ratio[n + 1]);
    }
    // When j_0 is tiny (z near a zero of sin) anchor on j_1 instead.
    if j[0].abs() > 0.1 {
        for n in 1..=nmax {
            j[n] = j[n - 1] * ratio[n];
        }
    } else {
        j[1] = s / (z * z) - c / z;
        for n in 2..=nmax {
            j[n] = j[n - 1] * ratio[n];
        }
    }
    j
}

/// Spherical Bessel of the second kind `y_0..=y_nmax` by upward recurrence.
pub fn sph_bessel_y(nmax: usize, z: f64) -> Vec<f64> {
    let mut y = vec![0.0; nmax + 1];
    let (s, c) = z.sin_cos();
    y[0] = -c / z;
    if nmax >= 1 {
        y[1] = -c / (z * z) - s / z;
    }
    for n in 1..nmax {
        y[n + 1] = (2 * n + 1) as f64 / z * y[n] - y[n - 1];
    }
    y
}

/// Values and z-derivatives of `j_n`, `y_n`, `h_n^{(1)}` for all orders up to `nmax`.
#[derive(Debug, Clone)]
pub struct RadialSet {
    pub z: f64,
    pub j: Vec<f64>,
    pub y: Vec<f64>,
    pub dj: Vec<f64>,
    pub dy: Vec<f64>,
}

impl RadialSet {
    pub fn new(nmax: usize, z: f64) -> Self {
        let j = sph_bessel_j(nmax + 1, z);
        let y = sph_bessel_y(nmax + 1, z);
        let deriv = |f: &Vec<f64>| -> Vec<f64> {
            (0..=nmax)
                .map(|n| {
                    if n == 0 {
                        -f[1]
                    } else {
                        f[n - 1] - (n + 1) as f64 / z * f[n]
                    }
                })
                .collect()
        };
        let dj = deriv(&j);
        let dy = deriv(&y);
        RadialSet { z, j, y, dj, dy }
    }
    #[inline]
    pub fn h(&self, n: usize) -> C64 {
        C64::new(self.j[n], self.y[n])
    }
    #[inline]
    pub fn dh(&self, n: usize) -> C64 {
        C64::new(self.dj[n], self.dy[n])
    }
    /// `𝓙_n(z) = j_n(z) + z j_n'(z)`.
    #[inline]
    pub fn cj(&self, n: usize) -> f64 {
        self.j[n] + self.z * self.dj[n]
    }
    /// `𝓗_n(z) = h_n(z) + z h_n'(z)`.
    #[inline]
    pub fn ch(&self, n: usize) -> C64 {
        self.h(n) + self.dh(n) * self.z
    }
}

/// Evaluate a radial function at `z > 0`.
pub fn radial(kind: RadialKind, z: f64) -> Result<C64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::invalid("z", "radial functions need a positive finite argument"));
    }
    let rs = RadialSet::new(kind.n, z);
    Ok(match kind.tag {
        RadialTag::BesselJ => C64::new(rs.j[kind.n], 0.0),
        RadialTag::Hankel1 => rs.h(kind.n),
        RadialTag::CompositeJ => C64::new(rs.cj(kind.n), 0.0),
        RadialTag::CompositeH => rs.ch(kind.n),
    })
}

/// `ln((2k+1)!!)`, summed in the log domain so large orders never overflow.
pub fn ln_double_factorial_odd(k: i64) -> f64 {
    // (2k+1)!! = 1·3·…·(2k+1); (−1)!! = 1.
    (0..=k).map(|i| ((2 * i + 1) as f64).ln()).sum()
}

/// Ratio of the exact radial function to its leading large-order term
/// (`z^n/(2n+1)!!`, `(2n−1)!!/(i z^{n+1})`, `(n+1)z^n/(2n+1)!!`, `−n(2n−1)!!/(i z^{n+1})`).
/// Returns the real part of the (nearly real) ratio.
pub fn radial_asymptotic_ratio(tag: RadialTag, z: f64, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("n", "asymptotic ratio needs n >= 1"));
    }
    let exact = radial(RadialKind { tag, n }, z)?;
    let nf = n as f64;
    let lz = z.ln();
    let i = C64::new(0.0, 1.0);
    let lead: C64 = match tag {
        RadialTag::BesselJ => C64::new((nf * lz - ln_double_factorial_odd(n as i64)).exp(), 0.0),
        RadialTag::CompositeJ => C64::new(((nf + 1.0).ln() + nf * lz - ln_double_factorial_odd(n as i64)).exp(), 0.0),
        RadialTag::Hankel1 => C64::new((ln_double_factorial_odd(n as i64 - 1) - (nf + 1.0) * lz).exp(), 0.0) / i,
        RadialTag::CompositeH => -C64::new((nf.ln() + ln_double_factorial_odd(n as i64 - 1) - (nf + 1.0) * lz).exp(), 0.0) / i,
    };
    Ok((exact / lead).re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(th: f64, ph: f64) -> Vec3 {
        [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]
    }

    #[test]
    fn index_roundtrip() {
        for idx in 0..400 {
            let (n, m) = sh_degree_order(idx);
            assert_eq!(sh_index(n, m), idx);
        }
    }

    #[test]
    fn low_order_closed_forms() {
        let d = dir(0.7, 1.3);
        let y00 = ynm(0, 0, &d).unwrap();
        assert!((y00.re - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-15);
        let y10 = ynm(1, 0, &[0.0, 0.0, 1.0]).unwrap();
        assert!((y10.re - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
        // Y_1^1 = −√(3/8π) sin θ e^{iφ}
        let y11 = ynm(1, 1, &d).unwrap();
        let want = C64::from_polar(-(3.0 / (8.0 * PI)).sqrt() * 0.7f64.sin(), 1.3);
        assert!((y11 - want).norm() < 1e-14);
        // Y_2^2 = ¼√(15/2π) sin²θ e^{2iφ}
        let y22 = ynm(2, 2, &d).unwrap();
        let want = C64::from_polar(0.25 * (15.0 / (2.0 * PI)).sqrt() * 0.7f64.sin().powi(2), 2.6);
        assert!((y22 - want).norm() < 1e-14);
        assert!(ynm(2, 3, &d).is_err());
    }

    #[test]
    fn conjugate_symmetry() {
        let d = dir(2.1, -0.4);
        for n in 0..8 {
            for m in 1..=n as i64 {
                let a = ynm(n, -m, &d).unwrap();
                let b = ynm(n, m, &d).unwrap().conj() * if m % 2 == 0 { 1.0 } else { -1.0 };
                assert!((a - b).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn theta_derivative_matches_finite_difference() {
        let h = 1e-6;
        for &th in &[0.3f64, 1.1, 2.9] {
            let leg = Legendre::new(12, th.cos(), th.sin());
            let lp = Legendre::new(12, (th + h).cos(), (th + h).sin());
            let lm = Legendre::new(12, (th - h).cos(), (th - h).sin());
            for n in 0..=12 {
                for m in 0..=n {
                    let fd = (lp.p(n, m) - lm.p(n, m)) / (2.0 * h);
                    assert!((fd - leg.dp(n, m)).abs() < 1e-7 * (1.0 + fd.abs()), "n={n} m={m}");
                    let fd2 = (lp.dp(n, m) - lm.dp(n, m)) / (2.0 * h);
                    assert!((fd2 - leg.d2p(n, m)).abs() < 1e-6 * (1.0 + fd2.abs()), "n={n} m={m}");
                }
            }
        }
    }

    #[test]
    fn gradient_at_pole_is_finite_and_tangential() {
        for n in 1..6 {
            for m in -(n as i64)..=n as i64 {
                let g = vector_sph(VectorHarmonic { l: 1, n, m }, &[0.0, 0.0, 1.0]).unwrap();
                assert!(g.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
                assert!(g[2].norm() < 1e-14);
                // Continuity: compare against a point 1e-7 away from the pole.
                let near = vector_sph(VectorHarmonic { l: 1, n, m }, &dir(1e-7, 0.0)).unwrap();
                for k in 0..3 {
                    assert!((near[k] - g[k]).norm() < 1e-5, "n={n} m={m}");
                }
            }
        }
    }

    #[test]
    fn high_degree_values_are_finite() {
        let t = HarmonicTable::new(60, &dir(0.01, 0.2), true);
        assert!(t.y.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        assert!(t.grad.iter().flatten().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(12);
        for k in 0..24 {
            let s: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((s - exact).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn bessel_closed_forms() {
        let z = 1.0f64;
        let j0 = radial(RadialKind { tag: RadialTag::BesselJ, n: 0 }, z).unwrap();
        assert!((j0.re - 0.8414709848078965).abs() < 1e-15);
        let cj0 = radial(RadialKind { tag: RadialTag::CompositeJ, n: 0 }, z).unwrap();
        assert!((cj0.re - 0.5403023058681398).abs() < 1e-15);
        let h0 = radial(RadialKind { tag: RadialTag::Hankel1, n: 0 }, 2.0).unwrap();
        let want = C64::from_polar(1.0, 2.0) / C64::new(0.0, 2.0);
        assert!((h0 - want).norm() < 1e-15);
        // j_2(z) = (3/z³ − 1/z) sin z − 3 cos z / z²
        for &z in &[0.5, 3.0, 17.0] {
            let js = sph_bessel_j(2, z);
            let want = (3.0 / z.powi(3) - 1.0 / z) * z.sin() - 3.0 * z.cos() / (z * z);
            assert!((js[2] - want).abs() < 1e-12 * want.abs().max(1e-3), "z={z}");
        }
        // Small argument: the closed form cancels catastrophically, compare with the series.
        let z = 0.05f64;
        let series = z * z / 15.0 * (1.0 - z * z / 14.0 + z.powi(4) / 504.0);
        assert!((sph_bessel_j(2, z)[2] - series).abs() < 1e-11 * series);
        assert!(radial(RadialKind { tag: RadialTag::BesselJ, n: 0 }, 0.0).is_err());
    }

    #[test]
    fn wronskian_and_recurrence() {
        for &z in &[0.1, 0.7, 2.5, 9.0, 20.0] {
            let rs = RadialSet::new(40, z);
            for n in 0..=40 {
                let w = rs.j[n] * rs.dy[n] - rs.dj[n] * rs.y[n];
                assert!(((w - 1.0 / (z * z)) * z * z).abs() < 1e-12, "z={z} n={n}");
            }
            for n in 1..40 {
                for f in [&rs.j, &rs.y] {
                    let lhs = f[n - 1] + f[n + 1];
                    let rhs = (2 * n + 1) as f64 * f[n] / z;
                    assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(lhs.abs()).max(1e-300));
                }
            }
        }
    }

    #[test]
    fn asymptotic_ratios() {
        let r = radial_asymptotic_ratio(RadialTag::BesselJ, 1.0, 20).unwrap();
        assert!((0.97..=1.03).contains(&r));
        let r = radial_asymptotic_ratio(RadialTag::Hankel1, 1.0, 20).unwrap();
        assert!((0.97..=1.03).contains(&r));
        let r = radial_asymptotic_ratio(RadialTag::CompositeH, 1.0, 20).unwrap();
        assert!((0.97..=1.03).contains(&r));
        let seq: Vec<f64> = (10..=40)
            .map(|n| (radial_asymptotic_ratio(RadialTag::CompositeJ, 0.5, n).unwrap() - 1.0).abs())
            .collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
        assert!(seq.last().unwrap() < &5e-3);
    }
}
