//! Star-shaped surfaces `∂D = {ρ(x̂) x̂}` on a Gauss–Legendre × uniform-azimuth grid,
//! spherical-harmonic transforms and surface differential operators.
//!
//! Node `i = t·N_φ + p` sits at polar angle `θ_t` (Gauss–Legendre in `cos θ`) and azimuth
//! `φ_p = 2πp/N_φ`. All harmonic coefficients refer to the *parameter sphere*: a surface
//! function `u` is expanded as `u(ρ(x̂)x̂) = Σ a_nm Y_n^m(x̂)`.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::specfun::{
    cnorm3, dot, gauss_legendre, norm3, sh_index, sh_len, spherical_frame, CVec3, HarmonicTable, Legendre,
    Vec3, C64,
};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

// ---------------------------------------------------------------------------
// Coefficient vectors and tangent fields
// ---------------------------------------------------------------------------

/// Truncated harmonic coefficients `a_{n,m}`, `0 ≤ n ≤ l`, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoeffs {
    pub l: usize,
    pub coeffs: Vec<C64>,
    /// When set, `a_{0,0}` is held at zero.
    pub mean_free: bool,
}

impl ShCoeffs {
    pub fn zeros(l: usize) -> Self {
        ShCoeffs {
            l,
            coeffs: vec![ZERO; sh_len(l)],
            mean_free: false,
        }
    }

    pub fn from_vec(l: usize, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != sh_len(l) {
            return Err(Error::invalid(
                "coeffs",
                format!("expected {} coefficients for L = {l}, got {}", sh_len(l), coeffs.len()),
            ));
        }
        Ok(ShCoeffs {
            l,
            coeffs,
            mean_free: false,
        })
    }

    /// The coefficient vector of a single harmonic `Y_n^m`.
    pub fn unit(l: usize, n: usize, m: i64) -> Self {
        let mut c = Self::zeros(l);
        c.coeffs[sh_index(n, m)] = C64::new(1.0, 0.0);
        c
    }

    /// Build from `[n, m, re, im]` rows; degrees above `l` are rejected.
    pub fn from_triples(l: usize, rows: &[[f64; 4]]) -> Result<Self> {
        let mut c = Self::zeros(l);
        for (k, r) in rows.iter().enumerate() {
            let (n, m) = (r[0], r[1]);
            if n < 0.0 || n.fract() != 0.0 || m.fract() != 0.0 || m.abs() > n {
                return Err(Error::invalid(format!("radius[{k}]"), "need integers 0 <= |m| <= n"));
            }
            let n = n as usize;
            if n > l {
                return Err(Error::invalid(format!("radius[{k}]"), format!("degree {n} exceeds {l}")));
            }
            c.coeffs[sh_index(n, m as i64)] += C64::new(r[2], r[3]);
        }
        Ok(c)
    }

    /// Nonzero coefficients as `[n, m, re, im]` rows.
    pub fn to_triples(&self) -> Vec<[f64; 4]> {
        let mut out = Vec::new();
        for n in 0..=self.l {
            for m in -(n as i64)..=n as i64 {
                let v = self.coeffs[sh_index(n, m)];
                if v != ZERO {
                    out.push([n as f64, m as f64, v.re, v.im]);
                }
            }
        }
        out
    }

    /// Random coefficients with `|a_nm| ≲ (1+n)^{-decay}`; `a_00 = 0` when `mean_free`.
    pub fn random<R: Rng>(l: usize, rng: &mut R, decay: f64, mean_free: bool) -> Self {
        let mut c = Self::zeros(l);
        for n in 0..=l {
            let s = (1.0 + n as f64).powf(-decay);
            for m in -(n as i64)..=n as i64 {
                c.coeffs[sh_index(n, m)] = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * s;
            }
        }
        if mean_free {
            c = c.into_mean_free();
        }
        c
    }

    #[inline]
    pub fn get(&self, n: usize, m: i64) -> C64 {
        self.coeffs[sh_index(n, m)]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn into_mean_free(mut self) -> Self {
        self.coeffs[0] = ZERO;
        self.mean_free = true;
        self
    }

    /// Truncate or zero-pad to degree `l`.
    pub fn resized(&self, l: usize) -> Self {
        let mut c = Self::zeros(l);
        let k = sh_len(l.min(self.l));
        c.coeffs[..k].copy_from_slice(&self.coeffs[..k]);
        c.mean_free = self.mean_free;
        c
    }

    pub fn scaled(&self, s: C64) -> Self {
        ShCoeffs {
            l: self.l,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
            mean_free: self.mean_free,
        }
    }

    /// Euclidean norm of the coefficient vector (the L² norm on the parameter sphere).
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest degree carrying a nonzero coefficient.
    pub fn effective_degree(&self) -> usize {
        (0..self.len())
            .rev()
            .find(|&i| self.coeffs[i] != ZERO)
            .map(|i| crate::specfun::sh_degree_order(i).0)
            .unwrap_or(0)
    }

    pub fn as_dvector(&self) -> nalgebra::DVector<C64> {
        nalgebra::DVector::from_column_slice(&self.coeffs)
    }
}

/// Which trace space a tangent field is regarded as a member of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// `H^{-1/2}_t(div)`: the norm controls the surface divergence.
    Div,
    /// `H^{-1/2}_t(curl)`: the norm controls the surface curl.
    Curl,
}

/// A tangential field `∇_Γ X + curl⃗_Γ V` stored through its two mean-free potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentField {
    pub x: ShCoeffs,
    pub v: ShCoeffs,
    pub flavor: Flavor,
}

impl TangentField {
    pub fn new(x: ShCoeffs, v: ShCoeffs, flavor: Flavor) -> Result<Self> {
        if x.l != v.l {
            return Err(Error::invalid("v", "gradient and curl potentials need the same degree"));
        }
        Ok(TangentField {
            x: x.into_mean_free(),
            v: v.into_mean_free(),
            flavor,
        })
    }

    pub fn zeros(l: usize, flavor: Flavor) -> Self {
        TangentField {
            x: ShCoeffs::zeros(l).into_mean_free(),
            v: ShCoeffs::zeros(l).into_mean_free(),
            flavor,
        }
    }

    /// `∇_Γ X`, regarded in the div-trace space.
    pub fn gradient(x: ShCoeffs) -> Self {
        let l = x.l;
        TangentField {
            x: x.into_mean_free(),
            v: ShCoeffs::zeros(l).into_mean_free(),
            flavor: Flavor::Div,
        }
    }

    /// `curl⃗_Γ V`, regarded in the curl-trace space.
    pub fn curl(v: ShCoeffs) -> Self {
        let l = v.l;
        TangentField {
            x: ShCoeffs::zeros(l).into_mean_free(),
            v: v.into_mean_free(),
            flavor: Flavor::Curl,
        }
    }

    pub fn l(&self) -> usize {
        self.x.l
    }

    pub fn with_flavor(mut self, flavor: Flavor) -> Self {
        self.flavor = flavor;
        self
    }
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// JSON description of a surface: `{ "radius": [[n, m, re, im], ...], "L_quad": int }`.
///
/// The radial function is `ρ(x̂) = Re Σ a_nm Y_n^m(x̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub radius: Vec<[f64; 4]>,
    #[serde(rename = "L_quad")]
    pub l_quad: usize,
}

impl SurfaceSpec {
    /// Sphere of radius `r`.
    pub fn sphere(r: f64, l_quad: usize) -> Self {
        SurfaceSpec {
            radius: vec![[0.0, 0.0, r * (4.0 * PI).sqrt(), 0.0]],
            l_quad,
        }
    }

    /// `ρ = 1 + eps · Re Y_n^m`.
    pub fn perturbed_sphere(eps: f64, n: usize, m: i64, l_quad: usize) -> Self {
        SurfaceSpec {
            radius: vec![[0.0, 0.0, (4.0 * PI).sqrt(), 0.0], [n as f64, m as f64, eps, 0.0]],
            l_quad,
        }
    }

    pub fn build(&self) -> Result<SurfaceGrid> {
        let l_geo = self.radius.iter().map(|r| r[0].max(0.0) as usize).max().unwrap_or(0);
        if l_geo > self.l_quad {
            return Err(Error::Resolution {
                requested: l_geo,
                available: self.l_quad,
            });
        }
        let c = ShCoeffs::from_triples(l_geo, &self.radius)?;
        build_surface(&c, self.l_quad)
    }
}

/// Differential geometry of the surface at one point.
#[derive(Debug, Clone, Copy)]
pub struct PointGeometry {
    pub dir: Vec3,
    pub rho: f64,
    /// `∇_S ρ` on the unit sphere.
    pub grad_rho: Vec3,
    pub position: Vec3,
    pub normal: Vec3,
    /// Area element ratio `dS / dS_{unit sphere}`.
    pub jac: f64,
}

/// Parametric derivatives at a node, used by the metric form of the Laplace–Beltrami operator.
#[derive(Debug, Clone, Copy)]
struct NodeFrame {
    x_t: Vec3,
    x_p: Vec3,
    x_tt: Vec3,
    x_tp: Vec3,
    x_pp: Vec3,
    /// Inverse metric `(g^θθ, g^θφ, g^φφ)`.
    ginv: [f64; 3],
}

/// A discretized closed star-shaped surface.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub radius_coeffs: ShCoeffs,
    pub l_geo: usize,
    pub l_quad: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub theta: Vec<f64>,
    pub cos_t: Vec<f64>,
    pub sin_t: Vec<f64>,
    pub gl_weights: Vec<f64>,
    pub phi: Vec<f64>,
    pub dirs: Vec<Vec3>,
    pub rho: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Quadrature weight × Jacobian: `Σ w_i f(x_i) ≈ ∫_∂D f ds`.
    pub area_weights: Vec<f64>,
    /// Parameter-sphere weights: `Σ ω_i f(x̂_i) ≈ ∫_S f`.
    pub sphere_weights: Vec<f64>,
    pub jac: Vec<f64>,
    /// First fundamental form `(E, F, G)` in `(θ, φ)`.
    pub metric: Vec<[f64; 3]>,
    frames: Vec<NodeFrame>,
    legendre: Vec<Legendre>,
    /// Content hash of the surface specification.
    pub id: u64,
}

/// Build a grid for `ρ = Re Σ a_nm Y_n^m` resolving harmonics up to degree `l_quad`.
///
/// The product grid has `(2 l_quad + 2)` Gauss–Legendre rings and as many azimuths.
pub fn build_surface(radius: &ShCoeffs, l_quad: usize) -> Result<SurfaceGrid> {
    let l_geo = radius.effective_degree();
    if l_quad < l_geo {
        return Err(Error::Resolution {
            requested: l_geo,
            available: l_quad,
        });
    }
    if l_quad == 0 {
        return Err(Error::invalid("L_quad", "must be at least 1"));
    }
    let radius = radius.resized(l_geo);
    let n_theta = 2 * l_quad + 2;
    let n_phi = 2 * l_quad + 2;
    let (x, w) = gauss_legendre(n_theta);
    // Ascending θ: cos θ descending.
    let cos_t: Vec<f64> = x.iter().rev().copied().collect();
    let gl_weights: Vec<f64> = w.iter().rev().copied().collect();
    let sin_t: Vec<f64> = cos_t.iter().map(|c| (1.0 - c * c).max(0.0).sqrt()).collect();
    let theta: Vec<f64> = cos_t.iter().map(|c| c.acos()).collect();
    let dphi = 2.0 * PI / n_phi as f64;
    let phi: Vec<f64> = (0..n_phi).map(|p| p as f64 * dphi).collect();
    let legendre: Vec<Legendre> = (0..n_theta)
        .into_par_iter()
        .map(|t| Legendre::new(l_quad, cos_t[t], sin_t[t]))
        .collect();

    let mut grid = SurfaceGrid {
        radius_coeffs: radius.clone(),
        l_geo,
        l_quad,
        n_theta,
        n_phi,
        theta,
        cos_t,
        sin_t,
        gl_weights,
        phi,
        dirs: Vec::new(),
        rho: Vec::new(),
        positions: Vec::new(),
        normals: Vec::new(),
        area_weights: Vec::new(),
        sphere_weights: Vec::new(),
        jac: Vec::new(),
        metric: Vec::new(),
        frames: Vec::new(),
        legendre,
        id: 0,
    };

    let d = grid.derivatives(&radius);
    let n = n_theta * n_phi;
    let mut frames = Vec::with_capacity(n);
    for t in 0..n_theta {
        for p in 0..n_phi {
            let i = t * n_phi + p;
            let (ct, st, ph) = (grid.cos_t[t], grid.sin_t[t], grid.phi[p]);
            let (xh, et, ep) = spherical_frame(ct, st, ph);
            let r = d.u[i].re;
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::StarShapeViolation { node: i, rho: r });
            }
            let (rt, rp) = (d.u_t[i].re, d.u_p[i].re);
            let (rtt, rtp, rpp) = (d.u_tt[i].re, d.u_tp[i].re, d.u_pp[i].re);
            let grad_rho: Vec3 = std::array::from_fn(|k| d.grad_s[i][k].re);
            let position: Vec3 = std::array::from_fn(|k| r * xh[k]);
            let s = (r * r + dot(&grad_rho, &grad_rho)).sqrt();
            let normal: Vec3 = std::array::from_fn(|k| (r * xh[k] - grad_rho[k]) / s);
            let jac = r * s;
            let x_t: Vec3 = std::array::from_fn(|k| rt * xh[k] + r * et[k]);
            let x_p: Vec3 = std::array::from_fn(|k| rp * xh[k] + r * st * ep[k]);
            let x_tt: Vec3 = std::array::from_fn(|k| rtt * xh[k] + 2.0 * rt * et[k] - r * xh[k]);
            let x_tp: Vec3 = std::array::from_fn(|k| rtp * xh[k] + rt * st * ep[k] + rp * et[k] + r * ct * ep[k]);
            let x_pp: Vec3 =
                std::array::from_fn(|k| rpp * xh[k] + 2.0 * rp * st * ep[k] - r * st * (st * xh[k] + ct * et[k]));
            let (ge, gf, gg) = (dot(&x_t, &x_t), dot(&x_t, &x_p), dot(&x_p, &x_p));
            let det = ge * gg - gf * gf;
            frames.push(NodeFrame {
                x_t,
                x_p,
                x_tt,
                x_tp,
                x_pp,
                ginv: [gg / det, -gf / det, ge / det],
            });
            grid.dirs.push(xh);
            grid.rho.push(r);
            grid.positions.push(position);
            grid.normals.push(normal);
            grid.jac.push(jac);
            grid.metric.push([ge, gf, gg]);
            let ws = grid.gl_weights[t] * dphi;
            grid.sphere_weights.push(ws);
            grid.area_weights.push(ws * jac);
        }
    }
    grid.frames = frames;
    grid.id = surface_id(&radius, l_quad);
    Ok(grid)
}

fn surface_id(radius: &ShCoeffs, l_quad: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&radius.to_triples()).unwrap_or_default());
    h.update(l_quad.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(std::array::from_fn(|k| d[k]))
}

/// Node values of a coefficient vector and its parametric derivatives.
struct Derivatives {
    u: Vec<C64>,
    u_t: Vec<C64>,
    u_p: Vec<C64>,
    u_tt: Vec<C64>,
    u_tp: Vec<C64>,
    u_pp: Vec<C64>,
    /// `∇_S u` on the unit sphere (pole-safe).
    grad_s: Vec<CVec3>,
}

/// Surface differential operator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffKind {
    Grad,
    VecCurl,
    ScalCurl,
    Div,
    LaplaceBeltrami,
}

/// Input to [`SurfaceGrid::surface_diff`].
#[derive(Debug, Clone, Copy)]
pub enum DiffInput<'a> {
    Scalar(&'a ShCoeffs),
    Field(&'a TangentField),
}

/// Output of [`SurfaceGrid::surface_diff`].
#[derive(Debug, Clone)]
pub enum NodeData {
    Scalars(Vec<C64>),
    Vectors(Vec<CVec3>),
}

impl SurfaceGrid {
    pub fn sphere(r: f64, l_quad: usize) -> Result<Self> {
        SurfaceSpec::sphere(r, l_quad).build()
    }

    /// `ρ = 1 + eps · Re Y_n^m`.
    pub fn perturbed_sphere(eps: f64, n: usize, m: i64, l_quad: usize) -> Result<Self> {
        SurfaceSpec::perturbed_sphere(eps, n, m, l_quad).build()
    }

    pub fn spec(&self) -> SurfaceSpec {
        SurfaceSpec {
            radius: self.radius_coeffs.to_triples(),
            l_quad: self.l_quad,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_theta * self.n_phi
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when the radial function is a constant (the surface is a centred sphere).
    pub fn is_sphere(&self) -> bool {
        self.radius_coeffs.coeffs.iter().skip(1).all(|c| c.norm() == 0.0)
    }

    pub fn sphere_radius(&self) -> Option<f64> {
        self.is_sphere()
            .then(|| self.radius_coeffs.coeffs[0].re / (4.0 * PI).sqrt())
    }

    pub fn max_rho(&self) -> f64 {
        self.rho.iter().cloned().fold(0.0, f64::max)
    }

    pub fn legendre(&self, ring: usize) -> &Legendre {
        &self.legendre[ring]
    }

    fn check_degree(&self, l: usize) -> Result<()> {
        if l > self.l_quad {
            Err(Error::Resolution {
                requested: l,
                available: self.l_quad,
            })
        } else {
            Ok(())
        }
    }

    /// `ρ(x̂)` at an arbitrary direction.
    pub fn rho_at(&self, dir: &Vec3) -> f64 {
        let t = HarmonicTable::new(self.l_geo, dir, false);
        self.radius_coeffs
            .coeffs
            .iter()
            .zip(&t.y)
            .map(|(a, y)| (a * y).re)
            .sum()
    }

    /// Surface point, normal and Jacobian in an arbitrary direction.
    pub fn geometry_at(&self, dir: &Vec3) -> PointGeometry {
        let nd = norm3(dir);
        let xh = [dir[0] / nd, dir[1] / nd, dir[2] / nd];
        let t = HarmonicTable::new(self.l_geo, &xh, true);
        geometry_from_table(&self.radius_coeffs.coeffs, &t.y, &t.grad, xh)
    }

    /// Sum of weights times values: `∫_∂D f ds`.
    pub fn integrate(&self, values: &[C64]) -> C64 {
        values.iter().zip(&self.area_weights).map(|(v, w)| v * *w).sum()
    }

    pub fn total_area(&self) -> f64 {
        self.area_weights.iter().sum()
    }

    /// Largest distance between neighbouring nodes (azimuthal or polar), a resolution scale
    /// for the off-surface quadrature guard.
    pub fn max_node_spacing(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in 0..self.n_theta {
            for p in 0..self.n_phi {
                let i = t * self.n_phi + p;
                let j = t * self.n_phi + (p + 1) % self.n_phi;
                h = h.max(dist(&self.positions[i], &self.positions[j]));
                if t + 1 < self.n_theta {
                    let k = (t + 1) * self.n_phi + p;
                    h = h.max(dist(&self.positions[i], &self.positions[k]));
                }
            }
        }
        h
    }

    /// Node-sampled distance from `x` to the surface.
    pub fn tubular_distance(&self, x: &Vec3) -> f64 {
        self.positions.iter().map(|p| dist(p, x)).fold(f64::INFINITY, f64::min)
    }

    /// Harmonic analysis on the parameter sphere, exact for band-limited data of degree `≤ l`.
    pub fn sh_analysis(&self, values: &[C64], l: usize) -> Result<ShCoeffs> {
        self.check_degree(l)?;
        if values.len() != self.len() {
            return Err(Error::invalid("node_values", "length differs from the node count"));
        }
        let np = self.n_phi;
        let dphi = 2.0 * PI / np as f64;
        let mut out = ShCoeffs::zeros(l);
        // Azimuthal transform per ring, then the Legendre sum.
        let eim: Vec<C64> = (0..np).map(|p| C64::from_polar(1.0, -self.phi[p])).collect();
        for t in 0..self.n_theta {
            let row = &values[t * np..(t + 1) * np];
            let leg = &self.legendre[t];
            let w = self.gl_weights[t] * dphi;
            for m in -(l as i64)..=l as i64 {
                let mut g = ZERO;
                for (p, v) in row.iter().enumerate() {
                    g += v * pow_phase(&eim, p, m, np);
                }
                g *= w;
                let ma = m.unsigned_abs() as usize;
                let sgn = if m < 0 && ma % 2 == 1 { -1.0 } else { 1.0 };
                for n in ma..=l {
                    out.coeffs[sh_index(n, m)] += g * (sgn * leg.p(n, ma));
                }
            }
        }
        Ok(out)
    }

    pub fn sh_analysis_real(&self, values: &[f64], l: usize) -> Result<ShCoeffs> {
        let v: Vec<C64> = values.iter().map(|&x| C64::new(x, 0.0)).collect();
        self.sh_analysis(&v, l)
    }

    /// Node values of `Σ a_nm Y_n^m`.
    pub fn sh_synthesis(&self, c: &ShCoeffs) -> Result<Vec<C64>> {
        self.check_degree(c.l)?;
        Ok(self.derivatives_values_only(c))
    }

    fn derivatives_values_only(&self, c: &ShCoeffs) -> Vec<C64> {
        let l = c.l;
        let np = self.n_phi;
        let mut out = vec![ZERO; self.len()];
        for t in 0..self.n_theta {
            let leg = &self.legendre[t];
            let fm: Vec<C64> = (-(l as i64)..=l as i64)
                .map(|m| {
                    let ma = m.unsigned_abs() as usize;
                    let sgn = if m < 0 && ma % 2 == 1 { -1.0 } else { 1.0 };
                    (ma..=l).map(|n| c.coeffs[sh_index(n, m)] * (sgn * leg.p(n, ma))).sum()
                })
                .collect();
            for p in 0..np {
                let e = C64::from_polar(1.0, self.phi[p]);
                let mut acc = ZERO;
                let mut ph = C64::from_polar(1.0, -(l as f64) * self.phi[p]);
                for f in &fm {
                    acc += f * ph;
                    ph *= e;
                }
                out[t * np + p] = acc;
            }
        }
        out
    }

    fn derivatives(&self, c: &ShCoeffs) -> Derivatives {
        let l = c.l;
        let np = self.n_phi;
        let n = self.len();
        let mut d = Derivatives {
            u: vec![ZERO; n],
            u_t: vec![ZERO; n],
            u_p: vec![ZERO; n],
            u_tt: vec![ZERO; n],
            u_tp: vec![ZERO; n],
            u_pp: vec![ZERO; n],
            grad_s: vec![[ZERO; 3]; n],
        };
        let i_unit = C64::new(0.0, 1.0);
        for t in 0..self.n_theta {
            let leg = &self.legendre[t];
            // Fourier coefficients in φ of u, u_θ, u_θθ and u/sinθ.
            let mut fa = Vec::with_capacity(2 * l + 1);
            let mut fb = Vec::with_capacity(2 * l + 1);
            let mut fc = Vec::with_capacity(2 * l + 1);
            let mut fd = Vec::with_capacity(2 * l + 1);
            for m in -(l as i64)..=l as i64 {
                let ma = m.unsigned_abs() as usize;
                let sgn = if m < 0 && ma % 2 == 1 { -1.0 } else { 1.0 };
                let (mut a, mut b, mut cc, mut dd) = (ZERO, ZERO, ZERO, ZERO);
                for nn in ma..=l {
                    let k = c.coeffs[sh_index(nn, m)] * sgn;
                    a += k * leg.p(nn, ma);
                    b += k * leg.dp(nn, ma);
                    cc += k * leg.d2p(nn, ma);
                    dd += k * leg.p_over_sin(nn, ma);
                }
                fa.push(a);
                fb.push(b);
                fc.push(cc);
                fd.push(dd);
            }
            for p in 0..np {
                let i = t * np + p;
                let e = C64::from_polar(1.0, self.phi[p]);
                let mut ph = C64::from_polar(1.0, -(l as f64) * self.phi[p]);
                let (mut u, mut ut, mut up, mut utt, mut utp, mut upp, mut uos) =
                    (ZERO, ZERO, ZERO, ZERO, ZERO, ZERO, ZERO);
                for (j, m) in (-(l as i64)..=l as i64).enumerate() {
                    let mf = m as f64;
                    u += fa[j] * ph;
                    ut += fb[j] * ph;
                    up += fa[j] * ph * i_unit * mf;
                    utt += fc[j] * ph;
                    utp += fb[j] * ph * i_unit * mf;
                    upp -= fa[j] * ph * (mf * mf);
                    uos += fd[j] * ph * i_unit * mf;
                    ph *= e;
                }
                let (_, et, ep) = spherical_frame(self.cos_t[t], self.sin_t[t], self.phi[p]);
                d.u[i] = u;
                d.u_t[i] = ut;
                d.u_p[i] = up;
                d.u_tt[i] = utt;
                d.u_tp[i] = utp;
                d.u_pp[i] = upp;
                d.grad_s[i] = std::array::from_fn(|k| ut * et[k] + uos * ep[k]);
            }
        }
        d
    }

    /// `∇_Γ u` at the nodes.
    pub fn surface_grad(&self, c: &ShCoeffs) -> Result<Vec<CVec3>> {
        self.check_degree(c.l)?;
        let d = self.derivatives(c);
        Ok((0..self.len()).map(|i| self.tangential_grad(i, &d.grad_s[i])).collect())
    }

    /// Surface gradient at node `i` from the parameter-sphere gradient: `P_ν ∇_S u / ρ`.
    #[inline]
    fn tangential_grad(&self, i: usize, gs: &CVec3) -> CVec3 {
        let nu = &self.normals[i];
        let r = self.rho[i];
        let nd = gs[0] * nu[0] + gs[1] * nu[1] + gs[2] * nu[2];
        std::array::from_fn(|k| (gs[k] - nd * nu[k]) / r)
    }

    /// `curl⃗_Γ u = −ν × ∇_Γ u` at the nodes.
    pub fn vec_curl(&self, c: &ShCoeffs) -> Result<Vec<CVec3>> {
        let g = self.surface_grad(c)?;
        Ok(g.iter().zip(&self.normals).map(|(g, nu)| neg_nu_cross(nu, g)).collect())
    }

    /// `Δ_Γ u` at the nodes via the metric form `g^{ij}(u_ij − x_ij · ∇_Γ u)`.
    pub fn laplace_beltrami(&self, c: &ShCoeffs) -> Result<Vec<C64>> {
        self.check_degree(c.l)?;
        let d = self.derivatives(c);
        Ok((0..self.len())
            .map(|i| {
                let f = &self.frames[i];
                let [gtt, gtp, gpp] = f.ginv;
                // Contravariant gradient components and ∇_Γ u.
                let at = d.u_t[i] * gtt + d.u_p[i] * gtp;
                let ap = d.u_t[i] * gtp + d.u_p[i] * gpp;
                let grad: CVec3 = std::array::from_fn(|k| at * f.x_t[k] + ap * f.x_p[k]);
                let proj = |x: &Vec3| grad[0] * x[0] + grad[1] * x[1] + grad[2] * x[2];
                (d.u_tt[i] - proj(&f.x_tt)) * gtt
                    + (d.u_tp[i] - proj(&f.x_tp)) * (2.0 * gtp)
                    + (d.u_pp[i] - proj(&f.x_pp)) * gpp
            })
            .collect())
    }

    /// Numerical surface divergence of a tangential node field: `Σ_k e_k · ∇_Γ F_k`,
    /// each Cartesian component expanded to degree `L_quad`.
    pub fn div_nodes(&self, field: &[CVec3]) -> Result<Vec<C64>> {
        if field.len() != self.len() {
            return Err(Error::invalid("field", "length differs from the node count"));
        }
        let mut out = vec![ZERO; self.len()];
        for k in 0..3 {
            let comp: Vec<C64> = field.iter().map(|f| f[k]).collect();
            let c = self.sh_analysis(&comp, self.l_quad)?;
            let g = self.surface_grad(&c)?;
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += gi[k];
            }
        }
        Ok(out)
    }

    /// Numerical scalar surface curl `curl_Γ F = ∇_Γ · (F × ν)`.
    pub fn scal_curl_nodes(&self, field: &[CVec3]) -> Result<Vec<C64>> {
        let rotated: Vec<CVec3> = field
            .iter()
            .zip(&self.normals)
            .map(|(f, nu)| {
                [
                    f[1] * nu[2] - f[2] * nu[1],
                    f[2] * nu[0] - f[0] * nu[2],
                    f[0] * nu[1] - f[1] * nu[0],
                ]
            })
            .collect();
        self.div_nodes(&rotated)
    }

    /// Reconstruct `∇_Γ X + curl⃗_Γ V` at the nodes.
    pub fn tangent_field_nodes(&self, f: &TangentField) -> Result<Vec<CVec3>> {
        self.check_degree(f.l())?;
        let dx = self.derivatives(&f.x);
        let dv = self.derivatives(&f.v);
        Ok((0..self.len())
            .map(|i| {
                let gx = self.tangential_grad(i, &dx.grad_s[i]);
                let gv = self.tangential_grad(i, &dv.grad_s[i]);
                let cv = neg_nu_cross(&self.normals[i], &gv);
                std::array::from_fn(|k| gx[k] + cv[k])
            })
            .collect())
    }

    /// Apply a surface differential operator.
    pub fn surface_diff(&self, kind: DiffKind, input: DiffInput<'_>) -> Result<NodeData> {
        match (kind, input) {
            (DiffKind::Grad, DiffInput::Scalar(c)) => Ok(NodeData::Vectors(self.surface_grad(c)?)),
            (DiffKind::VecCurl, DiffInput::Scalar(c)) => Ok(NodeData::Vectors(self.vec_curl(c)?)),
            (DiffKind::LaplaceBeltrami, DiffInput::Scalar(c)) => Ok(NodeData::Scalars(self.laplace_beltrami(c)?)),
            (DiffKind::Div, DiffInput::Field(f)) => {
                let nodes = self.tangent_field_nodes(f)?;
                Ok(NodeData::Scalars(self.div_nodes(&nodes)?))
            }
            (DiffKind::ScalCurl, DiffInput::Field(f)) => {
                let nodes = self.tangent_field_nodes(f)?;
                Ok(NodeData::Scalars(self.scal_curl_nodes(&nodes)?))
            }
            (k, DiffInput::Scalar(_)) => Err(Error::KindMismatch {
                expected: "tangent field".into(),
                found: format!("scalar coefficients for {k:?}"),
            }),
            (k, DiffInput::Field(_)) => Err(Error::KindMismatch {
                expected: "scalar coefficients".into(),
                found: format!("tangent field for {k:?}"),
            }),
        }
    }

    /// Values of the parameter-sphere harmonics `Y_b(x̂_i)`, one row per node.
    pub fn basis_at_nodes(&self, l: usize) -> Result<DMatrix<C64>> {
        self.check_degree(l)?;
        let nb = sh_len(l);
        let np = self.n_phi;
        let mut b = DMatrix::<C64>::zeros(self.len(), nb);
        for t in 0..self.n_theta {
            let leg = &self.legendre[t];
            for p in 0..np {
                let i = t * np + p;
                for n in 0..=l {
                    for m in 0..=n {
                        let v = C64::from_polar(leg.p(n, m), m as f64 * self.phi[p]);
                        b[(i, sh_index(n, m as i64))] = v;
                        if m > 0 {
                            let s = if m % 2 == 0 { 1.0 } else { -1.0 };
                            b[(i, sh_index(n, -(m as i64)))] = v.conj() * s;
                        }
                    }
                }
            }
        }
        Ok(b)
    }

    /// Mass matrix `⟨Y_a, Y_b⟩_{L²(∂D)}` of the parameter-sphere harmonics.
    pub fn mass_matrix(&self, l: usize) -> Result<DMatrix<C64>> {
        let b = self.basis_at_nodes(l)?;
        Ok(weighted_gram(&b, &b, &self.area_weights))
    }

    /// CSV export: `idx,theta,phi,x,y,z,nx,ny,nz,w`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("idx,theta,phi,x,y,z,nx,ny,nz,w\n");
        for t in 0..self.n_theta {
            for p in 0..self.n_phi {
                let i = t * self.n_phi + p;
                let (x, n) = (&self.positions[i], &self.normals[i]);
                s.push_str(&format!(
                    "{i},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                    self.theta[t], self.phi[p], x[0], x[1], x[2], n[0], n[1], n[2], self.area_weights[i]
                ));
            }
        }
        s
    }
}

/// Geometry from harmonic values (and sphere gradients) of the radius basis at `xh`.
pub(crate) fn geometry_from_table(a: &[C64], y: &[C64], grad: &[CVec3], xh: Vec3) -> PointGeometry {
    let mut rho = 0.0;
    let mut g = [0.0; 3];
    for (k, ak) in a.iter().enumerate() {
        if ak.re == 0.0 && ak.im == 0.0 {
            continue;
        }
        rho += (ak * y[k]).re;
        for d in 0..3 {
            g[d] += (ak * grad[k][d]).re;
        }
    }
    let s = (rho * rho + dot(&g, &g)).sqrt();
    PointGeometry {
        dir: xh,
        rho,
        grad_rho: g,
        position: [rho * xh[0], rho * xh[1], rho * xh[2]],
        normal: [(rho * xh[0] - g[0]) / s, (rho * xh[1] - g[1]) / s, (rho * xh[2] - g[2]) / s],
        jac: rho * s,
    }
}

/// `Σ_i w_i conj(A_ia) B_ib`.
pub fn weighted_gram(a: &DMatrix<C64>, b: &DMatrix<C64>, w: &[f64]) -> DMatrix<C64> {
    let mut bw = b.clone();
    for (i, wi) in w.iter().enumerate() {
        for j in 0..bw.ncols() {
            bw[(i, j)] *= *wi;
        }
    }
    a.adjoint() * bw
}

#[inline]
fn pow_phase(eim: &[C64], p: usize, m: i64, np: usize) -> C64 {
    // e^{-i m φ_p} with φ_p = 2πp/np, computed from the table without drift.
    let k = ((p as i64 * m).rem_euclid(np as i64)) as usize;
    eim[k]
}

#[inline]
fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `−ν × g` for a real normal and complex tangent vector.
#[inline]
pub(crate) fn neg_nu_cross(nu: &Vec3, g: &CVec3) -> CVec3 {
    [
        -(g[2] * nu[1] - g[1] * nu[2]),
        -(g[0] * nu[2] - g[2] * nu[0]),
        -(g[1] * nu[0] - g[0] * nu[1]),
    ]
}

/// Maximum of `|ν · F|` over nodes relative to `max |F|` (a tangentiality diagnostic).
pub fn normal_component_ratio(grid: &SurfaceGrid, field: &[CVec3]) -> f64 {
    let mut nmax: f64 = 0.0;
    let mut fmax: f64 = 0.0;
    for (f, nu) in field.iter().zip(&grid.normals) {
        let nd = f[0] * nu[0] + f[1] * nu[1] + f[2] * nu[2];
        nmax = nmax.max(nd.norm());
        fmax = fmax.max(cnorm3(f));
    }
    if fmax == 0.0 {
        0.0
    } else {
        nmax / fmax
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[C64], b: &[C64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn sphere_area_and_normals() {
        let g = SurfaceGrid::sphere(1.0, 16).unwrap();
        assert!((g.total_area() - 4.0 * PI).abs() < 1e-10);
        for (n, x) in g.normals.iter().zip(&g.positions) {
            assert!((norm3(n) - 1.0).abs() < 1e-12);
            assert!((dot(n, x) - 1.0).abs() < 1e-12);
        }
        let g = SurfaceGrid::sphere(0.5, 16).unwrap();
        assert!((g.total_area() - PI).abs() < 1e-9);
        assert_eq!(g.sphere_radius(), Some(0.5));
    }

    #[test]
    fn rejects_bad_surfaces() {
        let bad = SurfaceSpec::perturbed_sphere(10.0, 2, 0, 8).build();
        assert!(matches!(bad, Err(Error::StarShapeViolation { .. })));
        let low = SurfaceSpec::perturbed_sphere(0.1, 6, 0, 4).build();
        assert!(matches!(low, Err(Error::Resolution { .. })));
    }

    #[test]
    fn analysis_of_single_harmonics() {
        let g = SurfaceGrid::sphere(1.0, 10).unwrap();
        let c = ShCoeffs::unit(10, 3, 1);
        let v = g.sh_synthesis(&c).unwrap();
        let back = g.sh_analysis(&v, 10).unwrap();
        for (i, z) in back.coeffs.iter().enumerate() {
            let want = if i == sh_index(3, 1) { 1.0 } else { 0.0 };
            assert!((z - want).norm() < 1e-12);
        }
        let ones = vec![C64::new(1.0, 0.0); g.len()];
        let c = g.sh_analysis(&ones, 10).unwrap();
        assert!((c.coeffs[0].re - (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!(c.coeffs.iter().skip(1).all(|z| z.norm() < 1e-12));
        assert!(g.sh_analysis(&ones, 11).is_err());
    }

    #[test]
    fn roundtrip_random() {
        let g = SurfaceGrid::perturbed_sphere(0.1, 2, 0, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = ShCoeffs::random(12, &mut rng, 0.0, false);
        let v = g.sh_synthesis(&c).unwrap();
        let back = g.sh_analysis(&v, 12).unwrap();
        assert!(rel(&back.coeffs, &c.coeffs) < 1e-12);
    }

    #[test]
    fn sphere_laplace_beltrami_eigenvalues() {
        let g = SurfaceGrid::sphere(1.0, 12).unwrap();
        for n in 0..=12usize {
            for m in [-(n as i64), 0, n as i64] {
                let c = ShCoeffs::unit(12, n, m);
                let lb = g.laplace_beltrami(&c).unwrap();
                let y = g.sh_synthesis(&c).unwrap();
                let want: Vec<C64> = y.iter().map(|v| v * -((n * (n + 1)) as f64)).collect();
                for (a, b) in lb.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-10 * (1.0 + (n * n) as f64), "n={n} m={m}");
                }
            }
        }
    }

    #[test]
    fn perturbed_composition_identities() {
        let g = SurfaceGrid::perturbed_sphere(0.1, 2, 0, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = ShCoeffs::random(6, &mut rng, 0.0, true);
        let f = TangentField::curl(v.clone());
        let nodes = g.tangent_field_nodes(&f).unwrap();
        assert!(normal_component_ratio(&g, &nodes) < 1e-12);
        let div = g.div_nodes(&nodes).unwrap();
        let scale = nodes.iter().map(cnorm3).fold(0.0, f64::max);
        let dmax = div.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(dmax < 1e-9 * scale.max(1.0), "div curl = {dmax}");
        let cc = g.scal_curl_nodes(&nodes).unwrap();
        let lb = g.laplace_beltrami(&v).unwrap();
        let neg: Vec<C64> = lb.iter().map(|z| -z).collect();
        assert!(rel(&cc, &neg) < 1e-8, "{}", rel(&cc, &neg));
        let grad = TangentField::gradient(v);
        let nodes = g.tangent_field_nodes(&grad).unwrap();
        let c = g.scal_curl_nodes(&nodes).unwrap();
        assert!(c.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-8 * scale.max(1.0));
    }

    #[test]
    fn integration_by_parts_and_gauss() {
        let g = SurfaceGrid::perturbed_sphere(0.1, 2, 0, 24).unwrap();
        let mut nint = [0.0; 3];
        for (n, w) in g.normals.iter().zip(&g.area_weights) {
            for k in 0..3 {
                nint[k] += n[k] * w;
            }
        }
        assert!(nint.iter().all(|v| v.abs() < 1e-8));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = ShCoeffs::random(5, &mut rng, 0.0, false);
        let f = TangentField::new(
            ShCoeffs::random(5, &mut rng, 0.0, true),
            ShCoeffs::random(5, &mut rng, 0.0, true),
            Flavor::Div,
        )
        .unwrap();
        let fu = g.tangent_field_nodes(&f).unwrap();
        let gu = g.surface_grad(&u).unwrap();
        let uu = g.sh_synthesis(&u).unwrap();
        let du = g.div_nodes(&fu).unwrap();
        let mut a = ZERO;
        let mut b = ZERO;
        for i in 0..g.len() {
            let w = g.area_weights[i];
            a += (gu[i][0] * fu[i][0] + gu[i][1] * fu[i][1] + gu[i][2] * fu[i][2]) * w;
            b += uu[i] * du[i] * w;
        }
        assert!((a + b).norm() < 1e-8 * a.norm(), "{} vs {}", a, b);
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = SurfaceGrid::perturbed_sphere(0.1, 2, 0, 8).unwrap();
        let c = ShCoeffs::unit(4, 0, 0);
        let gr = g.surface_grad(&c).unwrap();
        assert!(gr.iter().all(|v| cnorm3(v) < 1e-12));
    }

    #[test]
    fn tubular_distance_examples() {
        let g = SurfaceGrid::sphere(1.0, 8).unwrap();
        assert!((g.tubular_distance(&[0.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(g.tubular_distance(&g.positions[17]), 0.0);
        let d = g.tubular_distance(&[2.0, 0.0, 0.0]);
        assert!(d >= 1.0 && d < 1.0 + g.max_node_spacing());
    }
}
