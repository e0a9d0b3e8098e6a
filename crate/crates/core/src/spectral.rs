//! Symmetrized eigensolves, Gram forms and identity checks.
//!
//! `K*` is self-adjoint in the inner product `−⟨·, S ·⟩`; its discrete eigenproblem is
//! posed with the exact operator products `⟨S Y_a, K* Y_b⟩` taken from nodal images, so
//! the only non-Hermiticity left in the matrix is quadrature error. The MNP operator on
//! curl fields and its adjoint on gradient fields are represented by the potentials of
//! the fields, with the Gram `−⟨U, S⁻¹ U⟩` taken on the quotient by constants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::potentials::ScalarOperators;
use crate::specfun::{sh_degree_order, sh_len, C64};
use crate::surface::{weighted_gram, Flavor, ShCoeffs, SurfaceGrid, TangentField};

/// Which operator a spectral set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralOperator {
    Kstar,
    #[serde(rename = "M_curl")]
    MCurl,
    #[serde(rename = "Mstar_grad")]
    MstarGrad,
}

/// Inner product used to normalize eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramKind {
    /// `−⟨θ, S θ'⟩` on densities.
    NegS,
    /// `⟨ξ, N⁻¹ ξ'⟩` on curl fields, `−⟨V, S⁻¹V'⟩` on their potentials.
    CurlNinv,
    /// `⟨ζ, Q⁻¹ ζ'⟩` on gradient fields, `−⟨X, S⁻¹X'⟩` on their potentials.
    GradQinv,
    /// `⟨N ξ, ξ'⟩` (sign chosen positive): `−⟨ΔV, S ΔV'⟩`.
    CurlN,
    /// `⟨Q ζ, ζ'⟩` (sign chosen positive): `−⟨S ΔX, ΔX'⟩`.
    GradQ,
    /// Plain coefficient inner product.
    Identity,
}

/// Eigenpairs sorted by `|λ|` descending.
#[derive(Debug, Clone)]
pub struct SpectralSet {
    pub operator: SpectralOperator,
    pub gram: GramKind,
    pub l: usize,
    pub eigenvalues: Vec<f64>,
    /// Densities `θ_j` (for `Kstar`) or potentials `V_j` / `X_j` (mean-free).
    pub vectors: Vec<ShCoeffs>,
    /// `‖H − Hᴴ‖/‖H‖` of the symmetrized matrix before Hermitian projection.
    pub non_hermiticity: f64,
    /// Eigenvalues removed because they belong to the kernel of the field map.
    pub excluded: Vec<f64>,
}

impl SpectralSet {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Tangent field of mode `j` (curl or gradient of the stored potential).
    pub fn field(&self, j: usize) -> Result<TangentField> {
        let v = self
            .vectors
            .get(j)
            .ok_or_else(|| Error::invalid("mode", format!("index {j} out of range")))?;
        match self.operator {
            SpectralOperator::MCurl => Ok(TangentField::curl(v.clone())),
            SpectralOperator::MstarGrad => Ok(TangentField::gradient(v.clone())),
            SpectralOperator::Kstar => Err(Error::KindMismatch {
                expected: "field spectrum".into(),
                found: "density spectrum".into(),
            }),
        }
    }

    /// Cluster label per eigenvalue (consecutive values within `tol`).
    pub fn clusters(&self, tol: f64) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut c = 0;
        for (i, l) in self.eigenvalues.iter().enumerate() {
            if i > 0 && (l - self.eigenvalues[i - 1]).abs() > tol {
                c += 1;
            }
            out.push(c);
        }
        out
    }

    /// JSON export `{operator, eigenvalues, gram, potentials: [[[n, m, re, im], ...], ...]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let pots: Vec<Vec<[f64; 4]>> = self.vectors.iter().map(|v| v.to_triples()).collect();
        json!({
            "operator": self.operator,
            "L": self.l,
            "eigenvalues": self.eigenvalues,
            "gram": self.gram,
            "non_hermiticity": self.non_hermiticity,
            "excluded": self.excluded,
            "potentials": pots,
        })
    }

    /// CSV table `j,lambda,multiplicity_cluster`.
    pub fn to_csv(&self) -> String {
        let cl = self.clusters(1e-8);
        let mut s = String::from("j,lambda,multiplicity_cluster\n");
        for (j, (l, c)) in self.eigenvalues.iter().zip(&cl).enumerate() {
            s.push_str(&format!("{j},{l:.15e},{c}\n"));
        }
        s
    }
}

/// Solve `H x = λ B x` for Hermitian `H` and positive definite `B`; returns eigenvalues
/// sorted by `|λ|` descending and `B`-orthonormal eigenvectors as columns.
pub fn generalized_hermitian_eig(h: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>)> {
    let half = C64::new(0.5, 0.0);
    let bh = (b + b.adjoint()) * half;
    let hh = (h + h.adjoint()) * half;
    let chol = bh
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Gram matrix failed Cholesky factorization".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let m = &linv * hh * linv.adjoint();
    let m = (&m + m.adjoint()) * half;
    let eig = m.symmetric_eigen();
    let x = linv.adjoint() * &eig.eigenvectors;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .abs()
            .partial_cmp(&eig.eigenvalues[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap_or(std::cmp::Ordering::Equal))
    });
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::<C64>::zeros(x.nrows(), x.ncols());
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &x.column(i));
    }
    Ok((vals, vecs))
}

fn hermitian_defect(h: &DMatrix<C64>) -> f64 {
    let n = h.norm();
    if n == 0.0 {
        0.0
    } else {
        (h - h.adjoint()).norm() / n
    }
}

/// Symmetrized `K*` matrix `−⟨S Y_a, K* Y_b⟩` and Gram `−⟨Y_a, S Y_b⟩`.
pub fn kstar_pencil(ops: &ScalarOperators) -> (DMatrix<C64>, DMatrix<C64>) {
    let h = -weighted_gram(&ops.img_s, &ops.img_kstar, &ops.area_weights);
    let b = -weighted_gram(&ops.basis, &ops.img_s, &ops.area_weights);
    (h, b)
}

/// Eigenpairs of `K*` with the `−S` Gram.
pub fn np_spectrum(ops: &ScalarOperators) -> Result<SpectralSet> {
    let (h, b) = kstar_pencil(ops);
    let (vals, vecs) = generalized_hermitian_eig(&h, &b)?;
    let vectors = (0..vecs.ncols())
        .map(|j| ShCoeffs::from_vec(ops.l, vecs.column(j).iter().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralSet {
        operator: SpectralOperator::Kstar,
        gram: GramKind::NegS,
        l: ops.l,
        eigenvalues: vals,
        vectors,
        non_hermiticity: hermitian_defect(&h),
        excluded: Vec::new(),
    })
}

/// Gram of the potentials of curl (or gradient) fields: `−⟨U, S⁻¹U'⟩` on the quotient
/// by constants, indexed by the mean-free coefficients `1 ≤ b < (L+1)²`.
pub fn potential_gram(ops: &ScalarOperators) -> Result<DMatrix<C64>> {
    let gs = ops
        .s
        .galerkin
        .as_ref()
        .ok_or_else(|| Error::Numerical("single layer without Galerkin matrix".into()))?;
    let r = &ops.mass_inv * gs * &ops.mass_inv;
    let n = r.nrows();
    let rii = r.view((1, 1), (n - 1, n - 1)).into_owned();
    let rii = (&rii + rii.adjoint()) * C64::new(0.5, 0.0);
    let neg = -rii;
    let chol = neg
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("−S restricted to mean-free coefficients".into()))?;
    Ok(chol.inverse())
}

/// Coefficient matrix of `M` on curl fields in potential coordinates (`V ↦ K V`, mean-free).
pub fn mcurl_matrix(ops: &ScalarOperators) -> DMatrix<C64> {
    let n = ops.k.entries.nrows();
    ops.k.entries.view((1, 1), (n - 1, n - 1)).into_owned()
}

/// Coefficient matrix of `M*` on gradient fields in potential coordinates (`X ↦ −K X`).
pub fn mstar_grad_matrix(ops: &ScalarOperators) -> DMatrix<C64> {
    -mcurl_matrix(ops)
}

fn pad_mean_free(l: usize, v: impl Iterator<Item = C64>) -> Result<ShCoeffs> {
    let mut c = vec![C64::new(0.0, 0.0)];
    c.extend(v);
    Ok(ShCoeffs::from_vec(l, c)?.into_mean_free())
}

fn strip_mean(c: &ShCoeffs, l: usize) -> DVector<C64> {
    let c = c.resized(l);
    DVector::from_iterator(c.len() - 1, c.coeffs[1..].iter().copied())
}

/// Independent eigensolve of `M` on the curl subspace (or `M*` on gradients).
pub fn field_spectrum(ops: &ScalarOperators, which: SpectralOperator) -> Result<SpectralSet> {
    let g = potential_gram(ops)?;
    let (a, gram) = match which {
        SpectralOperator::MCurl => (mcurl_matrix(ops), GramKind::CurlNinv),
        SpectralOperator::MstarGrad => (mstar_grad_matrix(ops), GramKind::GradQinv),
        SpectralOperator::Kstar => return np_spectrum(ops),
    };
    let h = &g * &a;
    let (vals, vecs) = generalized_hermitian_eig(&h, &g)?;
    let vectors = (0..vecs.ncols())
        .map(|j| pad_mean_free(ops.l, vecs.column(j).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralSet {
        operator: which,
        gram,
        l: ops.l,
        eigenvalues: vals,
        vectors,
        non_hermiticity: hermitian_defect(&h),
        excluded: Vec::new(),
    })
}

/// Field spectra derived from `K*` eigenpairs: `V_j = S[θ_j]` with eigenvalue `μ_j` on
/// curl fields and `X_j = S[θ_j]` with eigenvalue `−μ_j` on gradient fields.
pub fn mnp_spectra(np: &SpectralSet, ops: &ScalarOperators) -> Result<(SpectralSet, SpectralSet)> {
    if np.operator != SpectralOperator::Kstar {
        return Err(Error::KindMismatch {
            expected: "Kstar spectrum".into(),
            found: format!("{:?}", np.operator),
        });
    }
    let g = potential_gram(ops)?;
    let mut vals = Vec::new();
    let mut pots = Vec::new();
    let mut excluded = Vec::new();
    for (mu, theta) in np.eigenvalues.iter().zip(&np.vectors) {
        if (mu - 0.5).abs() < 1e-8 {
            excluded.push(*mu);
            continue;
        }
        let v = ops.s.apply(theta)?;
        let vv = strip_mean(&v, ops.l);
        let nrm = (vv.adjoint() * &g * &vv)[(0, 0)].re;
        if !(nrm > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("potential of mode μ = {mu} has norm {nrm:e}")));
        }
        vals.push(*mu);
        pots.push(pad_mean_free(ops.l, vv.iter().map(|z| z / nrm.sqrt()))?);
    }
    let curl = SpectralSet {
        operator: SpectralOperator::MCurl,
        gram: GramKind::CurlNinv,
        l: ops.l,
        eigenvalues: vals.clone(),
        vectors: pots.clone(),
        non_hermiticity: np.non_hermiticity,
        excluded: excluded.clone(),
    };
    let grad = SpectralSet {
        operator: SpectralOperator::MstarGrad,
        gram: GramKind::GradQinv,
        l: ops.l,
        eigenvalues: vals.iter().map(|v| -v).collect(),
        vectors: pots,
        non_hermiticity: np.non_hermiticity,
        excluded: excluded.iter().map(|v| -v).collect(),
    };
    Ok((curl, grad))
}

/// Potentials of `N`-type images: coefficients of `S[f]` for a node function `f`.
fn s_of_nodes(ops: &ScalarOperators, f: &[C64]) -> DVector<C64> {
    ops.apply_s_nodes(f)
}

/// Evaluate one of the Gram forms on two tangent fields.
pub fn gram(kind: GramKind, a: &TangentField, b: &TangentField, ops: &ScalarOperators, grid: &SurfaceGrid) -> Result<C64> {
    match kind {
        GramKind::CurlNinv | GramKind::GradQinv => {
            let g = potential_gram(ops)?;
            let (pa, pb) = if kind == GramKind::CurlNinv {
                expect_flavor(a, Flavor::Curl)?;
                expect_flavor(b, Flavor::Curl)?;
                (&a.v, &b.v)
            } else {
                expect_flavor(a, Flavor::Div)?;
                expect_flavor(b, Flavor::Div)?;
                (&a.x, &b.x)
            };
            check_degree(ops, pa.l.max(pb.l))?;
            let va = strip_mean(pa, ops.l);
            let vb = strip_mean(pb, ops.l);
            Ok((va.adjoint() * g * vb)[(0, 0)])
        }
        GramKind::CurlN | GramKind::GradQ => {
            let (pa, pb) = if kind == GramKind::CurlN {
                expect_flavor(a, Flavor::Curl)?;
                expect_flavor(b, Flavor::Curl)?;
                (&a.v, &b.v)
            } else {
                expect_flavor(a, Flavor::Div)?;
                expect_flavor(b, Flavor::Div)?;
                (&a.x, &b.x)
            };
            check_degree(ops, pa.l.max(pb.l))?;
            let la = grid.laplace_beltrami(pa)?;
            let lb = grid.laplace_beltrami(pb)?;
            // ⟨S Δa, Δb⟩ through the symmetric single layer: Σ_a conj(c_a) ⟨S Y_a, Δb⟩.
            let sa = s_of_nodes(ops, &la);
            let sa_nodes = &ops.basis * &sa;
            let mut acc = C64::new(0.0, 0.0);
            for ((s, d), w) in sa_nodes.iter().zip(&lb).zip(&ops.area_weights) {
                acc += s.conj() * d * *w;
            }
            Ok(-acc)
        }
        GramKind::NegS => Err(Error::KindMismatch {
            expected: "field Gram".into(),
            found: "density Gram".into(),
        }),
        GramKind::Identity => {
            let va = a.x.resized(ops.l).as_dvector();
            let vb = b.x.resized(ops.l).as_dvector();
            let wa = a.v.resized(ops.l).as_dvector();
            let wb = b.v.resized(ops.l).as_dvector();
            Ok(va.dotc(&vb) + wa.dotc(&wb))
        }
    }
}

fn expect_flavor(f: &TangentField, flavor: Flavor) -> Result<()> {
    if f.flavor != flavor {
        return Err(Error::KindMismatch {
            expected: format!("{flavor:?} field"),
            found: format!("{:?} field", f.flavor),
        });
    }
    Ok(())
}

fn check_degree(ops: &ScalarOperators, l: usize) -> Result<()> {
    if l > ops.l {
        return Err(Error::Resolution {
            requested: l,
            available: ops.l,
        });
    }
    Ok(())
}

/// Which field Calderón identity to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalderonKind {
    /// `N M* = M N` on curl fields.
    Curl,
    /// `M* Q = Q M` on gradient fields.
    Grad,
}

/// Matrices `⟨Y_a, S K* Y_b⟩` and `⟨Y_a, K S Y_b⟩` from exact operator products.
pub fn scalar_calderon_pair(ops: &ScalarOperators) -> (DMatrix<C64>, DMatrix<C64>) {
    let skst = weighted_gram(&ops.img_s, &ops.img_kstar, &ops.area_weights);
    let ks = weighted_gram(&ops.img_kstar, &ops.img_s, &ops.area_weights);
    (skst, ks)
}

/// `‖KS − SK*‖ / ‖SK*‖` on the assembled basis.
pub fn scalar_calderon_residual(ops: &ScalarOperators) -> f64 {
    let (a, b) = scalar_calderon_pair(ops);
    (&a - &b).norm() / a.norm()
}

/// Relative residual of a field Calderón identity applied to one test field.
///
/// Both sides are curl (gradient) fields whose potentials are `S K*[c]` and `K S[c]`
/// (`c = −ΔV` for curl tests, `c = ΔX` for gradient tests, up to the common sign); the
/// residual is the L² norm of their difference relative to the L² norm of the test field.
pub fn calderon_residual(which: CalderonKind, test: &TangentField, ops: &ScalarOperators, grid: &SurfaceGrid) -> Result<f64> {
    let pot = match which {
        CalderonKind::Curl => {
            expect_flavor(test, Flavor::Curl)?;
            if test.x.norm() > 0.0 {
                return Err(Error::invalid("test", "curl identity needs a pure curl field"));
            }
            &test.v
        }
        CalderonKind::Grad => {
            expect_flavor(test, Flavor::Div)?;
            if test.v.norm() > 0.0 {
                return Err(Error::invalid("test", "gradient identity needs a pure gradient field"));
            }
            &test.x
        }
    };
    check_degree(ops, pot.l)?;
    let c_nodes = grid.laplace_beltrami(pot)?;
    let c = ops.project_nodes(&c_nodes);
    let (skst, ks) = scalar_calderon_pair(ops);
    let lhs = &ops.mass_inv * (&skst * &c);
    let rhs = &ops.mass_inv * (&ks * &c);
    let diff = ShCoeffs::from_vec(ops.l, (&lhs - &rhs).iter().copied().collect())?.into_mean_free();
    let field_norm = |p: &ShCoeffs| -> Result<f64> {
        let g = grid.surface_grad(p)?;
        let mut s = 0.0;
        for (v, w) in g.iter().zip(&grid.area_weights) {
            s += w * (v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr());
        }
        Ok(s.sqrt())
    };
    let t = field_norm(pot)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(field_norm(&diff)? / t)
}

/// `‖G A − Aᴴ G‖ / ‖G A‖`.
pub fn self_adjointness_residual(a: &DMatrix<C64>, g: &DMatrix<C64>) -> f64 {
    let ga = g * a;
    let n = ga.norm();
    if n == 0.0 {
        return 0.0;
    }
    (&ga - a.adjoint() * g).norm() / n
}

/// Residuals of `M` (curl subspace) and `M*` (gradient subspace) in their Grams and in the
/// identity Gram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfAdjointnessReport {
    pub m_curl_gram: f64,
    pub mstar_grad_gram: f64,
    pub m_curl_identity: f64,
    pub mstar_grad_identity: f64,
}

pub fn self_adjointness_report(ops: &ScalarOperators) -> Result<SelfAdjointnessReport> {
    let g = potential_gram(ops)?;
    let a = mcurl_matrix(ops);
    let b = mstar_grad_matrix(ops);
    let id = DMatrix::<C64>::identity(a.nrows(), a.ncols());
    Ok(SelfAdjointnessReport {
        m_curl_gram: self_adjointness_residual(&a, &g),
        mstar_grad_gram: self_adjointness_residual(&b, &g),
        m_curl_identity: self_adjointness_residual(&a, &id),
        mstar_grad_identity: self_adjointness_residual(&b, &id),
    })
}

/// Squared weights of the working trace norms on the parameter sphere, per degree:
/// `(weight of X, weight of V)` for the given flavor.
pub fn working_weights(n: usize, flavor: Flavor) -> (f64, f64) {
    let nn = (n * (n + 1)) as f64;
    let base = nn / (1.0 + nn).sqrt();
    let high = nn * nn / (1.0 + nn).sqrt();
    match flavor {
        Flavor::Curl => (base, base + high),
        Flavor::Div => (base + high, base),
    }
}

/// Working norm of a tangent field: the `H^{-1/2}(curl)` (curl flavor) or `H^{-1/2}(div)`
/// (div flavor) norm of its Helmholtz potentials on the parameter sphere.
pub fn working_norm(f: &TangentField) -> f64 {
    let mut s = 0.0;
    for k in 0..f.x.len().max(f.v.len()) {
        let (n, _) = sh_degree_order(k);
        let (wx, wv) = working_weights(n, f.flavor);
        let x = f.x.coeffs.get(k).map_or(0.0, |z| z.norm_sqr());
        let v = f.v.coeffs.get(k).map_or(0.0, |z| z.norm_sqr());
        s += wx * x + wv * v;
    }
    s.sqrt()
}

/// Range of `‖·‖_gram / ‖·‖_working` over random samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalence {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub samples: usize,
}

/// Compare the Gram norm of the given flavor with the working norm on random fields.
pub fn norm_equivalence_report<R: Rng>(
    ops: &ScalarOperators,
    grid: &SurfaceGrid,
    flavor: Flavor,
    samples: usize,
    rng: &mut R,
) -> Result<NormEquivalence> {
    if samples < 10 {
        return Err(Error::invalid("samples", "at least 10 samples are required"));
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for _ in 0..samples {
        let p = ShCoeffs::random(ops.l, rng, 0.0, true);
        let (f, kind) = match flavor {
            Flavor::Curl => (TangentField::curl(p), GramKind::CurlNinv),
            Flavor::Div => (TangentField::gradient(p), GramKind::GradQinv),
        };
        let g = gram(kind, &f, &f, ops, grid)?.re;
        let r = g.max(0.0).sqrt() / working_norm(&f);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(NormEquivalence {
        min_ratio: lo,
        max_ratio: hi,
        samples,
    })
}

/// Check that the `N`-preimages of the curl eigenfields are eigenvectors of `M*` projected
/// onto curl fields in the `curl_N` Gram; returns the largest relative residual over the
/// first `modes` modes.
///
/// In potential coordinates the projected operator is `G_N⁻¹ R` with
/// `G_N = −⟨ΔY_a, S ΔY_b⟩` and `R = −⟨ΔY_a, K S ΔY_b⟩`; the `N`-preimage of `curl⃗V` is
/// `curl⃗W` with `S[−ΔW] = V`.
pub fn projected_mstar_residual(curl: &SpectralSet, ops: &ScalarOperators, grid: &SurfaceGrid, modes: usize) -> Result<f64> {
    let l = ops.l;
    let nb = sh_len(l);
    // Coefficients of Δ Y_b (degree-l projection of node values).
    let mut lap = DMatrix::<C64>::zeros(nb, nb);
    let mut lap_nodes = DMatrix::<C64>::zeros(grid.len(), nb);
    for b in 0..nb {
        let (n, m) = sh_degree_order(b);
        let d = grid.laplace_beltrami(&ShCoeffs::unit(l, n, m))?;
        let c = ops.project_nodes(&d);
        lap.set_column(b, &c);
        for (i, v) in d.iter().enumerate() {
            lap_nodes[(i, b)] = *v;
        }
    }
    // S and K S applied to ΔY_b, evaluated as exact products with ΔY_a.
    let s_lap = weighted_gram(&ops.img_s, &lap_nodes, &ops.area_weights); // ⟨S Y_a, ΔY_b⟩
    // ⟨ΔY_a, S ΔY_b⟩ = Σ_c conj(L_ca) ⟨S Y_c, ΔY_b⟩ using the degree-l expansion of ΔY_a.
    let gn = -(lap.adjoint() * &s_lap);
    // ⟨ΔY_a, K S ΔY_b⟩ = ⟨K* ΔY_a, S ΔY_b⟩ ≈ Σ_c conj(L_ca) ⟨K* Y_c, S ΔY_b⟩.
    let sl = &ops.mass_inv * &s_lap; // coefficients of S ΔY_b
    let ks_mat = weighted_gram(&ops.img_kstar, &ops.basis, &ops.area_weights); // ⟨K*Y_c, Y_d⟩
    let r = -(lap.adjoint() * (&ks_mat * &sl));
    let ii = |m: &DMatrix<C64>| m.view((1, 1), (nb - 1, nb - 1)).into_owned();
    let gn_i = ii(&gn);
    let r_i = ii(&r);
    let p = gn_i
        .clone()
        .lu()
        .solve(&r_i)
        .ok_or_else(|| Error::Numerical("curl_N Gram is singular".into()))?;
    // Preimage potentials: S[u] = V + c with ∫u = 0 (V is only defined up to constants),
    // then −ΔW = u with W mean-free.
    let mut border = DMatrix::<C64>::zeros(nb + 1, nb + 1);
    border.view_mut((0, 0), (nb, nb)).copy_from(&ops.s.entries);
    border[(0, nb)] = C64::new(-1.0, 0.0);
    for b in 0..nb {
        border[(nb, b)] = ops.mass[(0, b)];
    }
    let border = border.lu();
    let lap_cols = -lap.view((0, 1), (nb, nb - 1)).into_owned();
    let lap_svd = lap_cols.svd(true, true);
    let mut worst: f64 = 0.0;
    for j in 0..modes.min(curl.len()) {
        let v = curl.vectors[j].resized(l);
        let mut rhs = DVector::<C64>::zeros(nb + 1);
        rhs.rows_mut(0, nb).copy_from(&DVector::from_column_slice(&v.coeffs));
        let u = border
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("single layer is singular".into()))?;
        let w = lap_svd
            .solve(&u.rows(0, nb).into_owned(), 1e-12)
            .map_err(|e| Error::Numerical(format!("Laplacian solve failed: {e}")))?;
        let pw = &p * &w;
        let res = (&pw - &w * C64::new(curl.eigenvalues[j], 0.0)).norm() / (w.norm() * curl.eigenvalues[j].abs());
        worst = worst.max(res);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::assemble_all;

    #[test]
    fn sphere_spectra_and_exclusion() {
        let grid = SurfaceGrid::sphere(1.0, 8).unwrap();
        let ops = assemble_all(&grid, 8).unwrap();
        let np = np_spectrum(&ops).unwrap();
        assert!((np.eigenvalues[0] - 0.5).abs() < 1e-9);
        for n in 1..=8usize {
            let want = 0.5 / (2 * n + 1) as f64;
            let cnt = np.eigenvalues.iter().filter(|v| (*v - want).abs() < 1e-8).count();
            assert_eq!(cnt, 2 * n + 1, "degree {n}");
        }
        let (curl, grad) = mnp_spectra(&np, &ops).unwrap();
        assert_eq!(curl.len(), np.len() - 1);
        assert_eq!(curl.excluded, vec![np.eigenvalues[0]]);
        assert!((grad.eigenvalues[0] + 1.0 / 6.0).abs() < 1e-9);
        // Gram-orthonormal potentials.
        let g = potential_gram(&ops).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = strip_mean(&curl.vectors[i], 8);
                let b = strip_mean(&curl.vectors[j], 8);
                let v = (a.adjoint() * &g * b)[(0, 0)];
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn sphere_grams_closed_forms() {
        let grid = SurfaceGrid::sphere(1.0, 10).unwrap();
        let ops = assemble_all(&grid, 6).unwrap();
        for n in 1..=4usize {
            let f = TangentField::curl(ShCoeffs::unit(6, n, 1));
            let g = gram(GramKind::CurlNinv, &f, &f, &ops, &grid).unwrap();
            assert!((g.re - (2 * n + 1) as f64).abs() < 1e-8, "{g}");
            let nn = (n * (n + 1)) as f64;
            let g = gram(GramKind::CurlN, &f, &f, &ops, &grid).unwrap();
            assert!((g.re - nn * nn / (2 * n + 1) as f64).abs() < 1e-7, "{g}");
        }
    }
}
