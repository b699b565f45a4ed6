//! Generator matrices on spaces of polynomial observables.
//!
//! For linear fields `X z = L z` on ℝⁿ the space of polynomials of degree ≤ l
//! is invariant under the generator `𝒜f = Ff + ½ Σ G_k(G_k f)`. Writing
//! `𝒜 f_i = Σ_j a_ij f_j` over a monomial basis (f_i), the moments
//! `m_i(t) = 𝔼 f_i(z(t))` solve `m' = a m`, so `m(t) = e^{ta} m(0)`.
//!
//! Two ambient spaces are supported: S² ⊂ ℝ³ with `L = M`, and SO(3) ⊂ ℝ⁹
//! (row-major entries z_{3j+k} = Z_jk) with `L = M ⊗ I₃`, the latter for
//! degree ≤ 2.
//!
//! Basis order is graded, then lexicographic with z₁ > z₂ > z₃ > …:
//! `1, z₁, z₂, z₃, z₁², z₁z₂, z₁z₃, z₂², z₂z₃, z₃², …`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AntisymMatrix3;

/// Eigenvalues with |Re λ| below this count as having zero real part.
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Probe times of the boundedness check.
pub const BOUNDEDNESS_TIMES: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
/// Allowed spread of ‖e^{ta}‖ across the probe times.
pub const BOUNDEDNESS_FACTOR: f64 = 10.0;
/// Largest degree with closed-form uniform moments.
pub const UNIFORM_MAX_DEGREE: usize = 4;
const MAX_SPHERE_DEGREE: usize = 12;
const MAX_ROTATION_DEGREE: usize = 2;

/// The ambient space carrying the linear fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambient {
    /// S² ⊂ ℝ³.
    Sphere,
    /// SO(3) ⊂ ℝ⁹.
    RotationGroup,
}

impl Ambient {
    pub fn dimension(self) -> usize {
        match self {
            Ambient::Sphere => 3,
            Ambient::RotationGroup => 9,
        }
    }

    fn from_dimension(n: usize) -> Result<Self> {
        match n {
            3 => Ok(Ambient::Sphere),
            9 => Ok(Ambient::RotationGroup),
            _ => Err(Error::domain(format!("no linear-field ambient space of dimension {n}"))),
        }
    }
}

pub type MultiIndex = Vec<u32>;

/// All multi-indices of total degree exactly `d` in `n` variables,
/// lexicographically descending.
fn compositions(n: usize, d: u32) -> Vec<MultiIndex> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in compositions(n - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BasisRepr {
    ambient: Ambient,
    degree: usize,
    exponents: Vec<MultiIndex>,
}

/// The monomials z^α with |α| ≤ degree, in graded lexicographic order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "BasisRepr", try_from = "BasisRepr")]
pub struct MonomialBasis {
    ambient: Ambient,
    degree: usize,
    exponents: Vec<MultiIndex>,
    index: HashMap<MultiIndex, usize>,
}

impl PartialEq for MonomialBasis {
    fn eq(&self, other: &Self) -> bool {
        self.ambient == other.ambient && self.degree == other.degree && self.exponents == other.exponents
    }
}

impl From<MonomialBasis> for BasisRepr {
    fn from(b: MonomialBasis) -> Self {
        BasisRepr {
            ambient: b.ambient,
            degree: b.degree,
            exponents: b.exponents,
        }
    }
}

impl TryFrom<BasisRepr> for MonomialBasis {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        let basis = MonomialBasis::new(r.ambient, r.degree)?;
        if basis.exponents != r.exponents {
            return Err(Error::config("monomial basis does not match the canonical ordering"));
        }
        Ok(basis)
    }
}

impl MonomialBasis {
    pub fn new(ambient: Ambient, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::domain("basis degree must be at least 1"));
        }
        let cap = match ambient {
            Ambient::Sphere => MAX_SPHERE_DEGREE,
            Ambient::RotationGroup => MAX_ROTATION_DEGREE,
        };
        if degree > cap {
            return Err(Error::NotImplemented(format!(
                "{ambient:?} monomial bases are supported up to degree {cap}"
            )));
        }
        let n = ambient.dimension();
        let exponents: Vec<MultiIndex> = (0..=degree as u32).flat_map(|d| compositions(n, d)).collect();
        let index = exponents.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(Self {
            ambient,
            degree,
            exponents,
            index,
        })
    }

    pub fn sphere(degree: usize) -> Result<Self> {
        Self::new(Ambient::Sphere, degree)
    }

    pub fn rotation_group(degree: usize) -> Result<Self> {
        Self::new(Ambient::RotationGroup, degree)
    }

    pub fn ambient(&self) -> Ambient {
        self.ambient
    }

    pub fn dimension_of_ambient(&self) -> usize {
        self.ambient.dimension()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[MultiIndex] {
        &self.exponents
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.index.get(alpha).copied()
    }

    /// Values of every basis monomial at `z`.
    pub fn evaluate(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dimension_of_ambient());
        self.exponents.iter().map(|a| monomial(a, z)).collect()
    }
}

fn monomial(alpha: &[u32], z: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(z)
        .filter(|(&a, _)| a > 0)
        .map(|(&a, &x)| x.powi(a as i32))
        .product()
}

/// A polynomial as a map from multi-indices to coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    terms: BTreeMap<MultiIndex, f64>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomial(alpha: MultiIndex) -> Self {
        let mut p = Self::zero();
        p.add_term(alpha, 1.0);
        p
    }

    pub fn add_term(&mut self, alpha: MultiIndex, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(alpha).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.retain(|_, v| *v != 0.0);
        }
    }

    pub fn add_scaled(&mut self, other: &Polynomial, s: f64) {
        for (a, &c) in &other.terms {
            self.add_term(a.clone(), s * c);
        }
    }

    pub fn coefficient(&self, alpha: &[u32]) -> f64 {
        self.terms.get(alpha).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(a, &c)| (a, c))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(|a| a.iter().sum()).max()
    }

    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.terms.iter().map(|(a, c)| c * monomial(a, z)).sum()
    }
}

/// The linear vector field `z ↦ L z` acting on polynomials as a derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    l: DMatrix<f64>,
}

impl LinearField {
    /// `X z = M z` on ℝ³.
    pub fn sphere(m: &AntisymMatrix3) -> Self {
        Self {
            l: DMatrix::from_iterator(3, 3, m.matrix().iter().copied()),
        }
    }

    /// `X Z = M Z` on ℝ⁹ ≅ ℝ³ˣ³ (row-major).
    pub fn rotation_group(m: &AntisymMatrix3) -> Self {
        let m = m.matrix();
        let mut l = DMatrix::zeros(9, 9);
        for j in 0..3 {
            for k in 0..3 {
                for i in 0..3 {
                    l[(3 * j + k, 3 * i + k)] = m[(j, i)];
                }
            }
        }
        Self { l }
    }

    pub fn on(ambient: Ambient, m: &AntisymMatrix3) -> Self {
        match ambient {
            Ambient::Sphere => Self::sphere(m),
            Ambient::RotationGroup => Self::rotation_group(m),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `X z^α = Σ_{i,l} L_il α_i z^{α − e_i + e_l}`.
    pub fn apply_to_monomial(&self, alpha: &[u32]) -> Polynomial {
        let n = self.l.nrows();
        let mut out = Polynomial::zero();
        for i in 0..n {
            if alpha[i] == 0 {
                continue;
            }
            let a_i = alpha[i] as f64;
            for l in 0..n {
                let c = self.l[(i, l)];
                if c == 0.0 {
                    continue;
                }
                let mut beta = alpha.to_vec();
                beta[i] -= 1;
                beta[l] += 1;
                out.add_term(beta, c * a_i);
            }
        }
        out
    }

    pub fn apply(&self, p: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (alpha, c) in p.terms() {
            out.add_scaled(&self.apply_to_monomial(alpha), c);
        }
        out
    }
}

/// Applies the field of `m` to z^α; the ambient space is read off `alpha.len()`
/// (3 for S², 9 for SO(3)).
pub fn apply_field_to_monomial(m: &AntisymMatrix3, alpha: &[u32]) -> Result<Polynomial> {
    let ambient = Ambient::from_dimension(alpha.len())?;
    Ok(LinearField::on(ambient, m).apply_to_monomial(alpha))
}

/// Matrix (a_ij) of the generator on a monomial basis: `𝒜 f_i = Σ_j a_ij f_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GeneratorRepr", try_from = "GeneratorRepr")]
pub struct GeneratorMatrix {
    basis: MonomialBasis,
    entries: DMatrix<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GeneratorRepr {
    basis: MonomialBasis,
    entries: Vec<f64>,
}

impl From<GeneratorMatrix> for GeneratorRepr {
    fn from(g: GeneratorMatrix) -> Self {
        let n = g.basis.len();
        let entries = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|ij| g.entries[ij]).collect();
        GeneratorRepr {
            basis: g.basis,
            entries,
        }
    }
}

impl TryFrom<GeneratorRepr> for GeneratorMatrix {
    type Error = Error;

    fn try_from(r: GeneratorRepr) -> Result<Self> {
        let n = r.basis.len();
        if r.entries.len() != n * n {
            return Err(Error::config(format!(
                "generator matrix needs {} entries, found {}",
                n * n,
                r.entries.len()
            )));
        }
        Ok(GeneratorMatrix {
            basis: r.basis,
            entries: DMatrix::from_row_slice(n, n, &r.entries),
        })
    }
}

impl GeneratorMatrix {
    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// 𝒜 f_i as a polynomial.
    pub fn row_polynomial(&self, i: usize) -> Polynomial {
        let mut p = Polynomial::zero();
        for (j, alpha) in self.basis.exponents().iter().enumerate() {
            p.add_term(alpha.clone(), self.entries[(i, j)]);
        }
        p
    }

    /// e^{ta}.
    pub fn flow(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::domain(format!("flow time t = {t} must be finite and ≥ 0")));
        }
        if t == 0.0 {
            let n = self.basis.len();
            return Ok(DMatrix::identity(n, n));
        }
        Ok((&self.entries * t).exp())
    }

    /// Spectral norm ‖e^{ta}‖₂.
    pub fn flow_norm(&self, t: f64) -> Result<f64> {
        Ok(self.flow(t)?.singular_values().max())
    }

    /// Ratio max/min of ‖e^{ta}‖ over [`BOUNDEDNESS_TIMES`]; errors if it
    /// exceeds [`BOUNDEDNESS_FACTOR`].
    pub fn check_bounded(&self) -> Result<f64> {
        let norms = BOUNDEDNESS_TIMES
            .iter()
            .map(|&t| self.flow_norm(t))
            .collect::<Result<Vec<_>>>()?;
        let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let ratio = hi / lo;
        if !(ratio <= BOUNDEDNESS_FACTOR) {
            return Err(Error::UnboundedFlow { ratio });
        }
        Ok(ratio)
    }

    /// Eigenvalues as (re, im) pairs.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.entries
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re, c.im))
            .collect()
    }

    /// Rejects any eigenvalue with positive real part, or with zero real part
    /// and nonzero imaginary part.
    pub fn check_spectrum(&self) -> Result<()> {
        for (re, im) in self.eigenvalues() {
            if re > SPECTRAL_TOL || (re.abs() <= SPECTRAL_TOL && im.abs() > SPECTRAL_TOL) {
                return Err(Error::SpectralAnomaly { re, im });
            }
        }
        Ok(())
    }
}

/// Builds (a_ij) for `𝒜 = F + ½ Σ G_k²` with linear fields F, G_k on S².
pub fn generator_matrix(drift: &AntisymMatrix3, noises: &[AntisymMatrix3], degree: usize) -> Result<GeneratorMatrix> {
    generator_matrix_on(Ambient::Sphere, drift, noises, degree)
}

pub fn generator_matrix_on(
    ambient: Ambient,
    drift: &AntisymMatrix3,
    noises: &[AntisymMatrix3],
    degree: usize,
) -> Result<GeneratorMatrix> {
    let basis = MonomialBasis::new(ambient, degree)?;
    let f = LinearField::on(ambient, drift);
    let gs: Vec<LinearField> = noises.iter().map(|g| LinearField::on(ambient, g)).collect();
    let n = basis.len();
    let mut entries = DMatrix::zeros(n, n);
    for (i, alpha) in basis.exponents().iter().enumerate() {
        let mut image = f.apply_to_monomial(alpha);
        for g in &gs {
            let once = g.apply_to_monomial(alpha);
            image.add_scaled(&g.apply(&once), 0.5);
        }
        for (beta, c) in image.terms() {
            let j = basis
                .position(beta)
                .ok_or_else(|| Error::domain("generator image left the polynomial space"))?;
            entries[(i, j)] = c;
        }
    }
    Ok(GeneratorMatrix { basis, entries })
}

fn check_moment_len(g: &GeneratorMatrix, m: &[f64]) -> Result<()> {
    if m.len() != g.basis.len() {
        return Err(Error::domain(format!(
            "moment vector has {} entries, basis has {}",
            m.len(),
            g.basis.len()
        )));
    }
    Ok(())
}

/// `m(t) = e^{ta} m(0)`; entry i is 𝔼 f_i(z(t)).
pub fn evolve_moments(g: &GeneratorMatrix, initial_moments: &[f64], t: f64) -> Result<Vec<f64>> {
    check_moment_len(g, initial_moments)?;
    let flow = g.flow(t)?;
    let m = flow * nalgebra::DVector::from_column_slice(initial_moments);
    Ok(m.iter().copied().collect())
}

/// Null space of `m` from its SVD, as columns.
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.max().max(1.0);
    let cols: Vec<usize> = (0..n)
        .filter(|&i| svd.singular_values[i] <= 1e-9 * sigma_max)
        .collect();
    let mut out = DMatrix::zeros(n, cols.len());
    for (c, &i) in cols.iter().enumerate() {
        out.set_column(c, &v_t.row(i).transpose());
    }
    out
}

/// `lim_{t→∞} e^{ta} m(0)`: the spectral projection onto ker a along the
/// remaining generalized eigenspaces.
pub fn limiting_moments(g: &GeneratorMatrix, initial_moments: &[f64]) -> Result<Vec<f64>> {
    check_moment_len(g, initial_moments)?;
    if g.entries.iter().all(|&x| x == 0.0) {
        return Ok(initial_moments.to_vec());
    }
    g.check_spectrum()?;
    g.check_bounded()?;
    let right = null_space(&g.entries);
    let left = null_space(&g.entries.transpose());
    if right.ncols() != left.ncols() {
        return Err(Error::SpectralAnomaly { re: 0.0, im: 0.0 });
    }
    let m0 = nalgebra::DVector::from_column_slice(initial_moments);
    if right.ncols() == 0 {
        return Ok(vec![0.0; initial_moments.len()]);
    }
    let gram = left.transpose() * &right;
    let coeffs = gram
        .lu()
        .solve(&(left.transpose() * m0))
        .ok_or(Error::SpectralAnomaly { re: 0.0, im: 0.0 })?;
    Ok((right * coeffs).iter().copied().collect())
}

fn double_factorial_odd(n: i64) -> f64 {
    // (n)!! for odd n ≥ −1.
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// ∫ z^α dλ for the normalized area measure λ on S²:
/// `(a−1)!!(b−1)!!(c−1)!!/(a+b+c+1)!!` when all exponents are even, else 0.
pub fn uniform_sphere_moment(alpha: &[u32]) -> Result<f64> {
    if alpha.len() != 3 {
        return Err(Error::domain("uniform sphere moments need three exponents"));
    }
    let total: u32 = alpha.iter().sum();
    if total as usize > UNIFORM_MAX_DEGREE {
        return Err(Error::NotImplemented(format!(
            "uniform sphere moments of degree {total} (supported up to {UNIFORM_MAX_DEGREE})"
        )));
    }
    if alpha.iter().any(|a| a % 2 == 1) {
        return Ok(0.0);
    }
    let num: f64 = alpha.iter().map(|&a| double_factorial_odd(a as i64 - 1)).product();
    Ok(num / double_factorial_odd(total as i64 + 1))
}

pub fn uniform_sphere_moments(basis: &MonomialBasis) -> Result<Vec<f64>> {
    if basis.ambient() != Ambient::Sphere {
        return Err(Error::domain("uniform sphere moments need the S² basis"));
    }
    if basis.degree() > UNIFORM_MAX_DEGREE {
        return Err(Error::NotImplemented(format!(
            "uniform sphere moments of degree {} (supported up to {UNIFORM_MAX_DEGREE})",
            basis.degree()
        )));
    }
    basis.exponents().iter().map(|a| uniform_sphere_moment(a)).collect()
}
