//! Lie brackets on so(3), bracket-generated closures and the Hörmander rank,
//! the Rodrigues exponential, and the circle action generated by a single
//! antisymmetric matrix.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, rho, AntisymMatrix3, Rotation3, UnitVector3, Vector3};

/// Relative singular-value threshold for rank decisions.
pub const RANK_REL_TOL: f64 = 1e-9;
/// Largest number of bracket rounds; dim so(3) = 3 bounds the chain.
pub const MAX_BRACKET_ROUNDS: usize = 3;
/// Tolerance on x² + y² = 1 for points of S¹.
pub const CIRCLE_TOL: f64 = 1e-10;

/// [X, Y] = XY − YX.
pub fn commutator(x: &AntisymMatrix3, y: &AntisymMatrix3) -> AntisymMatrix3 {
    let (mx, my) = (x.matrix(), y.matrix());
    AntisymMatrix3::from_matrix(&(mx * my - my * mx))
}

/// Orthonormal basis (as axis vectors) of the span of `vectors`, by SVD with
/// threshold `RANK_REL_TOL · max(σ_max, 1)`.
fn span_basis(vectors: &[Vector3]) -> Vec<Vector3> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let m = DMatrix::from_fn(vectors.len(), 3, |i, j| vectors[i].to_array()[j]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma_max = svd.singular_values.max();
    let threshold = RANK_REL_TOL * sigma_max.max(1.0);
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| Vector3::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)]))
        .collect()
}

/// Rank of a family of so(3) elements, viewed as vectors of ℝ³.
pub fn linear_rank(elements: &[AntisymMatrix3]) -> usize {
    let axes: Vec<Vector3> = elements.iter().map(AntisymMatrix3::axis).collect();
    span_basis(&axes).len()
}

/// The smallest bracket-closed subspace of so(3) containing a set of generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketClosure {
    pub generators: Vec<AntisymMatrix3>,
    /// Orthonormal (in the axis coordinates) basis of the closure.
    pub basis: Vec<AntisymMatrix3>,
    pub rank: usize,
}

impl BracketClosure {
    /// Least-squares residual of projecting `x` onto the span of the basis.
    pub fn residual(&self, x: &AntisymMatrix3) -> f64 {
        let v = x.axis();
        let projected = self
            .basis
            .iter()
            .fold(Vector3::ZERO, |acc, b| acc + b.axis() * b.axis().dot(v));
        (v - projected).norm()
    }

    pub fn contains(&self, x: &AntisymMatrix3) -> bool {
        self.residual(x) < 1e-10 * x.axis().norm().max(1.0)
    }
}

/// Iterates L₀ = span(generators), Lₙ = span(Lₙ₋₁ ∪ [Lₙ₋₁, Lₙ₋₁]) until the
/// rank stops growing.
pub fn bracket_closure(generators: &[AntisymMatrix3]) -> Result<BracketClosure> {
    if generators.is_empty() {
        return Err(Error::domain("bracket closure needs at least one generator"));
    }
    let axes: Vec<Vector3> = generators.iter().map(AntisymMatrix3::axis).collect();
    let mut basis = span_basis(&axes);
    for _ in 0..MAX_BRACKET_ROUNDS {
        let mut candidates = basis.clone();
        for (i, x) in basis.iter().enumerate() {
            for y in &basis[i + 1..] {
                candidates.push(commutator(&hat(*x), &hat(*y)).axis());
            }
        }
        let next = span_basis(&candidates);
        let grew = next.len() > basis.len();
        basis = next;
        if !grew {
            break;
        }
    }
    Ok(BracketClosure {
        generators: generators.to_vec(),
        rank: basis.len(),
        basis: basis.into_iter().map(hat).collect(),
    })
}

/// Rank of the Lie algebra generated by the drift and the noise generators.
/// For linear fields on S² or SO(3), rank 3 certifies (H) and anything less
/// refutes it.
pub fn hormander_rank(drift: &AntisymMatrix3, noises: &[AntisymMatrix3]) -> usize {
    let mut generators = Vec::with_capacity(noises.len() + 1);
    generators.push(*drift);
    generators.extend_from_slice(noises);
    bracket_closure(&generators).map_or(0, |c| c.rank)
}

/// Outcome of the Hörmander test for a drift/noise pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HormanderVerdict {
    pub rank: usize,
    pub holds: bool,
    /// [A, B] = 0, i.e. the drift and noise are linearly dependent.
    pub commuting: bool,
}

pub fn hormander_verdict(drift: &AntisymMatrix3, noise: &AntisymMatrix3) -> HormanderVerdict {
    let rank = hormander_rank(drift, std::slice::from_ref(noise));
    let bracket = commutator(drift, noise).axis().norm();
    let scale = drift.axis().norm() * noise.axis().norm();
    HormanderVerdict {
        rank,
        holds: rank == 3,
        commuting: bracket <= 1e-10 * scale.max(1.0),
    }
}

impl std::fmt::Display for HormanderVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.holds {
            write!(f, "rank {}: (H) holds", self.rank)
        } else if self.commuting {
            write!(f, "rank {}: (H) fails; commuting case", self.rank)
        } else {
            write!(f, "rank {}: (H) fails", self.rank)
        }
    }
}

/// Standing assumptions of the supported linear systems that admit no
/// algorithmic test. Antisymmetric linear fields on S² and SO(3) are
/// divergence free (D), leave every polynomial space C_l invariant (C), and
/// satisfy the connectivity condition (F) because their bracket algebra acts
/// transitively on each orbit of the generated group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisFlags {
    pub divergence_free: bool,
    pub polynomial_invariance: bool,
    pub connectivity: bool,
}

impl HypothesisFlags {
    pub const LINEAR_SO3_SYSTEM: HypothesisFlags = HypothesisFlags {
        divergence_free: true,
        polynomial_invariance: true,
        connectivity: true,
    };
}

/// e^{sB} = (1 − cos ρs)/ρ² B² + sin(ρs)/ρ B + I.
pub fn rodrigues_exp(b: &AntisymMatrix3, s: f64) -> Rotation3 {
    let r = rho(b);
    if r == 0.0 {
        return Rotation3::identity();
    }
    let m = b.matrix();
    let (sin, cos) = (r * s).sin_cos();
    Rotation3::from_matrix_unchecked(
        (1.0 - cos) / (r * r) * (m * m) + sin / r * m + Matrix3::identity(),
    )
}

/// The S¹-action p ↦ 𝐬(p) generated by a nonzero B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleAction {
    b: AntisymMatrix3,
    rho: f64,
}

impl CircleAction {
    pub fn new(b: AntisymMatrix3) -> Result<Self> {
        let r = rho(&b);
        if r == 0.0 {
            return Err(Error::domain("the circle action needs a nonzero generator B"));
        }
        Ok(Self { b, rho: r })
    }

    pub fn generator(&self) -> AntisymMatrix3 {
        self.b
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Unit axis of the rotation.
    pub fn axis(&self) -> Vector3 {
        self.b.axis() * (1.0 / self.rho)
    }

    /// 𝐬(x, y) = (1 − x)/ρ² B² + y/ρ B + I for (x, y) ∈ S¹.
    pub fn s(&self, x: f64, y: f64) -> Result<Rotation3> {
        let defect = (x * x + y * y - 1.0).abs();
        if defect > CIRCLE_TOL {
            return Err(Error::domain(format!(
                "({x}, {y}) is not on S¹ (|x² + y² − 1| = {defect:e})"
            )));
        }
        let m = self.b.matrix();
        Ok(Rotation3::from_matrix_unchecked(
            (1.0 - x) / (self.rho * self.rho) * (m * m) + y / self.rho * m + Matrix3::identity(),
        ))
    }

    /// 𝐬(cos θ, sin θ) = e^{(θ/ρ) B}.
    pub fn at_angle(&self, theta: f64) -> Rotation3 {
        let (y, x) = theta.sin_cos();
        self.s(x, y).expect("angle parametrization stays on S¹")
    }

    pub fn orbit<T: OrbitPoint>(&self, z: &T, theta: f64) -> T {
        z.rotated_by(&self.at_angle(theta))
    }
}

/// 𝐬(p) for the action generated by B.
pub fn s_map(p: (f64, f64), b: &AntisymMatrix3) -> Result<Rotation3> {
    CircleAction::new(*b)?.s(p.0, p.1)
}

/// Spaces K ∈ {S², SO(3)} on which SO(3) acts from the left.
pub trait OrbitPoint: Copy {
    fn rotated_by(&self, r: &Rotation3) -> Self;
}

impl OrbitPoint for UnitVector3 {
    fn rotated_by(&self, r: &Rotation3) -> Self {
        r.rotate(*self)
    }
}

impl OrbitPoint for Rotation3 {
    fn rotated_by(&self, r: &Rotation3) -> Self {
        r.compose(self)
    }
}

/// 𝐬(cos θ, sin θ)·Z; with θ uniform on [0, 2π) the output is distributed as
/// the orbit measure through Z.
pub fn orbit_sample<T: OrbitPoint>(z: &T, b: &AntisymMatrix3, theta: f64) -> Result<T> {
    Ok(CircleAction::new(*b)?.orbit(z, theta))
}
