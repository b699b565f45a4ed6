//! Structure-preserving one-step schemes.
//!
//! * Algorithm A: implicit midpoint rule for the stochastic LLG equation
//!   `dz = −z × h dt − z × (h + h⊥) ∘ dW` on S².
//! * The same midpoint (Cayley) rule for `dZ = AZ dt + BZ ∘ dW` on SO(3).
//! * The exact solution `e^{(κt + W_t)B} Z₀` of the commuting case A = κB.
//! * Algorithm B: a symmetric two-step scheme with a discrete Lagrange
//!   multiplier for the stochastically perturbed geodesic equation
//!   `du̇ = −|u̇|² u dt + √D (u × u̇) ∘ dW` on TS².
//! * The averaged (mean-field) dynamics of both stochastic schemes.
//!
//! In matrix form the LLG drift is `A = hat(h)` and the noise `B = hat(h + h⊥)`,
//! since `−z × h = h × z`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, AntisymMatrix3, Rotation3, TangentState, UnitVector3, Vector3};
use crate::lie::{commutator, rodrigues_exp, OrbitPoint};

/// Residual target of the fixed-point solves.
pub const SOLVE_TOL: f64 = 1e-12;
/// Sweep budget of the fixed-point solves.
pub const MAX_SWEEPS: usize = 200;
/// Tolerance on ⟨h, h⊥⟩ = 0.
pub const PERP_TOL: f64 = 1e-12;
/// Tolerance on [A, B] = 0 for the exact commuting solution.
pub const COMMUTING_TOL: f64 = 1e-10;
/// Default ε of the regularized multiplier in Algorithm B.
pub const DEFAULT_EPS: f64 = 0.25;
/// Step-size bound k·(|V⁰| + 1) ≤ 1/8 for Algorithm B.
pub const GEODESIC_STEP_BOUND: f64 = 0.125;

/// Parameters of the stochastic LLG equation and its time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlgParams {
    pub h: UnitVector3,
    pub h_perp: Vector3,
    pub k: f64,
}

impl LlgParams {
    pub fn new(h: UnitVector3, h_perp: Vector3, k: f64) -> Result<Self> {
        let inner = h.dot(h_perp);
        if inner.abs() > PERP_TOL {
            return Err(Error::config(format!("h⊥ is not perpendicular to h (⟨h, h⊥⟩ = {inner:e})")));
        }
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::config(format!("time step k = {k} must lie in (0, 1)")));
        }
        Ok(Self { h, h_perp, k })
    }

    /// A = hat(h).
    pub fn drift(&self) -> AntisymMatrix3 {
        hat(self.h.vector())
    }

    /// B = hat(h + h⊥).
    pub fn noise(&self) -> AntisymMatrix3 {
        hat(self.noise_axis())
    }

    pub fn noise_axis(&self) -> Vector3 {
        self.h.vector() + self.h_perp
    }

    /// 𝓔(z) = −⟨h, z⟩.
    pub fn energy(&self, z: UnitVector3) -> f64 {
        -self.h.dot(z.vector())
    }

    /// The same dynamics lifted to SO(3).
    pub fn to_so3(&self) -> So3Params {
        So3Params {
            a: self.drift(),
            b: self.noise(),
            k: self.k,
        }
    }
}

/// Solves `Y = Z + ½ a × Y` for the midpoint Y by (damped) Picard iteration.
///
/// Sweeps continue past the residual target until rounding level or
/// stagnation, so the returned midpoint is accurate to machine precision
/// whenever the target is met.
fn midpoint_picard(z: Vector3, a: Vector3, damping: f64) -> Result<Vector3> {
    let residual = |y: Vector3| (y - z - 0.5 * a.cross(y)).norm();
    let floor = 4.0 * f64::EPSILON * z.norm().max(1.0);
    let mut y = z;
    let mut r = residual(y);
    let mut prev = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        if r <= floor || (r <= SOLVE_TOL && r >= prev) {
            return Ok(y);
        }
        let target = z + 0.5 * a.cross(y);
        y = y + damping * (target - y);
        prev = r;
        r = residual(y);
    }
    if r <= SOLVE_TOL {
        Ok(y)
    } else {
        Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            residual: r,
        })
    }
}

/// One midpoint step driven by the rotation vector `a = k h + ΔW (h + h⊥)`.
pub(crate) fn midpoint_rotation_step(z: Vector3, a: Vector3, damping: f64) -> Result<Vector3> {
    let y = midpoint_picard(z, a, damping)?;
    Ok(2.0 * y - z)
}

/// Algorithm A: find Zⁿ⁺¹ with
/// `Zⁿ⁺¹ − Zⁿ = −k Zⁿ⁺½ × h − Zⁿ⁺½ × (h + h⊥) ΔW`.
pub fn llg_step(z: UnitVector3, params: &LlgParams, dw: f64) -> Result<UnitVector3> {
    let h = params.h.vector();
    let b = params.noise_axis();
    let a = params.k * h + dw * b;
    let damping = if params.k * h.norm() + dw.abs() * b.norm() < 1.0 {
        1.0
    } else {
        0.5
    };
    UnitVector3::from_iterate(midpoint_rotation_step(z.vector(), a, damping)?)
}

/// Folds [`llg_step`] over the increments; the output starts with `z0`.
pub fn llg_path(
    z0: UnitVector3,
    params: &LlgParams,
    n_steps: usize,
    increments: &[f64],
) -> Result<Vec<UnitVector3>> {
    if increments.len() != n_steps {
        return Err(Error::domain(format!(
            "{} increments supplied for {n_steps} steps",
            increments.len()
        )));
    }
    let mut path = Vec::with_capacity(n_steps + 1);
    path.push(z0);
    let mut z = z0;
    for (step, &dw) in increments.iter().enumerate() {
        z = llg_step(z, params, dw).map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        path.push(z);
    }
    Ok(path)
}

/// `dZ = AZ dt + BZ ∘ dW` on SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct So3Params {
    pub a: AntisymMatrix3,
    pub b: AntisymMatrix3,
    pub k: f64,
}

/// Cayley(M) = (I − M/2)⁻¹(I + M/2).
pub fn cayley(m: &AntisymMatrix3) -> Result<Rotation3> {
    let m = m.matrix();
    let lhs = Matrix3::identity() - 0.5 * m;
    let rhs = Matrix3::identity() + 0.5 * m;
    lhs.lu()
        .solve(&rhs)
        .map(Rotation3::from_matrix_unchecked)
        .ok_or(Error::SingularStep)
}

/// `Zⁿ⁺¹ − Zⁿ = (kA + ΔW B)(Zⁿ⁺¹ + Zⁿ)/2`, solved directly.
pub fn so3_step(z: &Rotation3, params: &So3Params, dw: f64) -> Result<Rotation3> {
    let m = hat(params.a.axis() * params.k + params.b.axis() * dw);
    let lhs = Matrix3::identity() - 0.5 * m.matrix();
    let rhs = (Matrix3::identity() + 0.5 * m.matrix()) * z.matrix();
    lhs.lu()
        .solve(&rhs)
        .map(Rotation3::from_matrix_unchecked)
        .ok_or(Error::SingularStep)
}

/// Exact solution `e^{tA + W_t B} Z₀ = e^{(κt + W_t)B} Z₀` of the commuting case.
///
/// κ is the least-squares coefficient of A on B. With B = 0 the motion is the
/// deterministic rotation e^{tA}.
pub fn exact_commuting_step<T: OrbitPoint>(
    z: &T,
    a: &AntisymMatrix3,
    b: &AntisymMatrix3,
    t: f64,
    w_t: f64,
) -> Result<T> {
    if b.is_zero() {
        return Ok(z.rotated_by(&rodrigues_exp(a, t)));
    }
    let bracket = commutator(a, b).axis().norm();
    if bracket > COMMUTING_TOL {
        return Err(Error::domain(format!(
            "exact solution needs [A, B] = 0, got ‖[A, B]‖ = {bracket:e}"
        )));
    }
    let kappa = a.axis().dot(b.axis()) / b.axis().norm_squared();
    Ok(z.rotated_by(&rodrigues_exp(b, kappa * t + w_t)))
}

/// Noise intensity, time step and regularization of Algorithm B.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicParams {
    pub d: f64,
    pub k: f64,
    pub eps: f64,
}

impl GeodesicParams {
    pub fn new(d: f64, k: f64, eps: f64) -> Result<Self> {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::config(format!("noise intensity D = {d} must be ≥ 0")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::config(format!("time step k = {k} must be > 0")));
        }
        if !(0.0..=0.25).contains(&eps) {
            return Err(Error::config(format!("ε = {eps} must lie in [0, 1/4]")));
        }
        Ok(Self { d, k, eps })
    }

    /// Rejects steps with k·(|V⁰| + 1) > 1/8, the operational form of the
    /// smallness condition k ≤ k₀(U⁰, V⁰).
    pub fn check_step_size(&self, initial_speed: f64) -> Result<()> {
        let load = self.k * (initial_speed + 1.0);
        if load > GEODESIC_STEP_BOUND {
            return Err(Error::config(format!(
                "k·(|V⁰| + 1) = {load} exceeds {GEODESIC_STEP_BOUND}; reduce k"
            )));
        }
        Ok(())
    }
}

/// Iterate of Algorithm B: (Uⁿ, Uⁿ⁻¹, Vⁿ) at step n.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeodesicState {
    pub n: usize,
    pub u: UnitVector3,
    pub u_prev: Vector3,
    pub v: Vector3,
}

impl GeodesicState {
    /// (U⁰, V⁰) = (u₀, u̇₀) and U⁻¹ = U⁰ − kV⁰.
    pub fn start(initial: &TangentState, k: f64) -> Self {
        Self {
            n: 0,
            u: initial.p,
            u_prev: initial.p.vector() - k * initial.xi,
            v: initial.xi,
        }
    }

    /// E(V) = ½|V|².
    pub fn energy(&self) -> f64 {
        0.5 * self.v.norm_squared()
    }
}

/// Algorithm B: solves for (Uⁿ⁺¹, Vⁿ⁺¹, λⁿ⁺¹) with
///
/// ```text
/// Vⁿ⁺¹ − Vⁿ = μ m + (√D ΔW / 2) m × (Vⁿ⁺¹ + Vⁿ),   m = ½(Uⁿ⁺¹ + Uⁿ⁻¹)
/// Uⁿ⁺¹ = Uⁿ + k Vⁿ⁺¹
/// μ = [−(Vⁿ, Uⁿ⁺¹ + Uⁿ⁻¹) + (1 − |Uⁿ⁻¹|²)/(2k)] / max(|m|², ε)
/// ```
///
/// `μ = kλⁿ⁺¹` is the multiplier in the form that keeps |Uⁿ⁺¹| = 1 exactly,
/// so round-off in the constraint does not accumulate. Picard iteration on
/// Vⁿ⁺¹ starting from Vⁿ.
pub fn geodesic_step(state: &GeodesicState, params: &GeodesicParams, dw: f64) -> Result<GeodesicState> {
    let k = params.k;
    let u = state.u.vector();
    let up = state.u_prev;
    let v = state.v;
    let half_sigma = 0.5 * params.d.sqrt() * dw;
    let constraint_gap = (1.0 - up.norm_squared()) / (2.0 * k);

    let update = |v_next: Vector3| -> Vector3 {
        let sum = u + k * v_next + up;
        let m = 0.5 * sum;
        let den = m.norm_squared().max(params.eps);
        let mu = if den > 0.0 {
            (constraint_gap - v.dot(sum)) / den
        } else {
            0.0
        };
        v + mu * m + half_sigma * m.cross(v_next + v)
    };

    let scale = v.norm().max(1.0);
    let floor = 4.0 * f64::EPSILON * scale;
    let mut v_next = v;
    let mut prev = f64::INFINITY;
    let mut converged = false;
    let mut r = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let candidate = update(v_next);
        r = (candidate - v_next).norm();
        v_next = candidate;
        if r <= floor || (r <= SOLVE_TOL * scale && r >= prev) {
            converged = true;
            break;
        }
        prev = r;
    }
    if !converged && r > SOLVE_TOL * scale {
        return Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            residual: r,
        });
    }

    let u_next = u + k * v_next;
    let mid = (0.5 * (u_next + up)).norm();
    if mid <= params.eps && params.eps > 0.0 || mid == 0.0 {
        return Err(Error::DegenerateMidpoint { norm: mid });
    }
    Ok(GeodesicState {
        n: state.n + 1,
        u: UnitVector3::from_iterate(u_next)?,
        u_prev: u,
        v: v_next,
    })
}

/// Integrates the averaged LLG dynamics
/// `𝒵' = h × 𝒵 − ½|h + h⊥|² (𝒵 − ⟨𝒵, h̄⟩ h̄)`, h̄ = (h + h⊥)/|h + h⊥|,
/// with the classical four-stage Runge–Kutta method. Returns 𝒵 at t = 0, dt, 2dt, ….
pub fn averaged_llg_ode(z0: UnitVector3, params: &LlgParams, t_end: f64, dt: f64) -> Result<Vec<Vector3>> {
    let b = params.noise_axis();
    let b_norm_sq = b.norm_squared();
    if b_norm_sq == 0.0 {
        return Err(Error::domain("h + h⊥ must be nonzero"));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::domain("need dt > 0 and t_end ≥ 0"));
    }
    let h = params.h.vector();
    let b_hat = b * (1.0 / b_norm_sq.sqrt());
    let rhs = |z: Vector3| h.cross(z) - 0.5 * b_norm_sq * (z - b_hat * z.dot(b_hat));

    let n = (t_end / dt).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut z = z0.vector();
    out.push(z);
    for _ in 0..n {
        let k1 = rhs(z);
        let k2 = rhs(z + 0.5 * dt * k1);
        let k3 = rhs(z + 0.5 * dt * k2);
        let k4 = rhs(z + dt * k3);
        z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(z);
    }
    Ok(out)
}

/// Mean position and velocity (𝒰ⁿ, 𝒱ⁿ) of Algorithm B.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanTangent {
    pub u: Vector3,
    pub v: Vector3,
}

/// Mean-field recursion of Algorithm B with the O(k²) defect dropped:
///
/// ```text
/// 𝒱ⁿ⁺¹ − 𝒱ⁿ = −k 𝔼|Vⁿ|² 𝒰ⁿ⁺¹ − (Dk/2) 𝒱ⁿ⁺¹,    𝒰ⁿ⁺¹ = 𝒰ⁿ + k 𝒱ⁿ⁺¹
/// ```
///
/// with 𝔼|Vⁿ|² = `v0_sq` held constant (Algorithm B conserves |V|). The
/// coupled linear system reduces to a scalar division per step.
pub fn averaged_geodesic_ode(
    v0_sq: f64,
    u0: Vector3,
    v0: Vector3,
    k: f64,
    d: f64,
    n_steps: usize,
) -> Vec<MeanTangent> {
    let denom = 1.0 + 0.5 * d * k + k * k * v0_sq;
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut state = MeanTangent { u: u0, v: v0 };
    out.push(state);
    for _ in 0..n_steps {
        let v = (state.v - k * v0_sq * state.u) * (1.0 / denom);
        state = MeanTangent { u: state.u + k * v, v };
        out.push(state);
    }
    out
}
