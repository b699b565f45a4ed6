//! Partitions of S² and of the unit tangent bundle, empirical densities and
//! samplers for the orbit and bundle measures.
//!
//! # Sphere partition
//!
//! Grid points `x_ij = (sin θ_i cos φ_j, sin θ_i sin φ_j, cos θ_i)` with
//! θ_i = iπ/16 (i = 0..=16) and φ_j = jπ/16 (j = 0..32). Rows 0 and 16 collapse
//! to the poles, so there are 2 + 15·32 = 482 distinct cells; pole cells are
//! always labelled `(0, 0)` and `(16, 0)`. A point belongs to the cell of its
//! nearest grid point; ties go to the lexicographically smallest `(i, j)`.
//!
//! Cell areas are exact up to quadrature error. For a point at colatitude θ and
//! azimuth offset δ from the nearest grid meridian, the nearest row is the one
//! closest to `β = atan2(cos δ · sin θ, cos θ)`, so every cell is bounded by
//! curves of constant β and the area reduces to a 1D integral over δ.
//!
//! Densities are per steradian: the uniform density is f^S = 1/(4π).

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AntisymMatrix3, TangentState, UnitVector3, Vector3};
use crate::lie::{orbit_sample, OrbitPoint};

pub const ROWS: usize = 17;
pub const COLS: usize = 32;
/// Number of distinct cells.
pub const CELLS: usize = 2 + (ROWS - 2) * COLS;
const STEP: f64 = PI / 16.0;
const HALF_STEP: f64 = PI / 32.0;
/// Dot products within this distance of the best count as ties.
pub const TIE_TOL: f64 = 1e-12;
pub const PARTITION_ID: &str = "sphere-17x32";
pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
/// f^S = 1/(4π).
pub const UNIFORM_DENSITY: f64 = 1.0 / (4.0 * PI);
pub const DENSITY_CONVENTION: &str = "per_steradian";
const QUADRATURE_INTERVALS: usize = 4096;

/// Shipped calibration, regenerated by `sphere-sde density-report --write-calibration`.
const SHIPPED_CALIBRATION: &str = include_str!("../presets/sphere_partition.json");

pub fn grid_point(i: usize, j: usize) -> Vector3 {
    let (st, ct) = (i as f64 * STEP).sin_cos();
    let (sp, cp) = (j as f64 * STEP).sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Canonical label: pole rows use j = 0.
fn canonical(i: usize, j: usize) -> (usize, usize) {
    if i == 0 || i == ROWS - 1 {
        (i, 0)
    } else {
        (i, j)
    }
}

/// Flat index of a canonical cell label.
pub fn cell_index(i: usize, j: usize) -> usize {
    match i {
        0 => 0,
        i if i == ROWS - 1 => CELLS - 1,
        i => 1 + (i - 1) * COLS + j,
    }
}

/// Inverse of [`cell_index`].
pub fn cell_label(index: usize) -> (usize, usize) {
    match index {
        0 => (0, 0),
        c if c == CELLS - 1 => (ROWS - 1, 0),
        c => (1 + (c - 1) / COLS, (c - 1) % COLS),
    }
}

/// cos θ on the curve of constant β at azimuth offset with cosine `c`.
fn cos_theta_at(beta: f64, c: f64) -> f64 {
    let (sb, cb) = beta.sin_cos();
    c * cb / (sb * sb + c * c * cb * cb).sqrt()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Area (sr) of one cell in each row, by quadrature.
fn quadrature_row_areas() -> Vec<f64> {
    let mut areas = Vec::with_capacity(ROWS);
    let lo_cap = |delta: f64| 1.0 - cos_theta_at(HALF_STEP, delta.cos());
    let pole = COLS as f64 * simpson(lo_cap, -HALF_STEP, HALF_STEP, QUADRATURE_INTERVALS);
    areas.push(pole);
    for i in 1..ROWS - 1 {
        let centre = i as f64 * STEP;
        let band = |delta: f64| {
            let c = delta.cos();
            cos_theta_at(centre - HALF_STEP, c) - cos_theta_at(centre + HALF_STEP, c)
        };
        areas.push(simpson(band, -HALF_STEP, HALF_STEP, QUADRATURE_INTERVALS));
    }
    areas.push(pole);
    areas
}

/// Serialized cell areas. Areas depend only on the row by the rotational
/// symmetry of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionCalibration {
    pub schema_version: u32,
    pub partition_id: String,
    pub method: String,
    pub area_unit: String,
    pub row_areas: Vec<f64>,
}

impl PartitionCalibration {
    pub fn compute() -> Self {
        Self {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            partition_id: PARTITION_ID.to_string(),
            method: format!("composite Simpson over the azimuth offset, {QUADRATURE_INTERVALS} intervals"),
            area_unit: "steradian".to_string(),
            row_areas: quadrature_row_areas(),
        }
    }

    pub fn shipped() -> Result<Self> {
        Ok(serde_json::from_str(SHIPPED_CALIBRATION)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// The 17×32 nearest-grid-point partition of S².
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePartition {
    row_areas: Vec<f64>,
}

impl Default for SpherePartition {
    fn default() -> Self {
        Self::new()
    }
}

impl SpherePartition {
    /// Loads the shipped calibration.
    pub fn new() -> Self {
        let cal = PartitionCalibration::shipped().expect("shipped partition calibration is valid");
        Self::from_calibration(&cal).expect("shipped partition calibration is valid")
    }

    pub fn from_calibration(cal: &PartitionCalibration) -> Result<Self> {
        if cal.schema_version != CALIBRATION_SCHEMA_VERSION || cal.partition_id != PARTITION_ID {
            return Err(Error::config(format!(
                "unsupported partition calibration {} v{}",
                cal.partition_id, cal.schema_version
            )));
        }
        if cal.row_areas.len() != ROWS || cal.row_areas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("partition calibration needs 17 positive row areas"));
        }
        Ok(Self {
            row_areas: cal.row_areas.clone(),
        })
    }

    pub fn id(&self) -> &'static str {
        PARTITION_ID
    }

    pub fn point(&self, i: usize, j: usize) -> Vector3 {
        grid_point(i, j)
    }

    /// Area (sr) of cell `(i, j)`.
    pub fn area(&self, i: usize, _j: usize) -> f64 {
        self.row_areas[i]
    }

    /// Areas of all cells in flat order.
    pub fn areas(&self) -> Vec<f64> {
        (0..CELLS)
            .map(|c| {
                let (i, j) = cell_label(c);
                self.area(i, j)
            })
            .collect()
    }

    pub fn total_area(&self) -> f64 {
        self.areas().iter().sum()
    }

    /// Nearest grid point of `x`, lexicographically smallest on ties.
    pub fn segment_of(&self, x: UnitVector3) -> (usize, usize) {
        let v = x.vector();
        let theta = v.z.clamp(-1.0, 1.0).acos();
        let phi = v.y.atan2(v.x).rem_euclid(TAU);
        let j0 = ((phi / STEP).round() as usize) % COLS;
        let delta = phi - j0 as f64 * STEP;
        let beta = (delta.cos() * theta.sin()).atan2(theta.cos());
        let i0 = ((beta / STEP).round() as usize).min(ROWS - 1);

        let mut best: Option<((usize, usize), f64)> = None;
        let mut candidates = [(0usize, 0usize); 9];
        let mut count = 0;
        for di in [-1i64, 0, 1] {
            let i = i0 as i64 + di;
            if i < 0 || i >= ROWS as i64 {
                continue;
            }
            for dj in [COLS - 1, 0, 1] {
                let label = canonical(i as usize, (j0 + dj) % COLS);
                if !candidates[..count].contains(&label) {
                    candidates[count] = label;
                    count += 1;
                }
            }
        }
        let dots: Vec<f64> = candidates[..count]
            .iter()
            .map(|&(i, j)| grid_point(i, j).dot(v))
            .collect();
        let top = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (&label, &d) in candidates[..count].iter().zip(&dots) {
            if d >= top - TIE_TOL && best.is_none_or(|(b, _)| label < b) {
                best = Some((label, d));
            }
        }
        best.expect("at least one candidate").0
    }

    /// Reference implementation of [`Self::segment_of`] over all 482 grid points.
    pub fn segment_of_brute(&self, x: UnitVector3) -> (usize, usize) {
        let v = x.vector();
        let labels: Vec<(usize, usize)> = (0..CELLS).map(cell_label).collect();
        let dots: Vec<f64> = labels.iter().map(|&(i, j)| grid_point(i, j).dot(v)).collect();
        let top = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        labels
            .into_iter()
            .zip(dots)
            .filter(|&(_, d)| d >= top - TIE_TOL)
            .map(|(l, _)| l)
            .min()
            .expect("nonempty grid")
    }

    /// Integer cell counts of `samples` in flat order.
    pub fn count<'a>(&self, samples: impl IntoIterator<Item = &'a UnitVector3>) -> Vec<u64> {
        let mut counts = vec![0u64; CELLS];
        for &x in samples {
            let (i, j) = self.segment_of(x);
            counts[cell_index(i, j)] += 1;
        }
        counts
    }
}

/// Piecewise constant density on the sphere partition.
///
/// `counts` are accumulated over `levels` time levels of `n_per_level`
/// samples each; a single snapshot has `levels = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub partition_id: String,
    pub convention: String,
    /// Time label (mean time for averaged grids).
    pub t: f64,
    pub levels: u64,
    pub n_per_level: u64,
    pub counts: Vec<u64>,
    pub areas: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityGrid {
    pub fn from_counts(partition: &SpherePartition, counts: Vec<u64>, levels: u64, n_per_level: u64, t: f64) -> Result<Self> {
        if counts.len() != CELLS {
            return Err(Error::domain(format!("expected {CELLS} cell counts, got {}", counts.len())));
        }
        let total: u64 = counts.iter().sum();
        if levels == 0 || n_per_level == 0 || total != levels * n_per_level {
            return Err(Error::domain(format!(
                "counts sum to {total}, expected {levels} × {n_per_level}"
            )));
        }
        let areas = partition.areas();
        let norm = (levels * n_per_level) as f64;
        let density = counts.iter().zip(&areas).map(|(&c, &a)| c as f64 / (a * norm)).collect();
        Ok(Self {
            partition_id: partition.id().to_string(),
            convention: DENSITY_CONVENTION.to_string(),
            t,
            levels,
            n_per_level,
            counts,
            areas,
            density,
        })
    }

    pub fn n_samples(&self) -> u64 {
        self.levels * self.n_per_level
    }

    /// Σ density·area.
    pub fn total_mass(&self) -> f64 {
        self.density.iter().zip(&self.areas).map(|(d, a)| d * a).sum()
    }

    pub fn density_at(&self, i: usize, j: usize) -> f64 {
        let (i, j) = canonical(i, j);
        self.density[cell_index(i, j)]
    }

    /// Writes `i,j,count,area,density` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "count", "area", "density"])?;
        for (c, ((count, area), density)) in self.counts.iter().zip(&self.areas).zip(&self.density).enumerate() {
            let (i, j) = cell_label(c);
            w.serialize((i, j, count, area, density))?;
        }
        w.flush().map_err(|e| Error::io("writing density csv", e))?;
        Ok(())
    }
}

pub fn empirical_density(samples: &[UnitVector3], partition: &SpherePartition, t: f64) -> Result<DensityGrid> {
    if samples.is_empty() {
        return Err(Error::domain("empirical density needs at least one sample"));
    }
    DensityGrid::from_counts(partition, partition.count(samples), 1, samples.len() as u64, t)
}

/// Cellwise mean of densities with a common sample size per level.
pub fn time_averaged_density(grids: &[DensityGrid]) -> Result<DensityGrid> {
    let first = grids.first().ok_or_else(|| Error::domain("no density grids to average"))?;
    let mut counts = vec![0u64; first.counts.len()];
    let mut levels = 0;
    let mut t = 0.0;
    for g in grids {
        if g.partition_id != first.partition_id || g.n_per_level != first.n_per_level || g.areas != first.areas {
            return Err(Error::domain("density grids use different partitions or sample sizes"));
        }
        for (a, b) in counts.iter_mut().zip(&g.counts) {
            *a += b;
        }
        levels += g.levels;
        t += g.t * g.levels as f64;
    }
    let norm = (levels * first.n_per_level) as f64;
    let density = counts.iter().zip(&first.areas).map(|(&c, &a)| c as f64 / (a * norm)).collect();
    Ok(DensityGrid {
        partition_id: first.partition_id.clone(),
        convention: first.convention.clone(),
        t: t / levels as f64,
        levels,
        n_per_level: first.n_per_level,
        counts,
        areas: first.areas.clone(),
        density,
    })
}

/// Pooled lag-1 autocorrelation of the cell counts across consecutive levels.
pub fn lag1_autocorrelation(grids: &[DensityGrid]) -> Option<f64> {
    if grids.len() < 3 {
        return None;
    }
    let cells = grids[0].counts.len();
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..cells {
        let xs: Vec<f64> = grids.iter().map(|g| g.counts[c] as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        num += xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>();
        den += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    (den > 0.0).then(|| num / den)
}

/// max over cells of |f̂ − 1/(4π)|.
pub fn e_max(grid: &DensityGrid) -> f64 {
    grid.density
        .iter()
        .map(|d| (d - UNIFORM_DENSITY).abs())
        .fold(0.0, f64::max)
}

/// Axes x^S_i of the bundle partition: +x, −x, +y, −y, +z, −z.
pub const BUNDLE_AXES: [Vector3; 6] = [
    Vector3::new(1.0, 0.0, 0.0),
    Vector3::new(-1.0, 0.0, 0.0),
    Vector3::new(0.0, 1.0, 0.0),
    Vector3::new(0.0, -1.0, 0.0),
    Vector3::new(0.0, 0.0, 1.0),
    Vector3::new(0.0, 0.0, -1.0),
];
pub const BUNDLE_SECTORS: usize = 8;
pub const BUNDLE_CELLS: usize = 6 * BUNDLE_SECTORS;
const PROJECTION_TOL: f64 = 1e-12;

/// Sector origin in the plane orthogonal to axis `i`: e_y for ±x, e_x otherwise.
pub fn bundle_reference(i: usize) -> Vector3 {
    if i < 2 {
        Vector3::E_Y
    } else {
        Vector3::E_X
    }
}

/// Index of the nearest axis (lowest index on ties).
pub fn sphere6_segment_of(p: Vector3) -> usize {
    let mut best = 0;
    for (i, axis) in BUNDLE_AXES.iter().enumerate().skip(1) {
        if axis.dot(p) > BUNDLE_AXES[best].dot(p) {
            best = i;
        }
    }
    best
}

/// Cell `(i, j)` of the 6×8 partition of M₁: i is the nearest axis, j the
/// 45° sector of ξ projected onto the plane orthogonal to that axis, counted
/// counterclockwise about the outward axis from [`bundle_reference`].
/// A direction on a sector boundary belongs to the lower sector.
pub fn bundle_segment_of(s: &TangentState) -> Result<(usize, usize)> {
    let i = sphere6_segment_of(s.p.vector());
    let n = BUNDLE_AXES[i];
    let r = bundle_reference(i);
    let q = n.cross(r);
    let (x, y) = (s.xi.dot(r), s.xi.dot(q));
    if x.hypot(y) <= PROJECTION_TOL * s.xi.norm().max(1.0) {
        return Err(Error::DegenerateProjection);
    }
    let psi = y.atan2(x).rem_euclid(TAU);
    let j = ((psi / FRAC_PI_4).ceil() as usize).saturating_sub(1).min(BUNDLE_SECTORS - 1);
    Ok((i, j))
}

/// Occupancy of the 6 sphere cells and the 48 bundle cells.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleCounts {
    pub n: u64,
    pub sphere: Vec<u64>,
    pub bundle: Vec<u64>,
}

impl BundleCounts {
    pub fn new() -> Self {
        Self {
            n: 0,
            sphere: vec![0; 6],
            bundle: vec![0; BUNDLE_CELLS],
        }
    }

    pub fn add(&mut self, s: &TangentState) -> Result<()> {
        let (i, j) = bundle_segment_of(s)?;
        self.n += 1;
        self.sphere[i] += 1;
        self.bundle[BUNDLE_SECTORS * i + j] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &BundleCounts) {
        self.n += other.n;
        for (a, b) in self.sphere.iter_mut().zip(&other.sphere) {
            *a += b;
        }
        for (a, b) in self.bundle.iter_mut().zip(&other.bundle) {
            *a += b;
        }
    }
}

/// Uniform point on S² (Marsaglia's disc method).
pub fn sample_uniform_sphere<R: Rng + ?Sized>(rng: &mut R) -> UnitVector3 {
    loop {
        let u = 2.0 * rng.random::<f64>() - 1.0;
        let v = 2.0 * rng.random::<f64>() - 1.0;
        let s = u * u + v * v;
        if s < 1.0 && s > 0.0 {
            let f = 2.0 * (1.0 - s).sqrt();
            return UnitVector3::from_direction(Vector3::new(u * f, v * f, 1.0 - 2.0 * s))
                .expect("nonzero by construction");
        }
    }
}

/// Orbit measure μ_X: the representative rotated by e^{θB}, θ uniform.
pub fn sample_mu_x<T: OrbitPoint, R: Rng + ?Sized>(representative: &T, b: &AntisymMatrix3, rng: &mut R) -> Result<T> {
    if b.is_zero() {
        return Err(Error::domain("orbit measure needs B ≠ 0"));
    }
    orbit_sample(representative, b, rng.random::<f64>() * TAU)
}

/// ν̄: draw from ν, then spread uniformly over the orbit.
pub fn sample_bar_nu<T, R, F>(initial_sampler: F, b: &AntisymMatrix3, rng: &mut R) -> Result<T>
where
    T: OrbitPoint,
    R: Rng + ?Sized,
    F: FnOnce(&mut R) -> T,
{
    if b.is_zero() {
        return Err(Error::domain("orbit measure needs B ≠ 0"));
    }
    let z = initial_sampler(rng);
    sample_mu_x(&z, b, rng)
}

/// Normalized volume on M_r: p uniform on S², ξ uniform of length r in T_pS².
pub fn sample_mu_r<R: Rng + ?Sized>(r: f64, rng: &mut R) -> Result<TangentState> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("speed r = {r} must be positive")));
    }
    let p = sample_uniform_sphere(rng);
    let pv = p.vector();
    let helper = if pv.x.abs() < 0.5 { Vector3::E_X } else { Vector3::E_Y };
    let e1 = helper.cross(pv).normalized().expect("helper not parallel to p");
    let e2 = pv.cross(e1);
    let (s, c) = (rng.random::<f64>() * TAU).sin_cos();
    Ok(TangentState { p, xi: r * (c * e1 + s * e2) })
}
