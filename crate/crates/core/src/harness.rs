//! Deterministic Monte Carlo ensembles.
//!
//! Paths are processed in fixed chunks of [`CHUNK_SIZE`]. Each chunk
//! accumulates compensated sums and integer counts; chunk partials are then
//! merged in chunk order. Path `p` draws its increments from
//! [`PathRng::new`]`(seed, p, law)`. Results are therefore identical for any
//! number of worker threads and for sequential execution.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{hat, Rotation3, TangentState, UnitVector3, Vector3};
use crate::integrators::{
    exact_commuting_step, geodesic_step, llg_step, so3_step, GeodesicParams, GeodesicState, LlgParams, So3Params,
    DEFAULT_EPS,
};
use crate::measures::{
    cell_index, e_max, sample_mu_r, sample_uniform_sphere, BundleCounts, DensityGrid, SpherePartition, CELLS,
};
use crate::moment_flow::{Ambient, MonomialBasis};
use crate::rng::{IncrementLaw, PathRng};
use crate::stats::{KahanSum, VectorSum};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Paths per work unit.
pub const CHUNK_SIZE: usize = 32;
/// Worker-count override read by [`run_ensemble`].
pub const THREADS_ENV: &str = "SPHERE_SDE_THREADS";
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Initial law on S².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereInitial {
    Point(UnitVector3),
    Uniform,
}

/// Initial law on TS².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentInitial {
    Point { u0: UnitVector3, v0: Vector3 },
    /// Normalized volume on the level set |ξ| = r.
    MuR { r: f64 },
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_probe() -> UnitVector3 {
    UnitVector3::e_z()
}

/// The simulated system and its parameters (without the time step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", content = "params", rename_all = "snake_case")]
pub enum SystemConfig {
    /// Stochastic LLG on S², Algorithm A.
    Llg {
        h: UnitVector3,
        h_perp: Vector3,
        initial: SphereInitial,
    },
    /// `dZ = AZ dt + BZ ∘ dW` on SO(3) from Z₀ = I; A and B given by their
    /// axis vectors. Sphere outputs observe the point `Z · probe`.
    So3 {
        a: Vector3,
        b: Vector3,
        #[serde(default = "default_probe")]
        probe: UnitVector3,
    },
    /// Stochastic geodesic equation on TS², Algorithm B.
    Geodesic {
        d: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        initial: TangentInitial,
    },
    /// Exact solution of the commuting case on S².
    CommutingExact {
        a: Vector3,
        b: Vector3,
        initial: SphereInitial,
    },
}

impl SystemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SystemConfig::Llg { .. } => "llg",
            SystemConfig::So3 { .. } => "so3",
            SystemConfig::Geodesic { .. } => "geodesic",
            SystemConfig::CommutingExact { .. } => "commuting_exact",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    MeanTrajectory,
    Density,
    BundleDensity,
    EMaxSeries,
    Moments,
    FinalStates,
}

/// Record steps, either listed or generated by a rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordTimes {
    Steps(Vec<usize>),
    Rule {
        /// Record every `every` steps, starting at 0.
        #[serde(default)]
        every: Option<usize>,
        /// Also record each of the last `last` steps.
        #[serde(default)]
        last: usize,
    },
}

impl RecordTimes {
    /// Sorted, deduplicated steps for a run of `n_steps` steps.
    pub fn resolve(&self, n_steps: usize) -> Result<Vec<usize>> {
        let mut steps = match self {
            RecordTimes::Steps(s) => {
                if let Some(&bad) = s.iter().find(|&&s| s > n_steps) {
                    return Err(Error::config(format!("record step {bad} exceeds n_steps = {n_steps}")));
                }
                s.clone()
            }
            RecordTimes::Rule { every, last } => {
                let mut s = Vec::new();
                if let Some(e) = every {
                    if *e == 0 {
                        return Err(Error::config("record rule `every` must be ≥ 1"));
                    }
                    s.extend((0..=n_steps).step_by(*e));
                }
                s.extend(n_steps + 1 - (*last).min(n_steps + 1)..=n_steps);
                s.push(n_steps);
                s
            }
        };
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

fn default_moment_degree() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub system: SystemConfig,
    pub n_paths: usize,
    pub n_steps: usize,
    pub k: f64,
    pub seed: u64,
    #[serde(default)]
    pub increments: IncrementLaw,
    pub record_times: RecordTimes,
    pub outputs: Vec<OutputKind>,
    #[serde(default = "default_moment_degree")]
    pub moment_degree: usize,
}

impl EnsembleConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn wants(&self, o: OutputKind) -> bool {
        self.outputs.contains(&o)
    }

    pub fn t_end(&self) -> f64 {
        self.n_steps as f64 * self.k
    }

    /// Sets `n_steps = round(t_end / k)`.
    pub fn set_t_end(&mut self, t_end: f64) {
        self.n_steps = (t_end / self.k).round() as usize;
    }

    pub fn record_steps(&self) -> Result<Vec<usize>> {
        self.record_times.resolve(self.n_steps)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be ≥ 1"));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config(format!("time step k = {} must be positive", self.k)));
        }
        self.record_steps()?;
        if self.wants(OutputKind::Moments) {
            let ambient = match self.system {
                SystemConfig::So3 { .. } => Ambient::RotationGroup,
                _ => Ambient::Sphere,
            };
            MonomialBasis::new(ambient, self.moment_degree)?;
        }
        let geodesic = matches!(self.system, SystemConfig::Geodesic { .. });
        if self.wants(OutputKind::BundleDensity) && !geodesic {
            return Err(Error::config("bundle_density needs the geodesic system"));
        }
        match &self.system {
            SystemConfig::Llg { h, h_perp, .. } => {
                LlgParams::new(*h, *h_perp, self.k)?;
            }
            SystemConfig::So3 { .. } => {}
            SystemConfig::Geodesic { d, eps, initial } => {
                let p = GeodesicParams::new(*d, self.k, *eps)?;
                let speed = match initial {
                    TangentInitial::Point { u0, v0 } => {
                        TangentState::new(*u0, *v0)?;
                        v0.norm()
                    }
                    TangentInitial::MuR { r } => {
                        if !(*r > 0.0) {
                            return Err(Error::config("μ_r needs r > 0"));
                        }
                        *r
                    }
                };
                p.check_step_size(speed)?;
            }
            SystemConfig::CommutingExact { a, b, .. } => {
                if a.cross(*b).norm() > crate::integrators::COMMUTING_TOL {
                    return Err(Error::config("commuting_exact needs parallel axes a ∥ b"));
                }
            }
        }
        Ok(())
    }
}

/// Names of the bundled presets.
pub const PRESET_NAMES: [&str; 7] = [
    "paper-fig-commuting",
    "paper-fig-noncommuting",
    "desk-noncommuting",
    "paper-fig-geodesic",
    "desk-geodesic",
    "so3-noncommuting",
    "commuting-exact",
];

pub fn preset(name: &str) -> Result<EnsembleConfig> {
    let text = match name {
        "paper-fig-commuting" => include_str!("../presets/paper-fig-commuting.json"),
        "paper-fig-noncommuting" => include_str!("../presets/paper-fig-noncommuting.json"),
        "desk-noncommuting" => include_str!("../presets/desk-noncommuting.json"),
        "paper-fig-geodesic" => include_str!("../presets/paper-fig-geodesic.json"),
        "desk-geodesic" => include_str!("../presets/desk-geodesic.json"),
        "so3-noncommuting" => include_str!("../presets/so3-noncommuting.json"),
        "commuting-exact" => include_str!("../presets/commuting-exact.json"),
        _ => {
            return Err(Error::config(format!(
                "unknown preset `{name}` (available: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    EnsembleConfig::from_json(text)
}

/// Maximal invariant violations seen over all paths and steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// max | |z| − 1 | (sphere systems, probe point for SO(3)).
    pub max_norm_defect: f64,
    /// LLG: max |𝓔(Zⁿ) − 𝓔(Z⁰)|; geodesic: max |E(Vⁿ) − E(V⁰)|; commuting
    /// exact: max |⟨Z, b̂⟩ − ⟨Z⁰, b̂⟩|.
    pub max_energy_drift: f64,
    /// Geodesic only: max over n ≥ 1 of |E(Vⁿ) − E(V¹)|.
    pub max_energy_drift_after_start: f64,
    /// SO(3) only: max ‖ZᵀZ − I‖ and max |det Z − 1|.
    pub max_orthogonality_defect: f64,
    pub max_determinant_defect: f64,
}

impl Diagnostics {
    fn merge(&mut self, o: &Diagnostics) {
        self.max_norm_defect = self.max_norm_defect.max(o.max_norm_defect);
        self.max_energy_drift = self.max_energy_drift.max(o.max_energy_drift);
        self.max_energy_drift_after_start = self.max_energy_drift_after_start.max(o.max_energy_drift_after_start);
        self.max_orthogonality_defect = self.max_orthogonality_defect.max(o.max_orthogonality_defect);
        self.max_determinant_defect = self.max_determinant_defect.max(o.max_determinant_defect);
    }
}

/// Final state of one path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FinalState {
    Sphere(UnitVector3),
    Tangent { u: UnitVector3, v: Vector3 },
    Rotation([f64; 9]),
}

/// Ensemble aggregates at one record step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vector3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_velocity: Option<Vector3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_matrix: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub library_version: String,
    pub config_hash: String,
    pub config: EnsembleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_basis: Option<MonomialBasis>,
    pub diagnostics: Diagnostics,
    pub records: Vec<Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_states: Option<Vec<FinalState>>,
    /// Not serialized, so that reruns emit identical bytes.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EnsembleResult {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_record(&self) -> Option<&Record> {
        self.records.last()
    }

    /// Density grids at the recorded steps, in step order.
    pub fn densities(&self) -> Result<Vec<&DensityGrid>> {
        self.records
            .iter()
            .map(|r| r.density.as_ref().ok_or_else(|| Error::AbsentOutput("density".into())))
            .collect()
    }

    /// (t, E_max) at the recorded steps.
    pub fn e_max_series(&self) -> Result<Vec<(f64, f64)>> {
        self.records
            .iter()
            .map(|r| r.e_max.map(|e| (r.t, e)).ok_or_else(|| Error::AbsentOutput("e_max_series".into())))
            .collect()
    }
}

/// How to schedule chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Worker threads; `None` reads [`THREADS_ENV`], then the rayon default.
    pub threads: Option<usize>,
}

/// Mean position series; errors unless `mean_trajectory` was recorded.
pub fn mean_trajectory(result: &EnsembleResult) -> Result<Vec<(f64, Vector3)>> {
    if !result.config.wants(OutputKind::MeanTrajectory) {
        return Err(Error::AbsentOutput("mean_trajectory".into()));
    }
    result
        .records
        .iter()
        .map(|r| r.mean.map(|m| (r.t, m)).ok_or_else(|| Error::AbsentOutput("mean_trajectory".into())))
        .collect()
}

/// Per-record partial sums of one chunk.
#[derive(Clone, Debug)]
struct RecordPartial {
    mean: VectorSum,
    mean_velocity: VectorSum,
    mean_matrix: [KahanSum; 9],
    moments: Vec<KahanSum>,
    counts: Vec<u64>,
    bundle: BundleCounts,
}

impl RecordPartial {
    fn new(n_moments: usize, with_counts: bool, with_bundle: bool) -> Self {
        Self {
            mean: VectorSum::default(),
            mean_velocity: VectorSum::default(),
            mean_matrix: [KahanSum::new(); 9],
            moments: vec![KahanSum::new(); n_moments],
            counts: if with_counts { vec![0; CELLS] } else { Vec::new() },
            bundle: if with_bundle { BundleCounts::new() } else { BundleCounts::default() },
        }
    }

    fn merge(&mut self, o: &RecordPartial) {
        self.mean.merge(&o.mean);
        self.mean_velocity.merge(&o.mean_velocity);
        for (a, b) in self.mean_matrix.iter_mut().zip(&o.mean_matrix) {
            a.merge(b);
        }
        for (a, b) in self.moments.iter_mut().zip(&o.moments) {
            a.merge(b);
        }
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        if !o.bundle.sphere.is_empty() {
            self.bundle.merge(&o.bundle);
        }
    }
}

struct ChunkPartial {
    records: Vec<RecordPartial>,
    diagnostics: Diagnostics,
    finals: Vec<FinalState>,
}

/// State of one path.
#[derive(Clone, Copy, Debug)]
enum PathState {
    Sphere(UnitVector3),
    Rotation(Rotation3),
    Tangent(GeodesicState),
    Exact { z0: UnitVector3, w: f64, z: UnitVector3 },
}

/// Everything a path needs, resolved once per run.
struct Plan<'a> {
    cfg: &'a EnsembleConfig,
    records: Vec<usize>,
    partition: Option<SpherePartition>,
    basis: Option<MonomialBasis>,
    llg: Option<LlgParams>,
    so3: Option<(So3Params, UnitVector3)>,
    geodesic: Option<GeodesicParams>,
    exact: Option<(crate::geometry::AntisymMatrix3, crate::geometry::AntisymMatrix3)>,
}

impl<'a> Plan<'a> {
    fn new(cfg: &'a EnsembleConfig) -> Result<Self> {
        cfg.validate()?;
        let needs_grid = cfg.wants(OutputKind::Density) || cfg.wants(OutputKind::EMaxSeries);
        let basis = if cfg.wants(OutputKind::Moments) {
            let ambient = match cfg.system {
                SystemConfig::So3 { .. } => Ambient::RotationGroup,
                _ => Ambient::Sphere,
            };
            Some(MonomialBasis::new(ambient, cfg.moment_degree)?)
        } else {
            None
        };
        let mut plan = Plan {
            cfg,
            records: cfg.record_steps()?,
            partition: needs_grid.then(SpherePartition::new),
            basis,
            llg: None,
            so3: None,
            geodesic: None,
            exact: None,
        };
        match &cfg.system {
            SystemConfig::Llg { h, h_perp, .. } => plan.llg = Some(LlgParams::new(*h, *h_perp, cfg.k)?),
            SystemConfig::So3 { a, b, probe } => {
                plan.so3 = Some((
                    So3Params {
                        a: hat(*a),
                        b: hat(*b),
                        k: cfg.k,
                    },
                    *probe,
                ))
            }
            SystemConfig::Geodesic { d, eps, .. } => plan.geodesic = Some(GeodesicParams::new(*d, cfg.k, *eps)?),
            SystemConfig::CommutingExact { a, b, .. } => plan.exact = Some((hat(*a), hat(*b))),
        }
        Ok(plan)
    }

    fn initial(&self, rng: &mut PathRng) -> Result<PathState> {
        let sphere = |init: &SphereInitial, rng: &mut PathRng| match init {
            SphereInitial::Point(z) => *z,
            SphereInitial::Uniform => sample_uniform_sphere(rng.aux()),
        };
        Ok(match &self.cfg.system {
            SystemConfig::Llg { initial, .. } => PathState::Sphere(sphere(initial, rng)),
            SystemConfig::So3 { .. } => PathState::Rotation(Rotation3::identity()),
            SystemConfig::Geodesic { initial, .. } => {
                let s = match initial {
                    TangentInitial::Point { u0, v0 } => TangentState::new(*u0, *v0)?,
                    TangentInitial::MuR { r } => sample_mu_r(*r, rng.aux())?,
                };
                PathState::Tangent(GeodesicState::start(&s, self.cfg.k))
            }
            SystemConfig::CommutingExact { initial, .. } => {
                let z0 = sphere(initial, rng);
                PathState::Exact { z0, w: 0.0, z: z0 }
            }
        })
    }

    fn advance(&self, state: &mut PathState, step: usize, dw: f64, exact_needed: bool) -> Result<()> {
        match state {
            PathState::Sphere(z) => *z = llg_step(*z, self.llg.as_ref().expect("llg params"), dw)?,
            PathState::Rotation(r) => *r = so3_step(r, &self.so3.as_ref().expect("so3 params").0, dw)?,
            PathState::Tangent(g) => *g = geodesic_step(g, self.geodesic.as_ref().expect("geodesic params"), dw)?,
            PathState::Exact { z0, w, z } => {
                *w += dw;
                if exact_needed {
                    let (a, b) = self.exact.as_ref().expect("exact params");
                    *z = exact_commuting_step(z0, a, b, (step + 1) as f64 * self.cfg.k, *w)?;
                }
            }
        }
        Ok(())
    }

    /// The point on S² observed by sphere outputs.
    fn observed(&self, state: &PathState) -> UnitVector3 {
        match state {
            PathState::Sphere(z) | PathState::Exact { z, .. } => *z,
            PathState::Rotation(r) => r.rotate(self.so3.as_ref().expect("so3 params").1),
            PathState::Tangent(g) => g.u,
        }
    }

    fn record(&self, state: &PathState, part: &mut RecordPartial) {
        let z = self.observed(state);
        part.mean.add(z.vector());
        if let PathState::Tangent(g) = state {
            part.mean_velocity.add(g.v);
            if self.cfg.wants(OutputKind::BundleDensity) {
                // Sectors depend on the direction of ξ only.
                let s = TangentState { p: g.u, xi: g.v };
                if part.bundle.add(&s).is_err() {
                    // Zero velocity has no sector; count it in the sphere cells only.
                    part.bundle.n += 1;
                    part.bundle.sphere[crate::measures::sphere6_segment_of(g.u.vector())] += 1;
                }
            }
        }
        if let PathState::Rotation(r) = state {
            for (a, x) in part.mean_matrix.iter_mut().zip(r.entries()) {
                a.add(x);
            }
        }
        if let Some(basis) = &self.basis {
            let values = match state {
                PathState::Rotation(r) => basis.evaluate(&r.entries()),
                _ => basis.evaluate(&z.vector().to_array()),
            };
            for (a, v) in part.moments.iter_mut().zip(values) {
                a.add(v);
            }
        }
        if let Some(p) = &self.partition {
            let (i, j) = p.segment_of(z);
            part.counts[cell_index(i, j)] += 1;
        }
    }

    fn update_diagnostics(&self, d: &mut Diagnostics, state: &PathState, start: &PathState, first_energy: &mut Option<f64>) {
        match (state, start) {
            (PathState::Sphere(z), PathState::Sphere(z0)) => {
                let p = self.llg.as_ref().expect("llg params");
                d.max_norm_defect = d.max_norm_defect.max(z.norm_defect());
                d.max_energy_drift = d.max_energy_drift.max((p.energy(*z) - p.energy(*z0)).abs());
            }
            (PathState::Rotation(r), _) => {
                d.max_orthogonality_defect = d.max_orthogonality_defect.max(r.orthogonality_defect());
                d.max_determinant_defect = d.max_determinant_defect.max(r.determinant_defect());
                d.max_norm_defect = d.max_norm_defect.max(self.observed(state).norm_defect());
            }
            (PathState::Tangent(g), PathState::Tangent(g0)) => {
                d.max_norm_defect = d.max_norm_defect.max(g.u.norm_defect());
                let e = g.energy();
                d.max_energy_drift = d.max_energy_drift.max((e - g0.energy()).abs());
                let e1 = *first_energy.get_or_insert(e);
                d.max_energy_drift_after_start = d.max_energy_drift_after_start.max((e - e1).abs());
            }
            (PathState::Exact { z, .. }, PathState::Exact { z0, .. }) => {
                d.max_norm_defect = d.max_norm_defect.max(z.norm_defect());
                let (_, b) = self.exact.as_ref().expect("exact params");
                let axis = b.axis();
                if axis.norm() > 0.0 {
                    let axis = axis * (1.0 / axis.norm());
                    d.max_energy_drift = d.max_energy_drift.max((z.dot(axis) - z0.dot(axis)).abs());
                }
            }
            _ => unreachable!("state kind is fixed per run"),
        }
    }

    fn new_partials(&self) -> Vec<RecordPartial> {
        let n_moments = self.basis.as_ref().map_or(0, MonomialBasis::len);
        let bundle = self.cfg.wants(OutputKind::BundleDensity);
        self.records
            .iter()
            .map(|_| RecordPartial::new(n_moments, self.partition.is_some(), bundle))
            .collect()
    }

    fn run_chunk(&self, chunk: usize) -> Result<ChunkPartial> {
        let cfg = self.cfg;
        let mut out = ChunkPartial {
            records: self.new_partials(),
            diagnostics: Diagnostics::default(),
            finals: Vec::new(),
        };
        let want_finals = cfg.wants(OutputKind::FinalStates);
        let lo = chunk * CHUNK_SIZE;
        let hi = (lo + CHUNK_SIZE).min(cfg.n_paths);
        for path in lo..hi {
            let mut rng = PathRng::new(cfg.seed, path as u64, cfg.increments);
            let wrap = |step: usize| move |e: Error| Error::Path { path, step, source: Box::new(e) };
            let start = self.initial(&mut rng).map_err(wrap(0))?;
            let mut state = start;
            let mut first_energy = None;
            let mut next_record = 0;
            if self.records.first() == Some(&0) {
                self.record(&state, &mut out.records[0]);
                next_record = 1;
            }
            for step in 0..cfg.n_steps {
                let dw = rng.increment(cfg.k);
                let at_record = self.records.get(next_record) == Some(&(step + 1));
                let exact_needed = at_record || step + 1 == cfg.n_steps;
                self.advance(&mut state, step, dw, exact_needed).map_err(wrap(step))?;
                if !matches!(state, PathState::Exact { .. }) || exact_needed {
                    self.update_diagnostics(&mut out.diagnostics, &state, &start, &mut first_energy);
                }
                if at_record {
                    self.record(&state, &mut out.records[next_record]);
                    next_record += 1;
                }
            }
            if want_finals {
                out.finals.push(match state {
                    PathState::Sphere(z) | PathState::Exact { z, .. } => FinalState::Sphere(z),
                    PathState::Rotation(r) => FinalState::Rotation(r.entries()),
                    PathState::Tangent(g) => FinalState::Tangent { u: g.u, v: g.v },
                });
            }
        }
        Ok(out)
    }

    fn finish(&self, partials: Vec<ChunkPartial>) -> Result<EnsembleResult> {
        let cfg = self.cfg;
        let mut records = self.new_partials();
        let mut diagnostics = Diagnostics::default();
        let mut finals = Vec::new();
        for p in &partials {
            for (a, b) in records.iter_mut().zip(&p.records) {
                a.merge(b);
            }
            diagnostics.merge(&p.diagnostics);
            finals.extend_from_slice(&p.finals);
        }
        let n = cfg.n_paths as f64;
        let geodesic = matches!(cfg.system, SystemConfig::Geodesic { .. });
        let so3 = matches!(cfg.system, SystemConfig::So3 { .. });
        let mut out = Vec::with_capacity(records.len());
        for (&step, part) in self.records.iter().zip(records) {
            let t = step as f64 * cfg.k;
            let density = match &self.partition {
                Some(p) => Some(DensityGrid::from_counts(p, part.counts, 1, cfg.n_paths as u64, t)?),
                None => None,
            };
            out.push(Record {
                step,
                t,
                mean: Some(part.mean.value() * (1.0 / n)),
                mean_velocity: geodesic.then(|| part.mean_velocity.value() * (1.0 / n)),
                mean_matrix: so3.then(|| part.mean_matrix.map(|s| s.value() / n)),
                moments: self
                    .basis
                    .as_ref()
                    .map(|_| part.moments.iter().map(|s| s.value() / n).collect()),
                e_max: if cfg.wants(OutputKind::EMaxSeries) {
                    density.as_ref().map(e_max)
                } else {
                    None
                },
                density: if cfg.wants(OutputKind::Density) { density } else { None },
                bundle: cfg.wants(OutputKind::BundleDensity).then_some(part.bundle),
            });
        }
        Ok(EnsembleResult {
            library_version: LIBRARY_VERSION.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            moment_basis: self.basis.clone(),
            diagnostics,
            records: out,
            final_states: cfg.wants(OutputKind::FinalStates).then_some(finals),
            wall_time_secs: 0.0,
        })
    }
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// First error in chunk order, so failures are reported deterministically.
fn collect_in_order(results: Vec<Result<ChunkPartial>>) -> Result<Vec<ChunkPartial>> {
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn run_parallel(plan: &Plan, n_chunks: usize, threads: Option<usize>) -> Result<Vec<ChunkPartial>> {
    use rayon::prelude::*;
    let work = || -> Vec<Result<ChunkPartial>> { (0..n_chunks).into_par_iter().map(|c| plan.run_chunk(c)).collect() };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    collect_in_order(results)
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(plan: &Plan, n_chunks: usize, _threads: Option<usize>) -> Result<Vec<ChunkPartial>> {
    run_sequential(plan, n_chunks)
}

fn run_sequential(plan: &Plan, n_chunks: usize) -> Result<Vec<ChunkPartial>> {
    collect_in_order((0..n_chunks).map(|c| plan.run_chunk(c)).collect())
}

/// Runs the ensemble with default options (parallel when available).
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleResult> {
    run_ensemble_with(config, RunOptions::default())
}

pub fn run_ensemble_with(config: &EnsembleConfig, options: RunOptions) -> Result<EnsembleResult> {
    let started = Instant::now();
    let plan = Plan::new(config)?;
    let n_chunks = config.n_paths.div_ceil(CHUNK_SIZE);
    let partials = match options.execution {
        Execution::Parallel => {
            let threads = match options.threads {
                Some(n) => Some(n),
                None => env_threads()?,
            };
            run_parallel(&plan, n_chunks, threads)?
        }
        Execution::Sequential => run_sequential(&plan, n_chunks)?,
    };
    let mut result = plan.finish(partials)?;
    result.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Writes the result.
///
/// JSON writes the full result. CSV writes the mean trajectory
/// (`t,mean_x,mean_y,mean_z`) to `path`, plus `<stem>.density.csv` with the
/// last recorded density grid and `<stem>.e_max.csv` (`t,e_max`) when those
/// outputs were recorded.
pub fn emit(result: &EnsembleResult, format: Format, path: &Path) -> Result<Vec<PathBuf>> {
    match format {
        Format::Json => {
            let mut f = create(path)?;
            f.write_all(result.to_json()?.as_bytes())
                .and_then(|_| f.write_all(b"\n"))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            Ok(vec![path.to_path_buf()])
        }
        Format::Csv => {
            let mut written = Vec::new();
            let mut w = csv::Writer::from_writer(create(path)?);
            w.write_record(["t", "mean_x", "mean_y", "mean_z"])?;
            for r in &result.records {
                if let Some(m) = r.mean {
                    w.serialize((r.t, m.x, m.y, m.z))?;
                }
            }
            w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            written.push(path.to_path_buf());

            if let Some(grid) = result.records.iter().rev().find_map(|r| r.density.as_ref()) {
                let p = sibling(path, "density");
                grid.write_csv(create(&p)?)?;
                written.push(p);
            }
            if let Ok(series) = result.e_max_series() {
                let p = sibling(path, "e_max");
                let mut w = csv::Writer::from_writer(create(&p)?);
                w.write_record(["t", "e_max"])?;
                for (t, e) in series {
                    w.serialize((t, e))?;
                }
                w.flush().map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
                written.push(p);
            }
            Ok(written)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_1_SQRT_2;

    use super::*;

    fn commuting(n_paths: usize, n_steps: usize) -> EnsembleConfig {
        EnsembleConfig {
            schema_version: 1,
            name: None,
            system: SystemConfig::Llg {
                h: UnitVector3::e_z(),
                h_perp: Vector3::ZERO,
                initial: SphereInitial::Point(UnitVector3::new(Vector3::new(0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2)).unwrap()),
            },
            n_paths,
            n_steps,
            k: 0.01,
            seed: 1,
            increments: IncrementLaw::Gaussian,
            record_times: RecordTimes::Rule { every: Some(10), last: 0 },
            outputs: vec![OutputKind::MeanTrajectory, OutputKind::Moments, OutputKind::Density, OutputKind::EMaxSeries],
            moment_degree: 2,
        }
    }

    #[test]
    fn record_rules() {
        let r = RecordTimes::Rule { every: Some(4), last: 3 };
        assert_eq!(r.resolve(10).unwrap(), vec![0, 4, 8, 9, 10]);
        assert_eq!(RecordTimes::Rule { every: None, last: 0 }.resolve(5).unwrap(), vec![5]);
        assert!(RecordTimes::Steps(vec![3, 11]).resolve(10).is_err());
        assert_eq!(RecordTimes::Steps(vec![3, 1, 3]).resolve(10).unwrap(), vec![1, 3]);
    }

    #[test]
    fn single_path_without_steps_returns_initial_state() {
        let mut cfg = commuting(1, 0);
        cfg.record_times = RecordTimes::Steps(vec![0]);
        let r = run_ensemble(&cfg).unwrap();
        let traj = mean_trajectory(&r).unwrap();
        assert_eq!(traj, vec![(0.0, Vector3::new(0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2))]);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let cfg = commuting(100, 50);
        let a = run_ensemble_with(&cfg, RunOptions { execution: Execution::Sequential, threads: None }).unwrap();
        let b = run_ensemble_with(&cfg, RunOptions { execution: Execution::Parallel, threads: Some(3) }).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let cfg = commuting(10, 10);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"system\":\"llg\""));
        let back = EnsembleConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn config_validation() {
        let mut cfg = commuting(0, 10);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_paths = 1;
        cfg.outputs.push(OutputKind::BundleDensity);
        assert!(cfg.validate().is_err());
        let mut g = preset("desk-geodesic").unwrap();
        g.k = 0.1;
        assert!(matches!(g.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_load() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.name.as_deref(), Some(name));
        }
        assert!(preset("nope").is_err());
        let p = preset("paper-fig-noncommuting").unwrap();
        assert_eq!((p.n_paths, p.k, p.t_end()), (20_000, 0.01, 60.0));
        match p.system {
            SystemConfig::Llg { h, h_perp, initial } => {
                assert_eq!(h, UnitVector3::e_z());
                assert_eq!(h_perp, Vector3::E_Y);
                assert_eq!(
                    initial,
                    SphereInitial::Point(UnitVector3::new(Vector3::new(0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2)).unwrap())
                );
            }
            _ => panic!("wrong system"),
        }
    }

    #[test]
    fn absent_outputs_are_reported() {
        let mut cfg = commuting(4, 5);
        cfg.outputs = vec![OutputKind::Moments];
        let r = run_ensemble(&cfg).unwrap();
        assert!(matches!(mean_trajectory(&r), Err(Error::AbsentOutput(_))));
        assert!(r.e_max_series().is_err());
        assert!(r.densities().is_err());
    }

    #[test]
    fn nonconvergence_reports_path_and_step() {
        let mut cfg = commuting(3, 5);
        cfg.system = SystemConfig::Llg {
            h: UnitVector3::e_z(),
            h_perp: Vector3::new(40.0, 0.0, 0.0),
            initial: SphereInitial::Uniform,
        };
        cfg.k = 0.5;
        match run_ensemble(&cfg) {
            Err(Error::Path { path: 0, source, .. }) => assert!(source.is_numerical()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
