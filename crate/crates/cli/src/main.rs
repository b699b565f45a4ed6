use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sphere_sde::geometry::{hat, UnitVector3, Vector3};
use sphere_sde::harness::{
    emit, mean_trajectory, preset, run_ensemble, EnsembleConfig, EnsembleResult, Format, SphereInitial, SystemConfig,
    TangentInitial,
};
use sphere_sde::lie::{bracket_closure, hormander_verdict};
use sphere_sde::measures::{e_max, lag1_autocorrelation, time_averaged_density, PartitionCalibration, UNIFORM_DENSITY};
use sphere_sde::moment_flow::{evolve_moments, generator_matrix, limiting_moments, MonomialBasis};
use sphere_sde::stats::clt_envelope;
use sphere_sde::Error;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "sphere-sde", version, about = "Structure-preserving SDE ensembles on S², SO(3) and TS²")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stochastic LLG ensemble (midpoint scheme)
    Llg(RunArgs),
    /// Linear SDE ensemble on SO(3) (Cayley scheme)
    So3(RunArgs),
    /// Stochastic geodesic ensemble on TS²
    Geodesic(RunArgs),
    /// Moment flow of the generator on polynomials of bounded degree
    Moments(MomentArgs),
    /// Bracket-closure rank and Hörmander verdict for a pair A, B
    Hormander(HormanderArgs),
    /// Density diagnostics of a stored ensemble result
    DensityReport(DensityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled preset name
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Noise intensity (geodesic only)
    #[arg(long)]
    d: Option<f64>,
    /// Output file; JSON goes to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: OutFormat,
}

fn parse_vector(s: &str) -> Result<Vector3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("expected three comma-separated numbers, got `{s}`")),
    }
}

#[derive(Args)]
struct HormanderArgs {
    /// Axis vector of the drift A
    #[arg(long, value_parser = parse_vector, allow_hyphen_values = true)]
    a: Vector3,
    /// Axis vector of the noise B
    #[arg(long, value_parser = parse_vector, allow_hyphen_values = true)]
    b: Vector3,
}

#[derive(Args)]
struct MomentArgs {
    /// Take A, B and z₀ from a run configuration
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_vector, allow_hyphen_values = true)]
    a: Option<Vector3>,
    #[arg(long, value_parser = parse_vector, allow_hyphen_values = true)]
    b: Option<Vector3>,
    #[arg(long, value_parser = parse_vector, allow_hyphen_values = true)]
    z0: Option<Vector3>,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    /// Evolution time; the t → ∞ limit is always reported
    #[arg(long)]
    t_end: Option<f64>,
    /// Ensemble result to compare against, record by record
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    /// Ensemble result (JSON) with recorded densities
    #[arg(long, required_unless_present = "write_calibration")]
    input: Option<PathBuf>,
    /// Number of final levels in the time average
    #[arg(long, default_value_t = 100)]
    window: usize,
    /// CSV output of the time-averaged density
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute the partition areas and write them to this file
    #[arg(long)]
    write_calibration: Option<PathBuf>,
}

fn load_config(config: &Option<PathBuf>, preset_name: &Option<String>, default: &str) -> Result<EnsembleConfig, Error> {
    match (config, preset_name) {
        (Some(path), _) => EnsembleConfig::load(path),
        (None, Some(name)) => preset(name),
        (None, None) => preset(default),
    }
}

fn run(kind: &str, default: &str, args: RunArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config, &args.preset, default)?;
    if cfg.system.name() != kind && !(kind == "llg" && cfg.system.name() == "commuting_exact") {
        return Err(Error::Config(format!(
            "configuration describes a `{}` system, not `{kind}`",
            cfg.system.name()
        )));
    }
    let t_end = args.t_end.unwrap_or(cfg.t_end());
    if let Some(k) = args.k {
        cfg.k = k;
    }
    cfg.set_t_end(t_end);
    if let Some(n) = args.n_paths {
        cfg.n_paths = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d_new) = args.d {
        match &mut cfg.system {
            SystemConfig::Geodesic { d, .. } => *d = d_new,
            _ => return Err(Error::Config("--d applies to the geodesic system only".into())),
        }
    }
    cfg.validate()?;

    let result = run_ensemble(&cfg)?;
    report(&result);
    match (&args.out, args.format) {
        (Some(path), f) => {
            let format = match f {
                OutFormat::Json => Format::Json,
                OutFormat::Csv => Format::Csv,
            };
            for p in emit(&result, format, path)? {
                eprintln!("wrote {}", p.display());
            }
        }
        (None, OutFormat::Json) => say!("{}", result.to_json()?),
        (None, OutFormat::Csv) => return Err(Error::Config("--format csv needs --out".into())),
    }
    Ok(())
}

fn report(r: &EnsembleResult) {
    let c = &r.config;
    eprintln!(
        "{} | {} paths × {} steps, k = {}, seed {} | {:.2} s",
        c.name.as_deref().unwrap_or(c.system.name()),
        c.n_paths,
        c.n_steps,
        c.k,
        c.seed,
        r.wall_time_secs
    );
    if let Ok(traj) = mean_trajectory(r) {
        if let Some((t, m)) = traj.last() {
            eprintln!(
                "E[z]({t}) = ({:+.5}, {:+.5}, {:+.5}), |E[z]| = {:.5}, 4/√N = {:.5}",
                m.x,
                m.y,
                m.z,
                m.norm(),
                clt_envelope(c.n_paths as u64)
            );
        }
    }
    let d = &r.diagnostics;
    eprintln!(
        "max | |z| − 1 | = {:.2e}, max energy drift = {:.2e}",
        d.max_norm_defect, d.max_energy_drift
    );
    if let Some(e) = r.final_record().and_then(|rec| rec.e_max) {
        eprintln!("E_max(T) = {e:.5}");
    }
}

fn moments(args: MomentArgs) -> Result<(), Error> {
    let from_config = if args.config.is_some() || args.preset.is_some() {
        Some(load_config(&args.config, &args.preset, "")?)
    } else {
        None
    };
    let (mut a, mut b, mut z0) = (None, None, None);
    if let Some(cfg) = &from_config {
        match &cfg.system {
            SystemConfig::Llg { h, h_perp, initial } => {
                a = Some(h.vector());
                b = Some(h.vector() + *h_perp);
                if let SphereInitial::Point(z) = initial {
                    z0 = Some(z.vector());
                }
            }
            SystemConfig::CommutingExact { a: ax, b: bx, initial } => {
                a = Some(*ax);
                b = Some(*bx);
                if let SphereInitial::Point(z) = initial {
                    z0 = Some(z.vector());
                }
            }
            SystemConfig::Geodesic { initial: TangentInitial::Point { u0, .. }, .. } => z0 = Some(u0.vector()),
            _ => {}
        }
    }
    let a = args.a.or(a).ok_or_else(|| Error::Config("drift axis --a is required".into()))?;
    let b = args.b.or(b).ok_or_else(|| Error::Config("noise axis --b is required".into()))?;
    let z0 = UnitVector3::new(args.z0.or(z0).unwrap_or(Vector3::E_Z))?;

    let g = generator_matrix(&hat(a), &[hat(b)], args.degree)?;
    let basis: &MonomialBasis = g.basis();
    let m0 = basis.evaluate(&z0.vector().to_array());
    let mut doc = serde_json::json!({
        "basis": basis.exponents(),
        "initial": m0,
        "bounded_ratio": g.check_bounded()?,
    });
    match limiting_moments(&g, &m0) {
        Ok(lim) => doc["limit"] = serde_json::json!(lim),
        Err(e @ Error::SpectralAnomaly { .. }) => doc["limit_error"] = serde_json::json!(e.to_string()),
        Err(e) => return Err(e),
    }
    if let Some(t) = args.t_end {
        doc["t"] = serde_json::json!(t);
        doc["moments"] = serde_json::json!(evolve_moments(&g, &m0, t)?);
    }
    if let Some(path) = &args.compare {
        let result = EnsembleResult::load(path)?;
        let ens_basis = result
            .moment_basis
            .as_ref()
            .ok_or_else(|| Error::AbsentOutput("moments".into()))?;
        if ens_basis != basis {
            return Err(Error::Config("ensemble moments use a different basis".into()));
        }
        let envelope = clt_envelope(result.config.n_paths as u64);
        let mut rows = Vec::new();
        let mut worst: f64 = 0.0;
        for rec in &result.records {
            let observed = rec.moments.as_ref().ok_or_else(|| Error::AbsentOutput("moments".into()))?;
            let predicted = evolve_moments(&g, &m0, rec.t)?;
            let dev = observed
                .iter()
                .zip(&predicted)
                .map(|(o, p)| (o - p).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
            rows.push(serde_json::json!({"t": rec.t, "max_deviation": dev}));
        }
        eprintln!("max moment deviation {worst:.5} against envelope 4/√N = {envelope:.5}");
        doc["comparison"] = serde_json::json!({"envelope": envelope, "max_deviation": worst, "records": rows});
    }
    let text = serde_json::to_string_pretty(&doc)?;
    match &args.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io {
            context: format!("writing {}", p.display()),
            source: e,
        })?,
        None => say!("{text}"),
    }
    Ok(())
}

fn hormander(args: HormanderArgs) -> Result<(), Error> {
    let (a, b) = (hat(args.a), hat(args.b));
    let verdict = hormander_verdict(&a, &b);
    let closure = bracket_closure(&[a, b])?;
    say!("{verdict}");
    eprintln!("bracket closure dimension {}", closure.rank);
    Ok(())
}

fn density_report(args: DensityArgs) -> Result<(), Error> {
    if let Some(path) = &args.write_calibration {
        PartitionCalibration::compute().write_json(path)?;
        eprintln!("wrote {}", path.display());
        if args.input.is_none() {
            return Ok(());
        }
    }
    let path: &Path = args.input.as_deref().expect("required by clap");
    let result = EnsembleResult::load(path)?;
    let grids = result.densities()?;
    let window = args.window.clamp(1, grids.len());
    let tail: Vec<_> = grids[grids.len() - window..].iter().map(|g| (*g).clone()).collect();
    let avg = time_averaged_density(&tail)?;
    let rel = avg
        .density
        .iter()
        .map(|d| (d / UNIFORM_DENSITY - 1.0).abs())
        .fold(0.0, f64::max);
    say!("levels averaged: {window} (t = {:.3} … {:.3})", tail[0].t, tail[window - 1].t);
    say!("E_max of the average: {:.5}", e_max(&avg));
    say!("max relative deviation from 1/(4π): {rel:.4}");
    match lag1_autocorrelation(&tail) {
        Some(r) => say!("lag-1 autocorrelation of cell counts: {r:.4}"),
        None => say!("lag-1 autocorrelation of cell counts: n/a"),
    }
    for g in &grids {
        say!("t = {:>10.4}  E_max = {:.5}", g.t, e_max(g));
    }
    if let Some(out) = &args.out {
        let f = std::fs::File::create(out).map_err(|e| Error::Io {
            context: format!("creating {}", out.display()),
            source: e,
        })?;
        avg.write_csv(f)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let outcome = match cli.command {
        Command::Llg(a) => run("llg", "desk-noncommuting", a),
        Command::So3(a) => run("so3", "so3-noncommuting", a),
        Command::Geodesic(a) => run("geodesic", "desk-geodesic", a),
        Command::Moments(a) => moments(a),
        Command::Hormander(a) => hormander(a),
        Command::DensityReport(a) => density_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
