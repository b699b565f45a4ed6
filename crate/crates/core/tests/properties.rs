use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphere_sde::geometry::{hat, AntisymMatrix3, TangentState, UnitVector3, Vector3};
use sphere_sde::harness::{run_ensemble, EnsembleConfig, OutputKind, RecordTimes, SphereInitial, SystemConfig};
use sphere_sde::integrators::{
    geodesic_step, llg_step, so3_step, GeodesicParams, GeodesicState, LlgParams, So3Params,
};
use sphere_sde::lie::{hormander_rank, orbit_sample, rodrigues_exp};
use sphere_sde::measures::{
    bundle_segment_of, cell_index, sample_mu_r, sample_uniform_sphere, BundleCounts, SpherePartition, BUNDLE_CELLS,
    CELLS,
};
use sphere_sde::moment_flow::{
    evolve_moments, generator_matrix, generator_matrix_on, uniform_sphere_moment, Ambient, MonomialBasis,
};
use sphere_sde::rng::{IncrementLaw, PathRng};
use sphere_sde::stats::{bias_envelope, clt_envelope, within_multinomial_envelope};

fn vec3(r: f64) -> impl Strategy<Value = Vector3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = UnitVector3> {
    vec3(1.0)
        .prop_filter("away from origin", |v| v.norm() > 0.1)
        .prop_map(|v| UnitVector3::from_direction(v).unwrap())
}

fn perp_part(v: Vector3, h: UnitVector3) -> Vector3 {
    v - h.dot(v) * h.vector()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn llg_path_stays_on_sphere(z in unit(), h in unit(), hp in vec3(0.7), k in 1e-3..0.1f64, seed in 0u64..1000) {
        let params = LlgParams::new(h, perp_part(hp, h), k).unwrap();
        let mut rng = PathRng::new(seed, 0, IncrementLaw::Gaussian);
        let mut z = z;
        for _ in 0..200 {
            z = llg_step(z, &params, rng.increment(k)).unwrap();
            prop_assert!(z.norm_defect() <= 1e-10);
        }
    }

    #[test]
    fn llg_energy_conserved_without_perp_field(z in unit(), h in unit(), k in 1e-3..0.1f64, seed in 0u64..1000) {
        let params = LlgParams::new(h, Vector3::ZERO, k).unwrap();
        let mut rng = PathRng::new(seed, 1, IncrementLaw::Gaussian);
        let e0 = params.energy(z);
        let mut z = z;
        for _ in 0..200 {
            z = llg_step(z, &params, rng.increment(k)).unwrap();
            prop_assert!((params.energy(z) - e0).abs() <= 1e-10);
        }
    }

    #[test]
    fn so3_step_stays_orthogonal(a in vec3(1.0), b in vec3(1.0), w in vec3(2.0), k in 1e-3..0.1f64, seed in 0u64..1000) {
        let params = So3Params { a: hat(a), b: hat(b), k };
        let mut z = rodrigues_exp(&hat(w), 1.0);
        let mut rng = PathRng::new(seed, 2, IncrementLaw::Gaussian);
        for _ in 0..100 {
            z = so3_step(&z, &params, rng.increment(k)).unwrap();
            prop_assert!(z.orthogonality_defect() <= 1e-10);
            prop_assert!(z.determinant_defect() <= 1e-10);
        }
    }

    #[test]
    fn geodesic_keeps_norm_and_interior_energy(p in unit(), xi in vec3(1.0), d in 0.0..2.0f64, seed in 0u64..1000) {
        let k = 0.01;
        let xi = perp_part(xi, p);
        prop_assume!(xi.norm() > 1e-3);
        let params = GeodesicParams::new(d, k, 0.25).unwrap();
        let mut s = GeodesicState::start(&TangentState::new(p, xi).unwrap(), k);
        let mut rng = PathRng::new(seed, 3, IncrementLaw::Gaussian);
        s = geodesic_step(&s, &params, rng.increment(k)).unwrap();
        let e1 = s.energy();
        for _ in 0..200 {
            s = geodesic_step(&s, &params, rng.increment(k)).unwrap();
            prop_assert!(s.u.norm_defect() <= 1e-12);
            prop_assert!((s.energy() - e1).abs() <= 1e-12 * e1.max(1.0));
        }
    }

    #[test]
    fn orbit_sample_is_a_group_action(z in unit(), b in vec3(1.0), t1 in 0.0..TAU, t2 in 0.0..TAU) {
        prop_assume!(b.norm() > 0.1);
        let b = hat(b);
        let two = orbit_sample(&orbit_sample(&z, &b, t1).unwrap(), &b, t2).unwrap();
        let one = orbit_sample(&z, &b, t1 + t2).unwrap();
        prop_assert!(two.vector().max_abs_diff(one.vector()) <= 1e-12);
    }

    #[test]
    fn hormander_rank_matches_independence(a in vec3(1.0), b in vec3(1.0), scale in -2.0..2.0f64, dependent: bool) {
        let b = if dependent { a * scale } else { b };
        let independent = a.cross(b).norm() > 1e-6 * (a.norm() * b.norm()).max(1e-300);
        prop_assume!(dependent || a.cross(b).norm() > 1e-6);
        let rank = hormander_rank(&hat(a), &[hat(b)]);
        prop_assert_eq!(rank == 3, independent);
    }

    #[test]
    fn segment_of_matches_brute_force(z in unit()) {
        let partition = SpherePartition::new();
        prop_assert_eq!(partition.segment_of(z), partition.segment_of_brute(z));
    }

    #[test]
    fn sphere_generator_rows_match_derivative_oracle(a in vec3(1.0), b in vec3(1.0), x in vec3(1.5)) {
        let g = generator_matrix(&hat(a), &[hat(b)], 3).unwrap();
        check_rows(g.basis(), g.entries(), &field(&hat(a), Ambient::Sphere), &field(&hat(b), Ambient::Sphere), &x.to_array());
    }

    #[test]
    fn rotation_generator_rows_match_derivative_oracle(a in vec3(1.0), b in vec3(1.0), x in prop::array::uniform9(-1.5..1.5f64)) {
        let g = generator_matrix_on(Ambient::RotationGroup, &hat(a), &[hat(b)], 2).unwrap();
        check_rows(g.basis(), g.entries(), &field(&hat(a), Ambient::RotationGroup), &field(&hat(b), Ambient::RotationGroup), &x);
    }

    #[test]
    fn generator_annihilates_squared_norm(a in vec3(1.0), b in vec3(1.0)) {
        let g = generator_matrix(&hat(a), &[hat(b)], 2).unwrap();
        let basis = g.basis();
        let rows: Vec<usize> = [[2, 0, 0], [0, 2, 0], [0, 0, 2]]
            .iter()
            .map(|alpha| basis.position(alpha).unwrap())
            .collect();
        for j in 0..basis.len() {
            let c: f64 = rows.iter().map(|&i| g.entries()[(i, j)]).sum();
            prop_assert!(c.abs() <= 1e-12);
        }
    }
}

/// Flat matrix of the field X ↦ M X in the ambient coordinates (row-major on ℝ⁹).
fn field(m: &AntisymMatrix3, ambient: Ambient) -> Vec<Vec<f64>> {
    let m = m.matrix();
    match ambient {
        Ambient::Sphere => (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect(),
        Ambient::RotationGroup => {
            let mut f = vec![vec![0.0; 9]; 9];
            for r in 0..3 {
                for c in 0..3 {
                    for i in 0..3 {
                        f[3 * r + c][3 * i + c] = m[(r, i)];
                    }
                }
            }
            f
        }
    }
}

fn mat_vec(f: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    f.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn monomial(alpha: &[u32], x: &[f64]) -> f64 {
    alpha.iter().zip(x).map(|(&a, &v)| v.powi(a as i32)).product()
}

fn gradient(alpha: &[u32], x: &[f64]) -> Vec<f64> {
    (0..alpha.len())
        .map(|i| {
            if alpha[i] == 0 {
                return 0.0;
            }
            let mut beta = alpha.to_vec();
            beta[i] -= 1;
            alpha[i] as f64 * monomial(&beta, x)
        })
        .collect()
}

fn hessian(alpha: &[u32], x: &[f64]) -> Vec<Vec<f64>> {
    let n = alpha.len();
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut beta = alpha.to_vec();
            let ci = beta[i] as f64;
            if beta[i] == 0 {
                continue;
            }
            beta[i] -= 1;
            let cj = beta[j] as f64;
            if beta[j] == 0 {
                continue;
            }
            beta[j] -= 1;
            h[i][j] = ci * cj * monomial(&beta, x);
        }
    }
    h
}

/// 𝒜f = ⟨Ax, ∇f⟩ + ½(⟨Bx, ∇²f Bx⟩ + ⟨B²x, ∇f⟩), compared row by row.
fn check_rows(basis: &MonomialBasis, entries: &nalgebra::DMatrix<f64>, fa: &[Vec<f64>], fb: &[Vec<f64>], x: &[f64]) {
    let ax = mat_vec(fa, x);
    let bx = mat_vec(fb, x);
    let bbx = mat_vec(fb, &bx);
    let values = basis.evaluate(x);
    for (i, alpha) in basis.exponents().iter().enumerate() {
        let g = gradient(alpha, x);
        let h = hessian(alpha, x);
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let quad: f64 = (0..x.len()).map(|p| bx[p] * dot(&h[p], &bx)).sum();
        let oracle = dot(&ax, &g) + 0.5 * (quad + dot(&bbx, &g));
        let row: f64 = (0..basis.len()).map(|j| entries[(i, j)] * values[j]).sum();
        assert!((row - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "row {alpha:?}: {row} vs {oracle}");
    }
}

fn double_factorial(n: i64) -> f64 {
    if n <= 0 {
        1.0
    } else {
        n as f64 * double_factorial(n - 2)
    }
}

#[test]
fn uniform_moments_match_closed_form_and_sampling() {
    let basis = MonomialBasis::sphere(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200_000;
    let samples: Vec<[f64; 3]> = (0..n).map(|_| sample_uniform_sphere(&mut rng).vector().to_array()).collect();
    for alpha in basis.exponents() {
        let m = uniform_sphere_moment(alpha).unwrap();
        let closed = if alpha.iter().any(|a| a % 2 == 1) {
            0.0
        } else {
            let num: f64 = alpha.iter().map(|&a| double_factorial(a as i64 - 1)).product();
            num / double_factorial(alpha.iter().sum::<u32>() as i64 + 1)
        };
        assert!((m - closed).abs() < 1e-14, "{alpha:?}");
        let mc = samples.iter().map(|x| monomial(alpha, x)).sum::<f64>() / n as f64;
        assert!((m - mc).abs() <= clt_envelope(n as u64), "{alpha:?}: {m} vs {mc}");
    }
}

#[test]
fn partition_areas_match_sampling() {
    let partition = SpherePartition::new();
    assert!((partition.total_area() - 4.0 * PI).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<UnitVector3> = (0..1_000_000).map(|_| sample_uniform_sphere(&mut rng)).collect();
    let counts = partition.count(&samples);
    assert_eq!(counts.len(), CELLS);
    let p: Vec<f64> = partition.areas().iter().map(|a| a / (4.0 * PI)).collect();
    assert!(within_multinomial_envelope(&counts, &p, 4.0));
    let pole = counts[cell_index(0, 0)] as f64 / 1e6;
    assert!((pole - 0.030_352_126 / (4.0 * PI)).abs() < 4.0 * (pole / 1e6).sqrt());
}

#[test]
fn mu_r_fills_bundle_cells_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut counts = BundleCounts::new();
    for _ in 0..48_000 {
        let s = sample_mu_r(1.0, &mut rng).unwrap();
        assert!(bundle_segment_of(&s).is_ok());
        counts.add(&s).unwrap();
    }
    assert!(within_multinomial_envelope(&counts.bundle, &[1.0 / BUNDLE_CELLS as f64; BUNDLE_CELLS], 4.0));
    assert!(within_multinomial_envelope(&counts.sphere, &[1.0 / 6.0; 6], 4.0));
}

#[test]
fn ensemble_moments_follow_generator_flow() {
    let n = 4000;
    let k = 0.01;
    let cfg = EnsembleConfig {
        schema_version: 1,
        name: None,
        system: SystemConfig::Llg {
            h: UnitVector3::e_z(),
            h_perp: Vector3::E_Y,
            initial: SphereInitial::Point(UnitVector3::new(Vector3::new(0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2)).unwrap()),
        },
        n_paths: n,
        n_steps: 200,
        k,
        seed: 14,
        increments: IncrementLaw::Gaussian,
        record_times: RecordTimes::Steps(vec![200]),
        outputs: vec![OutputKind::Moments],
        moment_degree: 2,
    };
    let r = run_ensemble(&cfg).unwrap();
    let g = generator_matrix(&hat(Vector3::E_Z), &[hat(Vector3::new(0.0, 1.0, 1.0))], 2).unwrap();
    let m0 = g.basis().evaluate(&[0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2]);
    let exact = evolve_moments(&g, &m0, cfg.t_end()).unwrap();
    let mc = r.final_record().unwrap().moments.as_ref().unwrap();
    let tol = bias_envelope(n as u64) + k;
    for (e, m) in exact.iter().zip(mc) {
        assert!((e - m).abs() <= tol, "{e} vs {m}");
    }
}
