use super::*;
use crate::dynamics::{integrate, Clock, FnObserver, IntegratorConfig, Scheme};
use crate::heat::HeatMixture;
use crate::matrix::Matrix;
use crate::special::vmf_mean_resultant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_angles(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random::<f64>() * TAU).collect()
}

fn arc(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
    fn perms(k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, a: &[f64], b: &[f64], best: &mut f64) {
        if k == a.len() {
            let c: f64 = cur.iter().enumerate().map(|(i, &j)| arc(a[i], b[j])).sum();
            *best = best.min(c);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                perms(k + 1, used, cur, a, b, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    perms(0, &mut vec![false; b.len()], &mut Vec::new(), a, b, &mut best);
    best / a.len() as f64
}

#[test]
fn w1_circle_basic() {
    let a = EmpiricalMeasure::from_angles(&random_angles(7, 1), None).unwrap();
    assert_eq!(w1_circle(&a, &a).unwrap(), 0.0);
    for theta in [0.3, 1.0, 3.0, PI] {
        let x = EmpiricalMeasure::from_angles(&[0.5], None).unwrap();
        let y = EmpiricalMeasure::from_angles(&[0.5 + theta], None).unwrap();
        assert!((w1_circle(&x, &y).unwrap() - theta).abs() < 1e-12);
    }
    let s3 = EmpiricalMeasure::uniform(&ParticleState::from_flat(3, vec![1.0, 0.0, 0.0]).unwrap());
    assert!(w1_circle(&a, &s3).is_err());
}

#[test]
fn w1_circle_matches_assignment() {
    for n in 1..=6 {
        for seed in 0..5u64 {
            let a = random_angles(n, 10 * seed + n as u64);
            let b = random_angles(n, 1000 + 10 * seed + n as u64);
            let got = w1_circle(
                &EmpiricalMeasure::from_angles(&a, None).unwrap(),
                &EmpiricalMeasure::from_angles(&b, None).unwrap(),
            )
            .unwrap();
            let want = brute_force_w1(&a, &b);
            assert!((got - want).abs() < 1e-12, "n = {n}: {got} vs {want}");
        }
    }
}

#[test]
fn w1_circle_metric_axioms() {
    for seed in 0..20u64 {
        let m: Vec<EmpiricalMeasure> = (0..3)
            .map(|k| {
                let n = 3 + ((seed + k) % 4) as usize;
                let mut r = rng(seed * 7 + k);
                let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.1).collect();
                let t: f64 = w.iter().sum();
                let w: Vec<f64> = w.iter().map(|v| v / t).collect();
                EmpiricalMeasure::from_angles(&random_angles(n, seed * 13 + k), Some(&w)).unwrap()
            })
            .collect();
        let d = |i: usize, j: usize| w1_circle(&m[i], &m[j]).unwrap();
        assert!((d(0, 1) - d(1, 0)).abs() < 1e-14);
        assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        assert!(d(0, 1) > 0.0);
    }
}

#[test]
fn w1_point_mass_to_uniform() {
    let u = EmpiricalMeasure::from_circle_density(|_| 1.0, 1 << 14).unwrap();
    let x = EmpiricalMeasure::from_angles(&[1.234], None).unwrap();
    let h = TAU / (1 << 14) as f64;
    assert!((w1_circle(&x, &u).unwrap() - FRAC_PI_2).abs() < h);
}

#[test]
fn sliced_w1_examples() {
    let a = EmpiricalMeasure::uniform(&ParticleState::from_points(&[
        UnitVector::basis(3, 0),
        UnitVector::basis(3, 2),
    ]).unwrap());
    assert_eq!(sliced_w1_sphere(&a, &a, 64, &mut rng(1)).unwrap().value, 0.0);

    let x = UnitVector::new(vec![0.6, 0.8, 0.0]).unwrap();
    let y = UnitVector::new(vec![0.0, 0.6, 0.8]).unwrap();
    let mx = EmpiricalMeasure::uniform(&ParticleState::from_points(&[x.clone()]).unwrap());
    let my = EmpiricalMeasure::uniform(&ParticleState::from_points(&[y.clone()]).unwrap());
    let diff: Vec<f64> = x.coords().iter().zip(y.coords()).map(|(a, b)| a - b).collect();
    let want = sliced_constant(3) * norm(&diff);
    let est = sliced_w1_sphere(&mx, &my, 4000, &mut rng(2)).unwrap();
    assert!((est.value - want).abs() < 3.0 * est.stderr, "{est:?} vs {want}");
    // c_3 = 1/2.
    assert!((sliced_constant(3) - 0.5).abs() < 1e-15);
    assert!((sliced_constant(2) - 2.0 / PI).abs() < 1e-15);

    let small = sliced_w1_sphere(&mx, &my, 2000, &mut rng(3)).unwrap();
    let large = sliced_w1_sphere(&mx, &my, 4000, &mut rng(4)).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio - 2f64.sqrt()).abs() < 0.15, "{ratio}");
}

#[test]
fn energy_examples() {
    let p = ModelParams::identity(3, 2.5).unwrap();
    let same = ParticleState::from_flat(3, [0.0, 0.0, 1.0].repeat(5)).unwrap();
    let e = interaction_energy(&same, &p).unwrap();
    assert!((e.scaled - 1.0 / (2.0 * 2.5)).abs() < 1e-15);
    assert_eq!(e.shift, 1.0);

    let p1 = ModelParams::identity(2, 1.0).unwrap();
    let anti = ParticleState::from_angles(2, &[0.0, PI]).unwrap();
    let e = interaction_energy(&anti, &p1).unwrap();
    assert!((e.scaled - 0.125 * (2.0 + 2.0 * (-2.0f64).exp())).abs() < 1e-15);
    assert!(e.symmetric);
    let skew = ModelParams::new(
        Matrix::identity(2),
        Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        Matrix::identity(2),
        1.0,
    )
    .unwrap();
    assert!(!interaction_energy(&anti, &skew).unwrap().symmetric);
}

#[test]
fn energy_invariances() {
    let p = ModelParams::identity(3, 4.0).unwrap();
    let mut r = rng(5);
    let pts: Vec<UnitVector> = (0..30).map(|_| sample_uniform(&mut r, 3)).collect();
    let s = ParticleState::from_points(&pts).unwrap();
    let e = interaction_energy(&s, &p).unwrap();
    let perm: Vec<usize> = (0..30).rev().collect();
    let ep = interaction_energy(&s.permuted(&perm), &p).unwrap();
    assert!((e.ln_value() - ep.ln_value()).abs() < 1e-13);
    let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
    let rot = Matrix::from_rows(&[vec![c, -sn, 0.0], vec![sn, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let rotated: Vec<f64> = s.iter().flat_map(|x| rot.apply(x)).collect();
    let er = interaction_energy(&ParticleState::from_flat(3, rotated).unwrap(), &p).unwrap();
    assert!((e.ln_value() - er.ln_value()).abs() < 1e-12);
}

#[test]
fn energy_increases_along_gradient_flow() {
    for (beta, n, seed) in [(1.0, 50, 1u64), (10.0, 120, 2), (50.0, 200, 3)] {
        let p = ModelParams::identity(3, beta).unwrap();
        let mut r = rng(seed);
        let pts: Vec<UnitVector> = (0..n).map(|_| sample_uniform(&mut r, 3)).collect();
        let s = ParticleState::from_points(&pts).unwrap();
        let mut prev: Option<f64> = None;
        let mut worst = 0.0f64;
        let mut obs = FnObserver::new("energy", |st: &ParticleState| {
            let e = interaction_energy(st, &p)?.ln_value();
            if let Some(pv) = prev {
                worst = worst.min(e - pv);
            }
            prev = Some(e);
            Ok(e)
        });
        let cfg = IntegratorConfig::new(Scheme::ProjectedEuler, 1e-3, Clock::Plain, 300)
            .unwrap()
            .with_stride(1);
        integrate(&s, &p, &cfg, &mut [&mut obs]).unwrap();
        drop(obs);
        assert!(worst >= -1e-9, "beta = {beta}: drop {worst:e}");
    }
}

#[test]
fn cluster_examples() {
    let same = ParticleState::from_flat(3, [0.0, 1.0, 0.0].repeat(4)).unwrap();
    let c = cluster_detect(&same, 0.05).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c.clusters[0].weight, 1.0);

    let angles = [0.0, 0.01, -0.02, PI, PI + 0.015, PI - 0.01];
    let s = ParticleState::from_angles(2, &angles).unwrap();
    let c = cluster_detect(&s, 0.1).unwrap();
    assert_eq!(c.weights(), vec![0.5, 0.5]);
    assert_eq!(c.clusters[0].members, vec![0, 1, 2]);
    assert!(cluster_detect(&s, 0.0).is_err());

    // Same configuration embedded in S²: the generic path agrees.
    let s3 = ParticleState::from_angles(3, &angles).unwrap();
    assert_eq!(cluster_detect(&s3, 0.1).unwrap().weights(), vec![0.5, 0.5]);
}

#[test]
fn clustering_is_monotone_in_threshold() {
    let angles = random_angles(200, 9);
    let s = ParticleState::from_angles(2, &angles).unwrap();
    let s3 = ParticleState::from_angles(3, &angles).unwrap();
    let mut last = usize::MAX;
    for tol in [0.001, 0.005, 0.02, 0.05, 0.1] {
        let c = cluster_detect(&s, tol).unwrap();
        assert!(c.len() <= last);
        assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.len(), cluster_detect(&s3, tol).unwrap().len());
        last = c.len();
    }
}

#[test]
fn kde_examples() {
    let k = kde_circle(&[2.0], 0.05, 720).unwrap();
    let imax = (0..720).max_by(|&a, &b| k.values[a].total_cmp(&k.values[b])).unwrap();
    assert!((k.angles[imax] - 2.0).abs() <= TAU / 720.0);
    assert!((k.integral() - 1.0).abs() < 1e-6);

    let u = random_angles(100_000, 3);
    let k = kde_circle(&u, 0.1, 512).unwrap();
    let dev = k.values.iter().map(|v| (v - 1.0 / TAU).abs()).fold(0.0, f64::max);
    assert!(dev < 0.05, "{dev}");
    assert!((k.integral() - 1.0).abs() < 1e-6);
}

#[test]
fn kde_converges_to_mixture() {
    let means = [FRAC_PI_2, 0.0, 4.0 * PI / 3.0];
    let w = [0.2, 0.5, 0.3];
    let mix = HeatMixture::on_circle(&means, &[0.02; 3], &w).unwrap();
    let mut r = rng(12);
    let mut errs = Vec::new();
    for n in [500, 5000, 50_000] {
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = r.random();
                let j = if u < 0.2 { 0 } else if u < 0.7 { 1 } else { 2 };
                let z: f64 = r.sample(rand_distr::StandardNormal);
                means[j] + 0.2 * z
            })
            .collect();
        let bw = 1.06 * 0.5 * (n as f64).powf(-0.2);
        let k = kde_circle(&samples, bw, 512).unwrap();
        errs.push(k.l1_distance(|a| mix.density_at_angle(a).unwrap()));
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

fn tangent_dir(theta: f64) -> [f64; 2] {
    [-theta.sin(), theta.cos()]
}

#[test]
fn quadrature_field_uniform_and_sign() {
    let p = ModelParams::identity(3, 50.0).unwrap();
    let x = UnitVector::new(vec![0.48, 0.6, 0.64]).unwrap();
    let f = kernel_field_quadrature(&|_| 1.0, &p, &x, 16).unwrap();
    assert!(norm(&f.vec) < 1e-13, "{:?}", f.vec);
    let p2 = ModelParams::identity(2, 500.0).unwrap();
    let x2 = UnitVector::from_angle(2, 0.7);
    let f = kernel_field_quadrature(&|_| 1.0, &p2, &x2, 16).unwrap();
    assert!(norm(&f.vec) < 1e-13);

    let a = Matrix::from_rows(&[vec![1.0, 0.3], vec![-0.2, 0.8]]).unwrap();
    let plus = ModelParams::new(Matrix::identity(2), Matrix::identity(2), a.clone(), 30.0).unwrap();
    let minus = ModelParams::new(Matrix::identity(2), Matrix::identity(2), a.scale(-1.0), 30.0).unwrap();
    let dens = |y: &[f64]| 1.0 + 0.5 * y[0];
    let f = kernel_field_quadrature(&dens, &plus, &x2, 16).unwrap();
    let g = kernel_field_quadrature(&dens, &minus, &x2, 16).unwrap();
    for (a, b) in f.vec.iter().zip(&g.vec) {
        assert_eq!(*a, -*b);
    }
    assert!(kernel_field_quadrature(&|y: &[f64]| y[0], &p2, &x2, 16).is_err());
}

#[test]
fn quadrature_field_matches_vmf_moments() {
    // For μ ∝ 1 + a<e, y> and Q = K = V = I the field is
    // a (A/κ) P_x e / (1 + a A <x, e>).
    for (d, beta) in [(2usize, 7.0), (2, 300.0), (3, 5.0), (3, 200.0)] {
        let p = ModelParams::identity(d, beta).unwrap();
        let e: Vec<f64> = if d == 2 { vec![0.6, 0.8] } else { vec![0.0, 0.6, 0.8] };
        let x = if d == 2 { UnitVector::from_angle(2, 0.3) } else { UnitVector::new(vec![0.36, 0.48, 0.8]).unwrap() };
        let a = 0.4;
        let dens = |y: &[f64]| 1.0 + a * dot(&e, y);
        let f = kernel_field_quadrature(&dens, &p, &x, 16).unwrap();
        let big_a = vmf_mean_resultant(beta, d).unwrap();
        let xe = dot(x.coords(), &e);
        let want: Vec<f64> = (0..d)
            .map(|c| a * big_a / beta * (e[c] - xe * x.coords()[c]) / (1.0 + a * big_a * xe))
            .collect();
        let err = f.vec.iter().zip(&want).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10 * norm(&want), "d = {d}, beta = {beta}: {:?} vs {want:?}", f.vec);
    }
}

#[test]
fn quadrature_field_approaches_log_gradient() {
    let mix = HeatMixture::on_circle(&[0.5, 2.5], &[0.25, 0.3], &[0.6, 0.4]).unwrap();
    let dens = |y: &[f64]| mix.density_at_angle(y[1].atan2(y[0])).unwrap();
    let beta = 1e3;
    let p = ModelParams::identity(2, beta).unwrap();
    for theta in [0.0, 1.2, 3.5] {
        let f = kernel_field_quadrature(&dens, &p, &UnitVector::from_angle(2, theta), 24).unwrap();
        let got = beta * dot(&f.vec, &tangent_dir(theta));
        let want = mix.log_derivative_at_angle(theta).unwrap();
        let rel = (got - want).abs() / want.abs();
        assert!(rel < 10.0 / beta.sqrt(), "θ = {theta}: {got} vs {want}");
    }
}
