//! Randomized invariants of the dynamics, the heat oracle and the metrics.

use proptest::prelude::*;
use std::f64::consts::TAU;
use sphereflow::dynamics::{
    attention_field_flat, integrate, Clock, IntegratorConfig, ModelParams, ParticleState, Scheme,
};
use sphereflow::experiments::fit_rate;
use sphereflow::heat::HeatMixture;
use sphereflow::metrics::{interaction_energy, w1_circle, EmpiricalMeasure};
use sphereflow::sphere::dot;
use sphereflow::spectral::real_schur;
use sphereflow::Matrix;

/// `n` points in dimension `d`, drawn as normalized boxes of coordinates.
fn state(n: usize, d: usize) -> impl Strategy<Value = ParticleState> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
        .prop_filter("no near-zero rows", |rows| {
            rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        })
        .prop_map(move |rows| {
            let flat = rows
                .iter()
                .flat_map(|r| {
                    let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(move |x| x / s)
                })
                .collect();
            ParticleState::from_flat(d, flat).unwrap()
        })
}

fn matrix(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, d * d).prop_map(move |v| Matrix::from_row_major(d, d, v).unwrap())
}

/// Random `V`, with `Q = K = I` so that `KᵀQ x` never vanishes.
fn params(d: usize) -> impl Strategy<Value = ModelParams> {
    (matrix(d, -1.0, 1.0), 0.0f64..40.0).prop_map(move |(v, beta)| {
        ModelParams::new(Matrix::identity(d), Matrix::identity(d), v, beta).unwrap()
    })
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::ProjectedEuler), Just(Scheme::ProjectedRk4)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integration_stays_on_the_sphere(
        (s, p) in (2usize..5).prop_flat_map(|d| (state(12, d), params(d))),
        sch in scheme(),
        h in 1e-3f64..0.1,
    ) {
        let cfg = IntegratorConfig::new(sch, h, Clock::Plain, 20).unwrap().with_threads(Some(1));
        let out = integrate(&s, &p, &cfg, &mut []).unwrap();
        prop_assert!(out.final_state.max_norm_defect() <= 1e-12);
    }

    #[test]
    fn field_is_tangent(
        (s, p) in (2usize..6).prop_flat_map(|d| (state(15, d), params(d))),
    ) {
        let f = attention_field_flat(&s, &p).unwrap();
        let d = s.dim();
        for (x, v) in s.iter().zip(f.chunks(d)) {
            prop_assert!(dot(x, v).abs() <= 1e-10);
        }
    }

    #[test]
    fn field_is_permutation_equivariant_bitwise(
        (s, p) in (2usize..5).prop_flat_map(|d| (state(17, d), params(d))),
        perm in Just((0..17).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let d = s.dim();
        let f = attention_field_flat(&s, &p).unwrap();
        let g = attention_field_flat(&s.permuted(&perm), &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let (a, b) = (&g[k * d..(k + 1) * d], &f[i * d..(i + 1) * d]);
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn field_is_thread_count_invariant(
        (s, p) in (2usize..4).prop_flat_map(|d| (state(40, d), params(d))),
        threads in 2usize..5,
    ) {
        let run = |t| {
            let cfg = IntegratorConfig::new(Scheme::ProjectedRk4, 0.05, Clock::Plain, 5)
                .unwrap()
                .with_threads(Some(t));
            integrate(&s, &p, &cfg, &mut []).unwrap().final_state
        };
        let (one, many) = (run(1), run(threads));
        prop_assert!(one.flat().iter().zip(many.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// With `V = KᵀQ` symmetric the dynamics is a gradient flow of the
    /// interaction energy, which therefore never decreases along small steps.
    #[test]
    fn gradient_case_energy_is_monotone(s in state(20, 3), beta in 0.5f64..10.0) {
        let p = ModelParams::identity(3, beta).unwrap();
        let cfg = IntegratorConfig::new(Scheme::ProjectedRk4, 1e-2, Clock::Plain, 30)
            .unwrap()
            .with_stride(1)
            .with_snapshots(true)
            .with_threads(Some(1));
        let out = integrate(&s, &p, &cfg, &mut []).unwrap();
        let e: Vec<f64> = out
            .snapshots
            .iter()
            .map(|sn| interaction_energy(&sn.state, &p).unwrap().scaled)
            .collect();
        for w in e.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn heat_evolution_round_trips_exactly(
        means in prop::collection::vec(0.0f64..TAU, 3),
        vars in prop::collection::vec(0.05f64..0.5, 3),
        k1 in 0u32..100,
        k2 in 0u32..100,
    ) {
        let m = HeatMixture::on_circle(&means, &vars, &[0.25, 0.25, 0.5]).unwrap();
        // Dyadic times keep s + t exact in floating point.
        let (s, t) = (f64::from(k1) / 4096.0, f64::from(k2) / 4096.0);
        let fwd = m.evolve(s, -1).unwrap().evolve(t, -1).unwrap();
        prop_assert_eq!(&fwd, &m.evolve(s + t, -1).unwrap());
        prop_assert_eq!(&fwd.evolve(s + t, 1).unwrap(), &m);
    }

    #[test]
    fn circle_w1_is_a_metric(
        a in prop::collection::vec(0.0f64..TAU, 1..12),
        b in prop::collection::vec(0.0f64..TAU, 1..12),
        c in prop::collection::vec(0.0f64..TAU, 1..12),
    ) {
        let m = |x: &[f64]| EmpiricalMeasure::from_angles(x, None).unwrap();
        let (ma, mb, mc) = (m(&a), m(&b), m(&c));
        let ab = w1_circle(&ma, &mb).unwrap();
        prop_assert!(w1_circle(&ma, &ma).unwrap().abs() < 1e-12);
        prop_assert!((ab - w1_circle(&mb, &ma).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= std::f64::consts::PI + 1e-12);
        prop_assert!(ab <= w1_circle(&ma, &mc).unwrap() + w1_circle(&mc, &mb).unwrap() + 1e-12);
    }

    #[test]
    fn circle_w1_of_a_rotation_is_at_most_the_angle(
        a in prop::collection::vec(0.0f64..TAU, 1..20),
        phi in 0.0f64..3.1,
    ) {
        let rotated: Vec<f64> = a.iter().map(|x| x + phi).collect();
        let d = w1_circle(
            &EmpiricalMeasure::from_angles(&a, None).unwrap(),
            &EmpiricalMeasure::from_angles(&rotated, None).unwrap(),
        )
        .unwrap();
        prop_assert!(d <= phi + 1e-12);
        if a.len() == 1 {
            prop_assert!((d - phi).abs() < 1e-12);
        }
    }

    #[test]
    fn schur_reconstructs_the_matrix(a in (2usize..7).prop_flat_map(|d| matrix(d, -5.0, 5.0))) {
        let s = real_schur(&a).unwrap();
        prop_assert!(s.residual(&a) <= 1e-10 * a.max_abs().max(1.0));
        let trace: f64 = (0..a.rows()).map(|i| a.row(i)[i]).sum();
        let eig_sum: f64 = s.eigenvalues().iter().map(|e| e.re).sum();
        prop_assert!((trace - eig_sum).abs() <= 1e-9 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn power_laws_fit_exactly(slope in -3.0f64..3.0, scale in 0.1f64..10.0) {
        let xs: Vec<f64> = (0..8).map(|k| 10f64.powf(1.0 + 0.25 * f64::from(k))).collect();
        let ys: Vec<f64> = xs.iter().map(|x| scale * x.powf(slope)).collect();
        let fit = fit_rate(&xs, &ys).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!(fit.r2 > 1.0 - 1e-9);
    }
}
