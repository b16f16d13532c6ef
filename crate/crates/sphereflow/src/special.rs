//! Von Mises–Fisher numerics: the Bessel ratio `A(β) = I_{d/2}(β)/I_{d/2-1}(β)`,
//! its derivatives, sampling, and the surface integrals
//! `∫ (1 - <x,y>)^{k/2} e^{β<x,y>} dy`.

use crate::error::{Error, Result};
use crate::quadrature::{graded_breaks, integrate_doubling, GaussLegendre};
use crate::sphere::{dot, normalize_into, UnitVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidInput(format!(
            "dimension d = {d} must be at least 2"
        )));
    }
    Ok(())
}

/// Mean resultant length `A(β)` of the VMF law with concentration `β` on
/// `S^{d-1}`.
///
/// Evaluated through Perron's continued fraction for `I_ν/I_{ν-1}`, which
/// never forms the Bessel functions and converges fast for large `β`.
pub fn vmf_mean_resultant(beta: f64, d: usize) -> Result<f64> {
    check_dim(d)?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "beta = {beta} must be finite and ≥ 0"
        )));
    }
    if beta == 0.0 {
        return Ok(0.0);
    }
    let nu = 0.5 * d as f64;
    let x = beta;
    // f = b0 + a1/(b1 + a2/(b2 + ...)), modified Lentz.
    let tiny = 1e-300;
    let b0 = 2.0 * nu + x;
    let mut f = b0;
    let mut c = f;
    let mut dd = 0.0;
    for k in 1..100_000 {
        let kf = k as f64;
        let a = -(2.0 * nu + 2.0 * kf - 1.0) * x;
        let b = 2.0 * nu + kf + 2.0 * x;
        dd = b + a * dd;
        if dd.abs() < tiny {
            dd = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        dd = 1.0 / dd;
        let delta = c * dd;
        f *= delta;
        if (delta - 1.0).abs() <= 1e-16 {
            return Ok(x / f);
        }
    }
    Err(Error::QuadratureNoConvergence {
        level: 100_000,
        change: f64::NAN,
    })
}

/// `A'(β) = 1 - A² - (d-1)A/β`, the variance of `<mean_dir, Y>`.
pub fn vmf_a_prime(beta: f64, d: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    let a = vmf_mean_resultant(beta, d)?;
    Ok(1.0 - a * a - (d as f64 - 1.0) * a / beta)
}

/// `A''(β)`, the third central moment of `<mean_dir, Y>`.
///
/// Differentiating `A' = 1 - A² - (d-1)A/β` gives
/// `A'' = -2AA' - (d-1)A'/β + (d-1)A/β²`; the last term keeps the decay at
/// `O(β^{-3})`.
pub fn vmf_a_doubleprime(beta: f64, d: usize) -> Result<f64> {
    let a = vmf_mean_resultant(beta, d)?;
    let ap = vmf_a_prime(beta, d)?;
    let m = d as f64 - 1.0;
    Ok(-2.0 * a * ap - m * ap / beta + m * a / (beta * beta))
}

/// Second-moment coefficients `(α₂, β₂)` with
/// `Cov(Y) = α₂ m mᵀ + β₂ I`: `α₂ + β₂ = A'`, `(d-1)β₂ = 1 - A' - A²`.
pub fn vmf_covariance_coefficients(beta: f64, d: usize) -> Result<(f64, f64)> {
    let a = vmf_mean_resultant(beta, d)?;
    let ap = vmf_a_prime(beta, d)?;
    let b2 = (1.0 - ap - a * a) / (d as f64 - 1.0);
    Ok((ap - b2, b2))
}

/// Parameters of a von Mises–Fisher law.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mean_dir: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mean_dir: UnitVector, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidInput(format!("kappa = {kappa} must be ≥ 0")));
        }
        Ok(VmfParams { mean_dir, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mean_dir.dim()
    }
}

/// Draws from the VMF law (Wood's rejection scheme on `t = <mean_dir, Y>`,
/// uniform direction in the orthogonal complement).
pub fn sample_vmf<R: Rng + ?Sized>(rng: &mut R, p: &VmfParams) -> UnitVector {
    let d = p.dim();
    let m = (d - 1) as f64;
    let kappa = p.kappa;
    let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta_dist = Beta::new(0.5 * m, 0.5 * m).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta_dist.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + m * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let mu = p.mean_dir.coords();
    let v = loop {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let c = dot(&g, mu);
        for (gi, mi) in g.iter_mut().zip(mu) {
            *gi -= c * mi;
        }
        if normalize_into(&mut g).is_ok() && dot(&g, &g) > 0.5 {
            break g;
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut y: Vec<f64> = mu.iter().zip(&v).map(|(mi, vi)| w * mi + s * vi).collect();
    normalize_into(&mut y).expect("unit combination");
    UnitVector::new(y).expect("normalized")
}

/// `Γ(n/2)` for a positive integer `n`.
pub fn gamma_half(n: usize) -> f64 {
    assert!(n >= 1);
    let (mut g, mut x) = if n.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (std::f64::consts::PI.sqrt(), 0.5)
    };
    while x + 1e-9 < 0.5 * n as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Surface measure `|S^{d-1}| = 2π^{d/2}/Γ(d/2)`.
pub fn sphere_area(d: usize) -> f64 {
    assert!(d >= 1);
    2.0 * std::f64::consts::PI.powf(0.5 * d as f64) / gamma_half(d)
}

/// Result of [`surface_integral_estimate`]. The integral itself overflows
/// for large `β`, so it is carried as `I·e^{-β}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceIntegral {
    pub beta: f64,
    /// `I·e^{-β}`.
    pub scaled: f64,
}

impl SurfaceIntegral {
    pub fn value(&self) -> f64 {
        self.scaled * self.beta.exp()
    }

    pub fn ln_value(&self) -> f64 {
        self.scaled.ln() + self.beta
    }
}

/// `∫_{S^{d-1}} (1 - <x,y>)^{k/2} e^{β<x,y>} dy` by Gauss–Legendre
/// quadrature with `n_quad` nodes per panel.
///
/// The 1-D reduction in `t = <x,y>` carries the weight `(1-t²)^{(d-3)/2}`.
/// Both halves of `[-1, 1]` are mapped by square-root substitutions
/// (`t = 1 - s²`, `t = r² - 1`) that remove the endpoint singularities;
/// panels near `t = 1` are graded on the `β^{-1/2}` scale of the peak.
pub fn surface_integral_estimate(
    k: f64,
    beta: f64,
    d: usize,
    n_quad: usize,
) -> Result<SurfaceIntegral> {
    check_dim(d)?;
    if !(k >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidInput("k and beta must be nonnegative".into()));
    }
    if n_quad < 64 {
        return Err(Error::InvalidInput(format!(
            "n_quad = {n_quad} must be at least 64"
        )));
    }
    let rule = GaussLegendre::new(n_quad);
    let half_d = 0.5 * (d as f64 - 3.0);
    let dm2 = d as i32 - 2;
    let near = |s: f64| -> f64 {
        2.0 * s.powf(k + dm2 as f64) * (2.0 - s * s).powf(half_d) * (-beta * s * s).exp()
    };
    let far = |r: f64| -> f64 {
        2.0 * r.powi(dm2) * (2.0 - r * r).powf(half_d + 0.5 * k) * (beta * (r * r - 2.0)).exp()
    };
    let width = if beta > 1.0 { 0.25 / beta.sqrt() } else { 0.25 };
    let a = integrate_doubling(&rule, &graded_breaks(1.0, width), 1e-8, 10, 0.0, near)?;
    let b = integrate_doubling(&rule, &[0.0, 0.5, 1.0], 1e-8, 10, a.abs(), far)?;
    Ok(SurfaceIntegral {
        beta,
        scaled: sphere_area(d - 1) * (a + b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn langevin(b: f64) -> f64 {
        1.0 / b.tanh() - 1.0 / b
    }

    #[test]
    fn zero_concentration() {
        for d in 2..8 {
            assert_eq!(vmf_mean_resultant(0.0, d).unwrap(), 0.0);
        }
    }

    #[test]
    fn matches_langevin_function_for_d3() {
        assert!((vmf_mean_resultant(10.0, 3).unwrap() - 0.9000000041223072).abs() < 1e-14);
        let mut b = 0.1;
        while b <= 500.0 {
            let err = (vmf_mean_resultant(b, 3).unwrap() - langevin(b)).abs();
            assert!(err < 1e-10, "beta={b}: {err}");
            b *= 1.07;
        }
    }

    #[test]
    fn large_beta_expansion_d5() {
        let a = vmf_mean_resultant(200.0, 5).unwrap();
        assert!((a - 0.99).abs() <= 5e-4);
        // overflow-safe up to 1e6
        let a = vmf_mean_resultant(1e6, 4).unwrap();
        assert!((a - (1.0 - 1.5e-6)).abs() < 1e-11);
    }

    #[test]
    fn monotone_in_beta_and_dimension() {
        for d in 2..7 {
            let mut prev = 0.0;
            for i in 1..200 {
                let a = vmf_mean_resultant(i as f64 * 0.37, d).unwrap();
                assert!(a > prev && a < 1.0);
                assert!(a > vmf_mean_resultant(i as f64 * 0.37, d + 1).unwrap());
                prev = a;
            }
        }
    }

    #[test]
    fn a_prime_examples() {
        let a = langevin(10.0);
        let expect = 1.0 - a * a - 0.2 * a;
        assert!((vmf_a_prime(10.0, 3).unwrap() - expect).abs() < 1e-14);
        let h = 1e-3;
        let fd = (vmf_mean_resultant(5.0 + h, 4).unwrap()
            - vmf_mean_resultant(5.0 - h, 4).unwrap())
            / (2.0 * h);
        assert!((fd - vmf_a_prime(5.0, 4).unwrap()).abs() <= 1e-6);
        let b = 1e4;
        assert!((b * b * vmf_a_prime(b, 3).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn a_doubleprime_matches_finite_difference() {
        for beta in [1.0, 10.0, 100.0] {
            let h = 1e-3 * beta;
            let fd =
                (vmf_a_prime(beta + h, 3).unwrap() - vmf_a_prime(beta - h, 3).unwrap()) / (2.0 * h);
            let v = vmf_a_doubleprime(beta, 3).unwrap();
            assert!((fd - v).abs() <= 1e-5, "beta={beta}: fd={fd} v={v}");
        }
        for beta in [1e2, 1e3, 1e4] {
            assert!(beta * beta * vmf_a_doubleprime(beta, 3).unwrap().abs() < 1.0);
        }
    }

    #[test]
    fn a_doubleprime_is_third_cumulant_d2() {
        // On S¹, t = cos φ with density ∝ e^{β cos φ}.
        let beta = 1.0;
        let gl = GaussLegendre::new(200);
        let mom = |p: i32| {
            gl.integrate(0.0, std::f64::consts::PI, |phi| {
                phi.cos().powi(p) * (beta * phi.cos()).exp()
            })
        };
        let z = mom(0);
        let m1 = mom(1) / z;
        let m2 = mom(2) / z;
        let m3 = mom(3) / z;
        let k3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
        let v = vmf_a_doubleprime(beta, 2).unwrap();
        assert!(v < 0.0);
        assert!((v - k3).abs() < 1e-12, "{v} vs {k3}");
        assert!((vmf_a_prime(beta, 2).unwrap() - (m2 - m1 * m1)).abs() < 1e-12);
    }

    #[test]
    fn gamma_and_area() {
        assert!((sphere_area(2) - std::f64::consts::TAU).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((sphere_area(4) - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-13);
        assert!((gamma_half(7) - 3.3233509704478426).abs() < 1e-14);
    }

    #[test]
    fn surface_integral_closed_forms() {
        let i = surface_integral_estimate(0.0, 0.0, 3, 64).unwrap();
        assert!((i.value() - 4.0 * std::f64::consts::PI).abs() < 1e-12);
        let i = surface_integral_estimate(0.0, 10.0, 3, 64).unwrap();
        let exact = 4.0 * std::f64::consts::PI * 10f64.sinh() / 10.0;
        assert!((i.value() / exact - 1.0).abs() < 1e-12);
        // d = 2: 2π I_0(β)
        let i = surface_integral_estimate(0.0, 1.0, 2, 64).unwrap();
        assert!((i.value() - std::f64::consts::TAU * 1.2660658777520082).abs() < 1e-12);
        // d = 3, k = 2: ∫ (1-t) e^{βt} 2π dt
        let b: f64 = 3.0;
        let i = surface_integral_estimate(2.0, b, 3, 64).unwrap();
        let exact = std::f64::consts::TAU
            * (2.0 * b.sinh() / b - (2.0 * b.cosh() / b - 2.0 * b.sinh() / (b * b)));
        assert!((i.value() / exact - 1.0).abs() < 1e-12);
    }

    #[test]
    fn surface_integral_rejects_small_rules() {
        assert!(surface_integral_estimate(1.0, 5.0, 3, 32).is_err());
    }

    #[test]
    fn vmf_sample_mean_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = VmfParams::new(UnitVector::normalize(&[1.0, 2.0, -0.5]).unwrap(), 50.0).unwrap();
        let n = 100_000;
        let mut ts = Vec::with_capacity(n);
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let y = sample_vmf(&mut rng, &p);
            ts.push(dot(y.coords(), p.mean_dir.coords()));
            for k in 0..3 {
                mean[k] += y.coords()[k];
                sq[k] += y.coords()[k].powi(2);
            }
        }
        let mt = ts.iter().sum::<f64>() / n as f64;
        let var = ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>() / (n - 1) as f64;
        let a = langevin(50.0);
        assert!((mt - a).abs() < 3.0 * (var / n as f64).sqrt());
        let trace: f64 = (0..3)
            .map(|k| sq[k] / n as f64 - (mean[k] / n as f64).powi(2))
            .sum();
        let ap = vmf_a_prime(50.0, 3).unwrap();
        let expected = ap + (1.0 - ap - a * a);
        assert!((trace / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_kappa_is_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = VmfParams::new(UnitVector::basis(3, 2), 0.0).unwrap();
        let n = 100_000;
        let mut m2 = 0.0;
        let mut mean = 0.0;
        for _ in 0..n {
            let y = sample_vmf(&mut rng, &p);
            m2 += y.coords()[0].powi(2) / n as f64;
            mean += y.coords()[2] / n as f64;
        }
        assert!((m2 - 1.0 / 3.0).abs() < 0.01);
        assert!(mean.abs() < 0.01);
    }
}
