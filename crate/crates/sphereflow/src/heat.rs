//! Heat kernels on spheres and mixtures of heat kernels evolved exactly in
//! heat time.
//!
//! Variances are heat times: the component `(m, σ²)` is `exp(σ²Δ)δ_m`. On
//! the circle that is the wrapped normal law with angular variance `2σ²`.

use crate::error::{Error, Result};
use crate::sphere::{dot, UnitVector};
use crate::special::sphere_area;
use std::f64::consts::{PI, TAU};

/// Below this heat time the circle kernel is summed over images, above it
/// as a Fourier series.
pub const CIRCLE_CROSSOVER: f64 = 0.5;

/// Smallest heat time accepted by [`heat_kernel_sphere`].
pub const SPHERE_MIN_TIME: f64 = 1e-6;

const TAIL: f64 = 1e-14;

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!("heat time t = {t} must be positive")));
    }
    Ok(())
}

/// Wrapped to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// `Σ_k g(θ + 2πk)` with `g` the Gaussian of variance `2t`.
pub fn heat_kernel_circle_images(theta: f64, t: f64) -> f64 {
    let th = wrap_angle(theta);
    // exp(-x²/4t) < 1e-17 once x² > 160 t.
    let reach = (160.0 * t).sqrt() + PI;
    let kmax = (reach / TAU).ceil() as i64;
    let c = 1.0 / (4.0 * PI * t).sqrt();
    let mut s = 0.0;
    for k in -kmax..=kmax {
        let x = th + TAU * k as f64;
        s += (-x * x / (4.0 * t)).exp();
    }
    c * s
}

/// `(1/2π)(1 + 2 Σ_n e^{-n²t} cos nθ)`.
pub fn heat_kernel_circle_fourier(theta: f64, t: f64) -> f64 {
    let mut s = 0.0;
    let mut n = 1.0f64;
    loop {
        let a = (-n * n * t).exp();
        if a < 1e-17 {
            break;
        }
        s += a * (n * theta).cos();
        n += 1.0;
    }
    (1.0 + 2.0 * s) / TAU
}

/// Density of `exp(tΔ)δ₀` on the circle at angular offset `theta`.
pub fn heat_kernel_circle(theta: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(if t < CIRCLE_CROSSOVER {
        heat_kernel_circle_images(theta, t)
    } else {
        heat_kernel_circle_fourier(theta, t)
    })
}

/// `∂_θ` of [`heat_kernel_circle`].
pub fn heat_kernel_circle_derivative(theta: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    if t < CIRCLE_CROSSOVER {
        let th = wrap_angle(theta);
        let reach = (160.0 * t).sqrt() + PI;
        let kmax = (reach / TAU).ceil() as i64;
        let c = 1.0 / (4.0 * PI * t).sqrt();
        let mut s = 0.0;
        for k in -kmax..=kmax {
            let x = th + TAU * k as f64;
            s += -x / (2.0 * t) * (-x * x / (4.0 * t)).exp();
        }
        Ok(c * s)
    } else {
        let mut s = 0.0;
        let mut n = 1.0f64;
        loop {
            let a = (-n * n * t).exp();
            if a < 1e-17 {
                break;
            }
            s -= a * n * (n * theta).sin();
            n += 1.0;
        }
        Ok(2.0 * s / TAU)
    }
}

/// Wrapped normal density with angular standard deviation `sigma`.
pub fn wrapped_normal_pdf(delta: f64, sigma: f64) -> Result<f64> {
    heat_kernel_circle(delta, 0.5 * sigma * sigma)
}

/// Density of `exp(tΔ)δ_m` on `S^{d-1}`, `d ≥ 3`, at a point with
/// `<m, x> = cos_angle`.
///
/// Sums `e^{-ℓ(ℓ+d-2)t} (2ℓ+d-2)/(d-2) C_ℓ^{(d-2)/2}(cos_angle)` over `ℓ`
/// and divides by `|S^{d-1}|`; stops once the bound `C_ℓ(1)` on the
/// Gegenbauer factor makes the terms negligible and decreasing.
pub fn heat_kernel_sphere(cos_angle: f64, t: f64, d: usize) -> Result<f64> {
    if d < 3 {
        return Err(Error::InvalidInput(format!(
            "sphere heat kernel needs d ≥ 3, got {d}; use the circle kernel"
        )));
    }
    check_time(t)?;
    if t < SPHERE_MIN_TIME {
        return Err(Error::InvalidInput(format!(
            "heat time {t} is below the series floor {SPHERE_MIN_TIME}"
        )));
    }
    if !(-1.0..=1.0).contains(&cos_angle) {
        return Err(Error::InvalidInput(format!("cos_angle = {cos_angle} outside [-1, 1]")));
    }
    let x = cos_angle;
    let lam = 0.5 * (d as f64 - 2.0);
    let dm2 = d as f64 - 2.0;
    // Gegenbauer three-term recurrence, at x and at 1 (for the bound).
    let (mut c0, mut c1) = (1.0, 2.0 * lam * x);
    let (mut b0, mut b1) = (1.0, 2.0 * lam);
    let mut sum = 1.0;
    let mut prev_bound = f64::INFINITY;
    let mut l = 1usize;
    loop {
        let lf = l as f64;
        let decay = (-lf * (lf + dm2) * t).exp();
        let factor = decay * (2.0 * lf + dm2) / dm2;
        sum += factor * c1;
        let bound = factor * b1;
        if bound < TAIL * sum.abs().max(1.0) && bound < prev_bound {
            break;
        }
        if l > 10_000_000 {
            return Err(Error::InvalidInput(format!("series did not converge at t = {t}")));
        }
        prev_bound = bound;
        l += 1;
        let nf = l as f64;
        let c2 = (2.0 * x * (nf + lam - 1.0) * c1 - (nf + 2.0 * lam - 2.0) * c0) / nf;
        let b2 = (2.0 * (nf + lam - 1.0) * b1 - (nf + 2.0 * lam - 2.0) * b0) / nf;
        c0 = c1;
        c1 = c2;
        b0 = b1;
        b1 = b2;
    }
    Ok(sum / sphere_area(d))
}

/// Resolution of the accumulated heat-time shift: `2^-100`.
const SHIFT_UNIT: f64 = 7.888609052210118e-31;
const SHIFT_SCALE: f64 = 1.2676506002282294e30; // 2^100

/// Backward evolution counts as a collapse once a component's remaining
/// variance drops below this fraction of its current one. Narrower
/// components have no representable density, and `σ²/2` rounding would
/// otherwise let `t = T_min` through by a few ulps.
pub const COLLAPSE_REL_TOL: f64 = 1e-12;

/// One mixture component. A Dirac mass keeps no variance.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatComponent {
    pub center: UnitVector,
    pub weight: f64,
    base_var: f64,
    dirac: bool,
}

impl HeatComponent {
    pub fn gaussian(center: UnitVector, var: f64, weight: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::InvalidInput(format!("variance {var} must be positive")));
        }
        Ok(HeatComponent {
            center,
            weight,
            base_var: var,
            dirac: false,
        })
    }

    pub fn dirac(center: UnitVector, weight: f64) -> Self {
        HeatComponent {
            center,
            weight,
            base_var: 0.0,
            dirac: true,
        }
    }

    pub fn is_dirac(&self) -> bool {
        self.dirac
    }
}

/// `Σ_j α_j exp(σ_j² Δ) δ_{m_j}`, carrying the heat time elapsed since
/// construction as an exact fixed-point shift, so composing evolutions is
/// exact.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMixture {
    d: usize,
    components: Vec<HeatComponent>,
    /// Elapsed `-γt`, in units of `2^-100`.
    shift: i128,
}

impl HeatMixture {
    pub fn new(components: Vec<HeatComponent>) -> Result<Self> {
        let d = components
            .first()
            .map(|c| c.center.dim())
            .ok_or_else(|| Error::InvalidInput("empty mixture".into()))?;
        let mut total = 0.0;
        for (j, c) in components.iter().enumerate() {
            if c.center.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.center.dim(),
                });
            }
            if !(c.weight >= 0.0) {
                return Err(Error::InvalidInput(format!("component #{} has a negative weight", j + 1)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        Ok(HeatMixture { d, components, shift: 0 })
    }

    /// Gaussian components on the circle at the given angles.
    pub fn on_circle(means: &[f64], vars: &[f64], weights: &[f64]) -> Result<Self> {
        if means.len() != vars.len() || means.len() != weights.len() {
            return Err(Error::InvalidInput("means, variances and weights differ in length".into()));
        }
        let comps = means
            .iter()
            .zip(vars)
            .zip(weights)
            .map(|((&m, &v), &w)| HeatComponent::gaussian(UnitVector::from_angle(2, m), v, w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[HeatComponent] {
        &self.components
    }

    fn shift_f64(&self) -> f64 {
        self.shift as f64 * SHIFT_UNIT
    }

    /// Current heat time of each component (`None` for Dirac masses).
    pub fn variances(&self) -> Vec<Option<f64>> {
        let s = self.shift_f64();
        self.components
            .iter()
            .map(|c| if c.dirac { None } else { Some(c.base_var + s) })
            .collect()
    }

    /// Backward horizon: the smallest current variance.
    pub fn t_min(&self) -> f64 {
        self.variances().into_iter().flatten().fold(f64::INFINITY, f64::min)
    }

    /// Heat-time evolution `σ_j² ← σ_j² - γt`: `γ = -1` diffuses, `γ = +1`
    /// runs the backward heat equation and fails at the first collapse.
    pub fn evolve(&self, t: f64, gamma: i8) -> Result<HeatMixture> {
        if gamma != 1 && gamma != -1 {
            return Err(Error::InvalidInput(format!("gamma = {gamma} must be ±1")));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("time {t} must be finite and ≥ 0")));
        }
        let scaled = t * SHIFT_SCALE;
        if scaled >= 2f64.powi(120) || scaled.fract() != 0.0 {
            return Err(Error::InvalidInput(format!(
                "time {t} is outside the exactly representable range"
            )));
        }
        let step = scaled as i128;
        if gamma == -1 && t > 0.0 {
            if let Some(j) = self.components.iter().position(|c| c.dirac) {
                return Err(Error::DiracComponent {
                    component: j,
                    what: "forward evolution".into(),
                });
            }
        }
        if gamma == 1 {
            for (j, v) in self.variances().into_iter().enumerate() {
                if let Some(v) = v {
                    if t >= v * (1.0 - COLLAPSE_REL_TOL) {
                        return Err(Error::MixtureCollapse {
                            component: j,
                            t,
                            t_min: self.t_min(),
                        });
                    }
                }
            }
        }
        let mut out = self.clone();
        out.shift = if gamma == 1 { self.shift - step } else { self.shift + step };
        Ok(out)
    }

    /// `Σ_j α_j p_{σ_j²}(m_j, x)`.
    pub fn density(&self, x: &UnitVector) -> Result<f64> {
        if x.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.dim(),
            });
        }
        let mut s = 0.0;
        for (j, (c, v)) in self.components.iter().zip(self.variances()).enumerate() {
            let v = v.ok_or_else(|| Error::DiracComponent {
                component: j,
                what: "density".into(),
            })?;
            let val = if self.d == 2 {
                let a = x.coords()[1].atan2(x.coords()[0]) - c.center.coords()[1].atan2(c.center.coords()[0]);
                heat_kernel_circle(a, v)?
            } else {
                heat_kernel_sphere(dot(x.coords(), c.center.coords()).clamp(-1.0, 1.0), v, self.d)?
            };
            s += c.weight * val;
        }
        Ok(s)
    }

    /// Density at angle `theta` on the circle.
    pub fn density_at_angle(&self, theta: f64) -> Result<f64> {
        self.check_circle()?;
        self.density(&UnitVector::from_angle(2, theta))
    }

    /// `μ'(θ)/μ(θ)` on the circle.
    pub fn log_derivative_at_angle(&self, theta: f64) -> Result<f64> {
        self.check_circle()?;
        let mut f = 0.0;
        let mut df = 0.0;
        for (j, (c, v)) in self.components.iter().zip(self.variances()).enumerate() {
            let v = v.ok_or_else(|| Error::DiracComponent {
                component: j,
                what: "density".into(),
            })?;
            let a = theta - c.center.coords()[1].atan2(c.center.coords()[0]);
            f += c.weight * heat_kernel_circle(a, v)?;
            df += c.weight * heat_kernel_circle_derivative(a, v)?;
        }
        Ok(df / f)
    }

    fn check_circle(&self) -> Result<()> {
        if self.d != 2 {
            return Err(Error::InvalidInput("angle evaluation needs d = 2".into()));
        }
        Ok(())
    }
}

/// `evolve` as a free function.
pub fn mixture_evolve(m: &HeatMixture, t: f64, gamma: i8) -> Result<HeatMixture> {
    m.evolve(t, gamma)
}

/// `density` as a free function.
pub fn mixture_density(m: &HeatMixture, x: &UnitVector) -> Result<f64> {
    m.density(x)
}
