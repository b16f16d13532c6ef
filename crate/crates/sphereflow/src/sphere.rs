//! Primitive operations on the unit sphere `S^{d-1} ⊂ R^d`.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Tolerance on `| |x| - 1 |` accepted for a point on the sphere.
pub const UNIT_TOL: f64 = 1e-12;

/// Below this norm a pre-normalization vector is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-14;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A point on the sphere, `|coords| = 1` within [`UNIT_TOL`], `d ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    coords: Vec<f64>,
}

impl UnitVector {
    /// Accepts `coords` as is if it already has unit norm.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sphere dimension d = {} must be at least 2",
                coords.len()
            )));
        }
        let n = norm(&coords);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!("|x| = {n} is not 1")));
        }
        Ok(UnitVector { coords })
    }

    /// Rescales `v` onto the sphere.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidInput(
                "sphere dimension must be at least 2".into(),
            ));
        }
        let n = norm(v);
        if !(n >= DEGENERATE_NORM) || !n.is_finite() {
            return Err(Error::DegenerateStep { norm: n });
        }
        Ok(UnitVector {
            coords: v.iter().map(|x| x / n).collect(),
        })
    }

    /// The `i`-th standard basis vector of `R^d`.
    pub fn basis(d: usize, i: usize) -> Self {
        assert!(d >= 2 && i < d);
        let mut coords = vec![0.0; d];
        coords[i] = 1.0;
        UnitVector { coords }
    }

    /// Point at angle `theta` on the unit circle of the first two axes.
    pub fn from_angle(d: usize, theta: f64) -> Self {
        assert!(d >= 2);
        let mut coords = vec![0.0; d];
        coords[0] = theta.cos();
        coords[1] = theta.sin();
        UnitVector { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.coords
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: UnitVector,
    pub vec: Vec<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }
}

/// `P_x y = y - <x, y> x`.
pub fn project_tangent(x: &UnitVector, y: &[f64]) -> TangentVector {
    let mut vec = y.to_vec();
    project_into(x.coords(), &mut vec);
    TangentVector {
        base: x.clone(),
        vec,
    }
}

/// In-place `y ← y - <x, y> x` on raw slices.
#[inline]
pub fn project_into(x: &[f64], y: &mut [f64]) {
    let c = dot(x, y);
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi -= c * xi;
    }
}

/// `(x + h v) / |x + h v|`.
pub fn renormalized_step(x: &UnitVector, v: &TangentVector, h: f64) -> Result<UnitVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step h = {h} must be positive"
        )));
    }
    let mut out = x.coords().to_vec();
    step_into(&mut out, &v.vec, h)?;
    Ok(UnitVector { coords: out })
}

/// Raw-slice version of [`renormalized_step`], overwriting `x`.
#[inline]
pub fn step_into(x: &mut [f64], v: &[f64], h: f64) -> Result<()> {
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi += h * vi;
    }
    normalize_into(x)
}

#[inline]
pub fn normalize_into(x: &mut [f64]) -> Result<()> {
    let n = norm(x);
    if !(n >= DEGENERATE_NORM) || !n.is_finite() {
        return Err(Error::DegenerateStep { norm: n });
    }
    for xi in x.iter_mut() {
        *xi /= n;
    }
    Ok(())
}

/// Geodesic step `cos(h|v|) x + sin(h|v|) v/|v|`, kept for cross-checks of
/// the renormalized scheme.
pub fn exp_map_step(x: &UnitVector, v: &TangentVector, h: f64) -> UnitVector {
    let s = h * v.norm();
    if s == 0.0 {
        return x.clone();
    }
    let vn = v.norm();
    let (sn, cs) = s.sin_cos();
    let mut coords: Vec<f64> = x
        .coords()
        .iter()
        .zip(&v.vec)
        .map(|(xi, vi)| cs * xi + sn * vi / vn)
        .collect();
    // Re-project to absorb rounding.
    let n = norm(&coords);
    coords.iter_mut().for_each(|c| *c /= n);
    UnitVector { coords }
}

/// Arc length between two unit vectors, stable near 0 and near π.
pub fn geodesic_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (a, b) in x.iter().zip(y) {
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Uniform point on `S^{d-1}` as a normalized standard Gaussian vector.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, d: usize) -> UnitVector {
    assert!(d >= 2, "sphere dimension must be at least 2");
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = UnitVector::normalize(&g) {
            if norm(&g) > 1e-8 {
                return u;
            }
        }
    }
}
