//! Particle dynamics: the finite-β attention field, its integrators and
//! clocks, and the alignment and pairing limit flows.

mod integrate;
pub(crate) mod kernel;
mod limits;

pub use integrate::{
    integrate, Clock, FnObserver, IntegratorConfig, MetricSample, Observer, Scheme, Snapshot,
    Trajectory,
};
pub use limits::{
    alignment_field, closest_pair, integrate_alignment, integrate_alignment_with,
    integrate_pairing_limit, pairing_limit_field, PairingLimitRun,
};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sphere::{norm, normalize_into, TangentVector, UnitVector, UNIT_TOL};
use kernel::RowOutput;

/// Query, key and value matrices and the inverse temperature β.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub beta: f64,
}

impl ModelParams {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, beta: f64) -> Result<Self> {
        let d = q.rows();
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if !m.is_square() || m.rows() != d {
                return Err(Error::InvalidInput(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if d < 2 {
            return Err(Error::InvalidInput("dimension must be at least 2".into()));
        }
        // β = 0 (uniform weights) is allowed for the single-layer map.
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "beta = {beta} must be nonnegative"
            )));
        }
        Ok(ModelParams { q, k, v, beta })
    }

    /// `Q = K = V = I`.
    pub fn identity(d: usize, beta: f64) -> Result<Self> {
        Self::new(
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
            beta,
        )
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// `B = QᵀK`, so that `<Qx, Ky> = <x, By>`.
    pub fn qk(&self) -> Matrix {
        self.q.transpose().matmul(&self.k)
    }

    /// `V Kᵀ Q`, the matrix whose dominant eigenspace attracts the
    /// alignment phase.
    pub fn alignment_matrix(&self) -> Matrix {
        self.v.matmul(&self.k.transpose()).matmul(&self.q)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.q.clone(), self.k.clone(), self.v.clone(), beta)
    }
}

/// `N` points on `S^{d-1}` plus the model time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    d: usize,
    points: Vec<f64>,
    pub time: f64,
}

impl ParticleState {
    /// Takes `N·d` row-major coordinates; every row must have unit norm.
    pub fn from_flat(d: usize, points: Vec<f64>) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidInput("dimension must be at least 2".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(d) {
            return Err(Error::InvalidInput(format!(
                "{} coordinates do not form a nonempty set of {d}-vectors",
                points.len()
            )));
        }
        for (i, x) in points.chunks(d).enumerate() {
            let n = norm(x);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidInput(format!("particle {i} has |x| = {n}")));
            }
        }
        Ok(ParticleState {
            d,
            points,
            time: 0.0,
        })
    }

    pub fn from_points(points: &[UnitVector]) -> Result<Self> {
        let d = points
            .first()
            .map(|p| p.dim())
            .ok_or_else(|| Error::InvalidInput("no particles".into()))?;
        let mut flat = Vec::with_capacity(points.len() * d);
        for p in points {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            flat.extend_from_slice(p.coords());
        }
        Self::from_flat(d, flat)
    }

    /// Points at the given angles on the circle of the first two axes.
    pub fn from_angles(d: usize, angles: &[f64]) -> Result<Self> {
        let pts: Vec<UnitVector> = angles
            .iter()
            .map(|&a| UnitVector::from_angle(d, a))
            .collect();
        Self::from_points(&pts)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn unit(&self, i: usize) -> UnitVector {
        UnitVector::new(self.point(i).to_vec()).expect("state invariant")
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.d)
    }

    /// Angles `atan2(x₁, x₀)` in `[0, 2π)`.
    pub fn angles(&self) -> Vec<f64> {
        self.iter()
            .map(|x| x[1].atan2(x[0]).rem_euclid(std::f64::consts::TAU))
            .collect()
    }

    /// Reorders the particles: new particle `k` is old particle `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        for &i in perm {
            points.extend_from_slice(self.point(i));
        }
        ParticleState {
            d: self.d,
            points,
            time: self.time,
        }
    }

    /// Largest `| |x_i| - 1 |`.
    pub fn max_norm_defect(&self) -> f64 {
        self.iter()
            .map(|x| (norm(x) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn points_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub(crate) fn into_flat(self) -> Vec<f64> {
        self.points
    }

    pub(crate) fn from_raw(d: usize, points: Vec<f64>, time: f64) -> Self {
        ParticleState { d, points, time }
    }
}

fn check_compatible(s: &ParticleState, p: &ModelParams) -> Result<()> {
    if s.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: s.dim(),
        });
    }
    Ok(())
}

/// Attention field for every particle as one flat `N × d` buffer.
pub fn attention_field_flat(s: &ParticleState, p: &ModelParams) -> Result<Vec<f64>> {
    check_compatible(s, p)?;
    let mut out = vec![0.0; s.points.len()];
    kernel::eval_all(s, p, RowOutput::Tangent, &mut out);
    Ok(out)
}

/// `P_{x_i}(Σ_j softmax_j(β<Qx_i, Kx_j>) V x_j)` for every particle.
pub fn attention_field(s: &ParticleState, p: &ModelParams) -> Result<Vec<TangentVector>> {
    let flat = attention_field_flat(s, p)?;
    Ok(flat
        .chunks(s.d)
        .enumerate()
        .map(|(i, v)| TangentVector {
            base: s.unit(i),
            vec: v.to_vec(),
        })
        .collect())
}

/// Softmax-weighted average `Σ_j w_ij V x_j` without tangent projection.
pub fn attention_mean_flat(s: &ParticleState, p: &ModelParams) -> Result<Vec<f64>> {
    check_compatible(s, p)?;
    let mut out = vec![0.0; s.points.len()];
    kernel::eval_all(s, p, RowOutput::Mean, &mut out);
    Ok(out)
}

/// One transformer layer: `x_i ← N(x_i + Σ_j w_ij V x_j)`.
pub fn discrete_layer_step(s: &ParticleState, p: &ModelParams) -> Result<ParticleState> {
    let mean = attention_mean_flat(s, p)?;
    let mut next = s.clone();
    for (i, (x, m)) in next
        .points
        .chunks_mut(s.d)
        .zip(mean.chunks(s.d))
        .enumerate()
    {
        for (xi, mi) in x.iter_mut().zip(m) {
            *xi += mi;
        }
        normalize_into(x).map_err(|e| Error::Integration {
            step: 0,
            particle: i,
            message: e.to_string(),
        })?;
    }
    Ok(next)
}

/// `β·χ_β` at particle `i`, the heat-phase field in rescaled time.
pub fn rescaled_heat_field(s: &ParticleState, p: &ModelParams, i: usize) -> Result<TangentVector> {
    check_compatible(s, p)?;
    if i >= s.len() {
        return Err(Error::InvalidInput(format!(
            "particle index {i} out of range"
        )));
    }
    let v = kernel::eval_row(s, p, i, RowOutput::Tangent);
    Ok(TangentVector {
        base: s.unit(i),
        vec: v.iter().map(|x| p.beta * x).collect(),
    })
}
