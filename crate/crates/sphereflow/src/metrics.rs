//! Distances, energies, clusters and densities of particle configurations.

use crate::dynamics::{ModelParams, ParticleState};
use crate::error::{Error, Result};
use crate::quadrature::{graded_breaks, integrate_doubling_vec, GaussLegendre};
use crate::sphere::{dot, norm, project_into, sample_uniform, TangentVector, UnitVector};
use crate::special::gamma_half;
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::{PI, TAU};

/// Default number of directions for [`sliced_w1_sphere`].
pub const DEFAULT_PROJECTIONS: usize = 128;
/// Default single-linkage threshold for [`cluster_detect`], in radians.
pub const DEFAULT_CLUSTER_TOL: f64 = 0.05;

/// Weighted point cloud on `S^{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    d: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `points` is `n × d` row-major, each row of unit norm.
    pub fn new(d: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let s = ParticleState::from_flat(d, points)?;
        if weights.len() != s.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} points",
                weights.len(),
                s.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        Ok(EmpiricalMeasure {
            d,
            points: s.into_flat(),
            weights,
        })
    }

    /// The empirical measure `(1/N) Σ δ_{x_i}`.
    pub fn uniform(s: &ParticleState) -> Self {
        let n = s.len();
        EmpiricalMeasure {
            d: s.dim(),
            points: s.flat().to_vec(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn from_angles(angles: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        let pts: Vec<f64> = angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect();
        let w = match weights {
            Some(w) => w.to_vec(),
            None => vec![1.0 / angles.len() as f64; angles.len()],
        };
        Self::new(2, pts, w)
    }

    /// Discretizes a density on the circle into `cells` equal cells, each
    /// carrying its midpoint-rule mass at its midpoint. The error in W1 is
    /// at most half a cell width.
    pub fn from_circle_density(density: impl Fn(f64) -> f64, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidInput("need at least two cells".into()));
        }
        let h = TAU / cells as f64;
        let angles: Vec<f64> = (0..cells).map(|i| (i as f64 + 0.5) * h).collect();
        let mut w: Vec<f64> = angles.iter().map(|&a| density(a)).collect();
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("density must be finite and nonnegative".into()));
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        Self::from_angles(&angles, Some(&w))
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Angles in `[0, 2π)`; only meaningful for `d = 2`.
    pub fn angles(&self) -> Vec<f64> {
        self.points
            .chunks(self.d)
            .map(|x| x[1].atan2(x[0]).rem_euclid(TAU))
            .collect()
    }
}

/// `∫_0^{2π} |F - G - c|` minimized over `c`, given the sorted breakpoints of
/// the step function `F - G` and its jumps.
fn circle_cdf_transport(mut events: Vec<(f64, f64)>) -> f64 {
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Piecewise-constant value of F - G on each interval, and its length.
    let mut pieces = Vec::with_capacity(events.len() + 1);
    let mut level = 0.0;
    let mut prev = 0.0;
    for &(theta, jump) in &events {
        if theta > prev {
            pieces.push((level, theta - prev));
        }
        level += jump;
        prev = theta;
    }
    if TAU > prev {
        pieces.push((level, TAU - prev));
    }
    // The optimal shift is a length-weighted median of the levels.
    let mut sorted = pieces.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * sorted.iter().map(|p| p.1).sum::<f64>();
    let mut acc = 0.0;
    let mut c = sorted.last().map(|p| p.0).unwrap_or(0.0);
    for &(v, len) in &sorted {
        acc += len;
        if acc >= half {
            c = v;
            break;
        }
    }
    pieces.iter().map(|&(v, len)| (v - c).abs() * len).sum()
}

/// Wasserstein-1 distance on the circle with arc-length cost.
///
/// Uses `W1 = min_c ∫ |F - G - c|`, exact for any pair of discrete
/// measures (equal or unequal sizes, arbitrary weights).
pub fn w1_circle(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    for m in [a, b] {
        if m.d != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: m.d });
        }
    }
    let mut events = Vec::with_capacity(a.len() + b.len());
    events.extend(a.angles().into_iter().zip(a.weights.iter().copied()));
    events.extend(b.angles().into_iter().zip(b.weights.iter().map(|w| -w)));
    Ok(circle_cdf_transport(events))
}

/// `∫ |F - G|` on the line for two weighted samples.
fn w1_line(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut ev: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    ev.extend(a.iter().copied());
    ev.extend(b.iter().map(|&(x, w)| (x, -w)));
    ev.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut total = 0.0;
    let mut level = 0.0;
    for w in ev.windows(2) {
        level += w[0].1;
        total += level.abs() * (w[1].0 - w[0].0);
    }
    total
}

/// Mean of `|<u, v>|` over uniform `u` on `S^{d-1}` for a unit `v`:
/// `Γ(d/2) / (√π Γ((d+1)/2))`.
pub fn sliced_constant(d: usize) -> f64 {
    gamma_half(d) / (PI.sqrt() * gamma_half(d + 1))
}

/// Sliced W1 estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicedW1 {
    pub value: f64,
    pub stderr: f64,
}

/// Average over `n_proj` random directions of the 1-D W1 between the
/// projected measures.
pub fn sliced_w1_sphere<R: Rng + ?Sized>(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    n_proj: usize,
    rng: &mut R,
) -> Result<SlicedW1> {
    if a.d != b.d {
        return Err(Error::DimensionMismatch { expected: a.d, got: b.d });
    }
    if n_proj == 0 {
        return Err(Error::InvalidInput("n_proj must be at least 1".into()));
    }
    let dirs: Vec<UnitVector> = (0..n_proj).map(|_| sample_uniform(rng, a.d)).collect();
    let project = |m: &EmpiricalMeasure, u: &UnitVector| -> Vec<(f64, f64)> {
        (0..m.len()).map(|i| (dot(m.point(i), u.coords()), m.weights[i])).collect()
    };
    let vals: Vec<f64> = dirs.par_iter().map(|u| w1_line(&project(a, u), &project(b, u))).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let stderr = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(SlicedW1 { value: mean, stderr })
}

/// The shifted interaction energy
/// `E = (1/(2βN²)) Σ_{i,j} e^{β(<Qx_i, Kx_j> - M)}`, `M` the largest score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionEnergy {
    pub scaled: f64,
    pub shift: f64,
    pub beta: f64,
    /// `false` when `QᵀK` is not symmetric; the value is then not a
    /// Lyapunov function of the dynamics.
    pub symmetric: bool,
}

impl InteractionEnergy {
    /// `ln` of the unshifted energy, `ln E + βM`.
    pub fn ln_value(&self) -> f64 {
        self.scaled.ln() + self.beta * self.shift
    }
}

pub fn interaction_energy(s: &ParticleState, p: &ModelParams) -> Result<InteractionEnergy> {
    if s.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: s.dim(),
        });
    }
    let d = s.dim();
    let n = s.len();
    let qk = p.qk();
    let symmetric = qk.is_symmetric(1e-12 * qk.max_abs().max(1.0));
    let qx: Vec<f64> = s.iter().flat_map(|x| p.q.apply(x)).collect();
    let kx: Vec<f64> = s.iter().flat_map(|x| p.k.apply(x)).collect();
    let score = |i: usize, j: usize| dot(&qx[i * d..(i + 1) * d], &kx[j * d..(j + 1) * d]);
    let m = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| score(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    // Row sums in parallel, combined in index order: thread-count independent.
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| (p.beta * (score(i, j) - m)).exp()).sum())
        .collect();
    let total: f64 = rows.iter().sum();
    Ok(InteractionEnergy {
        scaled: total / (2.0 * p.beta * (n * n) as f64),
        shift: m,
        beta: p.beta,
        symmetric,
    })
}

/// One group found by [`cluster_detect`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub centroid: UnitVector,
    pub weight: f64,
    /// Particle indices, increasing.
    pub members: Vec<usize>,
}

impl Cluster {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }
}

/// Clusters ordered by their smallest member index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.weight).collect()
    }

    /// Centroid azimuths `atan2(c₁, c₀)` in `[0, 2π)`.
    pub fn azimuths(&self) -> Vec<f64> {
        self.clusters
            .iter()
            .map(|c| c.centroid.coords()[1].atan2(c.centroid.coords()[0]).rem_euclid(TAU))
            .collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index is the root, so roots are canonical.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clusters under geodesic distance `≤ angular_tol`.
pub fn cluster_detect(s: &ParticleState, angular_tol: f64) -> Result<ClusterSet> {
    if !(angular_tol > 0.0 && angular_tol < PI) {
        return Err(Error::InvalidInput(format!(
            "angular_tol = {angular_tol} must lie in (0, π)"
        )));
    }
    let n = s.len();
    let mut uf = UnionFind::new(n);
    if s.dim() == 2 {
        // On the circle the components are the arcs between gaps wider
        // than the threshold.
        let ang = s.angles();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ang[a].total_cmp(&ang[b]).then(a.cmp(&b)));
        for w in order.windows(2) {
            if ang[w[1]] - ang[w[0]] <= angular_tol {
                uf.union(w[0], w[1]);
            }
        }
        if n > 1 {
            let (first, last) = (order[0], order[n - 1]);
            if ang[first] + TAU - ang[last] <= angular_tol {
                uf.union(first, last);
            }
        }
    } else {
        let c = angular_tol.cos();
        for i in 0..n {
            for j in i + 1..n {
                if dot(s.point(i), s.point(j)) >= c {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let d = s.dim();
    let mut clusters = Vec::with_capacity(groups.len());
    for (k, members) in groups.into_values().enumerate() {
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, x) in mean.iter_mut().zip(s.point(i)) {
                *m += x;
            }
        }
        let nm = norm(&mean) / members.len() as f64;
        if nm < 1e-12 {
            return Err(Error::DegenerateCentroid { cluster: k, norm: nm });
        }
        clusters.push(Cluster {
            centroid: UnitVector::normalize(&mean)?,
            weight: members.len() as f64 / n as f64,
            members,
        });
    }
    Ok(ClusterSet { clusters })
}

/// Density values on a uniform grid of the circle.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleDensity {
    pub angles: Vec<f64>,
    pub values: Vec<f64>,
}

impl CircleDensity {
    /// Periodic trapezoid rule.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * TAU / self.values.len() as f64
    }

    /// `∫ |f - g|` by the periodic trapezoid rule on this grid.
    pub fn l1_distance(&self, g: impl Fn(f64) -> f64) -> f64 {
        let h = TAU / self.values.len() as f64;
        self.angles.iter().zip(&self.values).map(|(&a, &v)| (v - g(a)).abs()).sum::<f64>() * h
    }
}

/// Wrapped-Gaussian kernel density estimate with standard deviation
/// `bandwidth` on `grid_size` equally spaced angles starting at 0.
pub fn kde_circle(angles: &[f64], bandwidth: f64, grid_size: usize) -> Result<CircleDensity> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidInput(format!("bandwidth {bandwidth} must be positive")));
    }
    if grid_size < 2 || angles.is_empty() {
        return Err(Error::InvalidInput("need samples and at least two grid points".into()));
    }
    let t = 0.5 * bandwidth * bandwidth;
    let grid: Vec<f64> = (0..grid_size).map(|i| i as f64 * TAU / grid_size as f64).collect();
    let inv_n = 1.0 / angles.len() as f64;
    // Beyond 12 bandwidths the kernel is below 1e-31 of its peak.
    let reach = 12.0 * bandwidth;
    let values = grid
        .par_iter()
        .map(|&g| {
            let mut s = 0.0;
            for &a in angles {
                let delta = crate::heat::wrap_angle(g - a);
                if reach < PI && delta.abs() > reach {
                    continue;
                }
                s += crate::heat::heat_kernel_circle(delta, t).expect("t > 0");
            }
            s * inv_n
        })
        .collect();
    Ok(CircleDensity { angles: grid, values })
}

fn frame(u: &[f64]) -> Vec<Vec<f64>> {
    // Orthonormal basis of u⊥ by Gram–Schmidt on the coordinate axes.
    let d = u.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()));
    for &ax in &axes {
        if basis.len() == d - 1 {
            break;
        }
        let mut v = vec![0.0; d];
        v[ax] = 1.0;
        for _ in 0..2 {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            for e in &basis {
                let c = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            basis.push(v.iter().map(|a| a / nv).collect());
        }
    }
    basis
}

/// `χ_β[μ](x) = P_x(∫e^{β<Qx,Ky>} Vy dμ / ∫e^{β<Qx,Ky>} dμ)` for a smooth
/// positive density on `S^1` or `S^2`, by Gauss–Legendre panels of order
/// `n_quad` graded around the peak of the exponential weight.
pub fn kernel_field_quadrature(
    density: &dyn Fn(&[f64]) -> f64,
    p: &ModelParams,
    x: &UnitVector,
    n_quad: usize,
) -> Result<TangentVector> {
    let d = p.dim();
    if x.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.dim() });
    }
    if d > 3 {
        return Err(Error::InvalidInput("quadrature field supports d = 2 and d = 3".into()));
    }
    if n_quad < 4 {
        return Err(Error::InvalidInput("n_quad must be at least 4".into()));
    }
    let z = p.k.transpose().matmul(&p.q).apply(x.coords());
    let nz = norm(&z);
    let kappa = p.beta * nz;
    let u: Vec<f64> = if nz > 0.0 {
        z.iter().map(|c| c / nz).collect()
    } else {
        x.coords().to_vec()
    };
    let perp = frame(&u);
    let rule = GaussLegendre::new(n_quad);
    let first = if kappa > 1.0 { 0.25 / kappa.sqrt() } else { 0.25 };
    let half = graded_breaks(PI, first);
    let positive = |f: f64| -> Result<f64> {
        if f > 0.0 && f.is_finite() {
            Ok(f)
        } else {
            Err(Error::InvalidInput(format!("density value {f} is not positive")))
        }
    };
    let mut bad: Option<Error> = None;
    // Coefficients of the unnormalized mean in the frame (u, perp...),
    // preceded by the normalizer.
    let coeffs: Vec<f64> = if d == 2 {
        let mut breaks: Vec<f64> = half.iter().rev().map(|b| -b).collect();
        breaks.extend(half.iter().skip(1));
        let e = &perp[0];
        integrate_doubling_vec(&rule, &breaks, 1e-13, 12, 3, |psi, out| {
            let (sn, cs) = psi.sin_cos();
            let y = [cs * u[0] + sn * e[0], cs * u[1] + sn * e[1]];
            let f = match positive(density(&y)) {
                Ok(f) => f,
                Err(err) => {
                    bad.get_or_insert(err);
                    0.0
                }
            };
            // 1 - cos ψ = 2 sin²(ψ/2) keeps the exponent accurate near 0.
            let s2 = (0.5 * psi).sin();
            let w = (-2.0 * kappa * s2 * s2).exp() * f;
            out[0] = w;
            out[1] = w * cs;
            out[2] = w * sn;
        })?
    } else {
        let (e1, e2) = (&perp[0], &perp[1]);
        let mut n_phi = 64usize;
        let mut prev: Option<Vec<f64>> = None;
        loop {
            let cur = integrate_doubling_vec(&rule, &half, 1e-13, 12, 4, |psi, out| {
                let (sn, cs) = psi.sin_cos();
                let s2 = (0.5 * psi).sin();
                let w = (-2.0 * kappa * s2 * s2).exp() * sn;
                let mut acc = [0.0; 4];
                for k in 0..n_phi {
                    let (sp, cp) = (TAU * k as f64 / n_phi as f64).sin_cos();
                    let y: Vec<f64> = (0..3).map(|c| cs * u[c] + sn * (cp * e1[c] + sp * e2[c])).collect();
                    let f = match positive(density(&y)) {
                        Ok(f) => f,
                        Err(err) => {
                            bad.get_or_insert(err);
                            0.0
                        }
                    };
                    acc[0] += f;
                    acc[1] += f * cs;
                    acc[2] += f * sn * cp;
                    acc[3] += f * sn * sp;
                }
                let h = TAU / n_phi as f64;
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = w * a * h;
                }
            })?;
            if let Some(pv) = &prev {
                let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let change = cur.iter().zip(pv).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                if change <= 1e-12 * scale {
                    break cur;
                }
                if n_phi >= 4096 {
                    return Err(Error::QuadratureNoConvergence {
                        level: n_phi,
                        change: change / scale,
                    });
                }
            }
            prev = Some(cur);
            n_phi *= 2;
        }
    };
    if let Some(err) = bad {
        return Err(err);
    }
    let mut mean = vec![0.0; d];
    for c in 0..d {
        mean[c] = coeffs[1] * u[c] + perp.iter().enumerate().map(|(k, e)| coeffs[2 + k] * e[c]).sum::<f64>();
    }
    let mut out = p.v.apply(&mean);
    out.iter_mut().for_each(|v| *v /= coeffs[0]);
    project_into(x.coords(), &mut out);
    Ok(TangentVector { base: x.clone(), vec: out })
}

#[cfg(test)]
mod tests;
