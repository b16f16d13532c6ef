//! The alignment limit flow (large β, O(1) times) and the pairing limit
//! ODE (exponentially long times).

use super::integrate::{run, FieldKind, IntegratorConfig, MetricSample, Observer, Trajectory};
use super::{check_compatible, Clock, ModelParams, ParticleState, Scheme};
use crate::error::{Error, Result};
use crate::sphere::{dot, norm, project_into, TangentVector, UnitVector};

/// `P_x(V KᵀQ x / |KᵀQ x|)`.
pub fn alignment_field(x: &UnitVector, p: &ModelParams) -> Result<TangentVector> {
    if x.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: x.dim(),
        });
    }
    let kq = p.k.transpose().matmul(&p.q);
    let mut out = vec![0.0; x.dim()];
    alignment_into(&kq, &p.v, x.coords(), &mut out)?;
    Ok(TangentVector {
        base: x.clone(),
        vec: out,
    })
}

fn alignment_into(kq: &crate::Matrix, v: &crate::Matrix, x: &[f64], out: &mut [f64]) -> Result<()> {
    let z = kq.apply(x);
    let nz = norm(&z);
    if !(nz >= 1e-12) {
        return Err(Error::SingularQueryKey { norm: nz });
    }
    let zn: Vec<f64> = z.iter().map(|c| c / nz).collect();
    v.apply_into(&zn, out);
    project_into(x, out);
    Ok(())
}

/// Alignment flow with a caller-provided configuration (plain clock).
pub fn integrate_alignment_with(
    s0: &ParticleState,
    p: &ModelParams,
    cfg: &IntegratorConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    check_compatible(s0, p)?;
    if cfg.clock != Clock::Plain || cfg.scheme == Scheme::DiscreteLayer {
        return Err(Error::InvalidInput(
            "the alignment flow runs on the plain clock with a projected scheme".into(),
        ));
    }
    let kq = p.k.transpose().matmul(&p.q);
    let v = p.v.clone();
    let d = s0.dim();
    let field = move |s: &ParticleState, out: &mut [f64]| -> Result<()> {
        for (x, o) in s.iter().zip(out.chunks_mut(d)) {
            alignment_into(&kq, &v, x, o)?;
        }
        Ok(())
    };
    run(s0, FieldKind::Custom(&field), cfg, observers)
}

/// Alignment flow to time `t_end` with projected RK4 and step `h`,
/// snapshots every 10 steps.
pub fn integrate_alignment(
    s0: &ParticleState,
    p: &ModelParams,
    h: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let steps = (t_end / h).round().max(1.0) as usize;
    let cfg =
        IntegratorConfig::new(Scheme::ProjectedRk4, h, Clock::Plain, steps)?.with_snapshots(true);
    integrate_alignment_with(s0, p, &cfg, &mut [])
}

/// Inner products closer than this count as tied.
pub(crate) const TIE_TOL: f64 = 1e-14;

pub(crate) fn closest_pair_raw(s: &ParticleState) -> (usize, usize, f64) {
    let mut best = (0, 1, f64::NEG_INFINITY);
    let n = s.len();
    for i in 0..n {
        let xi = s.point(i);
        for j in i + 1..n {
            let c = dot(xi, s.point(j));
            if c > best.2 + TIE_TOL {
                best = (i, j, c);
            }
        }
    }
    best
}

/// The pair `(i, j)`, `i < j`, with the largest inner product;
/// lexicographically first on ties.
pub fn closest_pair(s: &ParticleState) -> Result<(usize, usize, f64)> {
    if s.len() < 2 {
        return Err(Error::InvalidInput(
            "closest pair needs at least two particles".into(),
        ));
    }
    Ok(closest_pair_raw(s))
}

fn pairing_into(s: &ParticleState, (i, j): (usize, usize), out: &mut [f64]) {
    let d = s.dim();
    out.iter_mut().for_each(|v| *v = 0.0);
    let (xi, xj) = (s.point(i), s.point(j));
    let oi = &mut out[i * d..(i + 1) * d];
    oi.copy_from_slice(xj);
    project_into(xi, oi);
    let oj = &mut out[j * d..(j + 1) * d];
    oj.copy_from_slice(xi);
    project_into(xj, oj);
}

/// `P_{y_i} y_j` at `i`, `P_{y_j} y_i` at `j`, zero elsewhere.
pub fn pairing_limit_field(s: &ParticleState, pair: (usize, usize)) -> Result<Vec<TangentVector>> {
    let (i, j) = pair;
    if i == j || i >= s.len() || j >= s.len() {
        return Err(Error::InvalidInput(format!("invalid pair ({i}, {j})")));
    }
    let mut out = vec![0.0; s.flat().len()];
    pairing_into(s, pair, &mut out);
    Ok(out
        .chunks(s.dim())
        .enumerate()
        .map(|(k, v)| TangentVector {
            base: s.unit(k),
            vec: v.to_vec(),
        })
        .collect())
}

/// Result of [`integrate_pairing_limit`].
#[derive(Debug, Clone)]
pub struct PairingLimitRun {
    pub trajectory: Trajectory,
    /// Rescaled time at which `<y_i, y_j>` first exceeds `1 - ε`,
    /// interpolated between steps; `None` if the horizon was reached first.
    pub t_eps: Option<f64>,
}

struct PairWatch {
    pair: (usize, usize),
    threshold: f64,
    last: Option<(f64, f64)>,
    crossing: Option<f64>,
}

impl Observer for PairWatch {
    fn name(&self) -> &str {
        "pair_inner"
    }

    fn observe(&mut self, _step: usize, t: f64, s: &ParticleState) -> Result<Option<MetricSample>> {
        let c = dot(s.point(self.pair.0), s.point(self.pair.1));
        if self.crossing.is_none() && c > self.threshold {
            self.crossing = Some(match self.last {
                Some((t0, c0)) if c > c0 => t0 + (t - t0) * (self.threshold - c0) / (c - c0),
                _ => t,
            });
        }
        self.last = Some((t, c));
        Ok(Some(MetricSample {
            t,
            value: c,
            stderr: None,
        }))
    }

    fn should_stop(&self) -> bool {
        self.crossing.is_some()
    }
}

/// Integrates the pairing limit ODE with projected RK4 until
/// `<y_i, y_j> > 1 - eps` or `max_steps` steps of size `h`.
pub fn integrate_pairing_limit(
    s0: &ParticleState,
    pair: (usize, usize),
    h: f64,
    eps: f64,
    max_steps: usize,
) -> Result<PairingLimitRun> {
    let (i, j) = pair;
    if i == j || i >= s0.len() || j >= s0.len() {
        return Err(Error::InvalidInput(format!("invalid pair ({i}, {j})")));
    }
    if !(eps > 0.0 && eps < 2.0) {
        return Err(Error::InvalidInput("eps must lie in (0, 2)".into()));
    }
    let cfg = IntegratorConfig::new(Scheme::ProjectedRk4, h, Clock::Plain, max_steps)?
        .with_stride(1)
        .with_snapshots(true);
    let field = move |s: &ParticleState, out: &mut [f64]| -> Result<()> {
        pairing_into(s, pair, out);
        Ok(())
    };
    let mut watch = PairWatch {
        pair,
        threshold: 1.0 - eps,
        last: None,
        crossing: None,
    };
    let trajectory = run(s0, FieldKind::Custom(&field), &cfg, &mut [&mut watch])?;
    Ok(PairingLimitRun {
        trajectory,
        t_eps: watch.crossing,
    })
}
