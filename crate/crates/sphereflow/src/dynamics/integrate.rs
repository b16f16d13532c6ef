//! Time stepping with the three schemes and the three clocks.

use super::kernel::{self, RowOutput};
use super::limits::{closest_pair_raw, TIE_TOL};
use super::{check_compatible, ModelParams, ParticleState};
use crate::error::{Error, Result};
use crate::sphere::normalize_into;
use std::collections::BTreeMap;

/// Largest allowed exponent of the pairing clock factor `e^{β(1-d_t)}`.
pub const CLOCK_EXPONENT_CAP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// `x ← N(x + h F(x))`.
    ProjectedEuler,
    /// Classical RK4 with stages renormalized onto the sphere.
    ProjectedRk4,
    /// `x ← N(x + h c Σ_j w_ij V x_j)`: the transformer layer update, with
    /// the clock factor `c` and no tangent projection.
    DiscreteLayer,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ProjectedEuler => "projected-euler",
            Scheme::ProjectedRk4 => "projected-rk4",
            Scheme::DiscreteLayer => "discrete-layer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "projected-euler" => Ok(Scheme::ProjectedEuler),
            "projected-rk4" => Ok(Scheme::ProjectedRk4),
            "discrete-layer" => Ok(Scheme::DiscreteLayer),
            _ => Err(Error::Unknown(format!("scheme '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Clock {
    /// Step in model time.
    Plain,
    /// Step in `s = t/β`; the field is `β χ_β`.
    Heat,
    /// Step in `τ` with `dτ = e^{β(1-d_t)} dt`, `d_t` the closest-pair
    /// inner product.
    Pairing,
}

impl Clock {
    pub fn name(&self) -> &'static str {
        match self {
            Clock::Plain => "plain",
            Clock::Heat => "heat",
            Clock::Pairing => "pairing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Clock::Plain),
            "heat" => Ok(Clock::Heat),
            "pairing" => Ok(Clock::Pairing),
            _ => Err(Error::Unknown(format!("clock '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Step in the clock's own time variable.
    pub h: f64,
    pub clock: Clock,
    pub max_steps: usize,
    /// Observers and snapshots fire every `stride` steps (and at the end).
    pub stride: usize,
    pub keep_snapshots: bool,
    /// Worker threads for the kernel; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, h: f64, clock: Clock, max_steps: usize) -> Result<Self> {
        let cfg = IntegratorConfig {
            scheme,
            h,
            clock,
            max_steps,
            stride: 10,
            keep_snapshots: false,
            threads: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidInput(format!(
                "step h = {} must be positive",
                self.h
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidInput("max_steps must be at least 1".into()));
        }
        if self.stride < 1 {
            return Err(Error::InvalidInput("stride must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidInput("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_snapshots(mut self, keep: bool) -> Self {
        self.keep_snapshots = keep;
        self
    }

    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }
}

/// One recorded value of an observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub t: f64,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub rescaled_time: f64,
    pub state: ParticleState,
}

/// Metric callback, invoked on the coordinating thread.
pub trait Observer {
    fn name(&self) -> &str;

    /// `t` is the clock's own time (model time for the plain clock).
    fn observe(
        &mut self,
        step: usize,
        t: f64,
        state: &ParticleState,
    ) -> Result<Option<MetricSample>>;

    /// Asked after each observation; `true` ends the integration.
    fn should_stop(&self) -> bool {
        false
    }
}

/// Observer from a closure returning the value to record.
pub struct FnObserver<F> {
    name: String,
    f: F,
}

impl<F: FnMut(&ParticleState) -> Result<f64>> FnObserver<F> {
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnObserver {
            name: name.into(),
            f,
        }
    }
}

impl<F: FnMut(&ParticleState) -> Result<f64>> Observer for FnObserver<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn observe(
        &mut self,
        _step: usize,
        t: f64,
        state: &ParticleState,
    ) -> Result<Option<MetricSample>> {
        Ok(Some(MetricSample {
            t,
            value: (self.f)(state)?,
            stderr: None,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub metrics: BTreeMap<String, Vec<MetricSample>>,
    pub final_state: ParticleState,
    pub steps: usize,
    pub time: f64,
    pub rescaled_time: f64,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[MetricSample]> {
        self.metrics.get(name).map(|v| v.as_slice())
    }
}

pub(crate) enum FieldKind<'a> {
    Attention(&'a ModelParams),
    /// Any per-particle tangent field, evaluated on the whole state.
    Custom(&'a (dyn Fn(&ParticleState, &mut [f64]) -> Result<()> + Sync)),
}

struct Stepper<'a> {
    kind: FieldKind<'a>,
    cfg: &'a IntegratorConfig,
    d: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Stepper<'a> {
    /// Clock factor and the increment of model time for a step of `h`.
    fn clock(&self, s: &ParticleState, step: usize) -> Result<(f64, f64)> {
        let h = self.cfg.h;
        match (self.cfg.clock, &self.kind) {
            (Clock::Plain, _) | (_, FieldKind::Custom(_)) => Ok((1.0, h)),
            (Clock::Heat, FieldKind::Attention(p)) => Ok((p.beta, p.beta * h)),
            (Clock::Pairing, FieldKind::Attention(p)) => {
                let (_, _, inner) = closest_pair_raw(s);
                let exponent = p.beta * (1.0 - inner);
                if exponent > CLOCK_EXPONENT_CAP {
                    return Err(Error::ClockOverflow { step, exponent });
                }
                Ok((exponent.exp(), h * (-exponent).exp()))
            }
        }
    }

    /// Scaled field (or scaled attention mean for the layer scheme).
    fn field(&self, s: &ParticleState, step: usize, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            FieldKind::Attention(p) => {
                let mode = if self.cfg.scheme == Scheme::DiscreteLayer {
                    RowOutput::Mean
                } else {
                    RowOutput::Tangent
                };
                match &self.pool {
                    Some(pool) => pool.install(|| kernel::eval_all(s, p, mode, out)),
                    None => kernel::eval_all(s, p, mode, out),
                }
                let (c, _) = self.clock(s, step)?;
                if c != 1.0 {
                    out.iter_mut().for_each(|v| *v *= c);
                }
                Ok(())
            }
            FieldKind::Custom(f) => f(s, out),
        }
    }

    fn advance(
        &self,
        base: &[f64],
        dir: &[f64],
        h: f64,
        step: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.d;
        out.copy_from_slice(base);
        for (i, (x, v)) in out.chunks_mut(d).zip(dir.chunks(d)).enumerate() {
            for (xi, vi) in x.iter_mut().zip(v) {
                *xi += h * vi;
            }
            normalize_into(x).map_err(|e| Error::Integration {
                step,
                particle: i,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn step(&self, s: &mut ParticleState, step: usize, bufs: &mut Buffers) -> Result<()> {
        let h = self.cfg.h;
        let (d, time) = (s.dim(), s.time);
        match self.cfg.scheme {
            Scheme::ProjectedEuler | Scheme::DiscreteLayer => {
                self.field(s, step, &mut bufs.k1)?;
                let base = s.flat().to_vec();
                self.advance(&base, &bufs.k1, h, step, s.points_mut())?;
            }
            Scheme::ProjectedRk4 => {
                let base = s.flat().to_vec();
                self.field(s, step, &mut bufs.k1)?;
                self.advance(&base, &bufs.k1, 0.5 * h, step, &mut bufs.stage)?;
                let st = ParticleState::from_raw(d, std::mem::take(&mut bufs.stage), time);
                self.field(&st, step, &mut bufs.k2)?;
                bufs.stage = st.into_flat();
                self.advance(&base, &bufs.k2, 0.5 * h, step, &mut bufs.stage)?;
                let st = ParticleState::from_raw(d, std::mem::take(&mut bufs.stage), time);
                self.field(&st, step, &mut bufs.k3)?;
                bufs.stage = st.into_flat();
                self.advance(&base, &bufs.k3, h, step, &mut bufs.stage)?;
                let st = ParticleState::from_raw(d, std::mem::take(&mut bufs.stage), time);
                self.field(&st, step, &mut bufs.k4)?;
                bufs.stage = st.into_flat();
                for j in 0..bufs.k1.len() {
                    bufs.k1[j] =
                        (bufs.k1[j] + 2.0 * bufs.k2[j] + 2.0 * bufs.k3[j] + bufs.k4[j]) / 6.0;
                }
                self.advance(&base, &bufs.k1, h, step, s.points_mut())?;
            }
        }
        Ok(())
    }
}

struct Buffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

pub(crate) fn run(
    s0: &ParticleState,
    kind: FieldKind<'_>,
    cfg: &IntegratorConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    cfg.validate()?;
    if let (Clock::Heat | Clock::Pairing, FieldKind::Attention(p)) = (cfg.clock, &kind) {
        if p.beta <= 0.0 {
            return Err(Error::InvalidInput(
                "heat and pairing clocks need beta > 0".into(),
            ));
        }
    }
    if let (Clock::Pairing, FieldKind::Attention(_)) = (cfg.clock, &kind) {
        if s0.len() < 2 {
            return Err(Error::InvalidInput(
                "pairing clock needs at least two particles".into(),
            ));
        }
        if !closest_pair_is_unique(s0) {
            return Err(Error::InvalidInput(
                "pairing clock needs a unique closest pair".into(),
            ));
        }
    }
    let pool = match cfg.threads {
        Some(t) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let stepper = Stepper {
        kind,
        cfg,
        d: s0.dim(),
        pool,
    };
    {
        let len = s0.flat().len();
        let mut bufs = Buffers {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            stage: vec![0.0; len],
        };
        let mut state = s0.clone();
        let mut rescaled = 0.0;
        let mut traj = Trajectory {
            snapshots: Vec::new(),
            metrics: BTreeMap::new(),
            final_state: s0.clone(),
            steps: 0,
            time: s0.time,
            rescaled_time: 0.0,
        };
        let mut stop = record(&mut traj, observers, cfg, 0, rescaled, &state)?;
        let mut step = 0;
        while step < cfg.max_steps && !stop {
            let (_, dt) = stepper.clock(&state, step)?;
            stepper.step(&mut state, step, &mut bufs)?;
            step += 1;
            state.time += dt;
            rescaled = cfg.h * step as f64;
            if step % cfg.stride == 0 || step == cfg.max_steps {
                stop = record(&mut traj, observers, cfg, step, rescaled, &state)?;
            }
        }
        traj.steps = step;
        traj.time = state.time;
        traj.rescaled_time = rescaled;
        traj.final_state = state;
        Ok(traj)
    }
}

fn record(
    traj: &mut Trajectory,
    observers: &mut [&mut dyn Observer],
    cfg: &IntegratorConfig,
    step: usize,
    rescaled: f64,
    state: &ParticleState,
) -> Result<bool> {
    let t = if cfg.clock == Clock::Plain {
        state.time
    } else {
        rescaled
    };
    let mut stop = false;
    for obs in observers.iter_mut() {
        if let Some(sample) = obs.observe(step, t, state)? {
            traj.metrics
                .entry(obs.name().to_string())
                .or_default()
                .push(sample);
        }
        stop |= obs.should_stop();
    }
    if cfg.keep_snapshots {
        traj.snapshots.push(Snapshot {
            step,
            time: state.time,
            rescaled_time: rescaled,
            state: state.clone(),
        });
    }
    Ok(stop)
}

fn closest_pair_is_unique(s: &ParticleState) -> bool {
    let (bi, bj, best) = closest_pair_raw(s);
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            if (i, j) != (bi, bj)
                && (crate::sphere::dot(s.point(i), s.point(j)) - best).abs() <= TIE_TOL
            {
                return false;
            }
        }
    }
    true
}

/// Advances `s0` under the attention dynamics.
pub fn integrate(
    s0: &ParticleState,
    p: &ModelParams,
    cfg: &IntegratorConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    check_compatible(s0, p)?;
    run(s0, FieldKind::Attention(p), cfg, observers)
}
