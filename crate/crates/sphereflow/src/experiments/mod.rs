//! Scenario registry, initial-condition samplers, rate fitting and the
//! verification checks.

mod checks;

pub use checks::{run_verification, CheckId, CheckReport, Criterion, Overrides};

use crate::dynamics::{
    integrate, Clock, IntegratorConfig, MetricSample, ModelParams, Observer, ParticleState, Scheme,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::heat::{heat_kernel_circle, HeatMixture};
use crate::matrix::Matrix;
use crate::metrics::{
    cluster_detect, interaction_energy, w1_circle, EmpiricalMeasure, DEFAULT_CLUSTER_TOL,
};
use crate::spectral::{default_group_tol, distance_raw, dominant_invariant_subspace, Subspace};
use crate::sphere::sample_uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

/// Particle count above which `desk_scale` shrinks a scenario.
pub const DESK_MAX_PARTICLES: usize = 5_000;
/// Step count above which `desk_scale` shrinks a scenario.
pub const DESK_MAX_STEPS: usize = 10_000;
/// Cells used to discretize analytic circle densities for W1.
pub const ORACLE_CELLS: usize = 4096;

/// Generator for an independent, reproducible stream of the root seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    /// Collapse onto a line (unique dominant eigenvalue).
    Collapse1a,
    /// Collapse onto a great circle with collective rotation.
    Rotation1b,
    /// Backward heat flow of a three-bump mixture into clusters.
    BackwardHeat2a,
    /// Forward heat flow of the same mixture (`V = -I`).
    ForwardHeat2b,
    /// Heat phase followed by pairing merges, watched on a log-time axis.
    FullStory,
    Custom,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::Collapse1a,
        ScenarioId::Rotation1b,
        ScenarioId::BackwardHeat2a,
        ScenarioId::ForwardHeat2b,
        ScenarioId::FullStory,
        ScenarioId::Custom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioId::Collapse1a => "1a",
            ScenarioId::Rotation1b => "1b",
            ScenarioId::BackwardHeat2a => "2a",
            ScenarioId::ForwardHeat2b => "2b",
            ScenarioId::FullStory => "full_story",
            ScenarioId::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Unknown(format!("scenario '{s}'")))
    }
}

/// Mixture of wrapped normals on the circle with a common angular standard
/// deviation `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigma: f64,
}

impl CircleMixture {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::InvalidInput(
                "mixture needs as many means as weights".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma = {} must be ≥ 0", self.sigma)));
        }
        Ok(())
    }

    /// Heat time of the components: a wrapped normal of angular variance
    /// `σ²` is `exp((σ²/2)Δ)δ`.
    pub fn heat_time(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    pub fn heat_mixture(&self) -> Result<HeatMixture> {
        let vars = vec![self.heat_time(); self.means.len()];
        HeatMixture::on_circle(&self.means, &vars, &self.weights)
    }
}

/// How the coordinates off the circle are drawn for `d ≥ 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elevation {
    /// Points lie on the circle of the first two axes.
    Plane,
    /// Uniform on the sphere given the azimuth.
    Uniform,
}

impl Elevation {
    pub fn name(&self) -> &'static str {
        match self {
            Elevation::Plane => "plane",
            Elevation::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Elevation::Plane),
            "uniform" => Ok(Elevation::Uniform),
            _ => Err(Error::Unknown(format!("elevation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Uniform,
    /// Azimuth `atan2(x₁, x₀)` drawn from the mixture.
    CircleMixture {
        mixture: CircleMixture,
        elevation: Elevation,
    },
    /// Explicit row-major coordinates; the particle count is taken from here.
    Points(Vec<f64>),
}

/// Observables recorded along a scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Observable {
    /// Mean distance to the dominant invariant subspace of `VKᵀQ`.
    SubspaceDistance,
    /// Shifted interaction energy.
    Energy,
    /// Number of clusters at the default angular tolerance.
    ClusterCount,
    /// Circular W1 between the particle azimuths and the heat-oracle
    /// mixture evolved to the current heat time.
    OracleW1,
    /// Largest `| |x_i| - 1 |`.
    NormDefect,
}

impl Observable {
    pub const ALL: [Observable; 5] = [
        Observable::SubspaceDistance,
        Observable::Energy,
        Observable::ClusterCount,
        Observable::OracleW1,
        Observable::NormDefect,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Observable::SubspaceDistance => "subspace_distance",
            Observable::Energy => "energy",
            Observable::ClusterCount => "cluster_count",
            Observable::OracleW1 => "oracle_w1",
            Observable::NormDefect => "norm_defect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Observable::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Unknown(format!("observable '{s}'")))
    }
}

/// Step-size plan of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `cfg.max_steps` steps of `cfg.h`.
    Fixed,
    /// `[0, t_first]` and then every decade up to `t_end` with
    /// `steps_per_decade` steps, the step capped at `h_max`. Observers fire
    /// about ten times per decade.
    LogTime {
        t_first: f64,
        t_end: f64,
        steps_per_decade: usize,
        h_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub n: usize,
    pub params: ModelParams,
    pub init: InitSpec,
    pub cfg: IntegratorConfig,
    pub schedule: Schedule,
    pub observables: Vec<Observable>,
    pub seed: u64,
}

/// The three-bump mixture on the circle.
pub fn three_bump_mixture() -> CircleMixture {
    CircleMixture {
        weights: vec![0.2, 0.5, 0.3],
        means: vec![FRAC_PI_2, 0.0, 4.0 * PI / 3.0],
        sigma: 0.2,
    }
}

/// Four bumps whose closest pair merges well before the others.
pub fn four_bump_mixture() -> CircleMixture {
    CircleMixture {
        weights: vec![0.3, 0.2, 0.25, 0.25],
        means: vec![0.0, 1.45, 3.1, 4.75],
        sigma: 0.2,
    }
}

pub fn scenario_defaults(id: ScenarioId) -> Result<Scenario> {
    let id3 = Matrix::identity(3);
    let euler = |h: f64, steps: usize, clock: Clock| IntegratorConfig::new(Scheme::ProjectedEuler, h, clock, steps);
    let sc = match id {
        ScenarioId::Collapse1a | ScenarioId::Rotation1b => {
            let v = if id == ScenarioId::Collapse1a {
                Matrix::from_diag(&[2.0, 1.0, 1.0])
            } else {
                Matrix::from_rows(&[[1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])?
            };
            Scenario {
                id,
                n: 10_000,
                params: ModelParams::new(id3.clone(), id3, v, 30.0)?,
                init: InitSpec::Uniform,
                cfg: euler(1e-2, 400, Clock::Plain)?,
                schedule: Schedule::Fixed,
                observables: vec![Observable::SubspaceDistance],
                seed: 0,
            }
        }
        ScenarioId::BackwardHeat2a => Scenario {
            id,
            n: 10_000,
            params: ModelParams::new(id3.clone(), id3, Matrix::from_diag(&[1.0, 1.0, 0.5]), 10.0)?,
            init: InitSpec::CircleMixture {
                mixture: three_bump_mixture(),
                elevation: Elevation::Uniform,
            },
            cfg: euler(1e-3, 2_000, Clock::Heat)?.with_stride(50),
            schedule: Schedule::Fixed,
            observables: vec![Observable::OracleW1, Observable::ClusterCount],
            seed: 0,
        },
        ScenarioId::ForwardHeat2b => {
            let id2 = Matrix::identity(2);
            Scenario {
                id,
                n: 50_000,
                params: ModelParams::new(id2.clone(), id2.clone(), id2.scale(-1.0), 50.0)?,
                init: InitSpec::CircleMixture {
                    mixture: three_bump_mixture(),
                    elevation: Elevation::Plane,
                },
                cfg: euler(1e-3, 200, Clock::Heat)?.with_stride(25),
                schedule: Schedule::Fixed,
                observables: vec![Observable::OracleW1],
                seed: 0,
            }
        }
        ScenarioId::FullStory => Scenario {
            id,
            n: 400,
            params: ModelParams::identity(3, 10.0)?,
            init: InitSpec::CircleMixture {
                mixture: four_bump_mixture(),
                elevation: Elevation::Plane,
            },
            cfg: euler(1e-6, 1, Clock::Plain)?,
            schedule: Schedule::LogTime {
                t_first: 1e-6,
                t_end: 1e5,
                steps_per_decade: 90,
                h_max: 0.5,
            },
            observables: vec![Observable::Energy, Observable::ClusterCount],
            seed: 0,
        },
        ScenarioId::Custom => Scenario {
            id,
            n: 1_000,
            params: ModelParams::identity(3, 1.0)?,
            init: InitSpec::Uniform,
            cfg: euler(1e-2, 100, Clock::Plain)?,
            schedule: Schedule::Fixed,
            observables: vec![Observable::NormDefect],
            seed: 0,
        },
    };
    Ok(sc)
}

impl Scenario {
    /// Shrinks the particle and step counts to desk scale.
    pub fn desk_scale(mut self) -> Self {
        self.n = self.n.min(DESK_MAX_PARTICLES);
        self.cfg.max_steps = self.cfg.max_steps.min(DESK_MAX_STEPS);
        self
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.n == 0 {
            return Err(Error::InvalidInput("particle count must be at least 1".into()));
        }
        if let InitSpec::CircleMixture { mixture, .. } = &self.init {
            mixture.validate()?;
        }
        if let Schedule::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        } = self.schedule
        {
            if !(t_first > 0.0 && t_end > t_first && h_max > 0.0) || steps_per_decade == 0 {
                return Err(Error::InvalidInput("invalid log-time schedule".into()));
            }
        }
        for o in &self.observables {
            match o {
                Observable::OracleW1 if self.oracle().is_none() => {
                    return Err(Error::InvalidInput(
                        "oracle_w1 needs a circle-mixture start and V = ±I on the dominant subspace"
                            .into(),
                    ))
                }
                Observable::Energy if !(self.params.beta > 0.0) => {
                    return Err(Error::InvalidInput("energy needs beta > 0".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Draws the initial particles from the scenario's own seed.
    pub fn initial_state(&self) -> Result<ParticleState> {
        sample_initial(&self.init, self.n, self.dim(), &mut stream_rng(self.seed, 0))
    }

    /// Heat time of the oracle at observer time `t`, which is the physical
    /// time on the plain clock and the rescaled time otherwise.
    pub fn heat_time(&self, t: f64) -> f64 {
        match self.cfg.clock {
            Clock::Heat => t,
            _ => t / self.params.beta,
        }
    }

    /// Heat-oracle mixture and heat direction `γ`, when both are defined.
    pub fn oracle(&self) -> Option<(HeatMixture, i8)> {
        match &self.init {
            InitSpec::CircleMixture { mixture, .. } => {
                let gamma = heat_sign(&self.params)?;
                Some((mixture.heat_mixture().ok()?, gamma))
            }
            _ => None,
        }
    }
}

/// `+1` when `V` is the identity on the dominant subspace of `VKᵀQ`
/// (backward heat), `-1` when it is minus the identity (forward heat).
pub fn heat_sign(p: &ModelParams) -> Option<i8> {
    let a = p.alignment_matrix();
    let e = dominant_invariant_subspace(&a, default_group_tol(&a)).ok()?;
    let tol = 1e-10 * p.v.max_abs().max(1.0);
    let fits = |sign: f64| {
        e.basis().iter().all(|b| {
            let vb = p.v.apply(b);
            vb.iter().zip(b).all(|(x, y)| (x - sign * y).abs() <= tol)
        })
    };
    if fits(1.0) {
        Some(1)
    } else if fits(-1.0) {
        Some(-1)
    } else {
        None
    }
}

/// I.i.d. draws from the wrapped-normal mixture, as angles in `[0, 2π)`.
pub fn sample_mixture_circle<R: Rng + ?Sized>(
    spec: &CircleMixture,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let pick = WeightedIndex::new(&spec.weights)
        .map_err(|e| Error::InvalidInput(format!("mixture weights: {e}")))?;
    let noise = Normal::new(0.0, spec.sigma)
        .map_err(|e| Error::InvalidInput(format!("sigma: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let j = pick.sample(rng);
            (spec.means[j] + noise.sample(rng)).rem_euclid(TAU)
        })
        .collect())
}

pub fn sample_initial<R: Rng + ?Sized>(
    init: &InitSpec,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<ParticleState> {
    match init {
        InitSpec::Uniform => {
            let pts: Vec<_> = (0..n).map(|_| sample_uniform(rng, d)).collect();
            ParticleState::from_points(&pts)
        }
        InitSpec::CircleMixture { mixture, elevation } => {
            let angles = sample_mixture_circle(mixture, n, rng)?;
            match elevation {
                Elevation::Plane => ParticleState::from_angles(d, &angles),
                Elevation::Uniform => {
                    let mut flat = Vec::with_capacity(n * d);
                    for &a in &angles {
                        let mut y = sample_uniform(rng, d).into_coords();
                        let r = y[0].hypot(y[1]);
                        y[0] = r * a.cos();
                        y[1] = r * a.sin();
                        crate::sphere::normalize_into(&mut y)?;
                        flat.extend(y);
                    }
                    ParticleState::from_flat(d, flat)
                }
            }
        }
        InitSpec::Points(flat) => {
            let s = ParticleState::from_flat(d, flat.clone())?;
            if s.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{} points given for N = {n}",
                    s.len()
                )));
            }
            Ok(s)
        }
    }
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::InvalidInput("a rate fit needs at least 3 points".into()));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("xs must be strictly increasing".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("rate fits need positive finite data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (slope, intercept, r2) = least_squares(&lx, &ly);
    Ok(RateFit {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        slope,
        intercept,
        r2,
    })
}

/// Slope, intercept and `r²` of the least-squares line.
pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Classifies each decade of a positive-time series as a plateau (relative
/// change below `rel_tol`) or a jump and counts plateaus followed by a jump.
///
/// Values at decade ends are interpolated linearly in `log t`.
pub fn plateau_jump_alternations(series: &[MetricSample], rel_tol: f64) -> usize {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|s| s.t > 0.0)
        .map(|s| (s.t.log10(), s.value))
        .collect();
    if pts.len() < 2 {
        return 0;
    }
    let at = |lt: f64| -> f64 {
        let k = pts.partition_point(|p| p.0 < lt);
        if k == 0 {
            return pts[0].1;
        }
        if k == pts.len() {
            return pts[k - 1].1;
        }
        let (a, b) = (pts[k - 1], pts[k]);
        a.1 + (b.1 - a.1) * (lt - a.0) / (b.0 - a.0)
    };
    let first = pts[0].0.ceil() as i64;
    let last = pts[pts.len() - 1].0.floor() as i64;
    let plateau: Vec<bool> = (first..last)
        .map(|k| {
            let (a, b) = (at(k as f64), at(k as f64 + 1.0));
            ((b - a) / a).abs() < rel_tol
        })
        .collect();
    plateau.windows(2).filter(|w| w[0] && !w[1]).count()
}

struct ScenarioObserver<'a> {
    kind: Observable,
    sc: &'a Scenario,
    emax: Option<Subspace>,
    oracle: Option<(HeatMixture, i8)>,
}

impl Observer for ScenarioObserver<'_> {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn observe(&mut self, _step: usize, t: f64, s: &ParticleState) -> Result<Option<MetricSample>> {
        let value = match self.kind {
            Observable::SubspaceDistance => {
                let e = self.emax.as_ref().expect("subspace computed up front");
                s.iter().map(|x| distance_raw(x, e)).sum::<f64>() / s.len() as f64
            }
            Observable::Energy => interaction_energy(s, &self.sc.params)?.scaled,
            Observable::ClusterCount => cluster_detect(s, DEFAULT_CLUSTER_TOL)?.len() as f64,
            Observable::NormDefect => s.max_norm_defect(),
            Observable::OracleW1 => {
                let (m, gamma) = self.oracle.as_ref().expect("oracle checked in validate");
                // Past the first collapse the backward oracle has no density.
                let Ok(mt) = m.evolve(self.sc.heat_time(t), *gamma) else {
                    return Ok(None);
                };
                oracle_w1(&s.angles(), &mt)?
            }
        };
        Ok(Some(MetricSample {
            t,
            value,
            stderr: None,
        }))
    }
}

/// Circular W1 between equally weighted angles and a circle mixture.
///
/// Each component is discretized on [`ORACLE_CELLS`] cells; components too
/// narrow for the grid (and diracs) become point masses at their centers.
pub fn oracle_w1(angles: &[f64], m: &HeatMixture) -> Result<f64> {
    let cell = TAU / ORACLE_CELLS as f64;
    let mut at = Vec::new();
    let mut mass = Vec::new();
    for (c, var) in m.components().iter().zip(m.variances()) {
        let center = c.center.coords()[1].atan2(c.center.coords()[0]).rem_euclid(TAU);
        match var {
            Some(v) if (2.0 * v).sqrt() > 2.0 * cell => {
                let w: Vec<f64> = (0..ORACLE_CELLS)
                    .map(|i| heat_kernel_circle((i as f64 + 0.5) * cell - center, v))
                    .collect::<Result<_>>()?;
                let total: f64 = w.iter().sum();
                for (i, wi) in w.into_iter().enumerate() {
                    at.push((i as f64 + 0.5) * cell);
                    mass.push(c.weight * wi / total);
                }
            }
            _ => {
                at.push(center);
                mass.push(c.weight);
            }
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|w| *w /= total);
    let reference = EmpiricalMeasure::from_angles(&at, Some(&mass))?;
    w1_circle(&EmpiricalMeasure::from_angles(angles, None)?, &reference)
}

/// Initial state and trajectory of a scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub initial: ParticleState,
    pub trajectory: Trajectory,
}

pub fn run_scenario(sc: &Scenario) -> Result<ScenarioRun> {
    let s0 = sc.initial_state()?;
    let trajectory = run_scenario_from(sc, &s0)?;
    Ok(ScenarioRun {
        initial: s0,
        trajectory,
    })
}

/// Runs the scenario's dynamics and observers from a given state.
pub fn run_scenario_from(sc: &Scenario, s0: &ParticleState) -> Result<Trajectory> {
    sc.validate()?;
    let emax = if sc.observables.contains(&Observable::SubspaceDistance) {
        let a = sc.params.alignment_matrix();
        Some(dominant_invariant_subspace(&a, default_group_tol(&a))?)
    } else {
        None
    };
    let oracle = if sc.observables.contains(&Observable::OracleW1) {
        sc.oracle()
    } else {
        None
    };
    let mut obs: Vec<ScenarioObserver> = sc
        .observables
        .iter()
        .map(|&kind| ScenarioObserver {
            kind,
            sc,
            emax: emax.clone(),
            oracle: oracle.clone(),
        })
        .collect();
    let mut refs: Vec<&mut dyn Observer> = obs.iter_mut().map(|o| o as &mut dyn Observer).collect();
    match sc.schedule {
        Schedule::Fixed => integrate(s0, &sc.params, &sc.cfg, &mut refs),
        Schedule::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        } => {
            let mut segments = vec![(t_first / steps_per_decade as f64, steps_per_decade)];
            let mut a = t_first;
            while a < t_end * (1.0 - 1e-12) {
                let b = (10.0 * a).min(t_end);
                let h = ((b - a) / steps_per_decade as f64).min(h_max);
                segments.push((h, ((b - a) / h).round().max(1.0) as usize));
                a = b;
            }
            let mut whole: Option<Trajectory> = None;
            let mut state = s0.clone();
            for (h, steps) in segments {
                let cfg = IntegratorConfig {
                    h,
                    max_steps: steps,
                    stride: (steps / 10).max(1),
                    ..sc.cfg.clone()
                };
                let part = integrate(&state, &sc.params, &cfg, &mut refs)?;
                state = part.final_state.clone();
                whole = Some(match whole {
                    None => part,
                    Some(mut w) => {
                        // The first record of a segment repeats the last one.
                        for (k, v) in part.metrics {
                            w.metrics.entry(k).or_default().extend(v.into_iter().skip(1));
                        }
                        let offset = w.steps;
                        w.snapshots.extend(part.snapshots.into_iter().skip(1).map(|mut sn| {
                            sn.step += offset;
                            sn
                        }));
                        w.steps += part.steps;
                        w.time = part.time;
                        w.rescaled_time += part.rescaled_time;
                        w.final_state = part.final_state;
                        w
                    }
                });
            }
            Ok(whole.expect("at least one segment"))
        }
    }
}
