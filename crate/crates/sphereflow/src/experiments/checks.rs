//! The verification checks: each runs one experiment at desk scale and
//! judges it against fixed tolerances.

use super::{
    fit_rate, least_squares, oracle_w1, plateau_jump_alternations, run_scenario, scenario_defaults,
    stream_rng, three_bump_mixture, Observable, ScenarioId,
};
use crate::dynamics::{
    attention_field_flat, closest_pair, integrate, integrate_alignment_with,
    integrate_pairing_limit, Clock, FnObserver, IntegratorConfig, MetricSample, ModelParams,
    ParticleState, Scheme, Trajectory,
};
use crate::error::{Error, Result};
use crate::heat::HeatMixture;
use crate::matrix::Matrix;
use crate::metrics::{
    cluster_detect, interaction_energy, sliced_w1_sphere, w1_circle, EmpiricalMeasure,
    DEFAULT_CLUSTER_TOL, DEFAULT_PROJECTIONS,
};
use crate::special::{sample_vmf, surface_integral_estimate, vmf_a_prime, vmf_mean_resultant, VmfParams};
use crate::spectral::{default_group_tol, distance_raw, dominant_invariant_subspace, Subspace};
use crate::sphere::{dot, geodesic_distance, normalize_into, sample_uniform, UnitVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckId {
    VmfAsymptotics,
    IntegralAsymptotics,
    TensorSymmetry,
    HeatFieldLimit,
    AlignmentLimit,
    EmaxCollapse,
    HeatForward,
    HeatBackwardClusters,
    PairingLimit,
    Dobrushin,
    Invariants,
    FullStory,
    Performance,
}

impl CheckId {
    pub const ALL: [CheckId; 13] = [
        CheckId::VmfAsymptotics,
        CheckId::IntegralAsymptotics,
        CheckId::TensorSymmetry,
        CheckId::HeatFieldLimit,
        CheckId::AlignmentLimit,
        CheckId::EmaxCollapse,
        CheckId::HeatForward,
        CheckId::HeatBackwardClusters,
        CheckId::PairingLimit,
        CheckId::Dobrushin,
        CheckId::Invariants,
        CheckId::FullStory,
        CheckId::Performance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckId::VmfAsymptotics => "vmf_asymptotics",
            CheckId::IntegralAsymptotics => "integral_asymptotics",
            CheckId::TensorSymmetry => "tensor_symmetry",
            CheckId::HeatFieldLimit => "heat_field_limit",
            CheckId::AlignmentLimit => "alignment_limit",
            CheckId::EmaxCollapse => "emax_collapse",
            CheckId::HeatForward => "heat_forward",
            CheckId::HeatBackwardClusters => "heat_backward_clusters",
            CheckId::PairingLimit => "pairing_limit",
            CheckId::Dobrushin => "dobrushin",
            CheckId::Invariants => "invariants",
            CheckId::FullStory => "full_story",
            CheckId::Performance => "performance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Unknown(format!("check '{s}'")))
    }

    /// Wall-clock budget in seconds.
    pub fn runtime_limit(&self) -> f64 {
        match self {
            CheckId::VmfAsymptotics => 5.0,
            CheckId::IntegralAsymptotics => 10.0,
            CheckId::TensorSymmetry | CheckId::HeatFieldLimit => 30.0,
            CheckId::AlignmentLimit | CheckId::EmaxCollapse | CheckId::PairingLimit => 300.0,
            CheckId::HeatForward | CheckId::HeatBackwardClusters | CheckId::Dobrushin => 600.0,
            CheckId::Invariants => 120.0,
            // Two timed runs; the full-scale one is judged against 120 s on its own.
            CheckId::Performance => 240.0,
            CheckId::FullStory => 900.0,
        }
    }
}

/// Knobs shared by all checks. `betas` and `sizes` replace a check's own
/// β-list or particle-count list where it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Run at the published particle counts instead of desk scale.
    pub full_scale: bool,
    pub betas: Option<Vec<f64>>,
    pub sizes: Option<Vec<usize>>,
}

impl Default for Overrides {
    fn default() -> Self {
        Overrides {
            seed: 1,
            threads: None,
            full_scale: false,
            betas: None,
            sizes: None,
        }
    }
}

/// One judged quantity of a check.
#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance rule, e.g. `"< 1e-10"`.
    pub bound: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub id: CheckId,
    pub passed: bool,
    pub criteria: Vec<Criterion>,
    pub slopes: BTreeMap<String, f64>,
    /// Raw data for plotting, keyed by series name.
    pub series: BTreeMap<String, Vec<MetricSample>>,
    pub runtime_s: f64,
    pub runtime_limit_s: f64,
}

impl CheckReport {
    /// `name: PASS|FAIL (criterion summaries)`.
    pub fn summary(&self) -> String {
        let failed: Vec<String> = self
            .criteria
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} = {:.4e} (want {})", c.name, c.value, c.bound))
            .collect();
        format!(
            "{}: {} [{} criteria, {:.1} s]{}",
            self.id.name(),
            if self.passed { "PASS" } else { "FAIL" },
            self.criteria.len(),
            self.runtime_s,
            if failed.is_empty() {
                String::new()
            } else {
                format!(" failed: {}", failed.join("; "))
            }
        )
    }
}

#[derive(Default)]
struct Findings {
    criteria: Vec<Criterion>,
    slopes: BTreeMap<String, f64>,
    series: BTreeMap<String, Vec<MetricSample>>,
}

impl Findings {
    fn judge(&mut self, name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) {
        self.criteria.push(Criterion {
            name: name.into(),
            value,
            bound: bound.into(),
            passed,
        });
    }

    fn below(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.judge(name, value, format!("< {limit:e}"), value < limit);
    }

    fn slope(&mut self, name: impl Into<String>, slope: f64, want: f64, tol: f64) {
        let name = name.into();
        self.slopes.insert(name.clone(), slope);
        self.judge(
            name,
            slope,
            format!("{want} ± {tol}"),
            (slope - want).abs() <= tol,
        );
    }

    fn xy(&mut self, name: impl Into<String>, xs: &[f64], ys: &[f64]) {
        self.series.insert(
            name.into(),
            xs.iter()
                .zip(ys)
                .map(|(&t, &value)| MetricSample {
                    t,
                    value,
                    stderr: None,
                })
                .collect(),
        );
    }
}

/// Runs one check and judges it, including its wall-clock budget.
pub fn run_verification(id: CheckId, o: &Overrides) -> Result<CheckReport> {
    let start = Instant::now();
    let ctx = Ctx { id, o };
    let mut f = match id {
        CheckId::VmfAsymptotics => vmf_asymptotics(),
        CheckId::IntegralAsymptotics => integral_asymptotics(),
        CheckId::TensorSymmetry => tensor_symmetry(&ctx),
        CheckId::HeatFieldLimit => heat_field_limit(&ctx),
        CheckId::AlignmentLimit => alignment_limit(&ctx),
        CheckId::EmaxCollapse => emax_collapse(&ctx),
        CheckId::HeatForward => heat_forward(&ctx),
        CheckId::HeatBackwardClusters => heat_backward_clusters(&ctx),
        CheckId::PairingLimit => pairing_limit(&ctx),
        CheckId::Dobrushin => dobrushin(&ctx),
        CheckId::Invariants => invariants(&ctx),
        CheckId::FullStory => full_story(&ctx),
        CheckId::Performance => performance(&ctx),
    }
    .map_err(|e| e.context(format!("check {}", id.name())))?;
    let runtime_s = start.elapsed().as_secs_f64();
    let runtime_limit_s = id.runtime_limit();
    f.below("runtime_s", runtime_s, runtime_limit_s);
    Ok(CheckReport {
        id,
        passed: f.criteria.iter().all(|c| c.passed),
        criteria: f.criteria,
        slopes: f.slopes,
        series: f.series,
        runtime_s,
        runtime_limit_s,
    })
}

struct Ctx<'a> {
    id: CheckId,
    o: &'a Overrides,
}

impl Ctx<'_> {
    /// Stream `k` of this check's share of the root seed.
    fn rng(&self, k: u64) -> ChaCha8Rng {
        self.rng_of(self.id, k)
    }

    fn rng_of(&self, id: CheckId, k: u64) -> ChaCha8Rng {
        stream_rng(self.o.seed, ((id as u64 + 1) << 24) | k)
    }

    fn betas(&self, default: &[f64]) -> Vec<f64> {
        self.o.betas.clone().unwrap_or_else(|| default.to_vec())
    }

    fn sizes(&self, default: &[usize]) -> Vec<usize> {
        self.o.sizes.clone().unwrap_or_else(|| default.to_vec())
    }

    fn cfg(&self, scheme: Scheme, h: f64, clock: Clock, steps: usize) -> Result<IntegratorConfig> {
        Ok(IntegratorConfig::new(scheme, h, clock, steps)?.with_threads(self.o.threads))
    }
}

fn geomspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a * (b / a).powf(i as f64 / (n - 1) as f64))
        .collect()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn uniform_state(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<ParticleState> {
    let pts: Vec<_> = (0..n).map(|_| sample_uniform(rng, d)).collect();
    ParticleState::from_points(&pts)
}

fn e_max(p: &ModelParams) -> Result<Subspace> {
    let a = p.alignment_matrix();
    dominant_invariant_subspace(&a, default_group_tol(&a))
}

fn mean_distance(s: &ParticleState, e: &Subspace) -> f64 {
    s.iter().map(|x| distance_raw(x, e)).sum::<f64>() / s.len() as f64
}

fn params_1a(beta: f64) -> Result<ModelParams> {
    let sc = scenario_defaults(ScenarioId::Collapse1a)?;
    sc.params.with_beta(beta)
}

fn snapshot_at(traj: &Trajectory, step: usize) -> Result<&ParticleState> {
    traj.snapshots
        .iter()
        .find(|s| s.step == step)
        .map(|s| &s.state)
        .ok_or_else(|| Error::InvalidInput(format!("no snapshot at step {step}")))
}

fn vmf_asymptotics() -> Result<Findings> {
    let mut f = Findings::default();
    let closed = geomspace(0.1, 500.0, 200)
        .into_iter()
        .map(|b| Ok((vmf_mean_resultant(b, 3)? - (1.0 / b.tanh() - 1.0 / b)).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    f.below("d3_closed_form_max_error", closed, 1e-10);
    let betas = geomspace(1e2, 1e4, 9);
    for d in [2usize, 3, 5] {
        let mut resid = Vec::new();
        let mut prime = Vec::new();
        for &b in &betas {
            let a = vmf_mean_resultant(b, d)?;
            resid.push((a - (1.0 - (d as f64 - 1.0) / (2.0 * b))).abs());
            prime.push(vmf_a_prime(b, d)?.abs());
        }
        f.xy(format!("d{d}_residual"), &betas, &resid);
        f.xy(format!("d{d}_a_prime"), &betas, &prime);
        // An exponentially small residual has no power law: NaN fails the bound.
        let s = fit_rate(&betas, &resid).map(|r| r.slope).unwrap_or(f64::NAN);
        f.slope(format!("d{d}_residual_slope"), s, -2.0, 0.2);
        let s = fit_rate(&betas, &prime)?.slope;
        f.slope(format!("d{d}_a_prime_slope"), s, -2.0, 0.2);
    }
    Ok(f)
}

fn integral_asymptotics() -> Result<Findings> {
    let mut f = Findings::default();
    let betas = geomspace(50.0, 800.0, 9);
    for k in 0..4 {
        let ys = betas
            .iter()
            .map(|&b| Ok(surface_integral_estimate(k as f64, b, 3, 64)?.scaled))
            .collect::<Result<Vec<f64>>>()?;
        f.xy(format!("k{k}_scaled_integral"), &betas, &ys);
        let fit = fit_rate(&betas, &ys)?;
        f.slope(format!("k{k}_slope"), fit.slope, -(2.0 + k as f64) / 2.0, 0.05);
    }
    Ok(f)
}

/// Orthonormal frame whose first vector is `m`.
fn frame_from(m: &[f64]) -> Vec<Vec<f64>> {
    let d = m.len();
    let mut frame = vec![m.to_vec()];
    for i in 0..d {
        if frame.len() == d {
            break;
        }
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        for _ in 0..2 {
            for b in &frame {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
            }
        }
        if dot(&v, &v) > 1e-6 && normalize_into(&mut v).is_ok() {
            frame.push(v);
        }
    }
    frame
}

fn tensor_symmetry(ctx: &Ctx) -> Result<Findings> {
    const D: usize = 4;
    const KAPPA: f64 = 20.0;
    const SAMPLES: usize = 1_000_000;
    let mut f = Findings::default();
    let m = UnitVector::normalize(&[1.0, 2.0, -1.0, 0.5])?;
    let frame = frame_from(m.coords());
    let mean = vmf_mean_resultant(KAPPA, D)?;
    let p = VmfParams::new(m, KAPPA)?;
    // Entries that rotational symmetry about the mean forces to zero.
    let pairs: Vec<(usize, usize)> = (0..D).flat_map(|a| (a + 1..D).map(move |b| (a, b))).collect();
    let triples: Vec<(usize, usize, usize)> = (0..D)
        .flat_map(|a| (a..D).flat_map(move |b| (b..D).map(move |c| (a, b, c))))
        .filter(|&(a, b, c)| !((a, b, c) == (0, 0, 0) || (a == 0 && b == c)))
        .collect();
    let mut s2 = vec![(0.0, 0.0); pairs.len()];
    let mut s3 = vec![(0.0, 0.0); triples.len()];
    let mut rng = ctx.rng(0);
    let mut c = [0.0; D];
    for _ in 0..SAMPLES {
        let y = sample_vmf(&mut rng, &p);
        for (k, b) in frame.iter().enumerate() {
            c[k] = dot(b, y.coords());
        }
        c[0] -= mean;
        for (acc, &(a, b)) in s2.iter_mut().zip(&pairs) {
            let v = c[a] * c[b];
            acc.0 += v;
            acc.1 += v * v;
        }
        for (acc, &(a, b, e)) in s3.iter_mut().zip(&triples) {
            let v = c[a] * c[b] * c[e];
            acc.0 += v;
            acc.1 += v * v;
        }
    }
    let n = SAMPLES as f64;
    let z = |(s, ss): (f64, f64)| {
        let m1 = s / n;
        let se = ((ss / n - m1 * m1) / n).sqrt();
        (m1 / se).abs()
    };
    let z2 = s2.into_iter().map(z).fold(0.0, f64::max);
    let z3 = s3.into_iter().map(z).fold(0.0, f64::max);
    f.below("second_moment_max_z", z2, 5.0);
    f.below("third_moment_max_z", z3, 5.0);
    Ok(f)
}

fn heat_field_limit(ctx: &Ctx) -> Result<Findings> {
    let mut f = Findings::default();
    let mix = three_bump_mixture().heat_mixture()?;
    let id2 = Matrix::identity(2);
    let base = ModelParams::new(id2.clone(), id2.clone(), id2.scale(-1.0), 1.0)?;
    let gamma = f64::from(super::heat_sign(&base).ok_or_else(|| {
        Error::InvalidInput("V is not ±I on the dominant subspace".into())
    })?);
    let betas = ctx.betas(&geomspace(1e2, 1e4, 7));
    let grid: Vec<f64> = (0..48).map(|i| 0.01 + TAU * i as f64 / 48.0).collect();
    let dens = |y: &[f64]| mix.density_at_angle(y[1].atan2(y[0])).unwrap_or(f64::NAN);
    let mut errs = Vec::new();
    for &beta in &betas {
        let p = base.with_beta(beta)?;
        let mut worst: f64 = 0.0;
        for &th in &grid {
            let v = crate::metrics::kernel_field_quadrature(&dens, &p, &UnitVector::from_angle(2, th), 24)?;
            let got = beta * (-th.sin() * v.vec[0] + th.cos() * v.vec[1]);
            let want = gamma * mix.log_derivative_at_angle(th)?;
            worst = worst.max((got - want).abs());
        }
        errs.push(worst);
    }
    f.xy("sup_error", &betas, &errs);
    let fit = fit_rate(&betas, &errs)?;
    f.slopes.insert("sup_error_slope".into(), fit.slope);
    f.judge("sup_error_slope", fit.slope, "≤ -0.45", fit.slope <= -0.45);
    Ok(f)
}

fn alignment_limit(ctx: &Ctx) -> Result<Findings> {
    const N: usize = 2000;
    const H: f64 = 1e-3;
    const T: f64 = 2.0;
    let mut f = Findings::default();
    let betas = ctx.betas(&[10.0, 20.0, 40.0]);
    let times = [0.5, 1.0, 2.0];
    let steps: Vec<usize> = times.iter().map(|t| (t / H).round() as usize).collect();
    let s0 = uniform_state(N, 3, &mut ctx.rng(0))?;
    let p = params_1a(betas[0])?;
    let limit_cfg = ctx
        .cfg(Scheme::ProjectedRk4, H, Clock::Plain, steps[2])?
        .with_stride(500)
        .with_snapshots(true);
    let limit = integrate_alignment_with(&s0, &p, &limit_cfg, &mut [])?;
    let mut w = vec![vec![0.0; betas.len()]; times.len()];
    for (bi, &beta) in betas.iter().enumerate() {
        let cfg = ctx
            .cfg(Scheme::ProjectedEuler, H, Clock::Plain, (T / H).round() as usize)?
            .with_stride(500)
            .with_snapshots(true);
        let run = integrate(&s0, &p.with_beta(beta)?, &cfg, &mut [])?;
        for (ti, &k) in steps.iter().enumerate() {
            let a = EmpiricalMeasure::uniform(snapshot_at(&run, k)?);
            let b = EmpiricalMeasure::uniform(snapshot_at(&limit, k)?);
            // Same projections for every β.
            w[ti][bi] = sliced_w1_sphere(&a, &b, DEFAULT_PROJECTIONS, &mut ctx.rng(1 + ti as u64))?.value;
        }
    }
    for (ti, t) in times.iter().enumerate() {
        f.xy(format!("sliced_w1_t{t}"), &betas, &w[ti]);
        let ok = strictly_decreasing(&w[ti]);
        f.judge(
            format!("decreasing_in_beta_t{t}"),
            w[ti][w[ti].len() - 1],
            "strictly decreasing over the β-list",
            ok,
        );
    }
    Ok(f)
}

fn emax_collapse(ctx: &Ctx) -> Result<Findings> {
    const N: usize = 2000;
    const H: f64 = 1e-3;
    const T: f64 = 10.0;
    let mut f = Findings::default();
    // Same initial points as the alignment-limit check.
    let s0 = uniform_state(N, 3, &mut ctx.rng_of(CheckId::AlignmentLimit, 0))?;
    let beta = ctx.betas(&[30.0])[0];
    let p = params_1a(beta)?;
    let e = e_max(&p)?;
    let steps = (T / H).round() as usize;
    let stride = steps / 20;
    let dist = |name: &'static str| {
        let e = e.clone();
        FnObserver::new(name, move |s: &ParticleState| Ok(mean_distance(s, &e)))
    };
    let mut obs = dist("limit_subspace_distance");
    let cfg = ctx.cfg(Scheme::ProjectedRk4, H, Clock::Plain, steps)?.with_stride(stride);
    let limit = integrate_alignment_with(&s0, &p, &cfg, &mut [&mut obs])?;
    let mut obs = dist("sa_subspace_distance");
    let cfg = ctx.cfg(Scheme::ProjectedEuler, H, Clock::Plain, steps)?.with_stride(stride);
    let sa = integrate(&s0, &p, &cfg, &mut [&mut obs])?;
    f.below("limit_mean_distance", mean_distance(&limit.final_state, &e), 0.05);
    f.below("sa_mean_distance", mean_distance(&sa.final_state, &e), 0.1);
    f.series.extend(limit.metrics);
    f.series.extend(sa.metrics);
    Ok(f)
}

fn heat_forward(ctx: &Ctx) -> Result<Findings> {
    const H: f64 = 1e-3;
    let mut f = Findings::default();
    let n = if ctx.o.full_scale { 50_000 } else { 5_000 };
    let mut betas = ctx.betas(&[10.0, 50.0]);
    betas.sort_by(f64::total_cmp);
    let checkpoints = [25usize, 50, 100];
    let mixture = three_bump_mixture();
    let oracle = mixture.heat_mixture()?;
    let angles = super::sample_mixture_circle(&mixture, n, &mut ctx.rng(0))?;
    let s0 = ParticleState::from_angles(2, &angles)?;
    let e0 = oracle_w1(&angles, &oracle)?;
    f.judge("sampling_error_t0", e0, "reference", true);
    let id2 = Matrix::identity(2);
    let mut errs = vec![vec![0.0; betas.len()]; checkpoints.len()];
    for (bi, &beta) in betas.iter().enumerate() {
        let p = ModelParams::new(id2.clone(), id2.clone(), id2.scale(-1.0), beta)?;
        let cfg = ctx
            .cfg(Scheme::ProjectedEuler, H, Clock::Heat, checkpoints[2])?
            .with_stride(checkpoints[0])
            .with_snapshots(true);
        let run = integrate(&s0, &p, &cfg, &mut [])?;
        for (ci, &k) in checkpoints.iter().enumerate() {
            let mt = oracle.evolve(k as f64 * H, -1)?;
            errs[ci][bi] = oracle_w1(&snapshot_at(&run, k)?.angles(), &mt)?;
        }
    }
    for (ci, &k) in checkpoints.iter().enumerate() {
        let s = k as f64 * H;
        f.xy(format!("w1_s{s}"), &betas, &errs[ci]);
        f.judge(
            format!("decreasing_in_beta_s{s}"),
            errs[ci][0],
            "strictly decreasing over the β-list",
            strictly_decreasing(&errs[ci]),
        );
        f.below(format!("w1_at_top_beta_s{s}"), errs[ci][betas.len() - 1], 3.0 * e0);
    }
    Ok(f)
}

fn heat_backward_clusters(ctx: &Ctx) -> Result<Findings> {
    let mut f = Findings::default();
    let mut sc = scenario_defaults(ScenarioId::BackwardHeat2a)?;
    if !ctx.o.full_scale {
        sc = sc.desk_scale();
    }
    sc.seed = ctx.o.seed;
    sc.cfg.threads = ctx.o.threads;
    sc.observables = vec![Observable::OracleW1];
    // The oracle only exists before the first collapse; sample it densely.
    sc.cfg.stride = 5;
    let run = run_scenario(&sc)?;
    let clusters = cluster_detect(&run.trajectory.final_state, DEFAULT_CLUSTER_TOL)?;
    f.series.extend(run.trajectory.metrics);
    f.judge(
        "cluster_count",
        clusters.len() as f64,
        "= 3",
        clusters.len() == 3,
    );
    let mixture = three_bump_mixture();
    let az = clusters.azimuths();
    let wt = clusters.weights();
    for (k, (&m, &w)) in mixture.means.iter().zip(&mixture.weights).enumerate() {
        let dist = |a: f64| {
            let d = (a - m).rem_euclid(TAU);
            d.min(TAU - d)
        };
        let best = (0..az.len()).min_by(|&i, &j| dist(az[i]).total_cmp(&dist(az[j])));
        let (da, dw) = best.map_or((f64::INFINITY, f64::INFINITY), |i| (dist(az[i]), (wt[i] - w).abs()));
        f.below(format!("component{}_azimuth_error", k + 1), da, 0.05);
        f.below(format!("component{}_weight_error", k + 1), dw, 0.05);
    }
    Ok(f)
}

fn pairing_limit(ctx: &Ctx) -> Result<Findings> {
    const H: f64 = 1e-3;
    const EPS: f64 = 0.1;
    let mut f = Findings::default();
    let a: f64 = 0.9;
    let pts = [
        UnitVector::new(vec![1.0, 0.0, 0.0])?,
        UnitVector::new(vec![a.cos(), a.sin(), 0.0])?,
        // Close enough to the pair that its drift stays above rounding.
        UnitVector::new(vec![1.2f64.cos(), 0.0, 1.2f64.sin()])?,
        UnitVector::normalize(&[-1.0, -1.0, -1.0])?,
    ];
    let s0 = ParticleState::from_points(&pts)?;
    let (i, j, _) = closest_pair(&s0)?;
    let limit = integrate_pairing_limit(&s0, (i, j), H, EPS, 1_000_000)?;
    let t_eps = limit
        .t_eps
        .ok_or_else(|| Error::InvalidInput("pair never reached 1 - ε".into()))?;
    let n_eps = (t_eps / H).floor() as usize;
    let betas = ctx.betas(&[20.0, 40.0, 80.0]);
    let (mut dev, mut disp) = (Vec::new(), Vec::new());
    for &beta in &betas {
        let p = ModelParams::identity(3, beta)?;
        let cfg = ctx
            .cfg(Scheme::ProjectedRk4, H, Clock::Pairing, n_eps)?
            .with_stride(1)
            .with_snapshots(true);
        let run = integrate(&s0, &p, &cfg, &mut [])?;
        let (mut worst, mut moved) = (0.0f64, 0.0f64);
        for (x, y) in run.snapshots.iter().zip(&limit.trajectory.snapshots) {
            for k in 0..s0.len() {
                let gap = x.state.point(k).iter().zip(y.state.point(k)).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                worst = worst.max(gap);
                if k != i && k != j {
                    moved = moved.max(geodesic_distance(x.state.point(k), s0.point(k)));
                }
            }
        }
        dev.push(worst);
        disp.push(moved);
    }
    f.xy("sup_deviation", &betas, &dev);
    f.xy("non_pair_displacement", &betas, &disp);
    f.judge(
        "deviation_decreasing_in_beta",
        dev[dev.len() - 1],
        "strictly decreasing over the β-list",
        strictly_decreasing(&dev),
    );
    let ln: Vec<f64> = disp.iter().map(|d| d.ln()).collect();
    let (slope, _, _) = least_squares(&betas, &ln);
    f.slopes.insert("non_pair_log_linear_slope".into(), slope);
    f.judge("non_pair_log_linear_slope", slope, "< 0", slope < 0.0);
    f.judge("t_eps", t_eps, "reference", true);
    Ok(f)
}

fn dobrushin(ctx: &Ctx) -> Result<Findings> {
    const H: f64 = 1e-2;
    const STEPS: usize = 100;
    const SEEDS: u64 = 5;
    const REFERENCE: usize = 4000;
    let mut f = Findings::default();
    let sizes = ctx.sizes(&[250, 500, 1000, 2000]);
    let beta = ctx.betas(&[5.0])[0];
    let p = params_1a(beta)?;
    let cfg = ctx.cfg(Scheme::ProjectedEuler, H, Clock::Plain, STEPS)?;
    let mut mean = vec![0.0; sizes.len()];
    for seed in 0..SEEDS {
        let reference = integrate(&uniform_state(REFERENCE, 3, &mut ctx.rng(100 * seed))?, &p, &cfg, &mut [])?;
        let b = EmpiricalMeasure::uniform(&reference.final_state);
        for (k, &n) in sizes.iter().enumerate() {
            let s0 = uniform_state(n, 3, &mut ctx.rng(100 * seed + 1 + k as u64))?;
            let run = integrate(&s0, &p, &cfg, &mut [])?;
            let a = EmpiricalMeasure::uniform(&run.final_state);
            let w = sliced_w1_sphere(&a, &b, DEFAULT_PROJECTIONS, &mut ctx.rng(100 * seed + 99))?;
            mean[k] += w.value / SEEDS as f64;
        }
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    f.xy("mean_sliced_w1_to_reference", &xs, &mean);
    f.judge(
        "decreasing_in_n",
        mean[mean.len() - 1],
        "strictly decreasing over the N-list",
        strictly_decreasing(&mean),
    );
    Ok(f)
}

/// Exhaustive minimum over matchings of the mean arc length.
fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
    fn rec(a: &[f64], b: &[f64], used: &mut Vec<bool>, k: usize, acc: f64, best: &mut f64) {
        if k == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let d = (a[k] - b[j]).rem_euclid(TAU);
                rec(a, b, used, k + 1, acc + d.min(TAU - d), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(a, b, &mut vec![false; b.len()], 0, 0.0, &mut best);
    best / a.len() as f64
}

fn invariants(ctx: &Ctx) -> Result<Findings> {
    let mut f = Findings::default();
    let mut rng = ctx.rng(0);

    let p = params_1a(30.0)?;
    let s0 = uniform_state(200, 3, &mut rng)?;
    let mut defect = FnObserver::new("norm_defect", |s: &ParticleState| Ok(s.max_norm_defect()));
    let cfg = ctx.cfg(Scheme::ProjectedEuler, 1e-2, Clock::Plain, 50)?.with_stride(1);
    let run = integrate(&s0, &p, &cfg, &mut [&mut defect])?;
    let worst = run.series("norm_defect").unwrap_or(&[]).iter().map(|m| m.value).fold(0.0, f64::max);
    f.below("unit_norm_defect", worst, 1e-12);
    let field = attention_field_flat(&run.final_state, &p)?;
    let tangency = run
        .final_state
        .iter()
        .zip(field.chunks(3))
        .map(|(x, v)| dot(x, v).abs())
        .fold(0.0, f64::max);
    f.below("tangency", tangency, 1e-10);

    let mut perm: Vec<usize> = (0..s0.len()).collect();
    for k in (1..perm.len()).rev() {
        perm.swap(k, rng.random_range(0..=k));
    }
    let cfg = ctx.cfg(Scheme::ProjectedRk4, 1e-2, Clock::Plain, 20)?;
    let a = integrate(&s0, &p, &cfg, &mut [])?.final_state.permuted(&perm);
    let b = integrate(&s0.permuted(&perm), &p, &cfg, &mut [])?.final_state;
    let mismatched = a.flat().iter().zip(b.flat()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    f.judge("permutation_mismatched_coordinates", mismatched as f64, "= 0", mismatched == 0);

    let hot = ModelParams::identity(3, 600.0)?;
    let s = uniform_state(100, 3, &mut rng)?;
    let field = attention_field_flat(&s, &hot)?;
    let bad = field.iter().filter(|v| !v.is_finite()).count();
    f.judge("overflow_nonfinite_entries", bad as f64, "= 0", bad == 0);

    let mut drop: f64 = 0.0;
    for beta in [1.0, 10.0, 50.0] {
        let p = ModelParams::identity(3, beta)?;
        let mut energy = FnObserver::new("energy", |s: &ParticleState| Ok(interaction_energy(s, &p)?.scaled));
        let cfg = ctx.cfg(Scheme::ProjectedEuler, 1e-3, Clock::Plain, 300)?.with_stride(1);
        let s0 = uniform_state(200, 3, &mut rng)?;
        let run = integrate(&s0, &p, &cfg, &mut [&mut energy])?;
        let e = run.series("energy").unwrap_or(&[]);
        drop = e.windows(2).map(|w| w[0].value - w[1].value).fold(drop, f64::max);
    }
    f.below("energy_largest_step_drop", drop, 1e-9);

    let m = HeatMixture::on_circle(&[0.3, 2.0, 4.0], &[0.04, 0.09, 0.05], &[0.3, 0.3, 0.4])?;
    let mut broken = 0usize;
    for _ in 0..200 {
        // Dyadic times, so that `s + t` is itself exact.
        let s = rng.random_range(1..=60) as f64 / 4096.0;
        let t = rng.random_range(1..=60) as f64 / 4096.0;
        for gamma in [-1i8, 1] {
            if m.evolve(s, gamma)?.evolve(t, gamma)? != m.evolve(s + t, gamma)? {
                broken += 1;
            }
        }
        if m.evolve(t, -1)?.evolve(t, 1)? != m || m.evolve(t, 1)?.evolve(t, -1)? != m {
            broken += 1;
        }
    }
    f.judge("heat_identity_violations", broken as f64, "= 0", broken == 0);

    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let n = rng.random_range(1..=6);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        let exact = w1_circle(&EmpiricalMeasure::from_angles(&a, None)?, &EmpiricalMeasure::from_angles(&b, None)?)?;
        worst = worst.max((exact - brute_force_w1(&a, &b)).abs());
    }
    f.below("w1_brute_force_gap", worst, 1e-12);
    Ok(f)
}

fn full_story(ctx: &Ctx) -> Result<Findings> {
    let mut f = Findings::default();
    let mut sc = scenario_defaults(ScenarioId::FullStory)?;
    sc.seed = ctx.o.seed;
    sc.cfg.threads = ctx.o.threads;
    sc.observables = vec![Observable::Energy, Observable::ClusterCount];
    let run = run_scenario(&sc)?;
    let energy = run.trajectory.series("energy").unwrap_or(&[]).to_vec();
    let alternations = plateau_jump_alternations(&energy, 1e-4);
    f.judge(
        "plateau_jump_alternations",
        alternations as f64,
        "≥ 2",
        alternations >= 2,
    );
    let drop = energy.windows(2).map(|w| w[0].value - w[1].value).fold(0.0, f64::max);
    f.below("energy_largest_drop", drop, 1e-9);
    f.series.extend(run.trajectory.metrics);
    Ok(f)
}

fn performance(ctx: &Ctx) -> Result<Findings> {
    let mut f = Findings::default();
    let sc = scenario_defaults(ScenarioId::Collapse1a)?;
    let cfg = sc.cfg.clone().with_threads(ctx.o.threads);
    let timed = |n: usize| -> Result<f64> {
        let s0 = uniform_state(n, 3, &mut ctx.rng(n as u64))?;
        let start = Instant::now();
        integrate(&s0, &sc.params, &cfg, &mut [])?;
        Ok(start.elapsed().as_secs_f64())
    };
    let full = timed(sc.n)?;
    let half = timed(sc.n / 2)?;
    f.below("full_scale_seconds", full, 120.0);
    let ratio = full / half;
    f.judge("timing_ratio", ratio, "in [3.5, 4.5]", (3.5..=4.5).contains(&ratio));
    Ok(f)
}
