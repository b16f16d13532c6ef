//! One function per subcommand. Each reads its inputs, runs the library,
//! and writes its outputs through [`write_atomic`]; only this orchestrating
//! thread touches the file system.

use crate::cli::{Cli, Command, Flow, PlotKind, RunArgs};
use crate::config::{
    resolve, GlobalFlags, LimitSection, OracleSection, Resolved, RunConfig, SweepSection,
    DEFAULT_OUT_DIR, OUT_DIR_ENV,
};
use crate::error::{CliError, CliResult};
use crate::output::{
    fmt17, read_headered_csv, trajectory_csv, trajectory_dim, with_header, write_atomic,
    MetricsFile, SampleRecord, ORACLE_SCHEMA, TRAJECTORY_SCHEMA, VERIFY_SCHEMA,
};
use serde::Serialize;
use sphereflow::dynamics::{
    closest_pair, integrate_alignment_with, integrate_pairing_limit, Clock, FnObserver,
    MetricSample, Observer, ParticleState, Snapshot, Trajectory,
};
use sphereflow::experiments::{
    heat_sign, run_scenario, run_verification, CheckId, CheckReport, InitSpec, Overrides,
    Schedule,
};
use sphereflow::spectral::{default_group_tol, dominant_invariant_subspace, subspace_distance};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const PLOT_SCHEMA: &str = "sphereflow-plot/v1";
pub const SWEEP_SCHEMA: &str = "sphereflow-sweep/v1";

/// Projected trajectory size above which `simulate` warns.
const LARGE_OUTPUT_BYTES: f64 = 100e6;

const DEFAULT_ORACLE_GRID: usize = 512;
const DEFAULT_PAIRING_EPS: f64 = 0.1;

pub fn run(cli: &Cli) -> CliResult<()> {
    let flags = cli.flags();
    let cfg = || RunConfig::load_or_empty(cli.config.as_deref());
    match &cli.command {
        Command::Simulate(args) => simulate(cfg()?, args, &flags),
        Command::Limit { flow, eps, run } => limit(cfg()?, *flow, *eps, run, &flags),
        Command::Oracle {
            times,
            grid,
            gamma,
            run,
        } => oracle(cfg()?, times, *grid, *gamma, run, &flags),
        Command::Verify {
            checks,
            full_scale,
            parallel,
            betas,
            sizes,
        } => {
            if *full_scale && flags.desk_scale {
                return Err(CliError::Config(
                    "--full-scale and --desk-scale exclude each other".into(),
                ));
            }
            let seed = match (flags.seed, &cli.config) {
                (Some(s), _) => Some(s),
                (None, Some(p)) => RunConfig::load(p)?.seed,
                (None, None) => None,
            };
            let o = Overrides {
                seed: seed.unwrap_or(Overrides::default().seed),
                threads: flags.threads,
                full_scale: *full_scale,
                betas: (!betas.is_empty()).then(|| betas.clone()),
                sizes: (!sizes.is_empty()).then(|| sizes.clone()),
            };
            verify(checks, &o, *parallel, &out_dir(&flags, None))
        }
        Command::Sweep { betas, sizes, run } => sweep(cfg()?, betas, sizes, run, &flags),
        Command::ExportPlot {
            kind,
            traj,
            metrics,
            bins,
        } => export_plot(*kind, traj.as_deref(), metrics.as_deref(), *bins, &flags),
    }
}

/// `--out`, then the config's `out`, then the environment, then the default.
pub fn out_dir(flags: &GlobalFlags, from_config: Option<&Path>) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn observer_time(clock: Clock, snap: &Snapshot) -> f64 {
    if clock == Clock::Plain {
        snap.time
    } else {
        snap.rescaled_time
    }
}

fn projected_bytes(r: &Resolved) -> f64 {
    let sc = &r.scenario;
    let records = match sc.schedule {
        Schedule::Fixed => sc.cfg.max_steps / sc.cfg.stride + 2,
        Schedule::LogTime { t_first, t_end, .. } => {
            (10.0 * (t_end / t_first).log10().ceil()) as usize + 12
        }
    };
    // Four leading fields plus d coordinates, about 24 bytes each.
    records as f64 * sc.n as f64 * (sc.dim() + 4) as f64 * 24.0
}

fn print_records(clock: Clock, traj: &Trajectory) {
    for snap in &traj.snapshots {
        let t = observer_time(clock, snap);
        let mut line = format!(
            "step {:>7}  t = {:<12.6e} s = {:<12.6e}",
            snap.step, snap.time, snap.rescaled_time
        );
        for (name, series) in &traj.metrics {
            if let Some(m) = series.iter().find(|m| m.t == t) {
                write!(line, "  {name} = {:.6e}", m.value).expect("writing to a String");
            }
        }
        println!("{line}");
    }
}

fn write_run(dir: &Path, r: &Resolved, traj: &Trajectory) -> CliResult<()> {
    let seed = r.scenario.seed;
    if r.scenario.cfg.keep_snapshots {
        let path = dir.join("traj.csv");
        write_atomic(&path, trajectory_csv(&r.echo, seed, &traj.snapshots).as_bytes())?;
        wrote(&path);
    }
    let path = dir.join("metrics.json");
    write_atomic(&path, MetricsFile::new(&r.echo, seed, &traj.metrics).to_json().as_bytes())?;
    wrote(&path);
    Ok(())
}

fn simulate_resolved(r: &Resolved, dir: &Path) -> CliResult<Trajectory> {
    let bytes = projected_bytes(r);
    if r.scenario.cfg.keep_snapshots && bytes > LARGE_OUTPUT_BYTES {
        eprintln!(
            "warning: the trajectory CSV will be about {:.0} MB; set \"snapshots\": false to skip it",
            bytes / 1e6
        );
    }
    let run = run_scenario(&r.scenario)?;
    print_records(r.scenario.cfg.clock, &run.trajectory);
    write_run(dir, r, &run.trajectory)?;
    Ok(run.trajectory)
}

pub fn simulate(mut cfg: RunConfig, args: &RunArgs, flags: &GlobalFlags) -> CliResult<()> {
    args.apply(&mut cfg);
    let r = resolve(&cfg, flags)?;
    simulate_resolved(&r, &r.out)?;
    Ok(())
}

pub fn limit(
    mut cfg: RunConfig,
    flow: Option<Flow>,
    eps: Option<f64>,
    args: &RunArgs,
    flags: &GlobalFlags,
) -> CliResult<()> {
    args.apply(&mut cfg);
    let section = cfg.limit.clone().unwrap_or_default();
    let flow = match (flow, section.flow.as_deref()) {
        (Some(f), _) => f,
        (None, None | Some("alignment")) => Flow::Alignment,
        (None, Some("pairing")) => Flow::Pairing,
        (None, Some(other)) => {
            return Err(CliError::Config(format!("limit.flow '{other}' is not alignment or pairing")))
        }
    };
    let eps = eps.or(section.eps).unwrap_or(DEFAULT_PAIRING_EPS);
    cfg.limit = Some(LimitSection {
        flow: Some(flow.name().into()),
        eps: (flow == Flow::Pairing).then_some(eps),
    });
    let r = resolve(&cfg, flags)?;
    let sc = &r.scenario;
    let s0 = sc.initial_state()?;
    let mut traj = match flow {
        Flow::Alignment => {
            let a = sc.params.alignment_matrix();
            let emax = dominant_invariant_subspace(&a, default_group_tol(&a))?;
            let mut dist = FnObserver::new("subspace_distance", |s: &ParticleState| {
                let total: f64 = (0..s.len()).map(|i| subspace_distance(&s.unit(i), &emax)).sum();
                Ok(total / s.len() as f64)
            });
            let mut defect =
                FnObserver::new("norm_defect", |s: &ParticleState| Ok(s.max_norm_defect()));
            let mut obs: [&mut dyn Observer; 2] = [&mut dist, &mut defect];
            integrate_alignment_with(&s0, &sc.params, &sc.cfg, &mut obs)?
        }
        Flow::Pairing => {
            let (i, j, _) = closest_pair(&s0)?;
            let run = integrate_pairing_limit(&s0, (i, j), sc.cfg.h, eps, sc.cfg.max_steps)?;
            let mut traj = run.trajectory;
            // The pairing integrator keeps every step; thin to the stride.
            let last = traj.steps;
            let stride = sc.cfg.stride;
            traj.snapshots.retain(|s| s.step % stride == 0 || s.step == last);
            for series in traj.metrics.values_mut() {
                let keep: Vec<MetricSample> = series
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k % stride == 0 || *k == series.len() - 1)
                    .map(|(_, m)| *m)
                    .collect();
                *series = keep;
            }
            match run.t_eps {
                Some(t) => {
                    println!("pair ({i}, {j}) reaches 1 - eps at t = {t:.6e}");
                    traj.metrics.insert(
                        "t_eps".into(),
                        vec![MetricSample {
                            t,
                            value: t,
                            stderr: None,
                        }],
                    );
                }
                None => println!("pair ({i}, {j}) did not reach 1 - eps within the horizon"),
            }
            traj
        }
    };
    if !sc.cfg.keep_snapshots {
        traj.snapshots.clear();
    }
    print_records(Clock::Plain, &traj);
    write_run(&r.out, &r, &traj)
}

pub fn oracle(
    mut cfg: RunConfig,
    times: &[f64],
    grid: Option<usize>,
    gamma: Option<i8>,
    args: &RunArgs,
    flags: &GlobalFlags,
) -> CliResult<()> {
    args.apply(&mut cfg);
    let section = cfg.oracle.clone().unwrap_or_default();
    // Resolve once without the section to learn the mixture.
    let r = resolve(&cfg, flags)?;
    let InitSpec::CircleMixture { mixture, .. } = &r.scenario.init else {
        return Err(CliError::Config("the oracle needs a circle_mixture init".into()));
    };
    let m0 = mixture.heat_mixture()?;
    let gamma = match gamma.or(section.gamma).or_else(|| heat_sign(&r.scenario.params)) {
        Some(g @ (1 | -1)) => g,
        Some(g) => return Err(CliError::Config(format!("gamma = {g} must be 1 or -1"))),
        None => {
            return Err(CliError::Config(
                "V is not ±I on its dominant subspace; pass --gamma".into(),
            ))
        }
    };
    let times = if !times.is_empty() {
        times.to_vec()
    } else if let Some(t) = section.times.clone() {
        t
    } else if gamma == 1 {
        let t = m0.t_min();
        vec![0.0, 0.25 * t, 0.5 * t, 0.75 * t]
    } else {
        vec![0.0, 0.01, 0.1, 1.0]
    };
    let grid = grid.or(section.grid).unwrap_or(DEFAULT_ORACLE_GRID);
    if grid == 0 {
        return Err(CliError::Config("grid must be at least 1".into()));
    }
    cfg.oracle = Some(OracleSection {
        times: Some(times.clone()),
        grid: Some(grid),
        gamma: Some(gamma),
    });
    let r = resolve(&cfg, flags)?;

    let mut body = String::from("t,theta,density\n");
    for &t in &times {
        let mt = m0.evolve(t, gamma)?;
        let mut peak: f64 = 0.0;
        for i in 0..grid {
            let theta = i as f64 * TAU / grid as f64;
            let p = mt.density_at_angle(theta)?;
            peak = peak.max(p);
            writeln!(body, "{},{},{}", fmt17(t), fmt17(theta), fmt17(p))
                .expect("writing to a String");
        }
        println!("t = {t:<12.6e} peak density = {peak:.6e}");
    }
    let path = r.out.join("oracle.csv");
    write_atomic(
        &path,
        with_header(ORACLE_SCHEMA, &r.echo, r.scenario.seed, &body).as_bytes(),
    )?;
    wrote(&path);
    Ok(())
}

#[derive(Serialize)]
struct CriterionRecord<'a> {
    name: &'a str,
    value: f64,
    bound: &'a str,
    passed: bool,
}

#[derive(Serialize)]
struct CheckRecord<'a> {
    id: &'static str,
    passed: bool,
    runtime_s: f64,
    runtime_limit_s: f64,
    criteria: Vec<CriterionRecord<'a>>,
    slopes: &'a BTreeMap<String, f64>,
    series: BTreeMap<&'a str, Vec<SampleRecord>>,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    schema: &'static str,
    seed: u64,
    full_scale: bool,
    passed: bool,
    checks: Vec<CheckRecord<'a>>,
}

fn check_record(r: &CheckReport) -> CheckRecord<'_> {
    CheckRecord {
        id: r.id.name(),
        passed: r.passed,
        runtime_s: r.runtime_s,
        runtime_limit_s: r.runtime_limit_s,
        criteria: r
            .criteria
            .iter()
            .map(|c| CriterionRecord {
                name: &c.name,
                value: c.value,
                bound: &c.bound,
                passed: c.passed,
            })
            .collect(),
        slopes: &r.slopes,
        series: r
            .series
            .iter()
            .map(|(k, v)| (k.as_str(), v.iter().map(SampleRecord::from).collect()))
            .collect(),
    }
}

pub fn verify(names: &[String], o: &Overrides, parallel: bool, out: &Path) -> CliResult<()> {
    let ids: Vec<CheckId> = if names.iter().any(|n| n == "all") {
        CheckId::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| CheckId::parse(n))
            .collect::<sphereflow::Result<_>>()?
    };
    let reports: Vec<CheckReport> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .iter()
                .map(|&id| s.spawn(move || run_verification(id, o)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("check thread panicked"))
                .collect::<sphereflow::Result<_>>()
        })?
    } else {
        ids.iter()
            .map(|&id| {
                let r = run_verification(id, o)?;
                println!("{}", r.summary());
                Ok(r)
            })
            .collect::<CliResult<_>>()?
    };
    if parallel {
        reports.iter().for_each(|r| println!("{}", r.summary()));
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.id.name().to_string())
        .collect();
    let report = VerifyReport {
        schema: VERIFY_SCHEMA,
        seed: o.seed,
        full_scale: o.full_scale,
        passed: failed.is_empty(),
        checks: reports.iter().map(check_record).collect(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    let path = out.join("verify.json");
    write_atomic(&path, json.as_bytes())?;
    wrote(&path);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed))
    }
}

#[derive(Serialize)]
struct SweepCell {
    beta: f64,
    n: usize,
    dir: String,
    /// Last recorded value of each observable.
    last: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct SweepIndex {
    schema: &'static str,
    config: RunConfig,
    cells: Vec<SweepCell>,
}

pub fn sweep(
    mut cfg: RunConfig,
    betas: &[f64],
    sizes: &[usize],
    args: &RunArgs,
    flags: &GlobalFlags,
) -> CliResult<()> {
    args.apply(&mut cfg);
    let section = cfg.sweep.clone().unwrap_or_default();
    let base = resolve(&cfg, flags)?;
    let pick = |flag: &[f64], file: Option<Vec<f64>>, default: f64| {
        if !flag.is_empty() {
            flag.to_vec()
        } else {
            file.unwrap_or_else(|| vec![default])
        }
    };
    let betas = pick(betas, section.betas, base.scenario.params.beta);
    let sizes: Vec<usize> = if !sizes.is_empty() {
        sizes.to_vec()
    } else {
        section.sizes.unwrap_or_else(|| vec![base.scenario.n])
    };
    cfg.sweep = Some(SweepSection {
        betas: Some(betas.clone()),
        sizes: Some(sizes.clone()),
    });
    let index_echo = resolve(&cfg, flags)?.echo;
    let mut cells = Vec::new();
    for &beta in &betas {
        for &n in &sizes {
            let mut cell = cfg.clone();
            cell.beta = Some(beta);
            cell.n = Some(n);
            cell.sweep = None;
            let r = resolve(&cell, flags)?;
            let name = format!("beta_{beta}_n_{n}");
            println!("== {name}");
            let traj = simulate_resolved(&r, &base.out.join(&name))?;
            cells.push(SweepCell {
                beta,
                n: r.scenario.n,
                dir: name,
                last: traj
                    .metrics
                    .iter()
                    .filter_map(|(k, v)| v.last().map(|m| (k.clone(), m.value)))
                    .collect(),
            });
        }
    }
    let index = SweepIndex {
        schema: SWEEP_SCHEMA,
        config: index_echo,
        cells,
    };
    let mut json = serde_json::to_string_pretty(&index).expect("index serializes");
    json.push('\n');
    let path = base.out.join("sweep.json");
    write_atomic(&path, json.as_bytes())?;
    wrote(&path);
    Ok(())
}

fn need<'a>(p: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    p.ok_or_else(|| CliError::Config(format!("this plot needs {flag}")))
}

pub fn export_plot(
    kind: PlotKind,
    traj: Option<&Path>,
    metrics: Option<&Path>,
    bins: usize,
    flags: &GlobalFlags,
) -> CliResult<()> {
    let (name, echo, seed, body) = match kind {
        PlotKind::HeatPanels => {
            let path = need(traj, "--traj")?;
            let csv = read_headered_csv(path, TRAJECTORY_SCHEMA)?;
            let d = trajectory_dim(&csv, path)?;
            if d < 2 {
                return Err(CliError::Config("azimuths need d ≥ 2".into()));
            }
            if bins == 0 {
                return Err(CliError::Config("bins must be at least 1".into()));
            }
            let sc = resolve(
                &csv.config,
                &GlobalFlags {
                    threads: Some(1),
                    ..Default::default()
                },
            )?
            .scenario;
            let (m0, gamma) = sc.oracle().ok_or_else(|| {
                CliError::Config("the trajectory's scenario has no heat oracle".into())
            })?;
            let width = TAU / bins as f64;
            let mut body =
                String::from("panel,step,time,heat_time,theta,histogram,oracle\n");
            let mut panel = 0;
            for rows in csv.rows.chunk_by(|a, b| a[0] == b[0]) {
                let (step, time, rescaled) = (rows[0][0], rows[0][1], rows[0][2]);
                let t = if sc.cfg.clock == Clock::Plain { time } else { rescaled };
                let heat_t = sc.heat_time(t);
                let mut counts = vec![0usize; bins];
                for r in rows {
                    let a = r[5].atan2(r[4]).rem_euclid(TAU);
                    counts[((a / width) as usize).min(bins - 1)] += 1;
                }
                // Past a backward collapse the oracle column stays empty.
                let mt = m0.evolve(heat_t, gamma).ok();
                for (b, &c) in counts.iter().enumerate() {
                    let theta = (b as f64 + 0.5) * width;
                    let hist = c as f64 / (rows.len() as f64 * width);
                    let oracle = match &mt {
                        Some(m) => fmt17(m.density_at_angle(theta)?),
                        None => String::new(),
                    };
                    writeln!(
                        body,
                        "{panel},{step},{},{},{},{},{oracle}",
                        fmt17(time),
                        fmt17(heat_t),
                        fmt17(theta),
                        fmt17(hist)
                    )
                    .expect("writing to a String");
                }
                panel += 1;
            }
            ("plot_heat_panels.csv", csv.config, csv.seed, body)
        }
        PlotKind::EnergyLog => {
            let path = need(metrics, "--metrics")?;
            let m = MetricsFile::read(path)?;
            let series = m.series.get("energy").ok_or_else(|| {
                CliError::Config(format!("{} has no energy series", path.display()))
            })?;
            let mut body = String::from("log10_time,energy\n");
            for s in series.iter().filter(|s| s.t > 0.0) {
                writeln!(body, "{},{}", fmt17(s.t.log10()), fmt17(s.value))
                    .expect("writing to a String");
            }
            ("plot_energy_log.csv", m.config, m.seed, body)
        }
    };
    let path = out_dir(flags, None).join(name);
    write_atomic(&path, with_header(PLOT_SCHEMA, &echo, seed, &body).as_bytes())?;
    wrote(&path);
    Ok(())
}
