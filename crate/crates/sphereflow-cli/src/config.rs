//! The `v1` run configuration and its resolution into a [`Scenario`].
//!
//! A configuration only has to name what differs from a scenario's
//! defaults. [`resolve`] fills in everything else, and the resolved form is
//! echoed into every output file, so feeding an echo back in reproduces the
//! run byte for byte.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use sphereflow::dynamics::{Clock, ModelParams, Scheme};
use sphereflow::experiments::{
    scenario_defaults, CircleMixture, Elevation, InitSpec, Observable, Scenario, ScenarioId,
    Schedule,
};
use sphereflow::Matrix;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: &str = "v1";

/// Environment variable naming the output directory when neither `--out`
/// nor the config sets one.
pub const OUT_DIR_ENV: &str = "SPHEREFLOW_OUT";

pub const DEFAULT_OUT_DIR: &str = "sphereflow-out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Row-major: one inner array per row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observables: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Keep full particle states every `stride` steps (the trajectory CSV).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Only `"csv"` exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<LimitSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    // A struct variant so that stray keys are still rejected.
    Uniform {},
    CircleMixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        elevation: Option<String>,
    },
    Points {
        coords: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Fixed,
    LogTime {
        t_first: f64,
        t_end: f64,
        steps_per_decade: usize,
        h_max: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<i8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    /// `"alignment"` or `"pairing"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

impl RunConfig {
    /// An empty `v1` configuration: every field from the scenario defaults.
    pub fn empty() -> Self {
        RunConfig {
            version: CONFIG_VERSION.into(),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "version '{}' is not supported (expected '{CONFIG_VERSION}')",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// The configuration file, or an empty one without `--config`.
    pub fn load_or_empty(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::empty()), Self::load)
    }

    /// One-line JSON, the form echoed into output headers.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn integrator_mut(&mut self) -> &mut IntegratorSection {
        self.integrator.get_or_insert_with(Default::default)
    }

    pub fn set_steps(&mut self, steps: usize) {
        self.integrator_mut().steps = Some(steps);
    }

    pub fn set_h(&mut self, h: f64) {
        self.integrator_mut().h = Some(h);
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalFlags {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub desk_scale: bool,
}

/// A configuration with every default materialized.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// What gets echoed. `out` and `threads` are left out: neither changes
    /// a single output byte.
    pub echo: RunConfig,
    pub scenario: Scenario,
    pub out: PathBuf,
    pub threads: usize,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> CliResult<Matrix> {
    Matrix::from_rows(rows).map_err(|e| CliError::Config(format!("{name}: {e}")))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn init_spec(init: &InitConfig, d: usize) -> CliResult<InitSpec> {
    Ok(match init {
        InitConfig::Uniform {} => InitSpec::Uniform,
        InitConfig::CircleMixture {
            weights,
            means,
            sigma,
            elevation,
        } => InitSpec::CircleMixture {
            mixture: CircleMixture {
                weights: weights.clone(),
                means: means.clone(),
                sigma: *sigma,
            },
            elevation: match elevation {
                Some(e) => Elevation::parse(e)?,
                None => Elevation::Plane,
            },
        },
        InitConfig::Points { coords } => {
            if coords.is_empty() {
                return Err(invalid("init.coords is empty"));
            }
            if let Some(bad) = coords.iter().position(|c| c.len() != d) {
                return Err(invalid(format!(
                    "init.coords[{bad}] has {} coordinates, expected {d}",
                    coords[bad].len()
                )));
            }
            InitSpec::Points(coords.concat())
        }
    })
}

fn init_config(init: &InitSpec, d: usize) -> InitConfig {
    match init {
        InitSpec::Uniform => InitConfig::Uniform {},
        InitSpec::CircleMixture { mixture, elevation } => InitConfig::CircleMixture {
            weights: mixture.weights.clone(),
            means: mixture.means.clone(),
            sigma: mixture.sigma,
            elevation: Some(elevation.name().into()),
        },
        InitSpec::Points(flat) => InitConfig::Points {
            coords: flat.chunks(d).map(<[f64]>::to_vec).collect(),
        },
    }
}

fn schedule(s: &ScheduleConfig) -> Schedule {
    match *s {
        ScheduleConfig::Fixed => Schedule::Fixed,
        ScheduleConfig::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        } => Schedule::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        },
    }
}

fn schedule_config(s: &Schedule) -> ScheduleConfig {
    match *s {
        Schedule::Fixed => ScheduleConfig::Fixed,
        Schedule::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        } => ScheduleConfig::LogTime {
            t_first,
            t_end,
            steps_per_decade,
            h_max,
        },
    }
}

/// Worker count when neither `--threads` nor the config names one.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Layers the config over the scenario defaults, then the global flags
/// over both, and validates the result.
pub fn resolve(cfg: &RunConfig, flags: &GlobalFlags) -> CliResult<Resolved> {
    if cfg.version != CONFIG_VERSION {
        return Err(invalid(format!("version '{}' is not supported", cfg.version)));
    }
    if let Some(f) = cfg.format.as_deref() {
        if f != "csv" {
            return Err(invalid(format!("format '{f}' is not supported (only 'csv')")));
        }
    }
    let id = match cfg.scenario.as_deref() {
        Some(s) => ScenarioId::parse(s)?,
        None => ScenarioId::Custom,
    };
    let base = scenario_defaults(id)?;

    let given: Vec<(&str, &Vec<Vec<f64>>)> = [("q", &cfg.q), ("k", &cfg.k), ("v", &cfg.v)]
        .into_iter()
        .filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
        .collect();
    let point_dim = match &cfg.init {
        Some(InitConfig::Points { coords }) => coords.first().map(Vec::len),
        _ => None,
    };
    let d = cfg
        .d
        .or_else(|| given.first().map(|(_, m)| m.len()))
        .or(point_dim)
        .unwrap_or_else(|| base.dim());
    let pick = |name: &str, m: &Option<Vec<Vec<f64>>>, fallback: &Matrix| -> CliResult<Matrix> {
        let out = match m {
            Some(rows) => matrix(name, rows)?,
            None if fallback.rows() == d => fallback.clone(),
            None => Matrix::identity(d),
        };
        if out.rows() != d || out.cols() != d {
            return Err(invalid(format!(
                "{name} is {}x{}, expected {d}x{d}",
                out.rows(),
                out.cols()
            )));
        }
        Ok(out)
    };
    let q = pick("q", &cfg.q, &base.params.q)?;
    let k = pick("k", &cfg.k, &base.params.k)?;
    let v = pick("v", &cfg.v, &base.params.v)?;
    let beta = cfg.beta.unwrap_or(base.params.beta);
    let params = ModelParams::new(q, k, v, beta)?;

    let init = match &cfg.init {
        Some(i) => init_spec(i, d)?,
        None => base.init.clone(),
    };
    let n = match (&init, cfg.n) {
        (InitSpec::Points(flat), Some(n)) if n * d != flat.len() => {
            return Err(invalid(format!(
                "n = {n} but init.coords lists {} points",
                flat.len() / d
            )))
        }
        (InitSpec::Points(flat), _) => flat.len() / d,
        (_, Some(n)) => n,
        (_, None) => base.n,
    };

    let mut icfg = base.cfg.clone();
    if let Some(sec) = &cfg.integrator {
        if let Some(s) = &sec.scheme {
            icfg.scheme = Scheme::parse(s)?;
        }
        if let Some(h) = sec.h {
            icfg.h = h;
        }
        if let Some(c) = &sec.clock {
            icfg.clock = Clock::parse(c)?;
        }
        if let Some(steps) = sec.steps {
            icfg.max_steps = steps;
        }
    }
    if let Some(stride) = cfg.stride {
        icfg.stride = stride;
    }
    let snapshots = cfg.snapshots.unwrap_or(true);
    icfg.keep_snapshots = snapshots;
    let threads = flags.threads.or(cfg.threads).unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(invalid("threads must be at least 1"));
    }
    icfg.threads = Some(threads);

    let observables = match &cfg.observables {
        Some(names) => names
            .iter()
            .map(|s| Observable::parse(s))
            .collect::<sphereflow::Result<Vec<_>>>()?,
        None => base.observables.clone(),
    };

    let mut scenario = Scenario {
        id,
        n,
        params,
        init,
        cfg: icfg,
        schedule: cfg.schedule.as_ref().map_or(base.schedule, schedule),
        observables,
        seed: flags.seed.or(cfg.seed).unwrap_or(base.seed),
    };
    if flags.desk_scale {
        scenario = scenario.desk_scale();
    }
    scenario.validate()?;
    if let InitSpec::Points(flat) = &scenario.init {
        // Rejects non-unit rows up front instead of mid-run.
        sphereflow::dynamics::ParticleState::from_flat(d, flat.clone())?;
    }

    let out = flags
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let echo = echo(&scenario, cfg);
    Ok(Resolved {
        echo,
        scenario,
        out,
        threads,
    })
}

/// The fully materialized configuration of `sc`. Subcommand sections are
/// carried over from `cfg` unchanged.
pub fn echo(sc: &Scenario, cfg: &RunConfig) -> RunConfig {
    let p = &sc.params;
    RunConfig {
        version: CONFIG_VERSION.into(),
        scenario: Some(sc.id.name().into()),
        d: Some(sc.dim()),
        n: Some(sc.n),
        beta: Some(p.beta),
        q: Some(p.q.to_rows()),
        k: Some(p.k.to_rows()),
        v: Some(p.v.to_rows()),
        init: Some(init_config(&sc.init, sc.dim())),
        integrator: Some(IntegratorSection {
            scheme: Some(sc.cfg.scheme.name().into()),
            h: Some(sc.cfg.h),
            clock: Some(sc.cfg.clock.name().into()),
            steps: Some(sc.cfg.max_steps),
        }),
        schedule: Some(schedule_config(&sc.schedule)),
        observables: Some(sc.observables.iter().map(|o| o.name().into()).collect()),
        stride: Some(sc.cfg.stride),
        snapshots: Some(sc.cfg.keep_snapshots),
        seed: Some(sc.seed),
        threads: None,
        out: None,
        format: Some("csv".into()),
        oracle: cfg.oracle.clone(),
        sweep: cfg.sweep.clone(),
        limit: cfg.limit.clone(),
    }
}
