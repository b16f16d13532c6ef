use crate::config::{GlobalFlags, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "sphereflow",
    version,
    about = "Simulate and verify attention-driven particle dynamics on the sphere"
)]
pub struct Cli {
    /// JSON run configuration with "version": "v1".
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Simulation worker threads [default: available cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory [default: $SPHEREFLOW_OUT, then ./sphereflow-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cap particle counts at 5000 and step counts at 10000.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn flags(&self) -> GlobalFlags {
        GlobalFlags {
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
            desk_scale: self.desk_scale,
        }
    }
}

/// Per-run settings that may also come from the config file; flags win.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Scenario whose defaults fill unset fields: 1a, 1b, 2a, 2b, full_story, custom.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Observable to record (repeatable): subspace_distance, energy,
    /// cluster_count, oracle_w1, norm_defect.
    #[arg(long = "observe")]
    pub observe: Vec<String>,
    /// Particle count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Step size.
    #[arg(long)]
    pub h: Option<f64>,
    /// Steps between recorded snapshots and metrics.
    #[arg(long)]
    pub stride: Option<usize>,
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.scenario {
            cfg.scenario = Some(s.clone());
        }
        if !self.observe.is_empty() {
            cfg.observables = Some(self.observe.clone());
        }
        if let Some(n) = self.n {
            cfg.n = Some(n);
        }
        if let Some(steps) = self.steps {
            cfg.set_steps(steps);
        }
        if let Some(b) = self.beta {
            cfg.beta = Some(b);
        }
        if let Some(h) = self.h {
            cfg.set_h(h);
        }
        if let Some(s) = self.stride {
            cfg.stride = Some(s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Flow {
    Alignment,
    Pairing,
}

impl Flow {
    pub fn name(&self) -> &'static str {
        match self {
            Flow::Alignment => "alignment",
            Flow::Pairing => "pairing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Azimuth histogram and oracle density per snapshot, from a trajectory.
    HeatPanels,
    /// `log10_time,energy`, from a metrics file.
    EnergyLog,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the finite-β dynamics; writes traj.csv and metrics.json.
    Simulate(RunArgs),
    /// Run a limit flow from the scenario's initial particles.
    Limit {
        #[arg(value_enum)]
        flow: Option<Flow>,
        /// Pairing flow stops once the pair's inner product exceeds 1 - eps.
        #[arg(long)]
        eps: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Tabulate the heat-oracle mixture density over a list of heat times.
    Oracle {
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        /// Angles per time block.
        #[arg(long)]
        grid: Option<usize>,
        /// +1 backward, -1 forward [default: from V].
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<i8>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run verification checks by name, or `all`; writes verify.json.
    Verify {
        #[arg(required = true)]
        checks: Vec<String>,
        /// Use the published particle counts instead of desk scale.
        #[arg(long)]
        full_scale: bool,
        /// Run independent checks concurrently.
        #[arg(long)]
        parallel: bool,
        /// Replace each check's β list.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        /// Replace each check's particle-count list.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Run the simulation over a β × N grid, one output directory per cell.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Turn a trajectory or metrics file into plot-ready CSV.
    ExportPlot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Histogram bins per panel.
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
}
