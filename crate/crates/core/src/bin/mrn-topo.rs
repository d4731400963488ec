//! Command-line front end. Exit codes: 0 success, 2 configuration,
//! 3 network file, 4 simulation, 5 steady-pattern inference, 6 excitation,
//! 7 topology estimation, 8 output, 9 replay mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrn_topology::estimator::DriftCompensation;
use mrn_topology::experiment::{
    self, EpsilonRule, ExciteOptions, ExperimentConfig, InferOptions, Manifest, RangeOptions, SimulateOptions,
    StageOptions, TraceFormat,
};
use mrn_topology::{Stage, StageContext, StageError};

const REPLAY_MISMATCH: u8 = 9;

#[derive(Parser)]
#[command(
    name = "mrn-topo",
    version,
    about = "Local topology inference for simulated robot formations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a passive run and write the trace.
    Simulate(SimulateArgs),
    /// Infer the local topology from a recorded trace.
    Infer(InferArgs),
    /// Run only the steady-pattern and excitation stages on a trace.
    Excite(ExciteArgs),
    /// Monte Carlo sweep writing fig4.csv to fig7.csv.
    Sweep(SweepArgs),
    /// Rerun a recorded command and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory [default: $MRN_TOPO_OUT, else ./mrn-topo-out]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn dir(&self, configured: Option<&Path>) -> PathBuf {
        experiment::resolve_output(self.out.as_deref().or(configured))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
    Both,
}

#[derive(Args)]
struct SimulateArgs {
    /// Network file [default: bundled reference network]
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation noise standard deviation [default: the network file's]
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Initial per-robot perturbation half-width
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compensation {
    AllRows,
    LeaderOnly,
}

#[derive(Args)]
struct StageArgs {
    /// Known observation noise [default: the trace's]
    #[arg(long)]
    sigma: Option<f64>,
    /// Threshold parameter as a multiple of the noise level
    #[arg(long)]
    epsilon_factor: Option<f64>,
    /// Smallest threshold parameter
    #[arg(long)]
    epsilon_floor: Option<f64>,
    /// Steady window length
    #[arg(long)]
    window: Option<usize>,
    /// Consecutive excitations per session
    #[arg(long)]
    excitations: Option<usize>,
    /// Rows whose response has the formation drift removed
    #[arg(long, value_enum)]
    compensation: Option<Compensation>,
}

impl StageArgs {
    fn apply(&self, s: &mut StageOptions) {
        if self.sigma.is_some() {
            s.sigma = self.sigma;
        }
        let rule = &mut s.epsilon;
        *rule = EpsilonRule {
            factor: self.epsilon_factor.unwrap_or(rule.factor),
            floor: self.epsilon_floor.unwrap_or(rule.floor),
        };
        if let Some(w) = self.window {
            s.window = w;
        }
        if let Some(m) = self.excitations {
            s.excitations = m;
        }
        if let Some(c) = self.compensation {
            s.compensation = match c {
                Compensation::AllRows => DriftCompensation::AllRows,
                Compensation::LeaderOnly => DriftCompensation::LeaderOnly,
            };
        }
    }
}

#[derive(Args)]
struct RangeArgs {
    /// Fixed interaction range; skips the range search
    #[arg(long)]
    rc_hat: Option<f64>,
    /// Bottom of the search bracket when excitation is not run
    #[arg(long)]
    rc_lower: Option<f64>,
    /// Upper range bound that sizes the auxiliary rows
    #[arg(long)]
    rc_upper: Option<f64>,
}

impl RangeArgs {
    fn apply(&self, r: &mut RangeOptions) {
        r.rc_hat = self.rc_hat.or(r.rc_hat);
        r.rc_lower = self.rc_lower.or(r.rc_lower);
        r.rc_upper = self.rc_upper.or(r.rc_upper);
    }
}

#[derive(Args)]
struct InferArgs {
    /// Binary trace written by `simulate`
    trace: PathBuf,
    /// Excite the nearest robots to bound the interaction range from below
    #[arg(long)]
    excite: bool,
    /// Observations used by the estimators [default: every passive step]
    #[arg(long)]
    observations: Option<usize>,
    #[command(flatten)]
    range: RangeArgs,
    #[command(flatten)]
    stages: StageArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ExciteArgs {
    trace: PathBuf,
    #[command(flatten)]
    stages: StageArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML experiment configuration; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Noise levels, comma separated
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    /// Observation counts, comma separated
    #[arg(long, value_delimiter = ',')]
    observations: Vec<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Seed of the first trial
    #[arg(long)]
    seed: Option<u64>,
    /// Candidate ranges for the bias table, comma separated
    #[arg(long, value_delimiter = ',')]
    rc_grid: Vec<f64>,
    #[arg(long)]
    excite: bool,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    speed_stride: Option<usize>,
    #[command(flatten)]
    range: RangeArgs,
    #[command(flatten)]
    stages: StageArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ReplayArgs {
    /// Output directory of the recorded run
    recorded: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

type Outcome = Result<(Manifest, PathBuf), StageError>;

fn simulate(a: &SimulateArgs) -> Outcome {
    let options = SimulateOptions {
        network: a.network.clone(),
        seed: a.seed,
        sigma: a.sigma,
        horizon: a.horizon,
        spread: a.spread,
        format: match a.format {
            Format::Csv => TraceFormat::Csv,
            Format::Binary => TraceFormat::Binary,
            Format::Both => TraceFormat::Both,
        },
    };
    let out = a.out.dir(None);
    experiment::cmd_simulate(&options, &out).map(|m| (m, out))
}

fn infer(a: &InferArgs) -> Outcome {
    let mut options = InferOptions {
        trace: a.trace.clone(),
        excite: a.excite,
        observations: a.observations,
        ..Default::default()
    };
    a.range.apply(&mut options.range);
    a.stages.apply(&mut options.stages);
    let out = a.out.dir(None);
    experiment::cmd_infer(&options, &out).map(|m| (m, out))
}

fn excite(a: &ExciteArgs) -> Outcome {
    let mut options = ExciteOptions {
        trace: a.trace.clone(),
        ..Default::default()
    };
    a.stages.apply(&mut options.stages);
    let out = a.out.dir(None);
    experiment::cmd_excite(&options, &out).map(|m| (m, out))
}

fn sweep(a: &SweepArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).stage(Stage::Config)?,
        None => ExperimentConfig::default(),
    };
    if a.network.is_some() {
        cfg.network = a.network.clone();
    }
    if !a.sigmas.is_empty() {
        cfg.sigmas = a.sigmas.clone();
    }
    if !a.observations.is_empty() {
        cfg.observations = a.observations.clone();
    }
    if !a.rc_grid.is_empty() {
        cfg.rc_grid = Some(a.rc_grid.clone());
    }
    cfg.trials = a.trials.unwrap_or(cfg.trials);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.excite |= a.excite;
    cfg.spread = a.spread.or(cfg.spread);
    cfg.horizon = a.horizon.or(cfg.horizon);
    cfg.speed_stride = a.speed_stride.unwrap_or(cfg.speed_stride);
    a.range.apply(&mut cfg.range);
    a.stages.apply(&mut cfg.stages);
    let out = a.out.dir(cfg.output.as_deref());
    experiment::cmd_sweep(&cfg, &out).map(|m| (m, out))
}

fn report(dir: &Path, m: &Manifest) {
    for f in &m.outputs {
        println!("{}", dir.join(f).display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Infer(a) => infer(a),
        Command::Excite(a) => excite(a),
        Command::Sweep(a) => sweep(a),
        Command::Replay(a) => {
            let out = a.out.dir(None);
            return match experiment::replay(&a.recorded, &out) {
                Ok(rep) => {
                    for (name, same) in &rep.files {
                        println!("{} {name}", if *same { "identical" } else { "DIFFERS" });
                    }
                    if rep.identical() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(REPLAY_MISMATCH)
                    }
                }
                Err(e) => fail(&e),
            };
        }
    };
    match result {
        Ok((m, dir)) => {
            report(&dir, &m);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &StageError) -> ExitCode {
    eprintln!("mrn-topo: {e}");
    ExitCode::from(e.stage.exit_code() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sweep_lists_split_on_commas() {
        let cli =
            Cli::try_parse_from(["mrn-topo", "sweep", "--sigmas", "0.05,0.1", "--observations", "40,200"]).unwrap();
        let Command::Sweep(a) = cli.command else {
            panic!("not a sweep")
        };
        assert_eq!(a.sigmas, vec![0.05, 0.1]);
        assert_eq!(a.observations, vec![40, 200]);
    }
}
