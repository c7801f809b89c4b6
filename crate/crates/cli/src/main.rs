//! `reform`: generate toy datasets, train, evaluate, audit and plot.
//!
//! Exit codes: 0 ok, 1 audit failure, 2 usage, 3 config, 4 I/O,
//! 5 file format, 6 data or contract mismatch, 7 numerical failure.

mod viz;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reform::envs::{generate_dataset, BehaviorSpec, EnvKind, TransitionBatch};
use reform::nn::Checkpoint;
use reform::trainer::{
    evaluate, stream, sweep, train, Agent, AuditReport, SampleDump, TrainConfig, Variant,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] reform::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("audit failed")]
    AuditFailed,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use reform::Error as E;
        match self {
            CliError::AuditFailed => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) => 3,
                E::Io(_) => 4,
                E::Format { .. } => 5,
                E::Shape(_) | E::Contract(_) | E::Precondition(_) => 6,
                E::Numeric(_) | E::Diverged { .. } => 7,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

#[derive(Parser)]
#[command(name = "reform", version, about = "Support-constrained offline RL on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write an RFDS dataset.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write its artifacts to a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate the final checkpoint of a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check dumped latents against the ball and the clip-rate bound.
    Audit {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write an SVG scatter of a run's dump, plus the dump as CSV next to it.
    Viz {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant/seed pair on one dataset.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant tags.
        #[arg(long, value_delimiter = ',', default_value = "reform")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

fn init_logging() {
    let level = match std::env::var("RFORM_LOG_LEVEL") {
        Ok(v) if ["error", "info", "debug"].contains(&v.as_str()) => v,
        Ok(v) => {
            eprintln!("warning: RFORM_LOG_LEVEL must be error, info or debug; ignoring `{v}`");
            "error".into()
        }
        Err(_) => "error".into(),
    };
    env_logger::Builder::new().parse_filters(&level).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::AuditFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { env, episodes, seed, out } => {
            let env = EnvKind::parse(&env)?;
            let data = generate_dataset(env, &BehaviorSpec::default_for(env), episodes as usize, seed)?;
            data.write(&out)?;
            println!(
                "wrote {} rows (state dim {}, action dim {}) to {}",
                data.len(),
                data.state_dim(),
                data.action_dim(),
                out.display()
            );
        }
        Command::Train { config, data, out, seed, variant } => {
            let cfg = load_config(&config, seed, variant.as_deref())?;
            let data = TransitionBatch::read(&data)?;
            let run = train(&cfg, &data)?;
            run.write(&out)?;
            print!("{}", run.summary());
        }
        Command::Eval { run, episodes, seed } => {
            if episodes == 0 {
                return Err(CliError::Usage("--episodes must be positive".into()));
            }
            let cfg = TrainConfig::parse(&read(&run.join("config.txt"))?)?;
            let mut agent = Agent::new(&cfg)?;
            let final_ck = run.join("final.rfck");
            let ck = if final_ck.exists() { final_ck } else { run.join("initial.rfck") };
            agent.load(&Checkpoint::read(&ck)?)?;
            let rep = evaluate(&agent, cfg.env, episodes, &mut stream(seed, "eval"))?;
            println!("episodes = {episodes}");
            println!("mean_return = {}", rep.mean_return);
            println!("clipped = {} of {}", rep.clipped, rep.emitted);
        }
        Command::Audit { run } => {
            let dump = SampleDump::from_csv(&read(&run.join("samples.csv"))?)?;
            let summary = RunSummary::read(&run)?;
            let report = AuditReport::new(&dump, summary.radius, summary.clip_rate());
            println!("rows = {}", report.rows);
            println!("radius = {}", report.radius);
            println!("max_norm = {}", report.max_norm);
            println!("violations = {}", report.violations.len());
            println!(
                "clip_rate = {} ({} of {})",
                report.clip_rate, summary.clipped, summary.emitted
            );
            let norms = dump.z_norms();
            for &i in &report.violations {
                println!("row {i}: norm {} exceeds radius", norms[i]);
            }
            if report.passed() {
                println!("PASS");
            } else {
                println!("FAIL");
                return Err(CliError::AuditFailed);
            }
        }
        Command::Viz { run, out } => {
            let dump = SampleDump::from_csv(&read(&run.join("samples.csv"))?)?;
            if dump.is_empty() {
                return Err(reform::Error::Contract("sample dump has no rows".into()).into());
            }
            let summary = RunSummary::read(&run)?;
            write(&out, &viz::scatter_svg(&dump, summary.radius))?;
            write(&out.with_extension("csv"), &dump.to_csv())?;
            println!("plotted {} samples to {}", dump.len(), out.display());
        }
        Command::Sweep { config, data, out, variants, seeds } => {
            let base = load_config(&config, None, None)?;
            let variants: Vec<Variant> =
                variants.iter().map(|t| Variant::parse(t)).collect::<reform::Result<_>>()?;
            let data = TransitionBatch::read(&data)?;
            fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
            let summary = sweep(&base, &data, &variants, &seeds, Some(&out))?;
            write(&out.join("summary.csv"), &summary)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, variant: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::parse(&read(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = Variant::parse(v)?;
    }
    Ok(cfg)
}

/// The fields of `run.txt` that audit and viz need.
struct RunSummary {
    radius: f64,
    emitted: u64,
    clipped: u64,
}

impl RunSummary {
    fn read(run: &Path) -> Result<Self> {
        let path = run.join("run.txt");
        let text = read(&path)?;
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| {
                    reform::Error::Config(format!("{}: missing `{key}`", path.display())).into()
                })
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| {
                reform::Error::Config(format!("{}: `{key}` is not a number", path.display())).into()
            })
        };
        Ok(Self {
            radius: num("latent_radius")?,
            emitted: num("actions_emitted")? as u64,
            clipped: num("actions_clipped")? as u64,
        })
    }

    fn clip_rate(&self) -> f64 {
        if self.emitted == 0 {
            0.0
        } else {
            self.clipped as f64 / self.emitted as f64
        }
    }
}
