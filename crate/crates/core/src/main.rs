use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viapt::harness::commands::{
    self, cmd_ablate, cmd_eval, cmd_pretrain, cmd_sweep, cmd_train, interior_maximum, param_table,
    param_table_csv, param_table_text,
};
use viapt::harness::{RunConfig, SplitName};
use viapt::numerics::DType;
use viapt::{Error, Result};

#[derive(Parser)]
#[command(name = "viapt", version, about = "Instance-aware visual prompt tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to OUT/data.bin.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Pretrain a backbone on rotation prediction.
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Tune prompts on a frozen backbone.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Train one model per (m, lambda) cell and write sweep_m.csv.
    SweepM {
        #[command(flatten)]
        common: Common,
        /// Comma-separated projection dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        m_list: Vec<usize>,
        /// Also run every m with lambda = 0 and lambda = p/2.
        #[arg(long)]
        both_lambdas: bool,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Train the ablation variants and write ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Print trainable prompt parameter counts.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        m_list: Vec<usize>,
        /// Print CSV instead of the text table.
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic and finite-difference gradients (f64 only).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset: desk, tiny or vit_base.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Extra overrides, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    /// Preset, then config file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = RunConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            run.apply_file(path)?;
        }
        let flags = [
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("train.precision", self.precision.clone()),
            ("prompt.mode", self.mode.clone()),
            ("prompt.m", self.m.map(|v| v.to_string())),
            ("prompt.lambda", self.lambda.map(|v| v.to_string())),
            ("infer.strategy", self.strategy.clone()),
            ("infer.rounds", self.rounds.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                run.set(key, &v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            run.set(k, v)?;
        }
        Ok(run)
    }
}

macro_rules! by_precision {
    ($run:expr, $f:ident ( $($arg:expr),* )) => {
        match $run.train.precision {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, path } => {
            let run = common.resolve()?;
            run.data.validate()?;
            let path = path.unwrap_or_else(|| run.out.join("data.bin"));
            let ds = commands::gen_data(&run.data, &path)?;
            println!("wrote {} ({} images, {} classes)", path.display(), ds.len(), ds.classes);
        }
        Command::PretrainBackbone { common } => {
            let run = common.resolve()?;
            run.validate()?;
            by_precision!(run, cmd_pretrain(&run))?;
            println!("wrote {}", run.out.join(commands::BACKBONE_FILE).display());
        }
        Command::Train { common } => {
            let run = common.resolve()?;
            by_precision!(run, cmd_train(&run))?;
            println!("wrote {}", run.out.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let run = common.resolve()?;
            let report = by_precision!(run, cmd_eval(&run, &checkpoint, split))?;
            println!(
                "{}",
                serde_json::to_string(&report.summary).map_err(|e| Error::Contract(e.to_string()))?
            );
        }
        Command::SweepM { common, m_list, both_lambdas, seeds } => {
            let run = common.resolve()?;
            let rows = by_precision!(run, cmd_sweep(&run, &m_list, both_lambdas, &seeds))?;
            print!("{}", commands::sweep_csv(&rows));
            let lambdas = if both_lambdas { vec![0, run.prompt.p / 2] } else { vec![run.prompt.lambda] };
            for lambda in lambdas {
                match interior_maximum(&rows, lambda, run.vit.dim) {
                    Some(m) => println!("lambda={lambda}: interior maximum at m={m}"),
                    None => println!("lambda={lambda}: no interior maximum"),
                }
            }
        }
        Command::Ablate { common, seeds } => {
            let run = common.resolve()?;
            let rows = by_precision!(run, cmd_ablate(&run, &seeds))?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::ParamCount { common, m_list, csv } => {
            let run = common.resolve()?;
            let m_list = if m_list.is_empty() { default_m_list(run.vit.dim) } else { m_list };
            let rows = param_table(&run.vit, &run.prompt, &m_list)?;
            if csv {
                print!("{}", param_table_csv(&rows));
            } else {
                print!("{}", param_table_text(&run.vit, &run.prompt, &rows)?);
            }
        }
        Command::Gradcheck { common, batch } => {
            let run = common.resolve()?;
            let report = commands::gradcheck(&run, batch, None)?;
            for t in &report.tensors {
                println!("{:<32} {:>6} {:.3e}", t.name, t.elements, t.max_relative_error);
            }
            println!("worst {:.3e} (tolerance {:.0e})", report.worst(), report.tolerance);
            if !report.passed {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn default_m_list(dim: usize) -> Vec<usize> {
    vec![0, dim / 4, dim / 2, 3 * dim / 4, dim]
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
