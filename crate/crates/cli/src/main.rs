use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use exms_cli::check::cmd_check;
use exms_cli::config::{GenDataConfig, RunConfig};
use exms_cli::error::CliError;
use exms_cli::eval::cmd_eval;
use exms_cli::gen_data::cmd_gen_data;
use exms_cli::generate::{cmd_generate, IMAGE_MARKER};
use exms_cli::task::TaskFormat;
use exms_cli::train::cmd_train;
use exms_core::model::SamplingParams;

#[derive(Parser)]
#[command(name = "exms", version, about = "Toy vision-language model: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Caption,
    Grounding,
}

impl From<Task> for TaskFormat {
    fn from(t: Task) -> Self {
        match t {
            Task::Caption => TaskFormat::Caption,
            Task::Grounding => TaskFormat::Grounding,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a balanced counting dataset (JSONL plus PPM images).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the objective named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report accuracy metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "caption")]
        task: Task,
    },
    /// Sample a continuation of a prompt, optionally conditioned on an image.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt text; each `<image>` marker expands to the image's visual tokens.
        #[arg(long, default_value = IMAGE_MARKER)]
        prompt: String,
        /// Binary PPM (P6) image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long, default_value_t = 0.0)]
        presence_penalty: f64,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the seeded property suites: gradients, attention, rope, losses, data or all.
    Check {
        #[arg(default_value = "all")]
        suite: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = GenDataConfig::load(&config)?;
            let s = cmd_gen_data(&cfg.counting, &out)?;
            println!("wrote {} records to {}", s.records, s.dataset.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = cmd_train(&cfg)?;
            println!("trained {} steps, final loss {:.6}", s.steps, s.final_loss);
            if let Some(a) = s.final_eval_accuracy {
                println!("held-out next-token accuracy {a:.4}");
            }
            println!("checkpoint {}", s.checkpoint.display());
            println!("metrics {}", s.metrics.display());
        }
        Command::Eval { checkpoint, dataset, task } => {
            let report = cmd_eval(&checkpoint, &dataset, task.into())?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Format(e.to_string()))?);
        }
        Command::Generate { checkpoint, prompt, image, temperature, top_p, presence_penalty, max_tokens, seed } => {
            let sp = SamplingParams { temperature, top_p, presence_penalty, max_tokens, seed };
            let g = cmd_generate(&checkpoint, &prompt, image.as_deref(), &sp)?;
            let ids: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
            println!("tokens: {}", ids.join(" "));
            println!("text: {}", g.text);
        }
        Command::Check { suite } => {
            cmd_check(&suite)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXMS_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::FAILURE
        }
    }
}
