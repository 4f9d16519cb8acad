use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use personafl::federated::Strategy;
use personafl_cli::pipeline::{self, SplitName, Stage};
use personafl_cli::{CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "personafl", version, about = "Persona dialogue models with federated fine-tuning")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, default_value = "personafl.toml", global = true)]
    config: PathBuf,
    /// Base profile, overriding the one named in the config.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and train the persona-free and inverse models.
    Pretrain,
    /// Federated fine-tuning from the pre-trained model.
    Fedtune {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
    },
    /// Grid-tune the reranker weights on the dev split.
    TuneRerank {
        #[arg(long, value_enum, default_value = "fedtune")]
        stage: Stage,
    },
    /// BLEU and perplexity on a fine-tuning split.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, value_enum, default_value = "fedtune")]
        stage: Stage,
        /// Reranker weights file; defaults to the tuned one, if any.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Answer a question as a given speaker.
    Generate {
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        question: String,
        /// Also write the N-best list here as line-delimited JSON.
        #[arg(long)]
        nbest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fedtune")]
        stage: Stage,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown strategy {s:?} (fedavg, fedprox, feddrop)"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let strategy = match &cli.command {
        Command::Fedtune { strategy } => *strategy,
        _ => None,
    };
    let ov = Overrides {
        profile: cli.profile,
        output_dir: cli.output_dir,
        seed: cli.seed,
        strategy,
    };
    let cfg = ExperimentConfig::load(&cli.config, &ov)?;
    match cli.command {
        Command::Pretrain => {
            let s = pipeline::cmd_pretrain(&cfg)?;
            let last = s.epochs.last();
            println!(
                "pretrained on {} pairs, vocabulary {}, final train nll {}",
                s.train_pairs,
                s.vocab_size,
                last.map_or("n/a".into(), |e| format!("{:.4}", e.train_nll))
            );
        }
        Command::Fedtune { .. } => {
            let s = pipeline::cmd_fedtune(&cfg)?;
            println!("{} rounds over {} speakers", s.rounds.len(), s.speakers.len());
            let fmt = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.3}"));
            println!("mean dev perplexity: pretrained {}", fmt(s.pretrained_mean_dev_ppl));
            println!("mean dev perplexity: before rounds {}", fmt(s.initial_mean_dev_ppl));
            println!("mean dev perplexity: after rounds {}", fmt(s.final_mean_dev_ppl));
        }
        Command::TuneRerank { stage } => {
            let out = pipeline::cmd_tune_rerank(&cfg, stage)?;
            println!("lambda {} gamma {}", out.weights.lambda, out.weights.gamma);
            println!("dev BLEU {:.4} (unreranked {:.4})", out.bleu, out.baseline_bleu);
        }
        Command::Evaluate { split, stage, weights } => {
            let w = pipeline::load_weights(&cfg, weights.as_deref())?;
            let r = pipeline::cmd_evaluate(&cfg, stage, split, w)?;
            println!("BLEU {:.4} perplexity {:.3} over {} pairs", r.bleu, r.perplexity, r.n_examples);
        }
        Command::Generate { speaker, question, nbest, stage, weights } => {
            let w = pipeline::load_weights(&cfg, weights.as_deref())?;
            let g = pipeline::cmd_generate(&cfg, stage, &speaker, &question, w, nbest.as_deref())?;
            println!("{}", g.response);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
