//! `recipe-bridge`: corpus synthesis, training, evaluation and interleaved
//! generation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recipe_bridge::bridge::{generate_interleaved, Decoding, Segment};
use recipe_bridge::config::Config;
use recipe_bridge::data::{load_examples, load_tensor, save_tensor, split, synth_corpus, Checkpoint, Example};
use recipe_bridge::eval::{eval_i2t, eval_t2i, score_i2t};
use recipe_bridge::train::{initial_checkpoint, train};
use recipe_bridge::Error;

#[derive(Parser)]
#[command(name = "recipe-bridge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: corpus.jsonl plus images/*.tnsr.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Image dimensions are taken from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the bridge on the training split and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file or the directory holding corpus.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy recipe generation from each held-out image; BLEU and ROUGE-2.
    EvalI2t {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score every record instead of the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long, hide = true)]
        echo_references: bool,
    },
    /// Image generation from each held-out recipe; mean CLIP similarity.
    EvalT2i {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        all: bool,
    },
    /// Interleaved text and image generation from a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Image placed before the prompt text.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
        max_tokens: u64,
        /// Sample at this temperature instead of decoding greedily.
        #[arg(long)]
        temperature: Option<f64>,
        /// Sampling seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where img_000.tnsr, img_001.tnsr, ... are written.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn corpus_file(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("corpus.jsonl")
    } else {
        data.to_path_buf()
    }
}

fn load_config(path: Option<&Path>) -> recipe_bridge::Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn eval_examples(ck: &Checkpoint, data: &Path, all: bool) -> recipe_bridge::Result<Vec<Example>> {
    let examples = load_examples(&corpus_file(data), &ck.backbones.vocab, ck.config.dims.image_shape())?;
    Ok(if all { examples } else { split(&examples).1.to_vec() })
}

fn synth(seed: u64, n: usize, out: &Path, config: Option<&Path>) -> Outcome {
    if n == 0 {
        return Err(Failure::Usage("n must be ≥ 1".into()));
    }
    let cfg = load_config(config)?;
    let path = synth_corpus(seed, n, cfg.dims.image_shape(), out)?;
    println!("{}", serde_json::json!({ "records": n, "corpus": path }));
    Ok(())
}

fn run_train(config: Option<&Path>, data: Option<&Path>, out: Option<&Path>, resume: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let data = data
        .or(cfg.paths.data.as_deref())
        .ok_or_else(|| Failure::Usage("--data is required (or paths.data in the config)".into()))?;
    let out = out
        .or(cfg.paths.out.as_deref())
        .ok_or_else(|| Failure::Usage("--out is required (or paths.out in the config)".into()))?
        .to_path_buf();
    let start = match resume {
        Some(p) => Checkpoint::load(p)?,
        None => initial_checkpoint(&cfg)?,
    };
    let examples = load_examples(&corpus_file(data), &start.backbones.vocab, cfg.dims.image_shape())?;
    let (train_split, _) = split(&examples);
    let end = train(&cfg, train_split, start, |step| {
        eprintln!("{}", serde_json::to_string(step).expect("log serializes"));
    })?;
    end.save(&out)?;
    println!(
        "{}",
        serde_json::json!({ "checkpoint": out, "steps": end.trainer.step, "sha256": end.sha256() })
    );
    Ok(())
}

fn eval_i2t_cmd(ckpt: &Path, data: &Path, all: bool, echo_references: bool) -> Outcome {
    let ck = Checkpoint::load(ckpt)?;
    let examples = eval_examples(&ck, data, all)?;
    let reports = if echo_references {
        let refs: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
        score_i2t(&refs, &refs)?
    } else {
        eval_i2t(&ck.model(), &examples)?
    };
    for r in reports {
        println!("{}", r.to_json());
    }
    Ok(())
}

fn eval_t2i_cmd(ckpt: &Path, data: &Path, all: bool) -> Outcome {
    let ck = Checkpoint::load(ckpt)?;
    let examples = eval_examples(&ck, data, all)?;
    println!("{}", eval_t2i(&ck.model(), &examples)?.to_json());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(
    ckpt: &Path,
    prompt: &str,
    image: Option<&Path>,
    max_tokens: usize,
    temperature: Option<f64>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Outcome {
    let ck = Checkpoint::load(ckpt)?;
    let mut segments = Vec::new();
    if let Some(p) = image {
        segments.push(Segment::Image(load_tensor(p)?));
    }
    if !prompt.trim().is_empty() {
        segments.push(Segment::Text(prompt.to_string()));
    }
    let decoding = match temperature {
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(Failure::Usage(format!("temperature must be a positive number, got {t}")));
        }
        Some(temperature) => Decoding::Sample {
            temperature,
            seed: seed.unwrap_or(ck.config.training.seed),
        },
        None => Decoding::Greedy,
    };
    let out = generate_interleaved(&ck.model(), &segments, max_tokens, decoding)?;
    let mut images = 0;
    for seg in &out.segments {
        match seg {
            Segment::Text(t) => println!("{t}"),
            Segment::Image(img) => {
                let path = out_dir.join(format!("img_{images:03}.tnsr"));
                save_tensor(&path, img)?;
                println!("[image] {}", path.display());
                images += 1;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { seed, n, out, config } => synth(seed, n, &out, config.as_deref()),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => run_train(config.as_deref(), data.as_deref(), out.as_deref(), resume.as_deref()),
        Command::EvalI2t {
            ckpt,
            data,
            all,
            echo_references,
        } => eval_i2t_cmd(&ckpt, &data, all, echo_references),
        Command::EvalT2i { ckpt, data, all } => eval_t2i_cmd(&ckpt, &data, all),
        Command::Generate {
            ckpt,
            prompt,
            image,
            max_tokens,
            temperature,
            seed,
            out_dir,
        } => generate(
            &ckpt,
            &prompt,
            image.as_deref(),
            max_tokens as usize,
            temperature,
            seed,
            &out_dir,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
