use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use seethrough_core::countermeasure::{countermeasure_dataset, ShaderParams};
use seethrough_core::harness::{
    apply_correction, emit_report, mean_char_accuracy, run_experiment_full, word_accuracy,
    Correction, ExperimentConfig,
};
use seethrough_core::imagegen::{generate_dataset, load_dataset, DatasetConfig, GrayImage, LabeledImage};
use seethrough_core::lexicon::{correct_domain, correct_general, CorrectionConfig, Lexicon};
use seethrough_core::model::{load_checkpoint, save_checkpoint};
use seethrough_core::rng::derive_seed;
use seethrough_core::training::{gradient_check, train_loop_with, FreezePolicy, Start, TrainConfig, TrainLog};
use seethrough_core::ModelConfig;

#[derive(Parser)]
#[command(name = "seethrough", version, about = "Read words through envelope security patterns, and defend against it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset from a JSON dataset config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// Model config JSON; defaults to the standard model on the dataset canvas.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Continue training from a checkpoint.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Overrides the freeze policy of the train config.
        #[arg(long, value_parser = ["none", "encoder-frozen"])]
        freeze: Option<String>,
    },
    /// Finite-difference gradient check on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        probes: usize,
    },
    /// Correct predicted words read from a CSV of (word, confidences).
    Correct {
        #[command(flatten)]
        lex: LexiconArgs,
        #[arg(long, default_value_t = 2)]
        max_dist: usize,
        /// Input CSV; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Mirror a dataset with the content-aware shader printed under every sample.
    Countermeasure {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shader parameters JSON; defaults when absent.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run the full experiment matrix and write the report.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's eval split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        lex: LexiconArgs,
        /// Score every sample instead of the eval split.
        #[arg(long)]
        all: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Train config JSON; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; next to the checkpoint when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct LexiconArgs {
    /// Lexicon file, one `WORD[<TAB>frequency]` per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Confidence-weighted correction against a domain lexicon.
    #[arg(long)]
    domain: bool,
    #[arg(long, default_value_t = 0.3)]
    gate: f64,
}

impl LexiconArgs {
    fn mode(&self) -> Option<Correction> {
        match (self.domain, self.lexicon.is_some()) {
            (true, _) => Some(Correction::Domain),
            (false, true) => Some(Correction::General),
            (false, false) => None,
        }
    }

    fn load(&self) -> Result<Lexicon> {
        Ok(match (&self.lexicon, self.domain) {
            (Some(p), _) => Lexicon::load(p)?,
            (None, true) => Lexicon::domain(),
            (None, false) => Lexicon::general(),
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    log.write_csv(f)?;
    Ok(())
}

fn train(args: &TrainArgs, config: TrainConfig, start: Start) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let (params, log) = train_loop_with(&data.train, &data.eval, &config, start, &mut |e| {
        match e.char_acc {
            Some(a) => eprintln!("iter {:>6}  loss {:.4}  char_acc {a:.4}", e.iteration, e.loss),
            None => eprintln!("iter {:>6}  loss {:.4}", e.iteration, e.loss),
        }
    })?;
    save_checkpoint(&params, &args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.csv"));
    write_log(&log, &log_path)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_confidences(field: &str) -> Result<Vec<f64>> {
    if field.trim().is_empty() {
        return Ok(vec![]);
    }
    field
        .split(',')
        .map(|c| c.trim().parse::<f64>().with_context(|| format!("bad confidence {c:?}")))
        .collect()
}

fn correct(lex: &LexiconArgs, max_dist: usize, input: Option<&Path>) -> Result<()> {
    let cfg = CorrectionConfig { max_dist, gate: lex.gate };
    cfg.validate()?;
    let lexicon = lex.load()?;
    let reader: Box<dyn Read> = match input {
        Some(p) => Box::new(File::open(p).with_context(|| format!("opening {}", p.display()))?),
        None => Box::new(io::stdin()),
    };
    let mut rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = csv::Writer::from_writer(io::stdout());
    out.write_record(["word", "corrected"])?;
    for (i, rec) in rows.records().enumerate() {
        let rec = rec?;
        let word = rec.get(0).unwrap_or("").trim().to_uppercase();
        if i == 0 && word == "WORD" {
            continue;
        }
        let fixed = if lex.domain {
            let conf = parse_confidences(rec.get(1).unwrap_or(""))?;
            correct_domain(&word, &conf, &lexicon, &cfg)?
        } else {
            correct_general(&word, &lexicon, &cfg)
        };
        out.write_record([word, fixed])?;
    }
    out.flush()?;
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, lex: &LexiconArgs, all: bool) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let samples: Vec<&LabeledImage> = if all { ds.all().collect() } else { ds.eval.iter().collect() };
    if samples.is_empty() {
        bail!("no samples to evaluate in {}", data.display());
    }
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let preds = params.predict_batch(&images)?;
    let cfg = CorrectionConfig { gate: lex.gate, ..CorrectionConfig::default() };
    cfg.validate()?;
    let texts = match lex.mode() {
        None => preds.iter().map(|p| p.text.clone()).collect(),
        Some(mode) => {
            let lexicon = lex.load()?;
            apply_correction(&preds, mode, &lexicon, &lexicon, &cfg)?
        }
    };
    let pairs: Vec<(&str, &str)> =
        texts.iter().map(String::as_str).zip(samples.iter().map(|s| s.label.as_str())).collect();
    println!("char_acc,word_acc,n");
    println!("{},{},{}", mean_char_accuracy(&pairs)?, word_accuracy(&pairs)?, pairs.len());
    Ok(())
}

fn experiment(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: ExperimentConfig = read_json_or_default(config)?;
    let outcome = run_experiment_full(&cfg)?;
    let paths = emit_report(&outcome.report, out)?;
    save_checkpoint(&outcome.pretrained, &out.join("pretrained.ckpt"))?;
    save_checkpoint(&outcome.finetuned, &out.join("finetuned.ckpt"))?;
    write_log(&outcome.pretrain_log, &out.join("pretrain_log.csv"))?;
    write_log(&outcome.finetune_log, &out.join("finetune_log.csv"))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    for r in &outcome.report.rows {
        println!(
            "{:>5} -> {:<3} {:<8} {:<14} char {:.3} word {:.3}",
            r.train_pattern, r.test_pattern, r.correction, r.countermeasure, r.char_acc, r.word_acc
        );
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg: DatasetConfig = read_json(&config)?;
            let m = generate_dataset(&cfg, &out)?;
            println!("wrote {} samples to {}", m.records.len(), out.display());
        }
        Command::Pretrain { train: args, model } => {
            let config: TrainConfig = read_json_or_default(args.config.as_deref())?;
            let canvas = DatasetConfig::load(&args.data)?.canvas;
            let model = match model {
                Some(p) => read_json(&p)?,
                None => ModelConfig { canvas, ..ModelConfig::default() },
            };
            let seed = derive_seed(config.seed, 0);
            train(&args, config, Start::Init { model, seed })?;
        }
        Command::Finetune { base, train: args, freeze } => {
            let mut config: TrainConfig = read_json_or_default(args.config.as_deref())?;
            match freeze.as_deref() {
                Some("encoder-frozen") => config.freeze_policy = FreezePolicy::EncoderFrozen,
                Some(_) => config.freeze_policy = FreezePolicy::None,
                None => {}
            }
            train(&args, config, Start::Checkpoint(load_checkpoint(&base)?))?;
        }
        Command::Gradcheck { seed, probes } => {
            let r = gradient_check(&ModelConfig::tiny(), seed, probes)?;
            println!("max_rel_error {:e}  probes {}  redrawn {}", r.max_rel_error, r.probes.len(), r.redrawn);
            return Ok(r.max_rel_error < 1e-3);
        }
        Command::Correct { lex, max_dist, input } => correct(&lex, max_dist, input.as_deref())?,
        Command::Countermeasure { input, out, params } => {
            let cfg = DatasetConfig::load(&input)?;
            let shader: ShaderParams = read_json_or_default(params.as_deref())?;
            let m = countermeasure_dataset(&cfg, &shader, &out)?;
            println!("wrote {} samples to {}", m.records.len(), out.display());
        }
        Command::Experiment { config, out } => experiment(config.as_deref(), &out)?,
        Command::Eval { ckpt, data, lex, all } => eval(&ckpt, &data, &lex, all)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
