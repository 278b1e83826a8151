use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pei_core::checkpoint::Checkpoint;
use pei_core::config::TrainConfig;
use pei_core::harness::{self, AblationVariant, LoadedModel};
use pei_core::metrics;
use pei_core::Result;

#[derive(Parser)]
#[command(name = "pei", version, about = "Prompt-based explicit and implicit knowledge for multi-hop QA")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world, single-hop and 2-hop splits.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: $PEI_ARTIFACTS/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the reader and the knowledge encoder-decoder on single-hop questions.
    PretrainSinglehop {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn type prompts over the frozen pre-trained encoder.
    TrainTypePrompter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Exported prompts archive.
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training of the unified prompter with the knowledge prompter.
    #[command(alias = "train-knowledge-unified")]
    TrainUnified {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        type_prompts: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write JSONL predictions for a split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also answer each example's decomposed sub-questions.
        #[arg(long)]
        subquestions: bool,
    },
    /// Score predictions against gold examples.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Report path; the sub-question table goes next to it as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every ablation variant over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Subset of variants to run (default: all four).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData { config: c, out } => {
            let cfg = config(&c)?;
            let out = out.unwrap_or_else(|| harness::artifact_root().join("data"));
            let b = harness::generate_benchmark(&cfg)?;
            harness::write_benchmark(&b, &cfg, &out)?;
            println!(
                "{} singlehop, {} train, {} dev examples in {} (config {})",
                b.singlehop.len(),
                b.train.len(),
                b.dev.len(),
                out.display(),
                cfg.digest()
            );
        }
        Cmd::PretrainSinglehop { data, config: c, out } => {
            let cfg = config(&c)?;
            let vocab = harness::load_vocab(&data)?;
            let sh = harness::load_split(&data, harness::SINGLEHOP_FILE)?;
            let r = harness::pretrain_singlehop(&cfg, &vocab, &sh, cfg.seed)?;
            save(&r.checkpoint, &out)?;
            let d = cfg.digest();
            r.reader_log.append_to(sibling(&out, &format!("reader.{d}.loss.csv")))?;
            r.knowledge_log.append_to(sibling(&out, &format!("knowledge.{d}.loss.csv")))?;
        }
        Cmd::TrainTypePrompter {
            data,
            backbone,
            config: c,
            out,
        } => {
            let cfg = config(&c)?;
            let vocab = harness::load_vocab(&data)?;
            let train = harness::load_split(&data, harness::TRAIN_FILE)?;
            let dev = harness::load_split(&data, harness::DEV_FILE)?;
            let stage1 = harness::load_checkpoint(&backbone, "pretrain-singlehop")?;
            let r = harness::train_type_stage(&cfg, &vocab, &stage1, &train, cfg.seed)?;
            save(&r.prompts, &out)?;
            save(&r.model, &sibling(&out, "model.ckpt"))?;
            r.log.append_to(sibling(&out, &format!("{}.loss.csv", cfg.digest())))?;
            println!(
                "dev type accuracy {:.4}; backbone digest {} unchanged",
                harness::type_accuracy(&r.model, &vocab, &dev)?,
                r.freeze.after
            );
        }
        Cmd::TrainUnified {
            data,
            backbone,
            type_prompts,
            config: c,
            variant,
            out,
        } => {
            let cfg = config(&c)?;
            let variant: AblationVariant = variant.parse()?;
            let vocab = harness::load_vocab(&data)?;
            let train = harness::load_split(&data, harness::TRAIN_FILE)?;
            let stage1 = harness::load_checkpoint(&backbone, "pretrain-singlehop")?;
            let pt = match (&type_prompts, variant.uses_type_prompts()) {
                (Some(p), true) => Some(harness::load_checkpoint(p, "train-type-prompter")?),
                _ => None,
            };
            let r = harness::train_unified_stage(&cfg, &vocab, &stage1, pt.as_ref(), variant, &train, cfg.seed)?;
            save(&r.checkpoint, &out)?;
            r.log.append_to(sibling(&out, &format!("{}.loss.csv", cfg.digest())))?;
            for f in &r.freeze {
                println!("frozen {} unchanged: {}", f.group, f.after);
            }
        }
        Cmd::Predict {
            model,
            data,
            out,
            subquestions,
        } => {
            let ck = harness::load_checkpoint(&model, "train-unified")?;
            let m = LoadedModel::from_checkpoint(&ck)?;
            let exs = pei_core::data::read_examples(&data)?;
            let preds = m.predict_all(&exs, subquestions)?;
            metrics::write_predictions(&out, &preds)?;
            println!("{} predictions in {}", preds.len(), out.display());
        }
        Cmd::Evaluate { pred, gold, out } => {
            let preds = metrics::read_predictions(&pred)?;
            let gold = pei_core::data::read_examples(&gold)?;
            let (_, text, table) = harness::evaluation_report(&preds, &gold, None);
            print!("{text}");
            if let Some(o) = out {
                fs::write(&o, &text)?;
                fs::write(sibling(&o, "subquestions.csv"), table)?;
            }
        }
        Cmd::Ablate {
            config: c,
            out,
            seeds,
            variants,
        } => {
            let cfg = config(&c)?;
            let variants = if variants.is_empty() {
                AblationVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<AblationVariant>>>()?
            };
            let out = out.unwrap_or_else(|| harness::artifact_root().join(format!("ablation-{}", cfg.digest())));
            let b = harness::generate_benchmark(&cfg)?;
            harness::write_benchmark(&b, &cfg, &out.join("data"))?;
            let report = harness::run_ablation(&cfg, &b, &seeds, &variants, Some(&out))?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
