use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use embcap::autodiff::Precision;
use embcap::embedding::{build_vocab, corpus_pairs, train_skipgram, EmbeddingTable};
use embcap::harness::toy::{generate_toy, write_toy, ToySpec};
use embcap::harness::{
    caption_cmd, depth_study, grad_experiment, load_dataset, load_eval_corpus, model_check, op_suite, param_report,
    prepare_data, scaling_fit, toy_encoder, train, write_csv, write_json, GradExperimentConfig, ModelCheckDims,
    Preset, RunConfig, TrainData, DATA_ROOT_ENV, FD_STEP, REFERENCE_DEPTHS,
};
use embcap::metrics::score;
use embcap::{Error, Result};

#[derive(Parser)]
#[command(name = "embcap", version, about = "Attention caption decoders trained by embedding regression")]
struct Cli {
    /// TOML run configuration (`preset`, `[train]`, `[embedding]`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Overrides both the training and the embedding seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset and its manifest.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        captions: usize,
        /// Store encoder features instead of PNG images.
        #[arg(long)]
        features: bool,
    },
    /// Skip-gram embeddings from the captions of a manifest.
    TrainEmbeddings {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Greedy caption for a feature file or an image.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        /// Per-step attention weights as CSV.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Score candidate captions against references.
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of a small model's loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Output-gradient magnitudes of the softmax and regression heads.
    GradExperiment {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Train and score one model per depth.
    DepthStudy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,8,10")]
        depths: Vec<usize>,
    },
    /// Parameter counts of both heads at the configured dimensions.
    ParamReport {
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::parse(&format!("preset = \"{}\"", preset_name(p)))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        rc.train.seed = seed;
        rc.embedding.seed = seed;
    }
    if let Some(p) = cli.precision {
        rc.train.precision = p;
    }
    rc.train.validate()?;
    Ok(rc)
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Full => "full",
    }
}

fn load_training(manifest: &Path, embeddings: &Path, rc: &RunConfig) -> Result<(TrainData, EmbeddingTable)> {
    let dataset = load_dataset(manifest)?;
    for w in &dataset.warnings {
        warn!("{w}");
    }
    let table = EmbeddingTable::load(embeddings)?;
    let data = prepare_data(&dataset.records, &table, &rc.train)?;
    info!("{} training and {} validation images", data.train.len(), data.val.len());
    Ok((data, table))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let rc = run_config(&cli)?;
    match cli.command {
        Command::MakeToy {
            out,
            count,
            captions,
            features,
        } => {
            let samples = generate_toy(ToySpec {
                count,
                captions_per_image: captions,
                seed: rc.train.seed,
            })?;
            let encoder = features.then(|| toy_encoder(&rc.train));
            let manifest = write_toy(&out, &samples, encoder.as_ref())?;
            println!("{}", manifest.display());
        }
        Command::TrainEmbeddings { manifest, out } => {
            let dataset = load_dataset(&manifest)?;
            let captions: Vec<Vec<String>> = dataset.records.iter().flat_map(|r| r.captions.clone()).collect();
            let cfg = &rc.embedding;
            let vocab = build_vocab(&captions, cfg.min_count)?;
            let pairs = corpus_pairs(&vocab, &captions, cfg.window);
            info!("{} words, {} skip-gram pairs", vocab.len(), pairs.len());
            let outcome = train_skipgram(&vocab, &pairs, cfg)?;
            if let (Some(first), Some(last)) = (outcome.epoch_losses.first(), outcome.epoch_losses.last()) {
                info!("skip-gram loss {first:.4} -> {last:.4}");
            }
            outcome.table.save(&out)?;
            println!("{}", out.display());
        }
        Command::Train {
            manifest,
            embeddings,
            out,
            epochs,
            depth,
        } => {
            let mut rc = rc;
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(d) = depth {
                rc.train.depth = d;
            }
            rc.train.validate()?;
            let (data, table) = load_training(&manifest, &embeddings, &rc)?;
            let outcome = train(&rc.train, &data, &table, Some(&out), |e| {
                info!(
                    "epoch {} lr {:.2e} train {:.6} val {}",
                    e.epoch,
                    e.lr,
                    e.train_loss,
                    e.val_loss.map_or("-".into(), |v| format!("{v:.6}"))
                );
            })?;
            let last = outcome.log.last().map_or(outcome.initial_loss, |e| e.train_loss);
            println!(
                "initial loss {:.6}, final loss {:.6}, best epoch {}",
                outcome.initial_loss, last, outcome.best_epoch
            );
        }
        Command::Caption {
            checkpoint,
            embeddings,
            input,
            max_len,
            attention,
        } => {
            let c = caption_cmd(&checkpoint, &embeddings, &input, max_len, attention.as_deref())?;
            println!("{}", c.text);
        }
        Command::Evaluate {
            candidates,
            references,
            out,
        } => {
            let report = score(&load_eval_corpus(&candidates, &references)?)?;
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            print_json(&report)?;
        }
        Command::GradCheck { seeds, tolerance, out } => {
            #[derive(serde::Serialize)]
            struct Row {
                check: String,
                seed: u64,
                max_relative_error: f64,
            }
            let mut rows = Vec::new();
            for seed in 0..seeds {
                for c in op_suite(seed)? {
                    rows.push(Row {
                        check: c.op,
                        seed,
                        max_relative_error: c.max_relative_error,
                    });
                }
                let r = model_check(ModelCheckDims::default(), seed)?;
                rows.push(Row {
                    check: "model".into(),
                    seed,
                    max_relative_error: r.max_relative_error,
                });
            }
            if let Some(path) = out {
                write_csv(&path, &rows)?;
            }
            let worst = rows
                .iter()
                .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
                .expect("at least one check");
            println!(
                "{} checks at h = {FD_STEP:e}; worst {} (seed {}) at {:.3e}",
                rows.len(),
                worst.check,
                worst.seed,
                worst.max_relative_error
            );
            if worst.max_relative_error >= tolerance {
                return Err(Error::Numerical(format!(
                    "gradient check exceeded tolerance {tolerance:e}"
                )));
            }
        }
        Command::GradExperiment {
            out_dir,
            vocab_size,
            embed_dim,
            depth,
            trials,
        } => {
            create_dir(&out_dir)?;
            let cfg = GradExperimentConfig {
                vocab_size,
                embed_dim,
                depth,
                trials,
                seed: rc.train.seed,
                ..GradExperimentConfig::default()
            };
            let report = grad_experiment(&cfg)?;
            write_csv(&out_dir.join("grad_experiment.csv"), &report.rows())?;
            let fit = scaling_fit(&[100, 1000, 20000], embed_dim, trials, rc.train.seed)?;
            let summary = serde_json::json!({ "report": report, "scaling": fit });
            write_json(&out_dir.join("summary.json"), &summary)?;
            print_json(&summary)?;
        }
        Command::DepthStudy {
            manifest,
            embeddings,
            out_dir,
            depths,
        } => {
            create_dir(&out_dir)?;
            let (data, table) = load_training(&manifest, &embeddings, &rc)?;
            let rows = depth_study(&rc.train, &depths, &data, &table, |r| {
                info!("depth {} final loss {:.6} train BLEU-4 {:.2}", r.depth, r.final_loss, r.train_bleu4);
            })?;
            write_csv(&out_dir.join("depth_study.csv"), &rows)?;
            write_json(&out_dir.join("depth_study.json"), &rows)?;
            print_json(&rows)?;
        }
        Command::ParamReport { depths, out } => {
            let depths = depths.unwrap_or_else(|| REFERENCE_DEPTHS.to_vec());
            let rows = param_report(&rc.train, &depths);
            if let Some(path) = out {
                write_csv(&path, &rows)?;
            }
            println!("depth,regression,softmax,gap,ratio");
            for r in &rows {
                println!("{},{},{},{},{:.3}", r.depth, r.regression, r.softmax, r.gap, r.ratio);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
        info!("resolving manifest paths against {}", PathBuf::from(root).display());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
