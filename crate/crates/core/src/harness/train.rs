use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::{annotations_for, DatasetRecord};
use crate::autodiff::{AdamState, Graph, ParamGrads, Precision};
use crate::decoder::{greedy_decode, sequence_loss, CaptionModel, Decoded, Dropout, ScheduledSampling};
use crate::embedding::{EmbeddingTable, Metric, UNK_ID};
use crate::encoder::{AnnotationSet, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{score, EvalCorpus, ScoreReport};

/// One image with its annotations and vocabulary-encoded captions.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub annotations: AnnotationSet,
    /// Each wrapped as `<start> .. <end>`.
    pub captions: Vec<Vec<usize>>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<TrainItem>,
    pub val: Vec<TrainItem>,
}

/// Deterministic split: an id goes to validation when the first eight bytes
/// of its SHA-256, read as a fraction of 2^64, fall below `fraction`.
pub fn in_validation(id: &str, fraction: f64) -> bool {
    let digest = Sha256::digest(id.as_bytes());
    let x = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    (x as f64 / 2f64.powi(64)) < fraction
}

pub fn toy_encoder(cfg: &TrainConfig) -> ToyEncoderParams {
    ToyEncoderParams::random(&cfg.encoder_channels, cfg.encoder_seed)
}

pub fn prepare_data(records: &[DatasetRecord], table: &EmbeddingTable, cfg: &TrainConfig) -> Result<TrainData> {
    let encoder = toy_encoder(cfg);
    let mut data = TrainData::default();
    let mut unknown = 0usize;
    for rec in records {
        let annotations = annotations_for(rec, &encoder, cfg.pool_annotations)?;
        if annotations.len() != cfg.annot_len || annotations.dim() != cfg.annot_dim {
            return Err(Error::Config(format!(
                "record {:?} has {}x{} annotations, config expects annot_len {} and annot_dim {}",
                rec.id,
                annotations.len(),
                annotations.dim(),
                cfg.annot_len,
                cfg.annot_dim
            )));
        }
        let captions: Vec<Vec<usize>> = rec.captions.iter().map(|c| table.vocab().encode_caption(c)).collect();
        unknown += captions.iter().flatten().filter(|&&t| t == UNK_ID).count();
        let item = TrainItem {
            id: rec.id.clone(),
            annotations,
            captions,
            references: rec.captions.clone(),
        };
        if in_validation(&rec.id, cfg.val_fraction) {
            data.val.push(item);
        } else {
            data.train.push(item);
        }
    }
    if unknown > 0 {
        warn!("{unknown} caption tokens are outside the vocabulary and map to <unk>");
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch's minibatch passes.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_bleu4: Option<f64>,
    /// Per-layer mean over minibatches of the LSTM weight-gradient norm.
    pub grad_norms: Vec<f64>,
    /// Per-layer minimum over minibatches.
    pub min_grad_norms: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CaptionModel,
    pub best: CaptionModel,
    pub best_epoch: usize,
    /// Mean loss over the training items before the first update.
    pub initial_loss: f64,
    pub log: Vec<EpochLog>,
}

fn graph(precision: Precision) -> Graph {
    Graph::with_precision(precision)
}

fn sample_grads(
    model: &CaptionModel,
    table: &EmbeddingTable,
    item: &TrainItem,
    caption: &[usize],
    precision: Precision,
    dropout: &mut Dropout,
    sampling: Option<&mut ScheduledSampling>,
) -> Result<(f64, ParamGrads)> {
    let mut g = graph(precision);
    let bound = model.bind(&mut g)?;
    let out = sequence_loss(&mut g, &bound, table, &item.annotations, caption, dropout, sampling)?;
    let loss = g.value(out.loss).item();
    let grads = g.backward(out.loss)?;
    Ok((loss, grads.into_param_grads(model.params())))
}

/// Mean teacher-forced loss over every caption of `items`, without dropout.
pub fn mean_loss(model: &CaptionModel, table: &EmbeddingTable, items: &[TrainItem], precision: Precision) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for item in items {
        for c in &item.captions {
            let mut g = graph(precision);
            let bound = model.bind(&mut g)?;
            let out = sequence_loss(&mut g, &bound, table, &item.annotations, c, &mut Dropout::eval(), None)?;
            total += g.value(out.loss).item();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Greedy-decodes every item and scores against its references.
pub fn evaluate_items(
    model: &CaptionModel,
    table: &EmbeddingTable,
    items: &[TrainItem],
    max_len: usize,
    metric: Metric,
) -> Result<(ScoreReport, Vec<Decoded>)> {
    let mut corpus = EvalCorpus::new();
    let mut decoded = Vec::with_capacity(items.len());
    for item in items {
        let d = greedy_decode(model, table, &item.annotations, max_len, metric)?;
        corpus.push(d.words.clone(), item.references.clone())?;
        decoded.push(d);
    }
    Ok((score(&corpus)?, decoded))
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    batch: usize,
    sample: &'a str,
    lr: f64,
    error: String,
    param_norms: Vec<(String, f64)>,
}

fn dump_and_abort(out_dir: Option<&Path>, model: &CaptionModel, dump: NanDump) -> Error {
    let msg = format!(
        "non-finite training state at epoch {} batch {} (sample {}): {}",
        dump.epoch, dump.batch, dump.sample, dump.error
    );
    if let Some(dir) = out_dir {
        let p = model.params();
        let dump = NanDump {
            param_norms: p.ids().map(|id| (p.name(id).to_string(), p.value(id).norm())).collect(),
            ..dump
        };
        let path = dir.join("nan_dump.json");
        match serde_json::to_vec_pretty(&dump) {
            Ok(bytes) => {
                if let Err(e) = std::fs::write(&path, bytes) {
                    warn!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => warn!("could not serialize dump: {e}"),
        }
    }
    Error::Numerical(msg)
}

fn write_logs(dir: &Path, log: &[EpochLog], depth: usize) -> Result<()> {
    let csv_path = dir.join("train_log.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "val_loss".into(), "val_bleu4".into()];
    header.extend((0..depth).map(|i| format!("grad_norm_l{i}")));
    header.push("seconds".into());
    w.write_record(&header).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for e in log {
        let mut row = vec![
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            opt(e.val_loss),
            opt(e.val_bleu4),
        ];
        row.extend(e.grad_norms.iter().map(|g| g.to_string()));
        row.push(format!("{:.3}", e.seconds));
        w.write_record(&row).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("train_log.json");
    let json = serde_json::to_vec_pretty(log).map_err(|e| Error::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Shuffled-minibatch Adam training of a fresh model.
///
/// With `out_dir`, writes `best.ckpt`, `last.ckpt`, `train_log.csv` and
/// `train_log.json` there (and `nan_dump.json` on a numerical abort).
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    table: &EmbeddingTable,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if table.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "embedding table has dimension {}, config embed_dim is {}",
            table.dim(),
            cfg.embed_dim
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = CaptionModel::new(cfg.model_config(table.len()), cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let samples: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, item)| (0..item.captions.len()).map(move |c| (i, c)))
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = Dropout::train(cfg.dropout, cfg.seed.wrapping_add(1));
    let mut sampling = (cfg.scheduled_sampling > 0.0)
        .then(|| ScheduledSampling::new(cfg.scheduled_sampling, cfg.metric, cfg.seed.wrapping_add(2)));

    let initial_loss = mean_loss(&model, table, &data.train, cfg.precision)?;
    info!("initial loss {initial_loss:.6} over {} samples", samples.len());
    let save = |m: &CaptionModel, name: &str, epoch: usize, loss: Option<f64>| -> Result<()> {
        match out_dir {
            Some(dir) => Checkpoint::from_model(m, cfg, table.vocab(), epoch, loss).save(&dir.join(name)),
            None => Ok(()),
        }
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = initial_loss;
    save(&best, "best.ckpt", 0, Some(initial_loss))?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut plateau_best = f64::INFINITY;
    let mut stale = 0usize;
    let depth = cfg.depth;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; samples.len()];
        let mut norm_sum = vec![0.0; depth];
        let mut norm_min = vec![f64::INFINITY; depth];
        let batches = order.chunks(cfg.batch_size).count();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            for &s in batch {
                let (i, c) = samples[s];
                let item = &data.train[i];
                let result = sample_grads(
                    &model,
                    table,
                    item,
                    &item.captions[c],
                    cfg.precision,
                    &mut dropout,
                    sampling.as_mut(),
                );
                let (loss, grads) = match result {
                    Ok(r) if r.0.is_finite() => r,
                    Ok(r) => {
                        let dump = NanDump {
                            epoch,
                            batch: b,
                            sample: &item.id,
                            lr: adam.lr(),
                            error: format!("loss {}", r.0),
                            param_norms: Vec::new(),
                        };
                        return Err(dump_and_abort(out_dir, &model, dump));
                    }
                    Err(e @ (Error::NonFinite(_) | Error::Numerical(_))) => {
                        let dump = NanDump {
                            epoch,
                            batch: b,
                            sample: &item.id,
                            lr: adam.lr(),
                            error: e.to_string(),
                            param_norms: Vec::new(),
                        };
                        return Err(dump_and_abort(out_dir, &model, dump));
                    }
                    Err(e) => return Err(e),
                };
                losses[s] = loss;
                model.params_mut().accumulate(&grads);
            }
            model.params_mut().scale_grads(1.0 / batch.len() as f64);
            if !model.params().global_grad_norm().is_finite() {
                let dump = NanDump {
                    epoch,
                    batch: b,
                    sample: &data.train[samples[batch[0]].0].id,
                    lr: adam.lr(),
                    error: "non-finite gradient".into(),
                    param_norms: Vec::new(),
                };
                return Err(dump_and_abort(out_dir, &model, dump));
            }
            for (l, n) in model.layer_grad_norms().into_iter().enumerate() {
                norm_sum[l] += n;
                norm_min[l] = norm_min[l].min(n);
            }
            adam.step(model.params_mut())?;
        }
        let train_loss = losses.iter().sum::<f64>() / samples.len() as f64;
        let lr_used = adam.lr();
        if train_loss < plateau_best {
            plateau_best = train_loss;
            stale = 0;
        } else {
            stale += 1;
            if cfg.decay_patience > 0 && stale >= cfg.decay_patience {
                let lr = (adam.lr() * cfg.decay).max(cfg.min_lr);
                info!("loss plateaued for {stale} epochs; lr {} -> {lr}", adam.lr());
                adam.set_lr(lr);
                stale = 0;
            }
        }
        let validate = !data.val.is_empty()
            && cfg.val_every > 0
            && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        let (val_loss, val_bleu4) = if validate {
            let vl = mean_loss(&model, table, &data.val, cfg.precision)?;
            let (report, _) = evaluate_items(&model, table, &data.val, cfg.max_len, cfg.metric)?;
            (Some(vl), Some(report.bleu4))
        } else {
            (None, None)
        };
        let selection = if data.val.is_empty() { Some(train_loss) } else { val_loss };
        if let Some(s) = selection {
            if s < best_score {
                best_score = s;
                best = model.clone();
                best_epoch = epoch;
                save(&best, "best.ckpt", epoch, Some(train_loss))?;
            }
        }
        let entry = EpochLog {
            epoch,
            lr: lr_used,
            train_loss,
            val_loss,
            val_bleu4,
            grad_norms: norm_sum.iter().map(|s| s / batches as f64).collect(),
            min_grad_norms: norm_min,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch} loss {train_loss:.6} lr {lr_used:.2e} layer0 grad {:.3e}",
            entry.grad_norms[0]
        );
        on_epoch(&entry);
        log.push(entry);
    }
    let last_loss = log.last().map(|e| e.train_loss);
    save(&model, "last.ckpt", cfg.epochs, last_loss)?;
    if let Some(dir) = out_dir {
        write_logs(dir, &log, depth)?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        initial_loss,
        log,
    })
}
