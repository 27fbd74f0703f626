//! Gradient-magnitude experiment, depth study and parameter report.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{evaluate_items, train, TrainData};
use crate::attention::HiddenActivation;
use crate::autodiff::{Graph, Tensor};
use crate::decoder::{param_count, teacher_forced_loss, CaptionModel, Dropout, HeadKind, ModelConfig};
use crate::embedding::{EmbeddingTable, Vocabulary, END_ID, START_ID};
use crate::encoder::AnnotationSet;
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradExperimentConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub trials: usize,
    /// Width of the small models used for the layer-wise profiles.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for GradExperimentConfig {
    fn default() -> Self {
        GradExperimentConfig {
            vocab_size: 20000,
            embed_dim: 64,
            depth: 8,
            trials: 20,
            hidden: 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub config: GradExperimentConfig,
    /// `|dL/df_i|` for a non-target logit when all logits are equal.
    pub softmax_uniform_nontarget: f64,
    /// Mean non-target `|dL/df_i|` over standard-normal logits.
    pub softmax_random_mean: f64,
    /// Mean `|dL/df_i|` of the squared-error head with every residual 1.
    pub regression_unit_residual: f64,
    /// Mean `|dL/df_i|` over standard-normal residuals.
    pub regression_random_mean: f64,
    /// Mean per-layer gradient norms of a freshly initialised model, layer 0
    /// first.
    pub softmax_layer_norms: Vec<f64>,
    pub regression_layer_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub head: String,
    pub quantity: String,
    pub layer: Option<usize>,
    pub value: f64,
}

impl GradReport {
    pub fn rows(&self) -> Vec<GradRow> {
        let row = |head: &str, quantity: &str, layer, value| GradRow {
            head: head.into(),
            quantity: quantity.into(),
            layer,
            value,
        };
        let mut rows = vec![
            row("softmax", "uniform_nontarget", None, self.softmax_uniform_nontarget),
            row("softmax", "random_mean_nontarget", None, self.softmax_random_mean),
            row("regression", "unit_residual", None, self.regression_unit_residual),
            row("regression", "random_mean", None, self.regression_random_mean),
        ];
        for (l, &v) in self.softmax_layer_norms.iter().enumerate() {
            rows.push(row("softmax", "layer_grad_norm", Some(l), v));
        }
        for (l, &v) in self.regression_layer_norms.iter().enumerate() {
            rows.push(row("regression", "layer_grad_norm", Some(l), v));
        }
        rows
    }
}

/// Gradient of cross-entropy w.r.t. the logits, via the autodiff engine.
fn ce_logit_grad(logits: Vec<f64>, target: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(logits))?;
    let loss = g.cross_entropy(x, target)?;
    let grads = g.backward(loss)?;
    Ok(grads.wrt(&g, x))
}

fn mse_output_grad(output: Vec<f64>, target: Vec<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(output))?;
    let y = g.constant(Tensor::vector(target))?;
    let loss = g.mse(x, y)?;
    let grads = g.backward(loss)?;
    Ok(grads.wrt(&g, x))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mean_abs_nontarget(grad: &[f64], target: usize) -> f64 {
    let s: f64 = grad.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, g)| g.abs()).sum();
    s / (grad.len() - 1) as f64
}

/// Mean non-target softmax-head gradient over standard-normal logits.
pub fn softmax_random_mean(vocab_size: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..trials {
        let target = rng.gen_range(0..vocab_size);
        let grad = ce_logit_grad(normal_vec(rng, vocab_size, 1.0), target)?;
        total += mean_abs_nontarget(&grad, target);
    }
    Ok(total / trials as f64)
}

fn layer_profile(cfg: &GradExperimentConfig, head: HeadKind, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (v, d) = (cfg.vocab_size, cfg.embed_dim);
    let model_cfg = ModelConfig {
        depth: cfg.depth,
        hidden: cfg.hidden,
        embed_dim: d,
        annot_dim: 16,
        attn_width: 16,
        vocab_size: v,
        head,
        attention_activation: HiddenActivation::Tanh,
        init_from_annotations: false,
        forget_bias: 1.0,
    };
    let tokens: Vec<String> = (3..v).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(tokens, 1)?;
    let mut sums = vec![0.0; cfg.depth];
    for _ in 0..cfg.trials {
        let mut model = CaptionModel::new(model_cfg.clone(), rng.gen())?;
        let data = normal_vec(rng, v * d, 1.0 / (d as f64).sqrt()).into_iter().map(|x| x as f32).collect();
        let table = EmbeddingTable::new(vocab.clone(), d, data)?;
        let ann = AnnotationSet::new("probe", 2, 2, 16, normal_vec(rng, 64, 1.0).into_iter().map(|x| x as f32).collect())?;
        let mut caption = vec![START_ID];
        caption.extend((0..6).map(|_| rng.gen_range(3..v)));
        caption.push(END_ID);
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let out = teacher_forced_loss(&mut g, &bound, &table, &ann, &caption, &mut Dropout::eval())?;
        let grads = g.backward(out.loss)?.into_param_grads(model.params());
        model.params_mut().accumulate(&grads);
        for (s, n) in sums.iter_mut().zip(model.layer_grad_norms()) {
            *s += n;
        }
    }
    Ok(sums.into_iter().map(|s| s / cfg.trials as f64).collect())
}

/// Compares per-component output gradients of the two heads and their
/// layer-wise gradient profiles.
pub fn grad_experiment(cfg: &GradExperimentConfig) -> Result<GradReport> {
    if cfg.vocab_size < 4 || cfg.embed_dim == 0 || cfg.depth == 0 || cfg.trials == 0 || cfg.hidden == 0 {
        return Err(Error::Config(
            "grad experiment needs vocab_size >= 4 and positive d, depth, trials, hidden".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (v, d) = (cfg.vocab_size, cfg.embed_dim);
    let uniform = ce_logit_grad(vec![0.0; v], 0)?;
    let softmax_uniform_nontarget = uniform[1];
    let softmax_random = softmax_random_mean(v, cfg.trials, &mut rng)?;
    let unit = mse_output_grad(vec![1.0; d], vec![0.0; d])?;
    let regression_unit_residual = unit.iter().map(|g| g.abs()).sum::<f64>() / d as f64;
    let mut reg_total = 0.0;
    for _ in 0..cfg.trials {
        let grad = mse_output_grad(normal_vec(&mut rng, d, 1.0), vec![0.0; d])?;
        reg_total += grad.iter().map(|g| g.abs()).sum::<f64>() / d as f64;
    }
    Ok(GradReport {
        config: *cfg,
        softmax_uniform_nontarget,
        softmax_random_mean: softmax_random,
        regression_unit_residual,
        regression_random_mean: reg_total / cfg.trials as f64,
        softmax_layer_norms: layer_profile(cfg, HeadKind::Softmax, &mut rng)?,
        regression_layer_norms: layer_profile(cfg, HeadKind::Regression, &mut rng)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub vocab_sizes: Vec<usize>,
    pub softmax_means: Vec<f64>,
    pub regression_means: Vec<f64>,
    /// Least-squares slope of `ln mean` against `ln |V|`.
    pub softmax_exponent: f64,
    pub regression_exponent: f64,
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// How the random-input head gradients scale with vocabulary size. The
/// regression head sees no vocabulary, so its mean is measured at fixed `d`.
pub fn scaling_fit(vocab_sizes: &[usize], embed_dim: usize, trials: usize, seed: u64) -> Result<ScalingFit> {
    if vocab_sizes.len() < 2 || vocab_sizes.iter().any(|&v| v < 2) {
        return Err(Error::Config("scaling fit needs at least two vocabulary sizes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut softmax_means = Vec::new();
    let mut regression_means = Vec::new();
    for &v in vocab_sizes {
        softmax_means.push(softmax_random_mean(v, trials, &mut rng)?);
        let mut total = 0.0;
        for _ in 0..trials {
            let grad = mse_output_grad(normal_vec(&mut rng, embed_dim, 1.0), vec![0.0; embed_dim])?;
            total += grad.iter().map(|g| g.abs()).sum::<f64>() / embed_dim as f64;
        }
        regression_means.push(total / trials as f64);
    }
    let lx: Vec<f64> = vocab_sizes.iter().map(|&v| (v as f64).ln()).collect();
    let ls: Vec<f64> = softmax_means.iter().map(|m| m.ln()).collect();
    let lr: Vec<f64> = regression_means.iter().map(|m| m.ln()).collect();
    Ok(ScalingFit {
        vocab_sizes: vocab_sizes.to_vec(),
        softmax_exponent: slope(&lx, &ls),
        regression_exponent: slope(&lx, &lr),
        softmax_means,
        regression_means,
    })
}

/// Published decoder sizes in millions for depths 1, 2, 5, 8 and 10.
pub const REFERENCE_DEPTHS: [usize; 5] = [1, 2, 5, 8, 10];
pub const REFERENCE_EMBEDDING_M: [f64; 5] = [17.8, 26.2, 51.4, 76.6, 93.4];
pub const REFERENCE_ONE_HOT_M: [f64; 5] = [37.38, 60.2, 118.21, 189.8, 233.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub depth: usize,
    pub regression: usize,
    pub softmax: usize,
    pub gap: usize,
    pub ratio: f64,
    pub reference_embedding_m: Option<f64>,
    pub reference_one_hot_m: Option<f64>,
}

pub fn param_report(cfg: &TrainConfig, depths: &[usize]) -> Vec<ParamRow> {
    depths
        .iter()
        .map(|&depth| {
            let count = |head| {
                param_count(depth, cfg.hidden, cfg.embed_dim, cfg.vocab_size, cfg.annot_dim, cfg.attn_width, head)
            };
            let (r, s) = (count(HeadKind::Regression), count(HeadKind::Softmax));
            let k = REFERENCE_DEPTHS.iter().position(|&d| d == depth);
            ParamRow {
                depth,
                regression: r,
                softmax: s,
                gap: s.saturating_sub(r),
                ratio: s as f64 / r as f64,
                reference_embedding_m: k.map(|k| REFERENCE_EMBEDDING_M[k]),
                reference_one_hot_m: k.map(|k| REFERENCE_ONE_HOT_M[k]),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub params_regression: usize,
    pub params_softmax: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_bleu4: f64,
    pub train_rouge_l: f64,
    pub train_cider: Option<f64>,
    pub val_bleu4: Option<f64>,
    pub val_rouge_l: Option<f64>,
    pub val_cider: Option<f64>,
    pub seconds: f64,
}

/// Trains one model per depth on `data` and scores greedy decodes.
pub fn depth_study(
    base: &TrainConfig,
    depths: &[usize],
    data: &TrainData,
    table: &EmbeddingTable,
    mut on_row: impl FnMut(&DepthRow),
) -> Result<Vec<DepthRow>> {
    if depths.is_empty() {
        return Err(Error::Config("depth study needs at least one depth".into()));
    }
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let started = Instant::now();
        let cfg = TrainConfig {
            depth,
            ..base.clone()
        };
        let out = train(&cfg, data, table, None, |_| {})?;
        let (tr, _) = evaluate_items(&out.best, table, &data.train, cfg.max_len, cfg.metric)?;
        let val: Option<ScoreReport> = if data.val.is_empty() {
            None
        } else {
            Some(evaluate_items(&out.best, table, &data.val, cfg.max_len, cfg.metric)?.0)
        };
        let count = |head| param_count(depth, cfg.hidden, cfg.embed_dim, table.len(), cfg.annot_dim, cfg.attn_width, head);
        let row = DepthRow {
            depth,
            params_regression: count(HeadKind::Regression),
            params_softmax: count(HeadKind::Softmax),
            initial_loss: out.initial_loss,
            final_loss: out.log.last().map_or(out.initial_loss, |e| e.train_loss),
            train_bleu4: tr.bleu4,
            train_rouge_l: tr.rouge_l,
            train_cider: tr.cider,
            val_bleu4: val.as_ref().map(|v| v.bleu4),
            val_rouge_l: val.as_ref().map(|v| v.rouge_l),
            val_cider: val.as_ref().and_then(|v| v.cider),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
