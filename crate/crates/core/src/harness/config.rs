use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::HiddenActivation;
use crate::autodiff::{AdamConfig, Precision};
use crate::decoder::{HeadKind, ModelConfig};
use crate::embedding::{Metric, SkipGramConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small dimensions that train on a laptop in minutes.
    #[default]
    Desk,
    /// Full-size dimensions: 1024-wide embeddings and states, 2048-channel
    /// annotations, a 20k-word vocabulary and eight layers.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset {other:?} (expected desk or full)")),
        }
    }
}

/// Everything that shapes a decoder and its training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub depth: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Annotation count `L` after optional pooling.
    pub annot_len: usize,
    /// Annotation dimension `D`.
    pub annot_dim: usize,
    pub attn_width: usize,
    /// Used only to size the softmax head in reports; training takes the
    /// vocabulary from the embedding table.
    pub vocab_size: usize,
    pub head: HeadKind,
    pub attention_activation: HiddenActivation,
    pub init_from_annotations: bool,
    pub forget_bias: f64,
    pub dropout: f64,
    pub scheduled_sampling: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiplies the learning rate whenever the training loss plateaus.
    pub decay: f64,
    /// Epochs without a new best training loss before a decay; 0 disables.
    pub decay_patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub val_fraction: f64,
    /// Max-pool annotation grids to a quarter of their cells before use.
    pub pool_annotations: bool,
    /// Channel widths of the toy encoder used for raw-image records,
    /// starting with the 3 input channels.
    pub encoder_channels: Vec<usize>,
    pub encoder_seed: u64,
    pub max_len: usize,
    pub metric: Metric,
    /// Run validation decoding every this many epochs; 0 disables.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            depth: 2,
            hidden: 128,
            embed_dim: 64,
            annot_len: 16,
            annot_dim: 64,
            attn_width: 32,
            vocab_size: 200,
            head: HeadKind::Regression,
            attention_activation: HiddenActivation::Tanh,
            init_from_annotations: false,
            forget_bias: 1.0,
            dropout: 0.5,
            scheduled_sampling: 0.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay: 0.1,
            decay_patience: 20,
            min_lr: 1e-6,
            epochs: 500,
            batch_size: 10,
            seed: 1,
            precision: Precision::F64,
            val_fraction: 0.1,
            pool_annotations: true,
            encoder_channels: vec![3, 32, 64],
            encoder_seed: 11,
            max_len: 20,
            metric: Metric::SquaredL2,
            val_every: 10,
        }
    }

    pub fn full() -> Self {
        TrainConfig {
            depth: 8,
            hidden: 1024,
            embed_dim: 1024,
            annot_len: 16,
            annot_dim: 2048,
            attn_width: 512,
            vocab_size: 20126,
            decay_patience: 3,
            epochs: 30,
            batch_size: 64,
            encoder_channels: vec![3, 64, 2048],
            ..TrainConfig::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("annot_len", self.annot_len),
            ("annot_dim", self.annot_dim),
            ("attn_width", self.attn_width),
            ("vocab_size", self.vocab_size),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            return Err(Error::Config("scheduled_sampling must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must be in (0, 1]".into()));
        }
        if self.encoder_channels.len() < 2 || self.encoder_channels[0] != 3 {
            return Err(Error::Config(
                "encoder_channels needs the 3 input channels and at least one stage".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            annot_dim: self.annot_dim,
            attn_width: self.attn_width,
            vocab_size,
            head: self.head,
            attention_activation: self.attention_activation,
            init_from_annotations: self.init_from_annotations,
            forget_bias: self.forget_bias,
        }
    }
}

/// A run configuration file: a preset plus `[train]` and `[embedding]`
/// overrides.
///
/// ```toml
/// preset = "desk"
///
/// [train]
/// depth = 8
/// dropout = 0.0
///
/// [embedding]
/// epochs = 100
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub embedding: SkipGramConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Desk,
            train: TrainConfig::desk(),
            embedding: SkipGramConfig::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    preset: Preset,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    embedding: Option<SkipGramConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRun = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = TrainConfig::preset(raw.preset);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in raw.train {
            if !table.contains_key(&k) {
                return Err(Error::Config(format!("unknown [train] key {k:?}")));
            }
            table.insert(k, v);
        }
        let train: TrainConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
        train.validate()?;
        Ok(RunConfig {
            preset: raw.preset,
            train,
            embedding: raw.embedding.unwrap_or_default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_preset() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.train.validate().unwrap();
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = RunConfig::parse("preset = \"full\"\n[train]\ndepth = 5\nhead = \"softmax\"\n").unwrap();
        assert_eq!(c.train.depth, 5);
        assert_eq!(c.train.head, HeadKind::Softmax);
        assert_eq!(c.train.hidden, 1024);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.decay, 0.1);
    }

    #[test]
    fn embedding_section_parses() {
        let c = RunConfig::parse("[embedding]\ndim = 16\nepochs = 3\n").unwrap();
        assert_eq!(c.embedding.dim, 16);
        assert_eq!(c.embedding.window, SkipGramConfig::default().window);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("[train]\ndropout = 1.0\n").is_err());
        assert!(RunConfig::parse("[train]\ndepth = 0\n").is_err());
        assert!(RunConfig::parse("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("preset = \"huge\"\n").is_err());
        assert!(RunConfig::parse("[train]\ndepth = \"two\"\n").is_err());
    }

    #[test]
    fn full_preset_layer_increment_is_about_8_4_million() {
        let c = TrainConfig::full();
        let one = crate::decoder::param_count(1, c.hidden, c.embed_dim, c.vocab_size, c.annot_dim, c.attn_width, HeadKind::Regression);
        let two = crate::decoder::param_count(2, c.hidden, c.embed_dim, c.vocab_size, c.annot_dim, c.attn_width, HeadKind::Regression);
        assert_eq!(two - one, 8 * 1024 * 1024 + 4 * 1024);
    }
}
