use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::EmbeddingTable;
use super::vocab::Vocabulary;
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// Every (center, context) pair within `window` positions, in position order.
pub fn skipgram_pairs<T: Clone>(tokens: &[T], window: usize) -> Vec<(T, T)> {
    let n = tokens.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                pairs.push((tokens[i].clone(), tokens[j].clone()));
            }
        }
    }
    pairs
}

/// Index pairs for a whole caption corpus; each caption is wrapped with
/// `<start>`/`<end>` so both reserved tokens receive trained vectors.
pub fn corpus_pairs<S: AsRef<str>>(
    vocab: &Vocabulary,
    captions: &[Vec<S>],
    window: usize,
) -> Vec<(usize, usize)> {
    captions
        .iter()
        .flat_map(|c| skipgram_pairs(&vocab.encode_caption(c), window))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 2,
            negatives: 5,
            epochs: 50,
            lr: 0.025,
            min_count: 1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramOutcome {
    pub table: EmbeddingTable,
    /// Mean negative-sampling loss per pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Skip-gram with negative sampling. The input (center-word) matrix is
/// returned as the embedding table. The learning rate decays linearly to
/// 1e-4 of its initial value over the run.
pub fn train_skipgram(
    vocab: &Vocabulary,
    pairs: &[(usize, usize)],
    config: &SkipGramConfig,
) -> Result<SkipGramOutcome> {
    let d = config.dim;
    if d < 2 {
        return Err(Error::Config(format!("embedding dimension must be >= 2, got {d}")));
    }
    if pairs.is_empty() {
        return Err(Error::Data("no skip-gram pairs to train on".into()));
    }
    let v = vocab.len();
    if let Some(&(c, o)) = pairs.iter().find(|&&(c, o)| c >= v || o >= v) {
        return Err(Error::Index {
            index: c.max(o),
            len: v,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 0.5 / d as f64;
    let mut input: Vec<f64> = (0..v * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0; v * d];

    let mut counts = vec![0.0f64; v];
    for &(_, o) in pairs {
        counts[o] += 1.0;
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let total = (config.epochs * pairs.len()).max(1) as f64;
    let mut seen = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad_in = vec![0.0; d];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for &p in &order {
            let lr = config.lr * (1.0 - seen as f64 / total).max(1e-4);
            seen += 1;
            let (center, context) = pairs[p];
            grad_in.iter_mut().for_each(|g| *g = 0.0);
            let ci = center * d;
            let mut update = |target: usize, label: f64, input: &[f64], output: &mut [f64]| -> f64 {
                let ti = target * d;
                let score: f64 = (0..d).map(|k| input[ci + k] * output[ti + k]).sum();
                let s = sigmoid(score);
                let step = lr * (label - s);
                for k in 0..d {
                    grad_in[k] += step * output[ti + k];
                    output[ti + k] += step * input[ci + k];
                }
                if label > 0.5 {
                    -s.max(1e-300).ln()
                } else {
                    -(1.0 - s).max(1e-300).ln()
                }
            };
            loss += update(context, 1.0, &input, &mut output);
            for _ in 0..config.negatives {
                let neg = noise.sample(&mut rng);
                if neg == context {
                    continue;
                }
                loss += update(neg, 0.0, &input, &mut output);
            }
            for k in 0..d {
                input[ci + k] += grad_in[k];
            }
        }
        epoch_losses.push(loss / pairs.len() as f64);
    }

    let data = input.into_iter().map(|x| x as f32).collect();
    let table = EmbeddingTable::new(vocab.clone(), d, data)?;
    Ok(SkipGramOutcome {
        table,
        epoch_losses,
    })
}
