#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use embcap::embedding::{build_vocab, corpus_pairs, train_skipgram, EmbeddingTable, SkipGramConfig};
use embcap::harness::toy::{generate_toy, write_toy, ToySpec};
use embcap::harness::{load_dataset_with_root, prepare_data, DatasetRecord, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Corpus = Vec<(Vec<String>, Vec<Vec<String>>)>;

fn gram(tokens: &[String], start: usize, n: usize) -> String {
    tokens[start..start + n].join(" ")
}

fn counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(gram(tokens, i, n)).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU by direct counting over string-keyed n-grams.
pub fn bleu_oracle(corpus: &Corpus, n: usize) -> f64 {
    let mut log_sum = 0.0;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in corpus {
        cand_len += cand.len();
        let mut best = usize::MAX;
        let mut best_len = 0;
        for r in refs {
            let d = (r.len() as i64 - cand.len() as i64).unsigned_abs() as usize;
            if d < best || (d == best && r.len() < best_len) {
                best = d;
                best_len = r.len();
            }
        }
        ref_len += best_len;
    }
    if cand_len == 0 {
        return 0.0;
    }
    for k in 1..=n {
        let mut hit = 0usize;
        let mut all = 0usize;
        for (cand, refs) in corpus {
            for (g, c) in counts(cand, k) {
                let cap = refs.iter().map(|r| counts(r, k).get(&g).copied().unwrap_or(0)).max().unwrap_or(0);
                hit += c.min(cap);
                all += c;
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_sum += (hit as f64 / all as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    100.0 * bp * (log_sum / n as f64).exp()
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// LCS by enumerating every subsequence of `a`; keep `a` short.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = n;
        }
    }
    best
}

pub fn rouge_oracle(corpus: &Corpus) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let b2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut best = 0.0f64;
        for r in refs {
            let l = lcs_brute(cand, r) as f64;
            if l > 0.0 {
                let p = l / cand.len() as f64;
                let rec = l / r.len() as f64;
                best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
            }
        }
        total += best;
    }
    100.0 * total / corpus.len() as f64
}

/// CIDEr-D: clipped TF-IDF cosine with a Gaussian length penalty, averaged
/// over orders 1 to 4 and scaled by 10.
pub fn cider_oracle(corpus: &Corpus) -> f64 {
    let n_docs = corpus.len() as f64;
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut score = 0.0;
        for n in 1..=4 {
            let df = |g: &str| -> f64 {
                corpus
                    .iter()
                    .filter(|(_, rs)| rs.iter().any(|r| counts(r, n).contains_key(g)))
                    .count()
                    .max(1) as f64
            };
            let weigh = |t: &[String]| -> HashMap<String, f64> {
                counts(t, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = c as f64 * (n_docs.ln() - df(&g).ln());
                        (g, w)
                    })
                    .collect()
            };
            let norm = |m: &HashMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
            let cv = weigh(cand);
            let mut per_ref = 0.0;
            for r in refs {
                let rv = weigh(r);
                let mut dot = 0.0;
                for (g, c) in &cv {
                    if let Some(x) = rv.get(g) {
                        dot += c.min(*x) * x;
                    }
                }
                let (a, b) = (norm(&cv), norm(&rv));
                if a != 0.0 && b != 0.0 {
                    dot /= a * b;
                }
                let delta = cand.len() as f64 - r.len() as f64;
                per_ref += dot * (-delta * delta / 72.0).exp();
            }
            score += per_ref / refs.len() as f64;
        }
        total += 10.0 * score / 4.0;
    }
    total / n_docs
}

/// Small corpora drawn from a 6-word alphabet so n-gram overlaps are common.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let words = ["a", "b", "c", "d", "e", "f"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(1..9);
        (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
    };
    let entries = rng.gen_range(2..6);
    (0..entries)
        .map(|_| {
            let cand = sentence(rng);
            let refs = (0..rng.gen_range(1..4)).map(|_| sentence(rng)).collect();
            (cand, refs)
        })
        .collect()
}

pub fn to_eval(corpus: &Corpus) -> embcap::metrics::EvalCorpus {
    let mut c = embcap::metrics::EvalCorpus::new();
    for (cand, refs) in corpus {
        c.push(cand.clone(), refs.clone()).unwrap();
    }
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Skip-gram settings that keep same-slot toy words (colours, shapes,
/// places) well separated on a 20-caption corpus.
pub fn toy_embedding_config(dim: usize) -> SkipGramConfig {
    SkipGramConfig {
        dim,
        window: 5,
        epochs: 500,
        ..SkipGramConfig::default()
    }
}

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub records: Vec<DatasetRecord>,
    pub table: EmbeddingTable,
}

/// Writes a PNG toy set, loads it back and trains embeddings on its captions.
pub fn toy(count: usize, captions_per_image: usize, embed_dim: usize) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_toy(ToySpec {
        count,
        captions_per_image,
        seed: 1,
    })
    .unwrap();
    let manifest = write_toy(dir.path(), &samples, None).unwrap();
    let records = load_dataset_with_root(&manifest, None).unwrap().records;
    let captions: Vec<Vec<String>> = records.iter().flat_map(|r| r.captions.clone()).collect();
    let vocab = build_vocab(&captions, 1).unwrap();
    let cfg = toy_embedding_config(embed_dim);
    let pairs = corpus_pairs(&vocab, &captions, cfg.window);
    let table = train_skipgram(&vocab, &pairs, &cfg).unwrap().table;
    Toy {
        dir,
        manifest,
        records,
        table,
    }
}

/// Desk preset without dropout or a held-out split, for overfitting runs.
pub fn overfit_config(depth: usize) -> TrainConfig {
    TrainConfig {
        depth,
        dropout: 0.0,
        val_fraction: 0.0,
        ..TrainConfig::desk()
    }
}

pub fn data(toy: &Toy, cfg: &TrainConfig) -> TrainData {
    prepare_data(&toy.records, &toy.table, cfg).unwrap()
}
