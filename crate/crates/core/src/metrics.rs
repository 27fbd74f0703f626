//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! All scores are computed on [`tokenize`]d text; n-gram tables are ordered
//! maps so every floating-point reduction runs in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    entries: Vec<EvalEntry>,
}

impl EvalCorpus {
    pub fn new() -> Self {
        EvalCorpus::default()
    }

    pub fn push(&mut self, candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<()> {
        if references.is_empty() {
            return Err(Error::Data(format!(
                "entry {} has no references",
                self.entries.len()
            )));
        }
        self.entries.push(EvalEntry {
            candidate,
            references,
        });
        Ok(())
    }

    /// Tokenizes raw candidate and reference strings.
    pub fn push_text<S: AsRef<str>>(&mut self, candidate: &str, references: &[S]) -> Result<()> {
        self.push(
            tokenize(candidate),
            references.iter().map(|r| tokenize(r.as_ref())).collect(),
        )
    }

    pub fn from_entries(entries: Vec<EvalEntry>) -> Result<Self> {
        let mut c = EvalCorpus::new();
        for e in entries {
            c.push(e.candidate, e.references)?;
        }
        Ok(c)
    }

    pub fn entries(&self) -> &[EvalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over orders `1..=n`, scaled to `[0, 100]`.
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Usage(format!("BLEU order must be 1..4, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for e in corpus.entries() {
        let c = e.candidate.len();
        cand_len += c;
        // Closest reference length; ties go to the shorter one.
        ref_len += e
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngrams(&e.candidate, k);
            let mut max_ref: Counts = BTreeMap::new();
            for r in &e.references {
                for (g, cnt) in ngrams(r, k) {
                    let m = max_ref.entry(g).or_insert(0);
                    *m = (*m).max(cnt);
                }
            }
            for (g, cnt) in cand {
                matched[k - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one candidate against one reference, in `[0, 1]`.
pub fn rouge_l_pair(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Best-over-references ROUGE-L F-measure averaged over the corpus, scaled
/// to `[0, 100]`. An empty corpus scores 0.
pub fn rouge_l(corpus: &EvalCorpus, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Usage(format!("ROUGE-L beta must be positive, got {beta}")));
    }
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = corpus
        .entries()
        .iter()
        .map(|e| {
            e.references
                .iter()
                .map(|r| rouge_l_pair(&e.candidate, r, beta))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(100.0 * sum / corpus.len() as f64)
}

const CIDER_SIGMA: f64 = 6.0;
const CIDER_ORDERS: usize = 4;

fn tfidf<'a>(counts: &Counts<'a>, df: &BTreeMap<&[String], usize>, log_n: f64) -> (BTreeMap<&'a [String], f64>, f64) {
    let vec: BTreeMap<_, _> = counts
        .iter()
        .map(|(&g, &tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, tf as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// Per-entry CIDEr-D scores. Document frequencies count, for each n-gram,
/// the entries whose reference set contains it.
pub fn cider_scores(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::Data(format!(
            "CIDEr needs at least 2 entries for document frequencies, got {}",
            corpus.len()
        )));
    }
    let log_n = (corpus.len() as f64).ln();
    let mut scores = vec![0.0; corpus.len()];
    for n in 1..=CIDER_ORDERS {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for e in corpus.entries() {
            let seen: BTreeSet<&[String]> = e
                .references
                .iter()
                .flat_map(|r| ngrams(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (score, e) in scores.iter_mut().zip(corpus.entries()) {
            let (cand, cand_norm) = tfidf(&ngrams(&e.candidate, n), &df, log_n);
            let mut sum = 0.0;
            for r in &e.references {
                let (reference, ref_norm) = tfidf(&ngrams(r, n), &df, log_n);
                let mut val: f64 = cand
                    .iter()
                    .filter_map(|(g, &c)| reference.get(g).map(|&rv| c.min(rv) * rv))
                    .sum();
                if cand_norm != 0.0 && ref_norm != 0.0 {
                    val /= cand_norm * ref_norm;
                }
                let delta = e.candidate.len() as f64 - r.len() as f64;
                sum += val * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            *score += sum / e.references.len() as f64;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s / CIDER_ORDERS as f64).collect())
}

/// Corpus CIDEr-D: the mean of [`cider_scores`].
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    let s = cider_scores(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Every metric on one corpus. CIDEr is absent for corpora below two entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub entries: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: Option<f64>,
}

pub fn score(corpus: &EvalCorpus) -> Result<ScoreReport> {
    Ok(ScoreReport {
        entries: corpus.len(),
        bleu1: bleu(corpus, 1)?,
        bleu2: bleu(corpus, 2)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus, ROUGE_BETA)?,
        cider: if corpus.len() >= 2 {
            Some(cider(corpus)?)
        } else {
            None
        },
    })
}
