use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::EvalCorpus;

#[derive(Deserialize)]
struct CandidateLine {
    id: String,
    candidate: String,
}

#[derive(Deserialize)]
struct ReferenceLine {
    id: String,
    references: Vec<String>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Joins a candidates file and a references file (both JSON lines) on `id`,
/// in candidate order.
pub fn load_eval_corpus(candidates: &Path, references: &Path) -> Result<EvalCorpus> {
    let mut refs: HashMap<String, Vec<String>> = HashMap::new();
    for (line, r) in read_lines::<ReferenceLine>(references)? {
        if refs.insert(r.id.clone(), r.references).is_some() {
            return Err(Error::Parse {
                path: references.to_path_buf(),
                line,
                detail: format!("duplicate id {:?}", r.id),
            });
        }
    }
    let mut corpus = EvalCorpus::new();
    for (line, c) in read_lines::<CandidateLine>(candidates)? {
        let r = refs.get(&c.id).ok_or_else(|| Error::Data(format!("no references for candidate {:?}", c.id)))?;
        corpus.push_text(&c.candidate, r).map_err(|e| Error::Parse {
            path: candidates.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
    }
    Ok(corpus)
}
