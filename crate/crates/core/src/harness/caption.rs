use std::path::Path;

use super::checkpoint::Checkpoint;
use super::train::toy_encoder;
use crate::decoder::{greedy_decode, Decoded};
use crate::embedding::EmbeddingTable;
use crate::encoder::{load_features, pool_quarter, toy_encode, AnnotationSet, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Captioned {
    pub text: String,
    pub decoded: Decoded,
}

/// Annotations for a feature file (`.annv`) or an image, prepared the way
/// the checkpoint's training run prepared them.
pub fn load_input(ck: &Checkpoint, input: &Path) -> Result<AnnotationSet> {
    let train = &ck.meta.train;
    let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let full = if input.extension().is_some_and(|e| e == "annv") {
        load_features(input)?
    } else {
        toy_encode(&Raster::load(input)?, &toy_encoder(train))?.into_annotations(id)?
    };
    if train.pool_annotations {
        pool_quarter(&full)
    } else {
        Ok(full)
    }
}

/// Greedy caption for one input; optionally writes per-step attention
/// weights as CSV (`step,word,a0..`).
pub fn caption_cmd(
    checkpoint: &Path,
    embeddings: &Path,
    input: &Path,
    max_len: usize,
    attention_csv: Option<&Path>,
) -> Result<Captioned> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let table = EmbeddingTable::load(embeddings)?;
    let ck = Checkpoint::load_for(checkpoint, table.vocab())?;
    let model = ck.model()?;
    let annotations = load_input(&ck, input)?;
    let decoded = greedy_decode(&model, &table, &annotations, max_len, ck.meta.train.metric)?;
    if let Some(path) = attention_csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = vec!["step".to_string(), "word".to_string()];
        header.extend((0..annotations.len()).map(|j| format!("a{j}")));
        w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
        for (t, weights) in decoded.weights.iter().enumerate() {
            let word = decoded.words.get(t).map_or("<end>", String::as_str);
            let mut row = vec![t.to_string(), word.to_string()];
            row.extend(weights.iter().map(|a| a.to_string()));
            w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(Captioned {
        text: decoded.words.join(" "),
        decoded,
    })
}
