use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMBD";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredL2,
    Cosine,
}

/// `|V| x d` word-vector matrix together with the vocabulary it indexes.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocabulary, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != vocab.len() * dim {
            return Err(Error::dim(
                "embedding table",
                format!("{} rows x {dim} needs {} values, got {}", vocab.len(), vocab.len() * dim, data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(EmbeddingTable { vocab, dim, data })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_f64(&self, index: usize) -> Vec<f64> {
        self.row(index).iter().map(|&x| x as f64).collect()
    }

    pub fn vector(&self, token: &str) -> Option<&[f32]> {
        self.vocab.get(token).map(|i| self.row(i))
    }

    /// Index of the row closest to `v`; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64], metric: Metric) -> Result<usize> {
        self.nearest_excluding(v, metric, &[])
    }

    /// As [`EmbeddingTable::nearest`], never returning an index in `skip`.
    pub fn nearest_excluding(&self, v: &[f64], metric: Metric, skip: &[usize]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::dim(
                "nearest_word",
                format!("query of dimension {} against table of dimension {}", v.len(), self.dim),
            ));
        }
        let qnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.len() {
            if skip.contains(&i) {
                continue;
            }
            let row = self.row(i);
            // Lower is better for both metrics.
            let cost = match metric {
                Metric::SquaredL2 => row
                    .iter()
                    .zip(v)
                    .map(|(&r, q)| {
                        let d = r as f64 - q;
                        d * d
                    })
                    .sum::<f64>(),
                Metric::Cosine => {
                    let dot: f64 = row.iter().zip(v).map(|(&r, q)| r as f64 * q).sum();
                    let rnorm = row.iter().map(|&r| (r as f64).powi(2)).sum::<f64>().sqrt();
                    let denom = rnorm * qnorm;
                    if denom > 0.0 {
                        -dot / denom
                    } else {
                        0.0
                    }
                }
            };
            if best.map_or(true, |(_, c)| cost < c) {
                best = Some((i, cost));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| Error::Usage("no candidate rows for nearest-word lookup".into()))
    }

    pub fn nearest_word(&self, v: &[f64], metric: Metric) -> Result<&str> {
        let i = self.nearest(v, metric)?;
        Ok(self.vocab.decode(i).expect("row index within vocabulary"))
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (ra, rb) = (self.row(a), self.row(b));
        let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = rb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    }

    /// Writes the binary table and a `<path>.txt` sidecar listing one token
    /// and its vector per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.as_bytes());
        }
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

        let sidecar = sidecar_path(path);
        let mut text = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, t) in self.vocab.tokens().iter().enumerate() {
            out.push_str(t);
            for x in self.row(i) {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        text.write_all(out.as_bytes()).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, expected EMBD"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let t = std::str::from_utf8(raw)
                .map_err(|_| Error::format(path, "token is not valid UTF-8"))?;
            tokens.push(t.to_string());
        }
        let payload = r.take(n * dim * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let vocab = Vocabulary::from_full_list(tokens, 1)?;
        EmbeddingTable::new(vocab, dim, data)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn table(words: &[&str], dim: usize, data: Vec<f32>) -> EmbeddingTable {
        let vocab = Vocabulary::from_tokens(words.iter().map(|s| s.to_string()).collect(), 1).unwrap();
        EmbeddingTable::new(vocab, dim, data).unwrap()
    }

    fn orthonormal() -> EmbeddingTable {
        // Reserved rows sit far away so only w1..w3 compete.
        let mut data = vec![9.0, 9.0, 9.0, -9.0, 9.0, 9.0, 9.0, -9.0, 9.0];
        data.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        table(&["w1", "w2", "w3"], 3, data)
    }

    #[test]
    fn exact_hit() {
        let t = orthonormal();
        for w in ["w1", "w2", "w3"] {
            let v: Vec<f64> = t.vector(w).unwrap().iter().map(|&x| x as f64).collect();
            assert_eq!(t.nearest_word(&v, Metric::SquaredL2).unwrap(), w);
            assert_eq!(t.nearest_word(&v, Metric::Cosine).unwrap(), w);
        }
    }

    #[test]
    fn dominant_component_wins() {
        let t = orthonormal();
        let v = [0.01, 1.0, 0.0];
        assert_eq!(t.nearest_word(&v, Metric::SquaredL2).unwrap(), "w2");
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = table(&["a"], 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        assert_eq!(t.nearest(&[0.0, 0.0], Metric::SquaredL2).unwrap(), 0);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let t = orthonormal();
        assert!(matches!(
            t.nearest(&[1.0, 0.0], Metric::SquaredL2),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let dim = 6;
        let data: Vec<f32> = (0..(words.len() + 3) * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = table(&refs, dim, data.clone());
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut best = (0, f64::INFINITY);
            for (i, row) in data.chunks(dim).enumerate() {
                let d: f64 = row.iter().zip(&q).map(|(&r, x)| (r as f64 - x).powi(2)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(t.nearest(&q, Metric::SquaredL2).unwrap(), best.0);
        }
    }

    #[test]
    fn permuting_rows_relabels_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["p", "q", "r", "s", "t"];
        let dim = 4;
        let n = words.len() + 3;
        let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = table(&words, dim, data.clone());
        // Reverse the non-reserved rows and their tokens together.
        let mut perm_words = words.to_vec();
        perm_words.reverse();
        let mut perm_data = data[..3 * dim].to_vec();
        for i in (3..n).rev() {
            perm_data.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        let p = table(&perm_words, dim, perm_data);
        for _ in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(
                t.nearest_word(&q, Metric::SquaredL2).unwrap(),
                p.nearest_word(&q, Metric::SquaredL2).unwrap()
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let t = orthonormal();
        t.save(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(back.vocab().tokens(), t.vocab().tokens());
        assert_eq!(back.data(), t.data());
        let text = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(text.starts_with("6 3\n<start> 9 9 9\n"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        orthonormal().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(EmbeddingTable::load(&path), Err(Error::Format { .. })));
    }
}
