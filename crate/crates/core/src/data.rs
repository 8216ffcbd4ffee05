//! Corpus files, PGM images and the linked in-memory dataset.

use std::collections::HashMap;
use std::path::Path;

use kvlp_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::encoders::PatchGrid;
use crate::error::{Error, IoContext, Result};
use crate::kb::{link_entities, KnowledgeBase, LinkedText, Mention};
use crate::text::{tokenize, Vocab};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// One line of `corpus.jsonl`; `image` is relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub image: String,
    pub text: String,
    pub split: Split,
}

pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusRecord>> {
    let path = dir.join(CORPUS_FILE);
    let body = std::fs::read_to_string(&path).at(&path)?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                file: CORPUS_FILE.into(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Binary 8-bit PGM from `[0, 1]` values.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Argument(format!("{} pixels for {}x{}", pixels.len(), width, height)));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).at(path)
}

/// Reads a binary PGM, returning `(width, height, pixels in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).at(path)?;
    let bad = |msg: &str| Error::Format {
        file: path.display().to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval, separated by whitespace; '#' starts a comment.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.iter().map(|&b| b as f32 / maxval as f32).collect()))
}

/// A linked image-text pair ready for the model.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub split: Split,
    pub grid: PatchGrid<T>,
    pub ids: Vec<usize>,
    /// Mentions with `entity` as an entity-table row.
    pub linked: LinkedText,
    /// Distinct entity-table rows mentioned, ascending.
    pub entities: Vec<usize>,
}

impl<T> Sample<T> {
    /// Entity-table rows in mention order (one per matching-matrix column).
    pub fn mention_entities(&self) -> Vec<usize> {
        self.linked.entity_ids()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub vocab: Vocab,
    /// Entity ids in entity-table row order.
    pub entity_ids: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    /// Loads and links a corpus directory. `entity_ids` fixes the entity
    /// table order; every linked entity must appear in it. Without `vocab`,
    /// one is built from the training split.
    pub fn load(dir: &Path, kb: &KnowledgeBase, entity_ids: &[String], vocab: Option<Vocab>, patch: usize) -> Result<Self> {
        let records = read_corpus(dir)?;
        let row_of: HashMap<&str, usize> = entity_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let tokenized: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
        let vocab = vocab.unwrap_or_else(|| {
            Vocab::build(
                records
                    .iter()
                    .zip(&tokenized)
                    .filter(|(r, _)| r.split == Split::Train)
                    .map(|(_, t)| t.as_slice()),
            )
        });
        let mut samples = Vec::with_capacity(records.len());
        for (rec, tokens) in records.into_iter().zip(tokenized) {
            let (w, h, pixels) = read_pgm(&dir.join(&rec.image))?;
            let grid = PatchGrid::from_pixels(&pixels, h, w, 1, patch)?;
            let linked = link_entities(&tokens, kb);
            let mut mentions = Vec::with_capacity(linked.mentions.len());
            for m in &linked.mentions {
                let id = &kb.entities()[m.entity].id;
                let row = *row_of.get(id.as_str()).ok_or_else(|| {
                    Error::Integrity(format!("entity {} in {} has no embedding", id, rec.id))
                })?;
                mentions.push(Mention { entity: row, ..*m });
            }
            let mut entities: Vec<usize> = mentions.iter().map(|m| m.entity).collect();
            entities.sort_unstable();
            entities.dedup();
            samples.push(Sample {
                id: rec.id,
                split: rec.split,
                grid,
                ids: vocab.encode(&tokens),
                linked: LinkedText { tokens, mentions },
                entities,
            });
        }
        Ok(Dataset {
            samples,
            vocab,
            entity_ids: entity_ids.to_vec(),
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample<T>> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn max_text_len(&self) -> usize {
        self.samples.iter().map(|s| s.ids.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_byte_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let px: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P2\n1 1\n255\n0\n").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn split_serializes_lowercase() {
        let rec = CorpusRecord {
            id: "a".into(),
            image: "images/a.pgm".into(),
            text: "t".into(),
            split: Split::Val,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(s, r#"{"id":"a","image":"images/a.pgm","text":"t","split":"val"}"#);
    }
}
