//! JSON-lines recipe corpora.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::tnsr;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vocab::{TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeRecord {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    /// Relative to the directory holding the corpus file.
    pub image_path: String,
}

impl RecipeRecord {
    /// Title, ingredients and instructions joined by newlines, lowercased.
    pub fn text(&self) -> String {
        let mut lines = vec![self.title.as_str()];
        lines.extend(self.ingredients.iter().map(String::as_str));
        lines.extend(self.instructions.iter().map(String::as_str));
        lines.join("\n").to_lowercase()
    }

    pub fn image_file(&self, corpus_dir: &Path) -> PathBuf {
        corpus_dir.join(&self.image_path)
    }
}

pub fn write_corpus(path: &Path, records: &[RecipeRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn corpus_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads and validates a corpus: every line parses, titles and
/// instructions are nonempty, and every image file parses as an `H×W×C`
/// tensor with pixels in `[0, 1]`.
pub fn load_corpus(path: &Path) -> Result<Vec<RecipeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = corpus_dir(path);
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: RecipeRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.title.trim().is_empty() {
            return Err(parse_err("empty title".into()));
        }
        if rec.instructions.is_empty() {
            return Err(parse_err("no instructions".into()));
        }
        let image = rec.image_file(&dir);
        if !image.is_file() {
            return Err(Error::MissingImage(image));
        }
        validate_image(&tnsr::load_tensor(&image)?, &image)?;
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    Ok(records)
}

fn validate_image(t: &Tensor, path: &Path) -> Result<()> {
    if t.shape().len() != 3 {
        return Err(Error::InvalidInput(format!(
            "{}: image must be H×W×C, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    if !t.data().iter().all(|p| (0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput(format!(
            "{}: pixel values outside [0, 1]",
            path.display()
        )));
    }
    Ok(())
}

/// A record ready for the model: its image and tokenized text.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub tokens: TokenSequence,
    pub text: String,
}

/// Loads a corpus with its images and tokenizes every recipe.
pub fn load_examples(path: &Path, vocab: &Vocab, image_shape: [usize; 3]) -> Result<Vec<Example>> {
    let dir = corpus_dir(path);
    load_corpus(path)?
        .into_iter()
        .map(|rec| {
            let file = rec.image_file(&dir);
            let image = tnsr::load_tensor(&file)?;
            if image.shape() != image_shape {
                return Err(Error::InvalidInput(format!(
                    "{}: image shape {:?}, config expects {:?}",
                    file.display(),
                    image.shape(),
                    image_shape
                )));
            }
            let text = rec.text();
            Ok(Example {
                tokens: vocab.encode(&text)?,
                id: rec.id,
                image,
                text,
            })
        })
        .collect()
}

/// Deterministic 90/10 split by record index.
pub fn split<T>(items: &[T]) -> (&[T], &[T]) {
    let cut = if items.len() < 2 {
        items.len()
    } else {
        (items.len() * 9 / 10).clamp(1, items.len() - 1)
    };
    items.split_at(cut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_corpus;

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_title_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = synth_corpus(1, 3, [4, 4, 3], dir.path()).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v.as_object_mut().unwrap().remove("title");
        lines[1] = v.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("title"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = synth_corpus(1, 2, [4, 4, 3], dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("images/r00001.tnsr")).unwrap();
        match load_corpus(&path) {
            Err(Error::MissingImage(p)) => assert!(p.ends_with("images/r00001.tnsr")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = synth_corpus(4, 12, [4, 4, 3], dir.path()).unwrap();
        let loaded = load_corpus(&path).unwrap();
        let expected: Vec<_> = crate::data::synth::synth_examples(4, 12, [4, 4, 3])
            .unwrap()
            .into_iter()
            .map(|e| e.record)
            .collect();
        assert_eq!(loaded, expected);
    }

    #[test]
    fn split_is_ninety_ten() {
        let v: Vec<usize> = (0..512).collect();
        let (train, val) = split(&v);
        assert_eq!((train.len(), val.len()), (460, 52));
        assert_eq!(val[0], 460);
    }
}
