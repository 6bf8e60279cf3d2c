//! Line-oriented text formats for corpora, dictionaries, detections, features and splits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{tokenize, Dataset, ImageSample};
use crate::encoder::{ConceptSet, Vocabulary};
use crate::error::{read_to_string, Error, Result};

pub const CORPUS: &str = "corpus.txt";
pub const DICTIONARY: &str = "dictionary.txt";
pub const VOCAB: &str = "vocab.tsv";
pub const CAPTIONS: &str = "image_captions.txt";
pub const DETECTIONS: &str = "detections.txt";
pub const FEATURES: &str = "features.txt";

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_corpus(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    write_lines(path, sentences.iter().map(|s| s.join(" ")))
}

/// One sentence per line; blank lines are rejected.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(n, l)| {
            let toks = tokenize(l);
            if toks.is_empty() {
                Err(parse_err(path, n + 1, "empty sentence"))
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn save_dictionary(path: &Path, words: &[String]) -> Result<()> {
    write_lines(path, words.iter().cloned())
}

pub fn load_dictionary(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(n, l)| match tokenize(l).as_slice() {
            [w] => Ok(w.clone()),
            _ => Err(parse_err(path, n + 1, "expected exactly one concept")),
        })
        .collect()
}

/// Header `n d_img`, then one row per line with 17 significant digits.
pub fn save_features(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("feature rows differ in width"));
    }
    let mut out = format!("{} {}\n", rows.len(), d);
    for r in rows {
        for (k, x) in r.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            write!(out, "{x:.16e}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(path, 1, format!("bad header field `{t}`"))))
        .collect::<Result<_>>()?;
    let [n, d] = header[..] else {
        return Err(parse_err(path, 1, "header must be `n d_img`"));
    };
    let mut rows = Vec::with_capacity(n);
    for (k, l) in lines.enumerate() {
        let line = k + 2;
        if l.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(path, line, format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        if row.len() != d {
            return Err(parse_err(path, line, format!("expected {d} values, found {}", row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, line, "non-finite feature"));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(path, 1, format!("header promises {n} rows, file has {}", rows.len())));
    }
    Ok(rows)
}

pub fn save_split(path: &Path, idx: &[usize]) -> Result<()> {
    write_lines(path, idx.iter().map(usize::to_string))
}

pub fn load_split(path: &Path) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, n + 1, format!("bad index `{}`", l.trim())))
        })
        .collect()
}

/// One image per line: `token:score` pairs separated by spaces.
pub fn save_detections(path: &Path, sets: &[ConceptSet], vocab: &Vocabulary) -> Result<()> {
    let lines = sets.iter().map(|s| {
        s.items()
            .iter()
            .map(|&(id, p)| format!("{}:{p:.16e}", vocab.token(id).unwrap_or("<UNK>")))
            .collect::<Vec<_>>()
            .join(" ")
    });
    write_lines(path, lines)
}

pub fn load_detections(path: &Path, vocab: &Vocabulary) -> Result<Vec<ConceptSet>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (n, l) in text.lines().enumerate() {
        let items = l
            .split_whitespace()
            .map(|pair| {
                let (tok, score) = pair
                    .rsplit_once(':')
                    .ok_or_else(|| parse_err(path, n + 1, format!("expected token:score, got `{pair}`")))?;
                let id = vocab
                    .id(tok)
                    .ok_or_else(|| parse_err(path, n + 1, format!("unknown token `{tok}`")))?;
                let p: f64 = score
                    .parse()
                    .map_err(|_| parse_err(path, n + 1, format!("bad score `{score}`")))?;
                Ok((id, p))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ConceptSet::new(items).map_err(|e| parse_err(path, n + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Writes every dataset file plus the six split lists into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_corpus(&dir.join(CORPUS), &ds.corpus)?;
    save_dictionary(&dir.join(DICTIONARY), &ds.dictionary)?;
    ds.vocab.save(&dir.join(VOCAB))?;
    let captions: Vec<Vec<String>> = ds.images.iter().map(|i| i.caption.clone()).collect();
    save_corpus(&dir.join(CAPTIONS), &captions)?;
    let dets: Vec<ConceptSet> = ds.images.iter().map(|i| i.detections.clone()).collect();
    save_detections(&dir.join(DETECTIONS), &dets, &ds.vocab)?;
    let feats: Vec<Vec<f64>> = ds.images.iter().map(|i| i.feature.clone()).collect();
    save_features(&dir.join(FEATURES), &feats)?;
    for (domain, split) in [("corpus", &ds.corpus_split), ("image", &ds.image_split)] {
        for (part, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
            save_split(&dir.join(format!("{domain}_{part}.idx")), idx)?;
        }
    }
    Ok(())
}

/// Image captions, detections and features as stored in `dir`, checked for equal counts.
pub fn load_images(dir: &Path, vocab: &Vocabulary) -> Result<Vec<ImageSample>> {
    let feats = load_features(&dir.join(FEATURES))?;
    let dets = load_detections(&dir.join(DETECTIONS), vocab)?;
    let caps = load_corpus(&dir.join(CAPTIONS))?;
    if feats.len() != dets.len() || feats.len() != caps.len() {
        return Err(Error::contract(format!(
            "image files disagree: {} features, {} detections, {} captions",
            feats.len(),
            dets.len(),
            caps.len()
        )));
    }
    Ok(caps
        .into_iter()
        .zip(dets)
        .zip(feats)
        .map(|((caption, detections), feature)| ImageSample {
            caption,
            detections,
            feature,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate, Grammar, SynthConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(
            &Grammar::desk_default(),
            &SynthConfig {
                n_corpus: 30,
                n_images: 12,
                ..SynthConfig::default()
            },
        )
        .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_corpus(&dir.path().join(CORPUS)).unwrap(), ds.corpus);
        assert_eq!(load_dictionary(&dir.path().join(DICTIONARY)).unwrap(), ds.dictionary);
        let vocab = Vocabulary::load(&dir.path().join(VOCAB)).unwrap();
        assert_eq!(load_images(dir.path(), &vocab).unwrap(), ds.images);
        assert_eq!(load_split(&dir.path().join("image_val.idx")).unwrap(), ds.image_split.val);
    }

    #[test]
    fn feature_header_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        fs::write(&p, "3 2\n1 2\n3 4\n").unwrap();
        assert!(matches!(load_features(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "2 2\n1 2\n3 x\n").unwrap();
        assert!(matches!(load_features(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_dictionary_is_not_found() {
        let p = Path::new("/nonexistent/dictionary.txt");
        assert!(matches!(load_dictionary(p), Err(Error::FileNotFound(_))));
    }

    #[test]
    fn bad_dictionary_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "dog\ncat\nhot dog\n").unwrap();
        assert!(matches!(load_dictionary(&p), Err(Error::Parse { line: 3, .. })));
    }
}
