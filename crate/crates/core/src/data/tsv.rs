//! `{src}-{tgt}.{split}.tsv` corpus files: one pair per line, source and
//! target separated by a single TAB, tokens separated by whitespace.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::corpus::{DirectionKind, ParallelCorpus, SentencePair, Split};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Whether unseen tokens extend the vocabulary or map to UNK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    Grow,
    Frozen,
}

pub fn tsv_file_name(src: &str, tgt: &str, split: Split) -> String {
    format!("{src}-{tgt}.{split}.tsv")
}

/// Parse `path`; both language codes are registered in `vocab`.
pub fn load_tsv_corpus(
    path: &Path,
    src_lang: &str,
    tgt_lang: &str,
    split: Split,
    vocab: &mut Vocabulary,
    mode: VocabMode,
) -> Result<ParallelCorpus> {
    let text = fs::read_to_string(path)?;
    let (s, t) = match mode {
        VocabMode::Grow => (vocab.add_language(src_lang), vocab.add_language(tgt_lang)),
        VocabMode::Frozen => (vocab.require_language(src_lang)?, vocab.require_language(tgt_lang)?),
    };
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(format!("expected 2 TAB-separated fields, found {}", fields.len())));
        }
        let mut encode = |side: &str| -> Result<Vec<usize>> {
            let words: Vec<&str> = side.split_whitespace().collect();
            if words.is_empty() {
                return Err(err("empty sentence".into()));
            }
            match mode {
                VocabMode::Grow => words
                    .iter()
                    .map(|w| vocab.add_token(w).map_err(|e| err(e.to_string())))
                    .collect(),
                VocabMode::Frozen => Ok(vocab.encode(&words)),
            }
        };
        let src = encode(fields[0])?;
        let tgt = encode(fields[1])?;
        pairs.push(SentencePair {
            src_lang: s,
            tgt_lang: t,
            src,
            tgt,
            split,
            kind: DirectionKind::Supervised,
            group: i,
        });
    }
    Ok(ParallelCorpus::new(pairs))
}

/// Write every (direction, split) of `corpus` into `dir`; returns the files
/// written.
pub fn write_tsv_corpus(corpus: &ParallelCorpus, vocab: &Vocabulary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let part = corpus.split(split);
        for (s, t) in part.directions() {
            let codes = vocab.languages();
            let path = dir.join(tsv_file_name(&codes[s], &codes[t], split));
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            for p in part.direction(s, t).pairs() {
                writeln!(f, "{}\t{}", vocab.decode(&p.src).join(" "), vocab.decode(&p.tgt).join(" "))?;
            }
            f.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Load every `{src}-{tgt}.{split}.tsv` file in `dir`, in sorted file order.
pub fn load_tsv_dir(dir: &Path, vocab: &mut Vocabulary, mode: VocabMode) -> Result<ParallelCorpus> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
        .collect();
    files.sort();
    let mut corpus = ParallelCorpus::default();
    for f in files {
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let parsed = name.split_once('.').and_then(|(langs, split)| {
            let (s, t) = langs.split_once('-')?;
            Some((s.to_string(), t.to_string(), split.parse::<Split>().ok()?))
        });
        let Some((s, t, split)) = parsed else {
            return Err(Error::Data(format!("unrecognized corpus file name {}", f.display())));
        };
        corpus.extend(load_tsv_corpus(&f, &s, &t, split, vocab, mode)?);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("en-de.train.tsv");
        fs::write(&path, "a b c\tx y\nd\tz z\n").unwrap();
        let mut v = Vocabulary::new(&[]);
        let c = load_tsv_corpus(&path, "en", "de", Split::Train, &mut v, VocabMode::Grow).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(v.decode(&c.pairs()[1].tgt), vec!["z", "z"]);

        let out = dir.path().join("out");
        let files = write_tsv_corpus(&c, &v, &out).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(fs::read_to_string(&files[0]).unwrap(), "a b c\tx y\nd\tz z\n");
        let mut v2 = v.clone();
        let back = load_tsv_dir(&out, &mut v2, VocabMode::Frozen).unwrap();
        assert_eq!(back, c);

        let bad = dir.path().join("bad.tsv");
        fs::write(&bad, "a\tb\nx\ty\tz\tw\n").unwrap();
        match load_tsv_corpus(&bad, "en", "de", Split::Train, &mut v, VocabMode::Grow) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_mode_maps_unknown_to_unk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        fs::write(&path, "a q\tb\n").unwrap();
        let mut v = Vocabulary::new(&["en", "de"]);
        v.add_token("a").unwrap();
        let c = load_tsv_corpus(&path, "en", "de", Split::Test, &mut v, VocabMode::Frozen).unwrap();
        assert_eq!(c.pairs()[0].src[1], crate::data::UNK);
        assert_eq!(c.pairs()[0].tgt, vec![crate::data::UNK]);
    }
}
