use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

use super::vocab::Vocabulary;
use crate::error::{invalid, Error, Result};
use crate::rng::{purpose, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 0,
    Dev = 1,
    Test = 2,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DirectionKind {
    /// One side is the pivot language.
    Supervised,
    ZeroShot,
}

impl fmt::Display for DirectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionKind::Supervised => "supervised",
            DirectionKind::ZeroShot => "zero-shot",
        })
    }
}

/// One sentence pair; languages are vocabulary language ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub split: Split,
    pub kind: DirectionKind,
    /// Index of the underlying sentence within its pool; pairs sharing a
    /// group and split are translations of each other in multiway data.
    pub group: usize,
}

impl SentencePair {
    pub fn direction(&self) -> (usize, usize) {
        (self.src_lang, self.tgt_lang)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        Self { pairs }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, other: ParallelCorpus) {
        self.pairs.extend(other.pairs);
    }

    pub fn filter(&self, keep: impl Fn(&SentencePair) -> bool) -> Self {
        Self::new(self.pairs.iter().filter(|p| keep(p)).cloned().collect())
    }

    pub fn split(&self, split: Split) -> Self {
        self.filter(|p| p.split == split)
    }

    pub fn direction(&self, src: usize, tgt: usize) -> Self {
        self.filter(|p| p.src_lang == src && p.tgt_lang == tgt)
    }

    /// Distinct (source, target) directions in sorted order.
    pub fn directions(&self) -> Vec<(usize, usize)> {
        let set: std::collections::BTreeSet<_> = self.pairs.iter().map(SentencePair::direction).collect();
        set.into_iter().collect()
    }

    /// Recompute direction tags relative to `pivot`.
    pub fn retag(&mut self, pivot: usize) {
        for p in &mut self.pairs {
            p.kind = if p.src_lang == pivot || p.tgt_lang == pivot {
                DirectionKind::Supervised
            } else {
                DirectionKind::ZeroShot
            };
        }
    }

    /// Number of target tokens (without EOS).
    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).sum()
    }
}

/// Data splits of the pivot-centred setting.
#[derive(Debug, Clone)]
pub struct EnglishCenteredSplits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test_supervised: ParallelCorpus,
    pub test_zero_shot: ParallelCorpus,
}

/// Train and dev keep only pivot-involving pairs (dev optionally also keeps
/// zero-shot pairs); test is divided by direction kind.
pub fn build_english_centered_splits(
    corpus: &ParallelCorpus,
    pivot: usize,
    include_zero_shot_dev: bool,
) -> Result<EnglishCenteredSplits> {
    if !corpus.pairs.iter().any(|p| p.src_lang == pivot || p.tgt_lang == pivot) {
        return Err(Error::Data(format!("pivot language {pivot} absent from corpus")));
    }
    let mut c = corpus.clone();
    c.retag(pivot);
    let sup = |p: &SentencePair| p.kind == DirectionKind::Supervised;
    Ok(EnglishCenteredSplits {
        train: c.filter(|p| p.split == Split::Train && sup(p)),
        dev: c.filter(|p| p.split == Split::Dev && (include_zero_shot_dev || sup(p))),
        test_supervised: c.filter(|p| p.split == Split::Test && sup(p)),
        test_zero_shot: c.filter(|p| p.split == Split::Test && !sup(p)),
    })
}

fn tag(lang: &str, token: &str) -> String {
    format!("<{lang}>{token}")
}

/// Prefix every surface token with its language tag, so that no token is
/// shared across languages. Returns the re-encoded corpus and a fresh
/// vocabulary with the same languages.
pub fn apply_no_overlap_tagging(
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
) -> Result<(ParallelCorpus, Vocabulary)> {
    let codes: Vec<&str> = vocab.languages().iter().map(String::as_str).collect();
    let mut out = Vocabulary::new(&codes);
    let map = |ids: &[usize], lang: usize, out: &mut Vocabulary| -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                if vocab.is_special(i) {
                    return Ok(i);
                }
                out.add_token(&tag(codes[lang], vocab.token(i)))
            })
            .collect()
    };
    let mut pairs = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        let src = map(&p.src, p.src_lang, &mut out)?;
        let tgt = map(&p.tgt, p.tgt_lang, &mut out)?;
        pairs.push(SentencePair { src, tgt, ..p.clone() });
    }
    Ok((ParallelCorpus::new(pairs), out))
}

/// Inverse of [`apply_no_overlap_tagging`] given the original-token
/// vocabulary to re-encode into (grown as needed).
pub fn strip_no_overlap_tagging(
    corpus: &ParallelCorpus,
    tagged: &Vocabulary,
    into: &mut Vocabulary,
) -> Result<ParallelCorpus> {
    let map = |ids: &[usize], lang: usize, into: &mut Vocabulary| -> Result<Vec<usize>> {
        let prefix = format!("<{}>", tagged.languages()[lang]);
        ids.iter()
            .map(|&i| {
                if tagged.is_special(i) {
                    return Ok(i);
                }
                let t = tagged.token(i);
                let raw = t
                    .strip_prefix(&prefix)
                    .ok_or_else(|| Error::Data(format!("token `{t}` lacks tag `{prefix}`")))?;
                into.add_token(raw)
            })
            .collect()
    };
    let mut pairs = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        let src = map(&p.src, p.src_lang, into)?;
        let tgt = map(&p.tgt, p.tgt_lang, into)?;
        pairs.push(SentencePair { src, tgt, ..p.clone() });
    }
    Ok(ParallelCorpus::new(pairs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSize {
    Fraction(f64),
    Count(usize),
}

/// Uniform sample without replacement, drawn independently for every
/// (direction, split). Original order is kept.
pub fn subsample_direction(corpus: &ParallelCorpus, size: SampleSize, seed: u64) -> Result<ParallelCorpus> {
    let mut groups: BTreeMap<(usize, usize, Split), Vec<usize>> = BTreeMap::new();
    for (i, p) in corpus.pairs.iter().enumerate() {
        groups.entry((p.src_lang, p.tgt_lang, p.split)).or_default().push(i);
    }
    let seeds = SeedStream::new(seed);
    let mut keep = HashSet::new();
    for (k, ((s, t, split), idx)) in groups.iter().enumerate() {
        let n = idx.len();
        let want = match size {
            SampleSize::Fraction(f) if f > 0.0 && f <= 1.0 => (f * n as f64).round() as usize,
            SampleSize::Fraction(f) => return Err(invalid(format!("sample fraction {f} outside (0, 1]"))),
            SampleSize::Count(c) => c,
        };
        if want == 0 || want > n {
            return Err(invalid(format!(
                "cannot sample {want} of {n} pairs for direction {s}->{t} ({split})"
            )));
        }
        let mut rng = seeds.stream(purpose::SUBSAMPLE, k as u64);
        keep.extend(sample(&mut rng, n, want).into_iter().map(|j| idx[j]));
    }
    Ok(ParallelCorpus::new(
        corpus
            .pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, p)| p.clone())
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: usize, t: usize, split: Split, g: usize) -> SentencePair {
        SentencePair {
            src_lang: s,
            tgt_lang: t,
            src: vec![10 + g],
            tgt: vec![20 + g],
            split,
            kind: DirectionKind::Supervised,
            group: g,
        }
    }

    fn full(n: usize) -> ParallelCorpus {
        let mut v = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if s != t {
                    for split in [Split::Train, Split::Dev, Split::Test] {
                        v.push(pair(s, t, split, 0));
                    }
                }
            }
        }
        ParallelCorpus::new(v)
    }

    #[test]
    fn pivot_splits_count_directions() {
        let splits = build_english_centered_splits(&full(4), 0, false).unwrap();
        assert_eq!(splits.train.directions().len(), 6);
        assert!(splits.train.pairs().iter().all(|p| p.src_lang == 0 || p.tgt_lang == 0));
        assert_eq!(splits.test_zero_shot.directions().len(), 6);
        assert_eq!(splits.test_supervised.directions().len(), 6);
        assert!(splits.dev.pairs().iter().all(|p| p.kind == DirectionKind::Supervised));
        let with = build_english_centered_splits(&full(4), 0, true).unwrap();
        assert_eq!(with.dev.directions().len(), 12);
        assert!(build_english_centered_splits(&full(4), 7, false).is_err());
    }

    #[test]
    fn subsample_sizes_and_determinism() {
        let c = ParallelCorpus::new((0..1000).map(|g| pair(0, 1, Split::Train, g)).collect());
        let s = subsample_direction(&c, SampleSize::Fraction(0.1), 5).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s, subsample_direction(&c, SampleSize::Fraction(0.1), 5).unwrap());
        assert_ne!(s, subsample_direction(&c, SampleSize::Fraction(0.1), 6).unwrap());
        assert_eq!(subsample_direction(&c, SampleSize::Fraction(1.0), 5).unwrap(), c);
        assert!(subsample_direction(&c, SampleSize::Count(1001), 5).is_err());
        assert!(subsample_direction(&c, SampleSize::Fraction(0.0), 5).is_err());
    }

    #[test]
    fn tagging_separates_and_strips() {
        let mut v = Vocabulary::new(&["en", "de"]);
        let k = v.add_token("k").unwrap();
        let a = v.add_token("a").unwrap();
        let b = v.add_token("b").unwrap();
        let c = ParallelCorpus::new(vec![SentencePair {
            src_lang: 0,
            tgt_lang: 1,
            src: vec![k, a],
            tgt: vec![k, b, k],
            split: Split::Train,
            kind: DirectionKind::Supervised,
            group: 0,
        }]);
        let (tagged, tv) = apply_no_overlap_tagging(&c, &v).unwrap();
        let p = &tagged.pairs()[0];
        let en: HashSet<_> = p.src.iter().collect();
        let de: HashSet<_> = p.tgt.iter().collect();
        assert!(en.is_disjoint(&de));
        // en {k, a} + de {k, b}
        assert_eq!(tv.len(), 3 + 2 + 4);
        let mut back_vocab = Vocabulary::new(&["en", "de"]);
        for t in ["k", "a", "b"] {
            back_vocab.add_token(t).unwrap();
        }
        let back = strip_no_overlap_tagging(&tagged, &tv, &mut back_vocab).unwrap();
        assert_eq!(back, c);
    }
}
