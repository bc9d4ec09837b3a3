//! Synthetic multilingual parallel data.
//!
//! Every language renders the same underlying concept sequence through its
//! own lexicon (concept → surface token) and a fixed word-order rule, so the
//! exact translation between any two languages is known by construction.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::corpus::{DirectionKind, ParallelCorpus, SentencePair, Split};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{purpose, Rng, SeedStream};

/// Deterministic word-order permutation, defined for every length ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReorderRule {
    Identity,
    Reverse,
    Rotate(usize),
    SwapAdjacentPairs,
    InterleaveHalves,
}

impl ReorderRule {
    /// `perm[i]` is the source position placed at output position `i`.
    pub fn permutation(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::Data(format!("reordering rule {self} undefined for length 0")));
        }
        Ok(match *self {
            ReorderRule::Identity => (0..n).collect(),
            ReorderRule::Reverse => (0..n).rev().collect(),
            ReorderRule::Rotate(k) => (0..n).map(|i| (i + k) % n).collect(),
            ReorderRule::SwapAdjacentPairs => (0..n)
                .map(|i| if i % 2 == 0 { if i + 1 < n { i + 1 } else { i } } else { i - 1 })
                .collect(),
            ReorderRule::InterleaveHalves => {
                let h = n.div_ceil(2);
                (0..n).map(|i| if i % 2 == 0 { i / 2 } else { h + i / 2 }).collect()
            }
        })
    }

    pub fn apply<T: Clone>(&self, seq: &[T]) -> Result<Vec<T>> {
        Ok(self
            .permutation(seq.len())?
            .into_iter()
            .map(|p| seq[p].clone())
            .collect())
    }

    pub fn invert<T: Clone>(&self, seq: &[T]) -> Result<Vec<T>> {
        let perm = self.permutation(seq.len())?;
        let mut out = seq.to_vec();
        for (i, p) in perm.into_iter().enumerate() {
            out[p] = seq[i].clone();
        }
        Ok(out)
    }

    /// Rules handed out to non-pivot languages, in order.
    pub const DEFAULT_CYCLE: [ReorderRule; 5] = [
        ReorderRule::Reverse,
        ReorderRule::SwapAdjacentPairs,
        ReorderRule::InterleaveHalves,
        ReorderRule::Rotate(2),
        ReorderRule::Rotate(1),
    ];
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => write!(f, "identity"),
            ReorderRule::Reverse => write!(f, "reverse"),
            ReorderRule::Rotate(k) => write!(f, "rotate({k})"),
            ReorderRule::SwapAdjacentPairs => write!(f, "swap_adjacent_pairs"),
            ReorderRule::InterleaveHalves => write!(f, "interleave_halves"),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "identity" => return Ok(Self::Identity),
            "reverse" => return Ok(Self::Reverse),
            "swap_adjacent_pairs" => return Ok(Self::SwapAdjacentPairs),
            "interleave_halves" => return Ok(Self::InterleaveHalves),
            _ => {}
        }
        s.strip_prefix("rotate(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.trim().parse().ok())
            .map(Self::Rotate)
            .ok_or_else(|| Error::Config(format!("unknown reordering rule `{s}`")))
    }
}

impl TryFrom<String> for ReorderRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReorderRule> for String {
    fn from(r: ReorderRule) -> String {
        r.to_string()
    }
}

/// Description of a synthetic multilingual task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_languages: usize,
    /// Language playing the central bridging role.
    pub pivot_language_id: usize,
    /// Language codes; empty means `en` for the pivot and `l1`, `l2`, … for
    /// the rest.
    pub language_codes: Vec<String>,
    pub concept_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-language word-order rule; empty means identity for the pivot and
    /// [`ReorderRule::DEFAULT_CYCLE`] for the others.
    pub reordering: Vec<ReorderRule>,
    /// Fraction of concepts whose surface form is shared by all languages.
    pub lexical_overlap: f64,
    /// All training directions share the same concept sentences.
    pub multiway: bool,
    pub sentences_per_direction: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_languages: 4,
            pivot_language_id: 0,
            language_codes: Vec::new(),
            concept_vocab_size: 600,
            min_len: 4,
            max_len: 12,
            reordering: Vec::new(),
            lexical_overlap: 0.0,
            multiway: true,
            sentences_per_direction: 5000,
            dev_sentences: 200,
            test_sentences: 200,
            zipf_exponent: 1.1,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn codes(&self) -> Vec<String> {
        if !self.language_codes.is_empty() {
            return self.language_codes.clone();
        }
        let mut next = 1;
        (0..self.num_languages)
            .map(|l| {
                if l == self.pivot_language_id {
                    "en".to_string()
                } else {
                    next += 1;
                    format!("l{}", next - 1)
                }
            })
            .collect()
    }

    pub fn rules(&self) -> Vec<ReorderRule> {
        if !self.reordering.is_empty() {
            return self.reordering.clone();
        }
        let mut cycle = ReorderRule::DEFAULT_CYCLE.iter().cycle();
        (0..self.num_languages)
            .map(|l| {
                if l == self.pivot_language_id {
                    ReorderRule::Identity
                } else {
                    *cycle.next().expect("cycle is infinite")
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_languages < 2 {
            return fail("need at least two languages".into());
        }
        if self.pivot_language_id >= self.num_languages {
            return fail("pivot_language_id out of range".into());
        }
        if !self.language_codes.is_empty() && self.language_codes.len() != self.num_languages {
            return fail("language_codes length differs from num_languages".into());
        }
        let codes = self.codes();
        if codes.iter().collect::<HashSet<_>>().len() != codes.len() {
            return fail("duplicate language codes".into());
        }
        if !self.reordering.is_empty() && self.reordering.len() != self.num_languages {
            return fail("reordering length differs from num_languages".into());
        }
        if self.concept_vocab_size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return fail("invalid concept vocabulary or length range".into());
        }
        if !(0.0..=1.0).contains(&self.lexical_overlap) {
            return fail("lexical_overlap outside [0, 1]".into());
        }
        if self.zipf_exponent <= 0.0 {
            return fail("zipf_exponent must be positive".into());
        }
        Ok(())
    }
}

/// A generated task: lexicons, rules and the vocabulary they live in.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    codes: Vec<String>,
    rules: Vec<ReorderRule>,
    /// `lexicon[lang][concept]` = token id.
    lexicon: Vec<Vec<usize>>,
    inverse: Vec<HashMap<usize, usize>>,
    /// Vocabulary language id of each task language.
    vocab_lang: Vec<usize>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            let o = ONSETS[rng.random_range(0..ONSETS.len())];
            let v = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{o}{v}")
        })
        .collect()
}

fn shared_concepts(spec: &SyntheticTaskSpec) -> HashSet<usize> {
    let n = (spec.lexical_overlap * spec.concept_vocab_size as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.concept_vocab_size).collect();
    order.shuffle(&mut SeedStream::new(spec.seed).stream(purpose::LEXICON, u64::MAX));
    order.into_iter().take(n).collect()
}

/// Surface forms for language `lang`; depends only on languages `≤ lang`.
fn surface_forms(
    spec: &SyntheticTaskSpec,
    lang: usize,
    shared: &HashSet<usize>,
    shared_forms: &[String],
    used: &mut HashSet<String>,
) -> Vec<String> {
    let mut rng = SeedStream::new(spec.seed).stream(purpose::LEXICON, lang as u64);
    (0..spec.concept_vocab_size)
        .map(|c| {
            if shared.contains(&c) {
                return shared_forms[c].clone();
            }
            loop {
                let w = pseudo_word(&mut rng);
                if used.insert(w.clone()) {
                    return w;
                }
            }
        })
        .collect()
}

impl SyntheticTask {
    /// Build lexicons and the vocabulary for `spec`.
    pub fn build(spec: &SyntheticTaskSpec) -> Result<(Self, Vocabulary)> {
        spec.validate()?;
        let codes = spec.codes();
        let code_refs: Vec<&str> = codes.iter().map(String::as_str).collect();
        let mut vocab = Vocabulary::new(&code_refs);
        let mut task = Self {
            spec: spec.clone(),
            codes: Vec::new(),
            rules: Vec::new(),
            lexicon: Vec::new(),
            inverse: Vec::new(),
            vocab_lang: Vec::new(),
        };
        let rules = spec.rules();
        let shared = shared_concepts(spec);
        let mut used = HashSet::new();
        let shared_forms = {
            let mut rng = SeedStream::new(spec.seed).stream(purpose::LEXICON, u64::MAX - 1);
            (0..spec.concept_vocab_size)
                .map(|c| {
                    if !shared.contains(&c) {
                        return String::new();
                    }
                    loop {
                        let w = pseudo_word(&mut rng);
                        if used.insert(w.clone()) {
                            return w;
                        }
                    }
                })
                .collect::<Vec<_>>()
        };
        for (l, code) in codes.iter().enumerate() {
            let forms = surface_forms(spec, l, &shared, &shared_forms, &mut used);
            task.push_language(&mut vocab, code, rules[l], &forms)?;
        }
        Ok((task, vocab))
    }

    fn push_language(
        &mut self,
        vocab: &mut Vocabulary,
        code: &str,
        rule: ReorderRule,
        forms: &[String],
    ) -> Result<()> {
        let vl = vocab.add_language(code);
        let ids = forms
            .iter()
            .map(|f| vocab.add_token(f))
            .collect::<Result<Vec<_>>>()?;
        let inverse = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        self.codes.push(code.to_string());
        self.rules.push(rule);
        self.lexicon.push(ids);
        self.inverse.push(inverse);
        self.vocab_lang.push(vl);
        Ok(())
    }

    /// A copy of this task with one more language appended. Existing
    /// lexicons, rules and vocabulary IDs are unchanged; new tokens are
    /// appended to `vocab`.
    pub fn add_language(&self, vocab: &mut Vocabulary, code: &str, rule: ReorderRule) -> Result<Self> {
        if self.codes.iter().any(|c| c == code) {
            return Err(Error::Data(format!("language `{code}` already present")));
        }
        let mut task = self.clone();
        task.spec.num_languages += 1;
        task.spec.language_codes = self.codes.iter().cloned().chain([code.to_string()]).collect();
        task.spec.reordering = self.rules.iter().copied().chain([rule]).collect();
        let shared = shared_concepts(&self.spec);
        let shared_forms: Vec<String> = (0..self.spec.concept_vocab_size)
            .map(|c| {
                if shared.contains(&c) {
                    vocab.token(self.lexicon[0][c]).to_string()
                } else {
                    String::new()
                }
            })
            .collect();
        let mut used: HashSet<String> = (0..vocab.len())
            .filter(|&i| !vocab.is_special(i))
            .map(|i| vocab.token(i).to_string())
            .collect();
        let forms = surface_forms(&task.spec, self.codes.len(), &shared, &shared_forms, &mut used);
        task.push_language(vocab, code, rule, &forms)?;
        Ok(task)
    }

    pub fn num_languages(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn pivot(&self) -> usize {
        self.spec.pivot_language_id
    }

    pub fn rule(&self, lang: usize) -> ReorderRule {
        self.rules[lang]
    }

    /// Vocabulary language id (BOS index) of task language `lang`.
    pub fn vocab_language(&self, lang: usize) -> usize {
        self.vocab_lang[lang]
    }

    /// Token ids of each language's lexicon.
    pub fn lexicon(&self, lang: usize) -> &[usize] {
        &self.lexicon[lang]
    }

    /// Surface sentence of `concepts` in `lang`.
    pub fn render(&self, concepts: &[usize], lang: usize) -> Result<Vec<usize>> {
        let words: Vec<usize> = concepts.iter().map(|&c| self.lexicon[lang][c]).collect();
        self.rules[lang].apply(&words)
    }

    /// Concept sequence of a sentence in `lang` (inverse of [`Self::render`]).
    pub fn concepts(&self, tokens: &[usize], lang: usize) -> Result<Vec<usize>> {
        let ordered = self.rules[lang].invert(tokens)?;
        ordered
            .iter()
            .map(|t| {
                self.inverse[lang]
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token {t} not in lexicon of {}", self.codes[lang])))
            })
            .collect()
    }

    /// Exact translation by lexicon and word-order inversion.
    pub fn oracle_translate(&self, tokens: &[usize], from: usize, to: usize) -> Result<Vec<usize>> {
        self.render(&self.concepts(tokens, from)?, to)
    }

    fn sample_pool(&self, stream: u64, count: usize) -> Result<Vec<Vec<usize>>> {
        let spec = &self.spec;
        let mut rng = SeedStream::new(spec.seed).stream(purpose::CORPUS, stream);
        let zipf = Zipf::new(spec.concept_vocab_size as f64, spec.zipf_exponent)
            .map_err(|e| Error::Config(format!("zipf: {e}")))?;
        // Zipf ranks map onto a fixed random permutation of the concepts.
        let mut rank_to_concept: Vec<usize> = (0..spec.concept_vocab_size).collect();
        rank_to_concept.shuffle(&mut SeedStream::new(spec.seed).stream(purpose::CORPUS, u64::MAX));
        Ok((0..count)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                (0..len)
                    .map(|_| {
                        let r = zipf.sample(&mut rng) as usize;
                        rank_to_concept[r.clamp(1, spec.concept_vocab_size) - 1]
                    })
                    .collect()
            })
            .collect())
    }

    fn pool_stream(split: Split, pair: Option<(usize, usize)>) -> u64 {
        let s = split as u64;
        match pair {
            None => s,
            Some((a, b)) => {
                let (a, b) = (a.min(b) as u64, a.max(b) as u64);
                (s << 40) | ((a + 1) << 20) | (b + 1)
            }
        }
    }

    fn kind(&self, a: usize, b: usize) -> DirectionKind {
        if a == self.pivot() || b == self.pivot() {
            DirectionKind::Supervised
        } else {
            DirectionKind::ZeroShot
        }
    }

    fn push_pairs(
        &self,
        out: &mut Vec<SentencePair>,
        pool: &[Vec<usize>],
        a: usize,
        b: usize,
        split: Split,
    ) -> Result<()> {
        for (g, concepts) in pool.iter().enumerate() {
            out.push(SentencePair {
                src_lang: self.vocab_lang[a],
                tgt_lang: self.vocab_lang[b],
                src: self.render(concepts, a)?,
                tgt: self.render(concepts, b)?,
                split,
                kind: self.kind(a, b),
                group: g,
            });
        }
        Ok(())
    }

    /// All ordered language pairs for train, dev and test.
    pub fn generate(&self) -> Result<ParallelCorpus> {
        let n = self.num_languages();
        let spec = &self.spec;
        let mut pairs = Vec::new();
        let shared_train = if spec.multiway {
            Some(self.sample_pool(Self::pool_stream(Split::Train, None), spec.sentences_per_direction)?)
        } else {
            None
        };
        let dev = self.sample_pool(Self::pool_stream(Split::Dev, None), spec.dev_sentences)?;
        let test = self.sample_pool(Self::pool_stream(Split::Test, None), spec.test_sentences)?;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                match &shared_train {
                    Some(pool) => self.push_pairs(&mut pairs, pool, a, b, Split::Train)?,
                    None => {
                        let stream = Self::pool_stream(Split::Train, Some((a, b)));
                        let pool = self.sample_pool(stream, spec.sentences_per_direction)?;
                        self.push_pairs(&mut pairs, &pool, a, b, Split::Train)?;
                    }
                }
                self.push_pairs(&mut pairs, &dev, a, b, Split::Dev)?;
                self.push_pairs(&mut pairs, &test, a, b, Split::Test)?;
            }
        }
        Ok(ParallelCorpus::new(pairs))
    }

    /// Training pairs between `lang` and the pivot (both directions, drawn
    /// from a fresh sentence pool of `count` sentences) plus dev/test pairs
    /// between `lang` and every other language.
    pub fn generate_for_language(&self, lang: usize, count: usize) -> Result<ParallelCorpus> {
        let pivot = self.pivot();
        if lang == pivot || lang >= self.num_languages() {
            return Err(Error::Data("new language must be a non-pivot task language".into()));
        }
        let mut pairs = Vec::new();
        let pool = self.sample_pool(Self::pool_stream(Split::Train, Some((lang, pivot))) ^ (1 << 62), count)?;
        self.push_pairs(&mut pairs, &pool, lang, pivot, Split::Train)?;
        self.push_pairs(&mut pairs, &pool, pivot, lang, Split::Train)?;
        let dev = self.sample_pool(Self::pool_stream(Split::Dev, None), self.spec.dev_sentences)?;
        let test = self.sample_pool(Self::pool_stream(Split::Test, None), self.spec.test_sentences)?;
        for other in (0..self.num_languages()).filter(|&o| o != lang) {
            for (a, b) in [(lang, other), (other, lang)] {
                self.push_pairs(&mut pairs, &dev, a, b, Split::Dev)?;
                self.push_pairs(&mut pairs, &test, a, b, Split::Test)?;
            }
        }
        Ok(ParallelCorpus::new(pairs))
    }
}

/// Generated task, vocabulary and corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub task: SyntheticTask,
    pub vocab: Vocabulary,
    pub corpus: ParallelCorpus,
}

pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    let (task, vocab) = SyntheticTask::build(spec)?;
    let corpus = task.generate()?;
    Ok(SyntheticCorpus { task, vocab, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(multiway: bool) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_languages: 3,
            concept_vocab_size: 40,
            sentences_per_direction: 30,
            dev_sentences: 10,
            test_sentences: 10,
            multiway,
            ..Default::default()
        }
    }

    #[test]
    fn rules_are_permutations() {
        let rules = [
            ReorderRule::Identity,
            ReorderRule::Reverse,
            ReorderRule::Rotate(1),
            ReorderRule::Rotate(5),
            ReorderRule::SwapAdjacentPairs,
            ReorderRule::InterleaveHalves,
        ];
        for r in rules {
            for n in 1..=64 {
                let mut p = r.permutation(n).unwrap();
                p.sort_unstable();
                assert_eq!(p, (0..n).collect::<Vec<_>>(), "{r} at {n}");
                let seq: Vec<usize> = (100..100 + n).collect();
                assert_eq!(r.invert(&r.apply(&seq).unwrap()).unwrap(), seq);
            }
            assert!(r.permutation(0).is_err());
        }
        assert_eq!(ReorderRule::InterleaveHalves.apply(&[1, 2, 3, 4, 5]).unwrap(), vec![1, 4, 2, 5, 3]);
        assert_eq!(ReorderRule::SwapAdjacentPairs.apply(&[1, 2, 3]).unwrap(), vec![2, 1, 3]);
        assert_eq!(ReorderRule::Rotate(1).apply(&[1, 2, 3]).unwrap(), vec![2, 3, 1]);
    }

    #[test]
    fn rule_text_roundtrip() {
        for r in ReorderRule::DEFAULT_CYCLE {
            assert_eq!(r.to_string().parse::<ReorderRule>().unwrap(), r);
        }
        assert!("rotate(x)".parse::<ReorderRule>().is_err());
    }

    #[test]
    fn identical_lexicon_identity_order_copies() {
        let spec = SyntheticTaskSpec {
            num_languages: 2,
            lexical_overlap: 1.0,
            reordering: vec![ReorderRule::Identity, ReorderRule::Identity],
            ..small(true)
        };
        let data = generate_synthetic_corpus(&spec).unwrap();
        assert!(!data.corpus.pairs().is_empty());
        for p in data.corpus.pairs() {
            assert_eq!(p.src, p.tgt);
        }
    }

    #[test]
    fn disjoint_lexicons_by_default() {
        let data = generate_synthetic_corpus(&small(true)).unwrap();
        let sets: Vec<HashSet<usize>> = (0..3)
            .map(|l| data.task.lexicon(l).iter().copied().collect())
            .collect();
        for a in 0..3 {
            assert_eq!(sets[a].len(), 40);
            for b in a + 1..3 {
                assert!(sets[a].is_disjoint(&sets[b]));
            }
        }
        assert_eq!(data.vocab.len(), 3 + 3 + 3 * 40);
    }

    #[test]
    fn multiway_alignment_holds() {
        let data = generate_synthetic_corpus(&small(true)).unwrap();
        let task = &data.task;
        for p in data.corpus.pairs() {
            let a = task.concepts(&p.src, p.src_lang).unwrap();
            let b = task.concepts(&p.tgt, p.tgt_lang).unwrap();
            assert_eq!(a, b);
        }
        // dev sentence g has the same concepts in every direction
        let dev: Vec<_> = data.corpus.pairs().iter().filter(|p| p.split == Split::Dev && p.group == 3).collect();
        assert_eq!(dev.len(), 6);
        let c0 = task.concepts(&dev[0].src, dev[0].src_lang).unwrap();
        assert!(dev.iter().all(|p| task.concepts(&p.src, p.src_lang).unwrap() == c0));
    }

    #[test]
    fn non_multiway_draws_disjoint_sentences() {
        let data = generate_synthetic_corpus(&small(false)).unwrap();
        let task = &data.task;
        let concepts_for = |a: usize, b: usize| -> HashSet<Vec<usize>> {
            data.corpus
                .pairs()
                .iter()
                .filter(|p| p.split == Split::Train && p.src_lang == a && p.tgt_lang == b)
                .map(|p| task.concepts(&p.src, a).unwrap())
                .collect()
        };
        let ab = concepts_for(1, 0);
        let ba = concepts_for(0, 1);
        let ca = concepts_for(2, 0);
        assert_eq!(ab, ba);
        assert!(ab.intersection(&ca).count() <= 1);
    }

    #[test]
    fn oracle_round_trip() {
        let spec = SyntheticTaskSpec {
            num_languages: 2,
            reordering: vec![ReorderRule::Reverse, ReorderRule::Rotate(1)],
            ..small(true)
        };
        let (task, _) = SyntheticTask::build(&spec).unwrap();
        let concepts = vec![3, 1, 4, 1, 5];
        let a = task.render(&concepts, 0).unwrap();
        let b = task.oracle_translate(&a, 0, 1).unwrap();
        assert_eq!(task.oracle_translate(&b, 1, 0).unwrap(), a);
        assert_eq!(task.concepts(&b, 1).unwrap(), concepts);
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let spec = small(true);
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let mut vocab = a.vocab.clone();
        let grown = a.task.add_language(&mut vocab, "new", ReorderRule::InterleaveHalves).unwrap();
        assert!(a.vocab.is_prefix_of(&vocab));
        for l in 0..3 {
            assert_eq!(grown.lexicon(l), a.task.lexicon(l));
        }
        let extra = grown.generate_for_language(3, 5).unwrap();
        let train: Vec<_> = extra.pairs().iter().filter(|p| p.split == Split::Train).collect();
        assert_eq!(train.len(), 10);
        assert!(train.iter().all(|p| p.src_lang == 0 || p.tgt_lang == 0));
        // dev sentences of the grown task align with the original dev set
        let orig_dev = a.corpus.pairs().iter().find(|p| p.split == Split::Dev && p.src_lang == 0).unwrap();
        let new_dev = extra
            .pairs()
            .iter()
            .find(|p| p.split == Split::Dev && p.src_lang == 0 && p.group == orig_dev.group)
            .unwrap();
        assert_eq!(orig_dev.src, new_dev.src);
    }
}
