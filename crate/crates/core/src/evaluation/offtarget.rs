use std::collections::HashMap;

use crate::data::{ParallelCorpus, SyntheticTask, Vocabulary};
use crate::error::{Error, Result};

/// Which languages each surface token belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLanguages {
    owners: HashMap<usize, Vec<usize>>,
}

impl TokenLanguages {
    /// Exact ownership from a synthetic task's lexicons (languages are
    /// vocabulary language ids).
    pub fn from_task(task: &SyntheticTask) -> Self {
        let mut owners: HashMap<usize, Vec<usize>> = HashMap::new();
        for l in 0..task.num_languages() {
            for &tok in task.lexicon(l) {
                let v = owners.entry(tok).or_default();
                let lang = task.vocab_language(l);
                if !v.contains(&lang) {
                    v.push(lang);
                }
            }
        }
        Self { owners }
    }

    /// Ownership observed in a corpus. Fails when any token occurs in more
    /// than one language, since sentence language is then ambiguous.
    pub fn from_corpus(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<Self> {
        let mut owners: HashMap<usize, Vec<usize>> = HashMap::new();
        for p in corpus.pairs() {
            for (ids, lang) in [(&p.src, p.src_lang), (&p.tgt, p.tgt_lang)] {
                for &t in ids {
                    if vocab.is_special(t) {
                        continue;
                    }
                    let v = owners.entry(t).or_default();
                    if !v.contains(&lang) {
                        v.push(lang);
                    }
                    if v.len() > 1 {
                        return Err(Error::Unsupported(format!(
                            "token `{}` is shared by several languages; off-target rate needs disjoint lexicons",
                            vocab.token(t)
                        )));
                    }
                }
            }
        }
        Ok(Self { owners })
    }

    /// The single language owning `token`, if exactly one does.
    pub fn exclusive_owner(&self, token: usize) -> Option<usize> {
        match self.owners.get(&token).map(Vec::as_slice) {
            Some([l]) => Some(*l),
            _ => None,
        }
    }

    /// More than half of the lexicon tokens belong exclusively to a language
    /// other than `target`. Tokens outside every lexicon count towards the
    /// denominator only.
    pub fn is_off_target(&self, hyp: &[usize], target: usize, vocab: &Vocabulary) -> bool {
        let content: Vec<usize> = hyp.iter().copied().filter(|&t| !vocab.is_special(t)).collect();
        if content.is_empty() {
            return false;
        }
        let other = content
            .iter()
            .filter(|&&t| self.exclusive_owner(t).is_some_and(|l| l != target))
            .count();
        2 * other > content.len()
    }
}

/// Fraction of off-target hypotheses.
pub fn off_target_rate(hyps: &[Vec<usize>], target: usize, langs: &TokenLanguages, vocab: &Vocabulary) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let n = hyps.iter().filter(|h| langs.is_off_target(h, target, vocab)).count();
    n as f64 / hyps.len() as f64
}
