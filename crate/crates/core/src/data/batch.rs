use rand::seq::SliceRandom;

use super::corpus::SentencePair;
use super::vocab::{Vocabulary, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::model::Example;
use crate::rng::{purpose, SeedStream};

/// Right-padded batch of sentence pairs.
///
/// Source rows end with EOS. `tgt_in` rows are `[BOS_lang, y_1 … y_T]` and
/// `tgt_out` rows are `[y_1 … y_T, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
    pub tgt_langs: Vec<usize>,
    /// Position of each row in the slice the batch was built from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair], vocab: &Vocabulary) -> Result<Self> {
        let src_w = pairs.iter().map(|p| p.src.len() + 1).max().unwrap_or(0);
        let tgt_w = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(0);
        let mut b = Batch {
            src: Vec::new(),
            src_lens: Vec::new(),
            tgt_in: Vec::new(),
            tgt_out: Vec::new(),
            tgt_lens: Vec::new(),
            tgt_langs: Vec::new(),
            indices: (0..pairs.len()).collect(),
        };
        for p in pairs {
            if p.tgt_lang >= vocab.num_languages() {
                return Err(invalid(format!("unknown target language {}", p.tgt_lang)));
            }
            let mut s = p.src.clone();
            s.push(EOS);
            b.src_lens.push(s.len());
            s.resize(src_w, PAD);
            b.src.push(s);
            let mut tin = Vec::with_capacity(tgt_w);
            tin.push(vocab.bos(p.tgt_lang));
            tin.extend_from_slice(&p.tgt);
            let mut tout = p.tgt.clone();
            tout.push(EOS);
            b.tgt_lens.push(tin.len());
            tin.resize(tgt_w, PAD);
            tout.resize(tgt_w, PAD);
            b.tgt_in.push(tin);
            b.tgt_out.push(tout);
            b.tgt_langs.push(p.tgt_lang);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// `true` where `src[i][j]` is padding.
    pub fn src_pad_mask(&self) -> Vec<Vec<bool>> {
        self.src
            .iter()
            .zip(&self.src_lens)
            .map(|(row, &n)| (0..row.len()).map(|j| j >= n).collect())
            .collect()
    }

    /// Unpadded views for the model.
    pub fn examples(&self) -> Vec<Example<'_>> {
        (0..self.len())
            .map(|i| Example {
                source: &self.src[i][..self.src_lens[i]],
                target_in: &self.tgt_in[i][..self.tgt_lens[i]],
                target_out: &self.tgt_out[i][..self.tgt_lens[i]],
                target_lang: self.tgt_langs[i],
            })
            .collect()
    }

    /// Non-pad target output tokens (EOS included).
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

/// Length-bucketed batches covering every pair exactly once, in an order
/// fixed by `seed`. A batch holds at most `batch_size_tokens` padded tokens
/// on its longer side (but always at least one pair).
pub fn make_batches(
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    batch_size_tokens: usize,
    max_positions: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size_tokens == 0 {
        return Err(invalid("batch_size_tokens must be positive"));
    }
    for (i, p) in pairs.iter().enumerate() {
        let longest = p.src.len().max(p.tgt.len()) + 1;
        if longest > max_positions || p.src.is_empty() {
            return Err(Error::Data(format!(
                "sentence pair {i} ({} -> {}, group {}) has length {longest}, max_positions is {max_positions}",
                p.src_lang, p.tgt_lang, p.group
            )));
        }
    }
    let seeds = SeedStream::new(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seeds.stream(purpose::BATCHING, 0));
    order.sort_by_key(|&i| pairs[i].src.len().max(pairs[i].tgt.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = pairs[i].src.len().max(pairs[i].tgt.len()) + 1;
        let new_width = width.max(w);
        if !cur.is_empty() && new_width * (cur.len() + 1) > batch_size_tokens {
            groups.push(std::mem::take(&mut cur));
            width = w;
        } else {
            width = new_width;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut seeds.stream(purpose::BATCHING, 1));
    groups
        .into_iter()
        .map(|g| {
            let refs: Vec<&SentencePair> = g.iter().map(|&i| &pairs[i]).collect();
            let mut b = Batch::from_pairs(&refs, vocab)?;
            b.indices = g;
            Ok(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{DirectionKind, Split};

    fn corpus(vocab: &mut Vocabulary) -> Vec<SentencePair> {
        let w: Vec<usize> = (0..20).map(|i| vocab.add_token(&format!("w{i}")).unwrap()).collect();
        (0..57)
            .map(|g| SentencePair {
                src_lang: g % 2,
                tgt_lang: 1 - g % 2,
                src: w[..1 + g % 9].to_vec(),
                tgt: w[..1 + (g * 7) % 11].to_vec(),
                split: Split::Train,
                kind: DirectionKind::Supervised,
                group: g,
            })
            .collect()
    }

    #[test]
    fn batches_conserve_tokens_and_start_with_bos() {
        let mut v = Vocabulary::new(&["en", "de"]);
        let pairs = corpus(&mut v);
        let batches = make_batches(&pairs, &v, 40, 64, 3).unwrap();
        let total: usize = batches.iter().map(|b| b.target_tokens() - b.len()).sum();
        assert_eq!(total, pairs.iter().map(|p| p.tgt.len()).sum::<usize>());
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            for (i, ex) in b.examples().iter().enumerate() {
                let p = &pairs[b.indices[i]];
                assert_eq!(ex.target_in[0], v.bos(p.tgt_lang));
                assert_eq!(&ex.target_in[1..], &p.tgt[..]);
                assert_eq!(*ex.target_out.last().unwrap(), EOS);
                assert_eq!(*ex.source.last().unwrap(), EOS);
            }
            for row in b.tgt_in.iter().chain(&b.tgt_out) {
                let first_pad = row.iter().position(|&t| t == PAD).unwrap_or(row.len());
                assert!(row[first_pad..].iter().all(|&t| t == PAD));
            }
        }
        assert_eq!(batches, make_batches(&pairs, &v, 40, 64, 3).unwrap());
    }

    #[test]
    fn overlong_sentence_is_named() {
        let mut v = Vocabulary::new(&["en", "de"]);
        let pairs = corpus(&mut v);
        let err = make_batches(&pairs, &v, 40, 8, 0).unwrap_err().to_string();
        assert!(err.contains("sentence pair"), "{err}");
    }
}
