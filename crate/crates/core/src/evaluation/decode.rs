use crate::autodiff::Tape;
use crate::data::{Vocabulary, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::model::{Pass, TransformerModel};
use crate::scalar::Scalar;

/// Default decoding budget for a source of `len` tokens.
pub fn default_max_len(len: usize, max_positions: usize) -> usize {
    (2 * len + 5).min(max_positions)
}

/// Greedy decoding of a batch. Sources are given without EOS (it is
/// appended here, as during training); outputs exclude BOS and EOS. Each
/// output stops at EOS or after `max_lens[i]` tokens.
pub fn greedy_decode_batch<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    sources: &[&[usize]],
    target_langs: &[usize],
    max_lens: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let n = sources.len();
    if target_langs.len() != n || max_lens.len() != n {
        return Err(invalid("decode batch components disagree in length"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let max_pos = model.config().max_positions;
    if let Some(&m) = max_lens.iter().find(|&&m| m > max_pos) {
        return Err(invalid(format!("max_len {m} exceeds max_positions {max_pos}")));
    }
    let with_eos: Vec<Vec<usize>> = sources.iter().map(|s| [*s, &[EOS][..]].concat()).collect();
    let refs: Vec<&[usize]> = with_eos.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let enc = model.encode_batch(&mut tape, &refs, &mut Pass::Eval)?;
    let memory = tape.value(enc.output).clone();
    let src_lens = enc.lens.clone();
    drop(tape);

    let vocab_size = model.config().vocab_size;
    let mut banned = vec![false; vocab_size];
    banned[PAD] = true;
    for l in 0..vocab.num_languages() {
        if vocab.bos(l) < vocab_size {
            banned[vocab.bos(l)] = true;
        }
    }
    let mut prefixes: Vec<Vec<usize>> = target_langs.iter().map(|&l| vec![vocab.bos(l)]).collect();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done: Vec<bool> = max_lens.iter().map(|&m| m == 0).collect();
    let longest = max_lens.iter().copied().max().unwrap_or(0);
    for step in 0..longest {
        let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut tape = Tape::new();
        let d = memory.cols();
        let mut rows = Vec::new();
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + src_lens[i];
        }
        for &i in &active {
            rows.extend(offsets[i]..offsets[i + 1]);
        }
        let mut mem_data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            mem_data.extend_from_slice(memory.row(r));
        }
        let mem = tape.constant(crate::tensor::Tensor::new(vec![rows.len(), d], mem_data)?);
        let a_lens: Vec<usize> = active.iter().map(|&i| src_lens[i]).collect();
        let a_pref: Vec<&[usize]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
        let a_lang: Vec<usize> = active.iter().map(|&i| target_langs[i]).collect();
        let h = model.decode_hidden(&mut tape, &a_pref, &a_lang, mem, &a_lens, &mut Pass::Eval)?;
        let last: Vec<usize> = (0..active.len()).map(|k| (k + 1) * (step + 1) - 1).collect();
        let h_last = tape.gather(h, &last)?;
        let logits = model.output_logits(&mut tape, h_last)?;
        let lv = tape.value(logits);
        for (k, &i) in active.iter().enumerate() {
            let row = lv.row(k);
            let mut best = None::<(usize, f64)>;
            for (t, &v) in row.iter().enumerate() {
                let v = v.as_f64();
                if banned[t] || v.is_nan() {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            let (tok, _) = best.ok_or_else(|| Error::Numerical("no finite logit while decoding".into()))?;
            if tok == EOS {
                done[i] = true;
            } else {
                out[i].push(tok);
                prefixes[i].push(tok);
                if out[i].len() >= max_lens[i] {
                    done[i] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Greedy decoding of one sentence.
pub fn greedy_decode<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    source: &[usize],
    target_lang: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(model, vocab, &[source], &[target_lang], &[max_len])?.remove(0))
}

/// Two-step translation `src → pivot → tgt`.
pub fn pivot_translate<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    source: &[usize],
    pivot_lang: usize,
    target_lang: usize,
) -> Result<Vec<usize>> {
    let max_pos = model.config().max_positions;
    let mid = greedy_decode(model, vocab, source, pivot_lang, default_max_len(source.len(), max_pos))?;
    if pivot_lang == target_lang {
        return Ok(mid);
    }
    if mid.is_empty() {
        return Err(Error::Numerical("empty intermediate pivot hypothesis".into()));
    }
    greedy_decode(model, vocab, &mid, target_lang, default_max_len(mid.len(), max_pos))
}

/// Batched [`pivot_translate`]; an empty intermediate hypothesis yields an
/// empty final hypothesis instead of an error.
pub fn pivot_translate_batch<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    sources: &[&[usize]],
    pivot_lang: usize,
    target_langs: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let max_pos = model.config().max_positions;
    let lens: Vec<usize> = sources.iter().map(|s| default_max_len(s.len(), max_pos)).collect();
    let mid = greedy_decode_batch(model, vocab, sources, &vec![pivot_lang; sources.len()], &lens)?;
    let todo: Vec<usize> = (0..sources.len())
        .filter(|&i| !mid[i].is_empty() && target_langs[i] != pivot_lang)
        .collect();
    let refs: Vec<&[usize]> = todo.iter().map(|&i| mid[i].as_slice()).collect();
    let langs: Vec<usize> = todo.iter().map(|&i| target_langs[i]).collect();
    let lens: Vec<usize> = refs.iter().map(|s| default_max_len(s.len(), max_pos)).collect();
    let second = greedy_decode_batch(model, vocab, &refs, &langs, &lens)?;
    let mut out: Vec<Vec<usize>> = (0..sources.len())
        .map(|i| if target_langs[i] == pivot_lang { mid[i].clone() } else { Vec::new() })
        .collect();
    for (k, i) in todo.into_iter().enumerate() {
        out[i] = second[k].clone();
    }
    Ok(out)
}
