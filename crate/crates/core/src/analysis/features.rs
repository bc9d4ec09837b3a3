use crate::autodiff::Tape;
use crate::data::PAD;
use crate::error::{invalid, Error, Result};
use crate::model::{Pass, TransformerModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `f64` feature rows with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "feature data has {} values, expected {rows}×{cols}",
                data.len()
            )));
        }
        if labels.len() != rows {
            return Err(invalid(format!("{} labels for {rows} rows", labels.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            labels,
        })
    }

    /// Rows from `tensor` (`[n×d]`), labelled `0..n`.
    pub fn from_tensor<T: Scalar>(tensor: &Tensor<T>) -> Result<Self> {
        let (n, d) = tensor.dims2("feature matrix")?;
        let data = tensor.data().iter().map(|v| v.as_f64()).collect();
        Self::new(n, d, data, (0..n).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(invalid(format!("{} labels for {} rows", labels.len(), self.rows)));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Copy with every row transformed by `f`.
    pub fn map_rows(&self, cols: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            let r = f(self.row(i));
            if r.len() != cols {
                return Err(invalid("row transform changed the width"));
            }
            data.extend(r);
        }
        Self::new(self.rows, cols, data, self.labels.clone())
    }
}

/// Mean over the non-PAD timesteps of each sentence; `tokens[i]` gives the
/// token at each row of `activations[i]`. Labels are sentence indices.
pub fn meanpool_sentences<T: Scalar>(activations: &[Tensor<T>], tokens: &[&[usize]]) -> Result<FeatureMatrix> {
    if activations.len() != tokens.len() {
        return Err(invalid("one token sequence per activation matrix required"));
    }
    let d = match activations.first() {
        Some(a) => a.cols(),
        None => return Err(invalid("no sentences to pool")),
    };
    let mut data = Vec::with_capacity(activations.len() * d);
    for (i, (act, toks)) in activations.iter().zip(tokens).enumerate() {
        let (t, cols) = act.dims2("meanpool")?;
        if cols != d || t != toks.len() {
            return Err(invalid(format!(
                "sentence {i}: activations {:?} do not match {} tokens of width {d}",
                act.shape(),
                toks.len()
            )));
        }
        let mut mean = vec![0.0f64; d];
        let mut count = 0usize;
        for (r, &tok) in toks.iter().enumerate() {
            if tok == PAD {
                continue;
            }
            count += 1;
            for (m, v) in mean.iter_mut().zip(act.row(r)) {
                *m += v.as_f64();
            }
        }
        if count == 0 {
            return Err(Error::Data(format!("sentence {i} is all padding")));
        }
        data.extend(mean.into_iter().map(|m| m / count as f64));
    }
    FeatureMatrix::new(activations.len(), d, data, (0..activations.len()).collect())
}

/// Encoder states of each sentence without dropout: `states[s][l]` is the
/// output of layer `l` (0 is the embedded input, `L` the last layer before
/// the final norm), shaped `[len×d]`.
pub fn layer_states<T: Scalar>(
    model: &TransformerModel<T>,
    sentences: &[&[usize]],
    batch_sentences: usize,
) -> Result<Vec<Vec<Tensor<T>>>> {
    let d = model.config().d_model;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_sentences.max(1)) {
        let mut tape = Tape::new();
        let enc = model.encode_batch(&mut tape, chunk, &mut Pass::Eval)?;
        let vars: Vec<_> = std::iter::once(enc.input).chain(enc.layers.iter().copied()).collect();
        let mut offset = 0;
        for &len in &enc.lens {
            let states = vars
                .iter()
                .map(|&v| {
                    let rows = &tape.value(v).data()[offset * d..(offset + len) * d];
                    Tensor::new(vec![len, d], rows.to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(states);
            offset += len;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meanpool_examples() {
        let one = Tensor::new(vec![1, 3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let m = meanpool_sentences(&[one], &[&[7]]).unwrap();
        assert_eq!(m.row(0), &[1.0, -2.0, 0.5]);

        let constant = Tensor::full(&[4, 2], 3.25f64);
        let m = meanpool_sentences(&[constant], &[&[5, 6, 7, 8]]).unwrap();
        assert_eq!(m.row(0), &[3.25, 3.25]);

        let base = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let padded = Tensor::new(vec![4, 2], vec![1.0f64, 2.0, 3.0, 4.0, 99.0, 99.0, -5.0, 0.0]).unwrap();
        let a = meanpool_sentences(&[base], &[&[5, 6]]).unwrap();
        let b = meanpool_sentences(&[padded], &[&[5, 6, PAD, PAD]]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn meanpool_errors() {
        let t = Tensor::full(&[2, 2], 1.0f64);
        assert!(matches!(meanpool_sentences(std::slice::from_ref(&t), &[&[PAD, PAD]]), Err(Error::Data(_))));
        assert!(meanpool_sentences(&[t], &[&[5]]).is_err());
        assert!(meanpool_sentences::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn feature_matrix_invariants() {
        assert!(FeatureMatrix::new(2, 2, vec![0.0; 4], vec![0]).is_err());
        assert!(FeatureMatrix::new(2, 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![0.0, f64::NAN], vec![0]),
            Err(Error::NonFinite(_))
        ));
    }
}
