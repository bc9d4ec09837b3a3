use std::collections::HashMap;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[num_positions × d]` table: dim `2j` holds `sin(i / λ^(2j/d))`, dim
/// `2j+1` holds `cos(i / λ^(2j/d))`.
pub fn sinusoidal_encoding<T: Scalar>(num_positions: usize, d: usize, wavelength: f64) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(invalid(format!("sinusoidal encoding needs an even width, got {d}")));
    }
    if wavelength <= 0.0 || !wavelength.is_finite() {
        return Err(invalid(format!("wavelength must be positive, got {wavelength}")));
    }
    let mut data = Vec::with_capacity(num_positions * d);
    for i in 0..num_positions {
        for j in 0..d / 2 {
            let angle = i as f64 / wavelength.powf(2.0 * j as f64 / d as f64);
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Tensor::new(vec![num_positions, d], data)
}

/// Attention mask for one query/key segment pair. Blocked entries get `-inf`
/// before the softmax.
#[derive(Debug, Clone, Copy)]
pub enum AttnMask<'a> {
    None,
    /// Query `i` may only see keys `≤ i`.
    Causal,
    /// `true` marks a blocked key position (e.g. padding), length `Tk`.
    BlockedKeys(&'a [bool]),
    /// Full `[Tq×Tk]` row-major blocked matrix.
    Blocked(&'a [bool]),
}

impl AttnMask<'_> {
    fn additive<T: Scalar>(&self, tq: usize, tk: usize) -> Result<Option<Tensor<T>>> {
        let ninf = T::neg_infinity();
        let t = match *self {
            AttnMask::None => return Ok(None),
            AttnMask::Causal => {
                Tensor::from_fn(&[tq, tk], |i| if i % tk > i / tk { ninf } else { T::zero() })
            }
            AttnMask::BlockedKeys(keys) => {
                if keys.len() != tk {
                    return Err(invalid("key mask length differs from key count"));
                }
                Tensor::from_fn(&[tq, tk], |i| if keys[i % tk] { ninf } else { T::zero() })
            }
            AttnMask::Blocked(m) => {
                if m.len() != tq * tk {
                    return Err(invalid("attention mask size differs from Tq×Tk"));
                }
                Tensor::from_fn(&[tq, tk], |i| if m[i] { ninf } else { T::zero() })
            }
        };
        Ok(Some(t))
    }
}

/// Projection parameters of one attention block on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn project<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product attention over packed segments.
///
/// `q_in` rows are split into segments of `q_lens`, `kv_in` rows into
/// `k_lens`; segment `s` of the queries attends only to segment `s` of the
/// keys. Returns the output-projected result and the attention weights
/// (segment-major, then head).
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &AttnVars,
    q_in: Var,
    kv_in: Var,
    q_lens: &[usize],
    k_lens: &[usize],
    mask: &AttnMask<'_>,
    num_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    if q_lens.len() != k_lens.len() || q_lens.is_empty() {
        return Err(invalid("query and key segment lists disagree"));
    }
    if q_lens.contains(&0) || k_lens.contains(&0) {
        return Err(invalid("attention over an empty sequence"));
    }
    let q = project(tape, q_in, p.wq, p.bq)?;
    let k = project(tape, kv_in, p.wk, p.bk)?;
    let v = project(tape, kv_in, p.wv, p.bv)?;
    let d = tape.value(q).cols();
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(invalid(format!("width {d} not divisible into {num_heads} heads")));
    }
    let dh = d / num_heads;
    let q = tape.scale(q, T::from_usize_lossy(dh).sqrt().recip());

    let mut masks: HashMap<(usize, usize), Option<Var>> = HashMap::new();
    let mut segments = Vec::with_capacity(q_lens.len());
    let mut weights = Vec::with_capacity(q_lens.len() * num_heads);
    let (mut qo, mut ko) = (0, 0);
    for (&tq, &tk) in q_lens.iter().zip(k_lens) {
        let m = match masks.get(&(tq, tk)) {
            Some(&m) => m,
            None => {
                let m = mask.additive::<T>(tq, tk)?.map(|t| tape.constant(t));
                if !matches!(mask, AttnMask::BlockedKeys(_) | AttnMask::Blocked(_)) {
                    masks.insert((tq, tk), m);
                }
                m
            }
        };
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.block(q, qo..qo + tq, cols.clone())?;
            let kh = tape.block(k, ko..ko + tk, cols.clone())?;
            let vh = tape.block(v, ko..ko + tk, cols)?;
            let mut scores = tape.matmul_nt(qh, kh)?;
            if let Some(m) = m {
                scores = tape.add(scores, m)?;
            }
            let w = tape.softmax(scores, 1)?;
            weights.push(w);
            heads.push(tape.matmul(w, vh)?);
        }
        segments.push(if num_heads == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
        qo += tq;
        ko += tk;
    }
    let joined = if segments.len() == 1 {
        segments[0]
    } else {
        tape.concat_rows(&segments)?
    };
    let out = project(tape, joined, p.wo, p.bo)?;
    Ok((out, weights))
}

/// Owned projection weights for standalone attention. Weight matrices are
/// `[d×d]` applied as `x·W`; biases are `[d]`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub num_heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    /// Identity projections and zero biases.
    pub fn identity(d: usize, num_heads: usize) -> Self {
        Self {
            wq: Tensor::eye(d),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::eye(d),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::eye(d),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::eye(d),
            bo: Tensor::zeros(&[d]),
            num_heads,
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> AttnVars {
        let mut next = 0;
        let mut bind = |t: &'p Tensor<T>| {
            next += 1;
            tape.param(ParamId(next - 1), t)
        };
        AttnVars {
            wq: bind(&self.wq),
            bq: bind(&self.bq),
            wk: bind(&self.wk),
            bk: bind(&self.bk),
            wv: bind(&self.wv),
            bv: bind(&self.bv),
            wo: bind(&self.wo),
            bo: bind(&self.bo),
        }
    }
}

/// Source of the attention queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryVariant {
    /// Queries projected from the query source.
    Standard,
    /// Queries projected from a fixed sinusoidal basis of this wavelength;
    /// the query source content is ignored.
    PositionalQuery { wavelength: f64 },
}

/// Attention for a single query sequence against a single key/value
/// sequence. Returns the output `[Tq×d]` and one weight matrix per head.
pub fn multi_head_attention<T: Scalar>(
    query_source: &Tensor<T>,
    key_value_source: &Tensor<T>,
    mask: &AttnMask<'_>,
    params: &AttentionParams<T>,
    variant: QueryVariant,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (tq, d) = query_source.dims2("multi_head_attention")?;
    let (tk, dk) = key_value_source.dims2("multi_head_attention")?;
    if tq == 0 || tk == 0 {
        return Err(invalid("attention over an empty sequence"));
    }
    if d != dk || params.wq.shape() != [d, d] {
        return Err(crate::error::Error::Shape {
            op: "multi_head_attention",
            lhs: query_source.shape().to_vec(),
            rhs: key_value_source.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let q_in = match variant {
        QueryVariant::Standard => tape.constant(query_source.clone()),
        QueryVariant::PositionalQuery { wavelength } => {
            tape.constant(sinusoidal_encoding(tq, d, wavelength)?)
        }
    };
    let kv = tape.constant(key_value_source.clone());
    let (out, w) = attention(&mut tape, &vars, q_in, kv, &[tq], &[tk], mask, params.num_heads)?;
    Ok((
        tape.value(out).clone(),
        w.iter().map(|&v| tape.value(v).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_examples() {
        let pe = sinusoidal_encoding::<f64>(51, 8, 10_000.0).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at2(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        for wl in [100.0, 10_000.0, 3.0] {
            let pe = sinusoidal_encoding::<f64>(2, 8, wl).unwrap();
            assert!((pe.at2(1, 0) - 1f64.sin()).abs() < 1e-15);
            assert!((pe.at2(1, 0) - 0.8415).abs() < 1e-4);
        }
        let q = sinusoidal_encoding::<f64>(51, 8, 100.0).unwrap();
        let base = sinusoidal_encoding::<f64>(51, 8, 10_000.0).unwrap();
        let diff = (0..8).map(|j| (q.at2(50, j) - base.at2(50, j)).abs()).fold(0.0, f64::max);
        assert!(diff > 0.1, "{diff}");
        assert!(sinusoidal_encoding::<f64>(4, 7, 100.0).is_err());
        assert!(sinusoidal_encoding::<f64>(4, 8, 0.0).is_err());
    }

    fn seq(t: usize, d: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(&[t, d], |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn uniform_attention_averages_values() {
        let d = 4;
        let mut p = AttentionParams::<f64>::identity(d, 1);
        p.wk = Tensor::zeros(&[d, d]);
        let x = seq(3, d, 0.7);
        let (out, w) = multi_head_attention(&x, &x, &AttnMask::None, &p, QueryVariant::Standard).unwrap();
        for j in 0..d {
            let mean = (0..3).map(|i| x.at2(i, j)).sum::<f64>() / 3.0;
            for i in 0..3 {
                assert!((out.at2(i, j) - mean).abs() < 1e-12);
            }
        }
        assert!(w[0].data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn one_hot_mask_selects_first_value() {
        let d = 4;
        let mut p = AttentionParams::<f64>::identity(d, 2);
        p.wo = Tensor::from_fn(&[d, d], |i| (i as f64 * 0.37).cos());
        p.bo = Tensor::from_fn(&[d], |i| i as f64);
        let x = seq(4, d, 0.3);
        let blocked = [false, true, true, true];
        let (out, _) =
            multi_head_attention(&x, &x, &AttnMask::BlockedKeys(&blocked), &p, QueryVariant::Standard).unwrap();
        let v0 = Tensor::new(vec![1, d], x.row(0).to_vec()).unwrap();
        let mut expected = v0.matmul(&p.wo).unwrap();
        for (e, b) in expected.data_mut().iter_mut().zip(p.bo.data()) {
            *e += b;
        }
        for i in 0..4 {
            for j in 0..d {
                assert!((out.at2(i, j) - expected.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_query_ignores_query_content() {
        let d = 8;
        let mut p = AttentionParams::<f64>::identity(d, 2);
        p.wq = Tensor::from_fn(&[d, d], |i| (i as f64 * 0.11).sin());
        let kv = seq(5, d, 0.5);
        let a = seq(5, d, 1.3);
        let b = seq(5, d, -2.9);
        let variant = QueryVariant::PositionalQuery { wavelength: 100.0 };
        let (oa, wa) = multi_head_attention(&a, &kv, &AttnMask::None, &p, variant).unwrap();
        let (ob, wb) = multi_head_attention(&b, &kv, &AttnMask::None, &p, variant).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(wa, wb);
        let (os, _) = multi_head_attention(&a, &kv, &AttnMask::None, &p, QueryVariant::Standard).unwrap();
        assert_ne!(os, oa);
    }

    #[test]
    fn causal_weights_are_lower_triangular() {
        let p = AttentionParams::<f64>::identity(4, 2);
        let x = seq(5, 4, 0.9);
        let (_, w) = multi_head_attention(&x, &x, &AttnMask::Causal, &p, QueryVariant::Standard).unwrap();
        for wh in &w {
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_eq!(wh.at2(i, j), 0.0);
                }
                let s: f64 = wh.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_sequences_rejected() {
        let p = AttentionParams::<f64>::identity(4, 1);
        let e = Tensor::zeros(&[0, 4]);
        let x = seq(2, 4, 1.0);
        assert!(multi_head_attention(&e, &x, &AttnMask::None, &p, QueryVariant::Standard).is_err());
        assert!(multi_head_attention(&x, &e, &AttnMask::None, &p, QueryVariant::Standard).is_err());
    }
}
