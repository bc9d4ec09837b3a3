use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::AttnVars;
use super::ModelConfig;

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Element-wise mean of several stores with identical layout.
    pub fn average(stores: &[&ParamStore<T>]) -> Result<ParamStore<T>> {
        let first = stores
            .first()
            .ok_or_else(|| Error::InvalidArgument("average of zero stores".into()))?;
        if stores.len() == 1 {
            return Ok((*first).clone());
        }
        let mut out = (*first).clone();
        let k = stores.len() as f64;
        for (i, t) in out.tensors.iter_mut().enumerate() {
            for s in &stores[1..] {
                if s.names[i] != first.names[i] {
                    return Err(Error::InvalidArgument(format!(
                        "parameter layout mismatch at {}",
                        first.names[i]
                    )));
                }
            }
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                let total: f64 = stores.iter().map(|s| s.tensors[i].data()[j].as_f64()).sum();
                *v = T::from_f64_lossy(total / k);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIds {
    pub ln_attn: LnIds,
    pub attn: AttnIds,
    pub ln_ff: LnIds,
    pub ff: FfIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub ln_self: LnIds,
    pub self_attn: AttnIds,
    pub ln_cross: LnIds,
    pub cross_attn: AttnIds,
    pub ln_ff: LnIds,
    pub ff: FfIds,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub token_embedding: ParamId,
    pub lang_embedding: ParamId,
    pub dec_in_w: ParamId,
    pub dec_in_b: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub encoder_ln: LnIds,
    pub decoder_ln: LnIds,
}

pub const TOKEN_EMBEDDING: &str = "embedding.tokens";
pub const LANG_EMBEDDING: &str = "embedding.languages";

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| {
            T::from_f64_lossy(self.rng.random_range(-a..a))
        });
        self.store.push(name, t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(self.rng)));
        self.store.push(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.push(name, Tensor::zeros(&[n]))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gain: self.store.push(format!("{prefix}.gain"), Tensor::full(&[d], T::one())),
            bias: self.zeros(format!("{prefix}.bias"), d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.xavier(format!("{prefix}.wq"), d, d),
            bq: self.zeros(format!("{prefix}.bq"), d),
            wk: self.xavier(format!("{prefix}.wk"), d, d),
            bk: self.zeros(format!("{prefix}.bk"), d),
            wv: self.xavier(format!("{prefix}.wv"), d, d),
            bv: self.zeros(format!("{prefix}.bv"), d),
            wo: self.xavier(format!("{prefix}.wo"), d, d),
            bo: self.zeros(format!("{prefix}.bo"), d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, dff: usize) -> FfIds {
        FfIds {
            w1: self.xavier(format!("{prefix}.w1"), d, dff),
            b1: self.zeros(format!("{prefix}.b1"), dff),
            w2: self.xavier(format!("{prefix}.w2"), dff, d),
            b2: self.zeros(format!("{prefix}.b2"), d),
        }
    }
}

/// Create freshly initialized parameters in a fixed registration order.
pub(crate) fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> (ParamStore<T>, ModelIds) {
    let d = cfg.d_model;
    let e = cfg.lang_dim();
    let mut b = Builder {
        store: ParamStore::default(),
        rng,
    };
    let token_embedding = b.normal(TOKEN_EMBEDDING.into(), &[cfg.vocab_size, d], (d as f64).powf(-0.5));
    let lang_embedding = b.normal(LANG_EMBEDDING.into(), &[cfg.num_languages, e], (e as f64).powf(-0.5));
    let dec_in_w = b.xavier("decoder.input_projection.w".into(), d + e, d);
    let dec_in_b = b.zeros("decoder.input_projection.b".into(), d);
    let encoder = (0..cfg.num_encoder_layers)
        .map(|l| {
            let p = format!("encoder.layers.{l}");
            EncoderLayerIds {
                ln_attn: b.ln(&format!("{p}.ln_attn"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln_ff: b.ln(&format!("{p}.ln_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let decoder = (0..cfg.num_decoder_layers)
        .map(|l| {
            let p = format!("decoder.layers.{l}");
            DecoderLayerIds {
                ln_self: b.ln(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_cross: b.ln(&format!("{p}.ln_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_ff: b.ln(&format!("{p}.ln_ff"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let encoder_ln = b.ln("encoder.final_ln", d);
    let decoder_ln = b.ln("decoder.final_ln", d);
    (
        b.store,
        ModelIds {
            token_embedding,
            lang_embedding,
            dec_in_w,
            dec_in_b,
            encoder,
            decoder,
            encoder_ln,
            decoder_ln,
        },
    )
}

/// Recover the id table from a store built by [`init_params`].
pub(crate) fn resolve_ids<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<ModelIds> {
    let get = |n: String| {
        store
            .find(&n)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
    };
    let ln = |p: String| -> Result<LnIds> {
        Ok(LnIds {
            gain: get(format!("{p}.gain"))?,
            bias: get(format!("{p}.bias"))?,
        })
    };
    let attn = |p: String| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: get(format!("{p}.wq"))?,
            bq: get(format!("{p}.bq"))?,
            wk: get(format!("{p}.wk"))?,
            bk: get(format!("{p}.bk"))?,
            wv: get(format!("{p}.wv"))?,
            bv: get(format!("{p}.bv"))?,
            wo: get(format!("{p}.wo"))?,
            bo: get(format!("{p}.bo"))?,
        })
    };
    let ff = |p: String| -> Result<FfIds> {
        Ok(FfIds {
            w1: get(format!("{p}.w1"))?,
            b1: get(format!("{p}.b1"))?,
            w2: get(format!("{p}.w2"))?,
            b2: get(format!("{p}.b2"))?,
        })
    };
    let encoder = (0..cfg.num_encoder_layers)
        .map(|l| {
            let p = format!("encoder.layers.{l}");
            Ok(EncoderLayerIds {
                ln_attn: ln(format!("{p}.ln_attn"))?,
                attn: attn(format!("{p}.attn"))?,
                ln_ff: ln(format!("{p}.ln_ff"))?,
                ff: ff(format!("{p}.ff"))?,
            })
        })
        .collect::<Result<_>>()?;
    let decoder = (0..cfg.num_decoder_layers)
        .map(|l| {
            let p = format!("decoder.layers.{l}");
            Ok(DecoderLayerIds {
                ln_self: ln(format!("{p}.ln_self"))?,
                self_attn: attn(format!("{p}.self_attn"))?,
                ln_cross: ln(format!("{p}.ln_cross"))?,
                cross_attn: attn(format!("{p}.cross_attn"))?,
                ln_ff: ln(format!("{p}.ln_ff"))?,
                ff: ff(format!("{p}.ff"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelIds {
        token_embedding: get(TOKEN_EMBEDDING.into())?,
        lang_embedding: get(LANG_EMBEDDING.into())?,
        dec_in_w: get("decoder.input_projection.w".into())?,
        dec_in_b: get("decoder.input_projection.b".into())?,
        encoder,
        decoder,
        encoder_ln: ln("encoder.final_ln".into())?,
        decoder_ln: ln("decoder.final_ln".into())?,
    })
}

impl AttnIds {
    /// Register the projections on `tape` as trainable leaves.
    pub fn bind<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, s: &'p ParamStore<T>) -> AttnVars {
        AttnVars {
            wq: tape.param(self.wq, s.get(self.wq)),
            bq: tape.param(self.bq, s.get(self.bq)),
            wk: tape.param(self.wk, s.get(self.wk)),
            bk: tape.param(self.bk, s.get(self.bk)),
            wv: tape.param(self.wv, s.get(self.wv)),
            bv: tape.param(self.bv, s.get(self.bv)),
            wo: tape.param(self.wo, s.get(self.wo)),
            bo: tape.param(self.bo, s.get(self.bo)),
        }
    }
}

impl LnIds {
    pub(crate) fn bind<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, s: &'p ParamStore<T>) -> (Var, Var) {
        (
            tape.param(self.gain, s.get(self.gain)),
            tape.param(self.bias, s.get(self.bias)),
        )
    }
}

impl FfIds {
    pub(crate) fn bind<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, s: &'p ParamStore<T>) -> [Var; 4] {
        [
            tape.param(self.w1, s.get(self.w1)),
            tape.param(self.b1, s.get(self.b1)),
            tape.param(self.w2, s.get(self.w2)),
            tape.param(self.b2, s.get(self.b2)),
        ]
    }
}
