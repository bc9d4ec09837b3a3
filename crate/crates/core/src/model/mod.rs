//! Pre-norm Transformer encoder-decoder with target-language conditioning.
//!
//! Batches are processed packed: the tokens of every sentence are stacked
//! into one `[N×d]` matrix and attention is applied per sentence segment, so
//! no padding ever enters the computation.

mod attention;
pub mod checkpoint;
mod config;
pub mod params;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{purpose, Rng, SeedStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use attention::{
    attention, multi_head_attention, sinusoidal_encoding, AttentionParams, AttnMask, AttnVars,
    QueryVariant,
};
pub use config::ModelConfig;
pub use params::{ModelIds, ParamStore};

/// Whether a forward pass applies dropout.
pub enum Pass<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    fn dropout<T: Scalar>(
        &mut self,
        tape: &mut Tape<'_, T>,
        x: Var,
        lens: &[usize],
        cfg: &ModelConfig,
    ) -> Result<Var> {
        match self {
            Pass::Eval => Ok(x),
            Pass::Train(rng) => {
                tape.dropout_segments(x, lens, cfg.dropout_rate, cfg.dropout_mode, rng)
            }
        }
    }
}

/// Per-layer encoder states for one sentence.
#[derive(Debug, Clone)]
pub struct LayerActivations<T> {
    /// Scaled embeddings plus positional encoding (before dropout).
    pub input: Tensor<T>,
    /// Output of encoder layers 1..=L, each `[T×d]`.
    pub layers: Vec<Tensor<T>>,
    /// Output after the final layer norm.
    pub output: Tensor<T>,
    /// Attention weights `[layer][head]`, each `[T×T]`.
    pub attention: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> LayerActivations<T> {
    /// States indexed 0 (input) ..= L (final layer, pre-norm).
    pub fn at_layer(&self, layer: usize) -> &Tensor<T> {
        if layer == 0 {
            &self.input
        } else {
            &self.layers[layer - 1]
        }
    }
}

/// Encoder output for a packed batch, as tape variables.
pub struct EncodedBatch {
    pub input: Var,
    pub layers: Vec<Var>,
    pub output: Var,
    pub attention: Vec<Vec<Var>>,
    pub lens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ModelIds,
    input_pe: Tensor<T>,
    query_pe: Tensor<T>,
}

impl<T: Scalar> PartialEq for TransformerModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> TransformerModel<T> {
    /// Fresh model with parameters drawn from the `INIT` stream of `seed`.
    pub fn new(config: ModelConfig, seed: SeedStream) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.stream(purpose::INIT, 0);
        let (params, ids) = params::init_params(&config, &mut rng);
        Self::assemble(config, params, ids)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = params::resolve_ids(&config, &params)?;
        let model = Self::assemble(config, params, ids)?;
        model.check_shapes()?;
        Ok(model)
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>, ids: ModelIds) -> Result<Self> {
        let input_pe = sinusoidal_encoding(config.max_positions, config.d_model, config.input_pe_wavelength)?;
        let query_pe = sinusoidal_encoding(config.max_positions, config.d_model, config.query_wavelength)?;
        Ok(Self {
            config,
            params,
            ids,
            input_pe,
            query_pe,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = params::init_params::<T>(&self.config, &mut SeedStream::new(0).stream(0, 0)).0;
        for ((_, name, t), (_, _, f)) in self.params.iter().zip(fresh.iter()) {
            if t.shape() != f.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    t.shape(),
                    f.shape()
                )));
            }
        }
        if self.params.len() != fresh.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Replace parameters with a store of identical layout.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        let ids = params::resolve_ids(&self.config, &params)?;
        self.params = params;
        self.ids = ids;
        self.check_shapes()
    }

    fn packed_pe(&self, table: &Tensor<T>, lens: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        for &len in lens {
            if len > self.config.max_positions {
                return Err(invalid(format!(
                    "sequence of length {len} exceeds max_positions {}",
                    self.config.max_positions
                )));
            }
            data.extend_from_slice(&table.data()[..len * d]);
        }
        Tensor::new(vec![total, d], data)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed<'p>(&'p self, tape: &mut Tape<'p, T>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = tape.param(self.ids.token_embedding, self.params.get(self.ids.token_embedding));
        let e = tape.gather(table, ids)?;
        Ok(tape.scale(e, T::from_usize_lossy(self.config.d_model).sqrt()))
    }

    /// One encoder layer over packed sequences. `layer` is 1-based.
    pub fn encoder_layer<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        layer: usize,
        h: Var,
        lens: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        if layer == 0 || layer > cfg.num_encoder_layers {
            return Err(invalid(format!("encoder layer {layer} outside 1..={}", cfg.num_encoder_layers)));
        }
        let ids = self.ids.encoder[layer - 1];
        let s = &self.params;
        let modified = cfg.residual_removal_layer == Some(layer);

        let (g, b) = ids.ln_attn.bind(tape, s);
        let x = tape.layer_norm(h, g, b, cfg.layer_norm_eps)?;
        let q_in = if modified && cfg.position_query_enabled {
            let pe = self.packed_pe(&self.query_pe, lens)?;
            tape.constant(pe)
        } else {
            x
        };
        let av = ids.attn.bind(tape, s);
        let (a, weights) = attention(tape, &av, q_in, x, lens, lens, &AttnMask::None, cfg.num_heads)?;
        let a = pass.dropout(tape, a, lens, cfg)?;
        let a = if modified { a } else { tape.add(h, a)? };

        let out = self.feed_forward(tape, &ids.ln_ff, &ids.ff, a, lens, pass)?;
        Ok((out, weights))
    }

    fn feed_forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        ln: &params::LnIds,
        ff: &params::FfIds,
        a: Var,
        lens: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let (g, b) = ln.bind(tape, &self.params);
        let y = tape.layer_norm(a, g, b, self.config.layer_norm_eps)?;
        let [w1, b1, w2, b2] = ff.bind(tape, &self.params);
        let y = tape.matmul(y, w1)?;
        let y = tape.add_row(y, b1)?;
        let y = tape.relu(y);
        let y = tape.matmul(y, w2)?;
        let y = tape.add_row(y, b2)?;
        let y = pass.dropout(tape, y, lens, &self.config)?;
        tape.add(a, y)
    }

    /// Encode packed source sentences.
    pub fn encode_batch<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        sources: &[&[usize]],
        pass: &mut Pass<'_>,
    ) -> Result<EncodedBatch> {
        let lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        if lens.is_empty() || lens.contains(&0) {
            return Err(invalid("cannot encode an empty sequence"));
        }
        let ids: Vec<usize> = sources.concat();
        let e = self.embed(tape, &ids)?;
        let pe = tape.constant(self.packed_pe(&self.input_pe, &lens)?);
        let input = tape.add(e, pe)?;
        let mut h = pass.dropout(tape, input, &lens, &self.config)?;
        let mut layers = Vec::with_capacity(self.config.num_encoder_layers);
        let mut attention = Vec::with_capacity(self.config.num_encoder_layers);
        for l in 1..=self.config.num_encoder_layers {
            let (out, w) = self.encoder_layer(tape, l, h, &lens, pass)?;
            layers.push(out);
            attention.push(w);
            h = out;
        }
        let (g, b) = self.ids.encoder_ln.bind(tape, &self.params);
        let output = tape.layer_norm(h, g, b, self.config.layer_norm_eps)?;
        Ok(EncodedBatch {
            input,
            layers,
            output,
            attention,
            lens,
        })
    }

    /// Encode one sentence and return every intermediate state.
    pub fn encode(&self, tokens: &[usize], pass: &mut Pass<'_>) -> Result<LayerActivations<T>> {
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &[tokens], pass)?;
        let heads = self.config.num_heads;
        Ok(LayerActivations {
            input: tape.value(enc.input).clone(),
            layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            output: tape.value(enc.output).clone(),
            attention: enc
                .attention
                .iter()
                .map(|w| w.iter().take(heads).map(|&v| tape.value(v).clone()).collect())
                .collect(),
        })
    }

    /// Decoder logits `[Σ len × vocab]` for packed shifted targets.
    ///
    /// `targets_in[i]` must start with the BOS token of `target_langs[i]`;
    /// this is the caller's contract and not re-checked here.
    pub fn decode_batch<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        targets_in: &[&[usize]],
        target_langs: &[usize],
        encoder_output: Var,
        source_lens: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let h = self.decode_hidden(tape, targets_in, target_langs, encoder_output, source_lens, pass)?;
        self.output_logits(tape, h)
    }

    /// Scores against the shared embedding table for decoder states `h`.
    pub fn output_logits<'p>(&'p self, tape: &mut Tape<'p, T>, h: Var) -> Result<Var> {
        let table = tape.param(self.ids.token_embedding, self.params.get(self.ids.token_embedding));
        tape.matmul_nt(h, table)
    }

    /// Final (layer-normed) decoder states `[Σ len × d]`.
    pub fn decode_hidden<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        targets_in: &[&[usize]],
        target_langs: &[usize],
        encoder_output: Var,
        source_lens: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = &self.params;
        if targets_in.len() != target_langs.len() || targets_in.len() != source_lens.len() {
            return Err(invalid("decoder batch components disagree in length"));
        }
        if let Some(&bad) = target_langs.iter().find(|&&l| l >= cfg.num_languages) {
            return Err(invalid(format!("unknown language id {bad}")));
        }
        let lens: Vec<usize> = targets_in.iter().map(|t| t.len()).collect();
        if lens.contains(&0) {
            return Err(invalid("empty decoder input"));
        }
        let ids: Vec<usize> = targets_in.concat();
        let tok = self.embed(tape, &ids)?;
        let lang_ids: Vec<usize> = lens
            .iter()
            .zip(target_langs)
            .flat_map(|(&n, &l)| std::iter::repeat_n(l, n))
            .collect();
        let lang_table = tape.param(self.ids.lang_embedding, s.get(self.ids.lang_embedding));
        let lang = tape.gather(lang_table, &lang_ids)?;
        let joined = tape.concat_cols(&[tok, lang])?;
        let w = tape.param(self.ids.dec_in_w, s.get(self.ids.dec_in_w));
        let b = tape.param(self.ids.dec_in_b, s.get(self.ids.dec_in_b));
        let x = tape.matmul(joined, w)?;
        let x = tape.add_row(x, b)?;
        let pe = tape.constant(self.packed_pe(&self.input_pe, &lens)?);
        let x = tape.add(x, pe)?;
        let mut h = pass.dropout(tape, x, &lens, cfg)?;

        for ids in &self.ids.decoder {
            let (g, b) = ids.ln_self.bind(tape, s);
            let x = tape.layer_norm(h, g, b, cfg.layer_norm_eps)?;
            let av = ids.self_attn.bind(tape, s);
            let (a, _) = attention(tape, &av, x, x, &lens, &lens, &AttnMask::Causal, cfg.num_heads)?;
            let a = pass.dropout(tape, a, &lens, cfg)?;
            let h1 = tape.add(h, a)?;

            let (g, b) = ids.ln_cross.bind(tape, s);
            let x = tape.layer_norm(h1, g, b, cfg.layer_norm_eps)?;
            let av = ids.cross_attn.bind(tape, s);
            let (c, _) = attention(
                tape,
                &av,
                x,
                encoder_output,
                &lens,
                source_lens,
                &AttnMask::None,
                cfg.num_heads,
            )?;
            let c = pass.dropout(tape, c, &lens, cfg)?;
            let h2 = tape.add(h1, c)?;

            h = self.feed_forward(tape, &ids.ln_ff, &ids.ff, h2, &lens, pass)?;
        }
        let (g, b) = self.ids.decoder_ln.bind(tape, s);
        tape.layer_norm(h, g, b, cfg.layer_norm_eps)
    }

    /// Logits `[T×vocab]` for one sentence pair.
    pub fn decoder_forward(
        &self,
        target_in: &[usize],
        source: &[usize],
        target_lang: usize,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &[source], pass)?;
        let logits = self.decode_batch(&mut tape, &[target_in], &[target_lang], enc.output, &enc.lens, pass)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean label-smoothed cross-entropy of a packed batch, recorded on `tape`.
    pub fn loss_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        examples: &[Example<'_>],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        if examples.is_empty() {
            return Err(invalid("empty batch"));
        }
        let sources: Vec<&[usize]> = examples.iter().map(|e| e.source).collect();
        let enc = self.encode_batch(tape, &sources, pass)?;
        let tin: Vec<&[usize]> = examples.iter().map(|e| e.target_in).collect();
        let langs: Vec<usize> = examples.iter().map(|e| e.target_lang).collect();
        let logits = self.decode_batch(tape, &tin, &langs, enc.output, &enc.lens, pass)?;
        let mut targets = Vec::new();
        for e in examples {
            if e.target_out.len() != e.target_in.len() {
                return Err(invalid("target input/output lengths differ"));
            }
            targets.extend_from_slice(e.target_out);
        }
        tape.cross_entropy(logits, &targets, self.config.label_smoothing, crate::data::PAD)
    }
}

/// One unpadded training pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub source: &'a [usize],
    pub target_in: &'a [usize],
    pub target_out: &'a [usize],
    pub target_lang: usize,
}

#[cfg(test)]
mod tests;
