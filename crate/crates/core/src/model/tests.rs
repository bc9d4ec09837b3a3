use super::*;
use crate::data::{EOS, PAD};

fn cfg() -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 3,
        num_decoder_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 24,
        vocab_size: 20,
        num_languages: 3,
        max_positions: 16,
        ..Default::default()
    }
}

fn model(c: ModelConfig, seed: u64) -> TransformerModel<f64> {
    TransformerModel::new(c, SeedStream::new(seed)).unwrap()
}

/// Plain pre-norm layer written directly from the tape primitives:
/// `a = h + MHA(LN(h))`, `out = a + FF(LN(a))`.
fn reference_layer<'p>(
    m: &'p TransformerModel<f64>,
    tape: &mut Tape<'p, f64>,
    layer: usize,
    h: Var,
    lens: &[usize],
) -> Var {
    let s = m.params();
    let ids = m.ids().encoder[layer - 1];
    let eps = m.config().layer_norm_eps;
    let g = tape.param(ids.ln_attn.gain, s.get(ids.ln_attn.gain));
    let b = tape.param(ids.ln_attn.bias, s.get(ids.ln_attn.bias));
    let x = tape.layer_norm(h, g, b, eps).unwrap();
    let av = ids.attn.bind(tape, s);
    let (mha, _) = attention(tape, &av, x, x, lens, lens, &AttnMask::None, m.config().num_heads).unwrap();
    let a = tape.add(h, mha).unwrap();
    let g = tape.param(ids.ln_ff.gain, s.get(ids.ln_ff.gain));
    let b = tape.param(ids.ln_ff.bias, s.get(ids.ln_ff.bias));
    let y = tape.layer_norm(a, g, b, eps).unwrap();
    let w1 = tape.param(ids.ff.w1, s.get(ids.ff.w1));
    let b1 = tape.param(ids.ff.b1, s.get(ids.ff.b1));
    let w2 = tape.param(ids.ff.w2, s.get(ids.ff.w2));
    let b2 = tape.param(ids.ff.b2, s.get(ids.ff.b2));
    let y = tape.matmul(y, w1).unwrap();
    let y = tape.add_row(y, b1).unwrap();
    let y = tape.relu(y);
    let y = tape.matmul(y, w2).unwrap();
    let y = tape.add_row(y, b2).unwrap();
    tape.add(a, y).unwrap()
}

#[test]
fn unmodified_encoder_matches_reference_stack_bitwise() {
    let m = model(cfg(), 1);
    let src = [4usize, 9, 7, 3, EOS];
    let acts = m.encode(&src, &mut Pass::Eval).unwrap();

    let mut tape = Tape::new();
    let d = m.config().d_model;
    let table = m.params().get(m.ids().token_embedding);
    let mut emb = Tensor::zeros(&[src.len(), d]);
    let pe: Tensor<f64> = sinusoidal_encoding(src.len(), d, 10_000.0).unwrap();
    for (i, &t) in src.iter().enumerate() {
        for j in 0..d {
            emb.row_mut(i)[j] = table.at2(t, j) * (d as f64).sqrt() + pe.at2(i, j);
        }
    }
    assert_eq!(emb, acts.input);
    let mut h = tape.constant(emb);
    for l in 1..=3 {
        h = reference_layer(&m, &mut tape, l, h, &[src.len()]);
        assert_eq!(tape.value(h), &acts.layers[l - 1], "layer {l}");
    }
}

#[test]
fn modified_layer_differs_only_where_configured() {
    let base = model(cfg(), 1);
    let modified = model(ModelConfig { residual_removal_layer: Some(2), ..cfg() }, 1);
    let src = [5usize, 6, 7, 8, EOS];
    let a = base.encode(&src, &mut Pass::Eval).unwrap();
    let b = modified.encode(&src, &mut Pass::Eval).unwrap();
    assert_eq!(a.layers[0], b.layers[0]);
    assert!(a.layers[1].max_abs_diff(&b.layers[1]) > 1e-3);
}

#[test]
fn ablation_contrast_with_zero_value_projection() {
    for removal in [None, Some(1)] {
        let mut m = model(ModelConfig { residual_removal_layer: removal, ..cfg() }, 2);
        let ids = m.ids().encoder[0];
        for p in [ids.attn.wv, ids.attn.bv, ids.ff.w2, ids.ff.b2] {
            m.params_mut().get_mut(p).data_mut().fill(0.0);
        }
        for seed in 0..2u64 {
            let h = Tensor::from_fn(&[4, 16], |i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin());
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let (out, _) = m.encoder_layer(&mut tape, 1, hv, &[4], &mut Pass::Eval).unwrap();
            let out = tape.value(out);
            match removal {
                Some(_) => assert!(out.data().iter().all(|&v| v == 0.0)),
                None => assert_eq!(out, &h),
            }
        }
    }
}

#[test]
fn positional_query_layer_takes_queries_from_sinusoids() {
    let c = ModelConfig {
        residual_removal_layer: Some(1),
        position_query_enabled: true,
        ..cfg()
    };
    let m = model(c, 3);
    let ids = m.ids().encoder[0];
    let h = Tensor::from_fn(&[5, 16], |i| (i as f64 * 0.7).cos());
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let (_, w) = m.encoder_layer(&mut tape, 1, hv, &[5], &mut Pass::Eval).unwrap();
    let got: Vec<Tensor<f64>> = w.iter().map(|&v| tape.value(v).clone()).collect();

    let with_query = |positional: bool| {
        let mut tape = Tape::new();
        let s = m.params();
        let hv = tape.constant(h.clone());
        let g = tape.param(ids.ln_attn.gain, s.get(ids.ln_attn.gain));
        let b = tape.param(ids.ln_attn.bias, s.get(ids.ln_attn.bias));
        let x = tape.layer_norm(hv, g, b, 1e-5).unwrap();
        let q = if positional {
            tape.constant(sinusoidal_encoding(5, 16, 100.0).unwrap())
        } else {
            x
        };
        let av = ids.attn.bind(&mut tape, s);
        let (_, w) = attention(&mut tape, &av, q, x, &[5], &[5], &AttnMask::None, 2).unwrap();
        w.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    assert_eq!(got, with_query(true));
    assert_ne!(got, with_query(false));
}

#[test]
fn parameter_count_matches_closed_form() {
    for c in [
        cfg(),
        ModelConfig { lang_embed_dim: 5, ..cfg() },
        ModelConfig { num_encoder_layers: 5, num_decoder_layers: 1, ..cfg() },
    ] {
        let m = model(c.clone(), 0);
        assert_eq!(m.params().num_scalars(), c.parameter_count());
    }
}

#[test]
fn encode_shapes_determinism_and_non_degeneracy() {
    let m = model(cfg(), 4);
    let a = m.encode(&[4, 5, 6, EOS], &mut Pass::Eval).unwrap();
    assert_eq!(a.layers.len(), 3);
    assert!(a.layers.iter().all(|t| t.shape() == [4, 16]));
    assert_eq!(a.output.shape(), [4, 16]);
    assert_eq!(a.attention.len(), 3);
    assert_eq!(a.attention[0].len(), 2);
    let mut r1 = SeedStream::new(9).stream(purpose::DROPOUT, 0);
    let mut r2 = SeedStream::new(9).stream(purpose::DROPOUT, 0);
    let t1 = m.encode(&[4, 5, 6, EOS], &mut Pass::Train(&mut r1)).unwrap();
    let t2 = m.encode(&[4, 5, 6, EOS], &mut Pass::Train(&mut r2)).unwrap();
    assert_eq!(t1.output, t2.output);
    let b = m.encode(&[7, 8, 9, EOS], &mut Pass::Eval).unwrap();
    assert!(a.output.max_abs_diff(&b.output) > 1e-3);
    assert!(m.encode(&[], &mut Pass::Eval).is_err());
}

#[test]
fn decoder_is_causal_and_language_conditioned() {
    let m = model(cfg(), 5);
    let src = [4usize, 5, 6, EOS];
    let a = m.decoder_forward(&[3, 8, 9, 10], &src, 0, &mut Pass::Eval).unwrap();
    assert_eq!(a.shape(), [4, 20]);
    let b = m.decoder_forward(&[3, 8, 11, 12], &src, 0, &mut Pass::Eval).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
    let c = m.decoder_forward(&[3, 8, 9, 10], &src, 1, &mut Pass::Eval).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-6);
    assert!(m.decoder_forward(&[3, 8], &src, 3, &mut Pass::Eval).is_err());
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let c = ModelConfig { vocab_size: 200, d_model: 32, ..cfg() };
    let m = TransformerModel::<f32>::new(c, SeedStream::new(6)).unwrap();
    let srcs: Vec<Vec<usize>> = (0..8).map(|i| (0..6).map(|j| 10 + (i * 7 + j * 13) % 180).collect()).collect();
    let tin: Vec<Vec<usize>> = srcs.iter().map(|s| [&[3][..], &s[..5]].concat()).collect();
    let tout: Vec<Vec<usize>> = srcs.iter().map(|s| [&s[..5], &[EOS][..]].concat()).collect();
    let ex: Vec<Example> = (0..8)
        .map(|i| Example { source: &srcs[i], target_in: &tin[i], target_out: &tout[i], target_lang: 0 })
        .collect();
    let mut tape = Tape::new();
    let loss = m.loss_on_tape(&mut tape, &ex, &mut Pass::Eval).unwrap();
    let l = tape.value(loss).item() as f64;
    let ln_v = (200f64).ln();
    assert!((l - ln_v).abs() < 0.15 * ln_v, "loss {l} vs ln V {ln_v}");
    assert!(m.loss_on_tape(&mut Tape::new(), &[], &mut Pass::Eval).is_err());
}

#[test]
fn pad_row_is_excluded_from_loss() {
    let m = model(cfg(), 7);
    let src = [4usize, 5, EOS];
    let tin = [3usize, 6, 7];
    let mut tape = Tape::new();
    let full = m
        .loss_on_tape(&mut tape, &[Example { source: &src, target_in: &tin, target_out: &[6, 7, EOS], target_lang: 0 }], &mut Pass::Eval)
        .unwrap();
    let full = tape.value(full).item();
    let mut tape = Tape::new();
    let padded = m
        .loss_on_tape(&mut tape, &[Example { source: &src, target_in: &tin, target_out: &[6, 7, PAD], target_lang: 0 }], &mut Pass::Eval)
        .unwrap();
    assert_ne!(full, tape.value(padded).item());
}
