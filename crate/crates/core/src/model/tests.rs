use super::*;
use crate::lexicon::TokenVocab;
use crate::numerics::{grad_check_params, grad_check_with};

fn vocab() -> TokenVocab {
    TokenVocab::new(&["a", "b", "c", "d"]).unwrap()
}

fn lexicon() -> SememeLexicon {
    SememeLexicon::from_entries(&vocab(), 3, [(2, vec![0, 1]), (3, vec![2]), (4, vec![])]).unwrap()
}

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        d_ffn: 16,
        dropout: 0.0,
        conv_kernel: 3,
        feature_dim: 4,
        vocab_size: 7,
        sememe_count: 3,
        mode,
        ..ModelConfig::default()
    }
}

fn model(mode: Mode, seed: u64) -> Model {
    Model::new(tiny(mode), lexicon(), seed).unwrap()
}

fn features(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random fixed weights so that gradient checks see a non-degenerate scalar.
fn probe(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let w = g.input(features(r, c, seed));
    let y = g.mul(x, w);
    g.sum(y)
}

#[test]
fn subsampled_length_examples() {
    assert_eq!(subsampled_length(67).unwrap(), 16);
    assert_eq!(subsampled_length(11).unwrap(), 2);
    assert_eq!(subsampled_length(7).unwrap(), 1);
    assert!(matches!(subsampled_length(6), Err(Error::TooShort { frames: 6, min: 7 })));
}

#[test]
fn encoder_shape_and_padding_invariance() {
    let m = model(Mode::Baseline, 1);
    for t in [7, 11, 20] {
        let x = features(t, 4, t as u64);
        let h = m.encode_features(&x).unwrap();
        assert_eq!(h.shape(), &[subsampled_length(t).unwrap(), 8]);
        let mut padded = x.data().to_vec();
        padded.extend(std::iter::repeat_n(0.0, 9 * 4));
        let padded = Tensor::matrix(t + 9, 4, padded).unwrap();
        let mut g = Graph::new(&m.params);
        let hp = m.encode(&mut g, &padded, t).unwrap();
        assert!(g.value(hp).max_abs_diff(&h) <= 1e-10);
    }
    assert!(m.encode_features(&features(6, 4, 0)).is_err());
}

#[test]
fn block_gradients() {
    for seed in 0..3 {
        let m = model(Mode::Baseline, seed);
        let x = features(5, 8, seed + 10);
        let h = features(4, 8, seed + 20);
        let enc = |g: &mut Graph<'_>, xi: Var| {
            let y = m.encoder_layer(g, 0, xi);
            probe(g, y, 99)
        };
        let dec = |g: &mut Graph<'_>, xi: Var| {
            let hv = g.input(h.clone());
            let y = m.decoder_layer(g, 0, xi, hv);
            probe(g, y, 98)
        };
        let enc_p = grad_check_params(&m.params, |g| {
            let xi = g.input(x.clone());
            enc(g, xi)
        }, 1e-5)
        .unwrap();
        let dec_p = grad_check_params(&m.params, |g| {
            let xi = g.input(x.clone());
            dec(g, xi)
        }, 1e-5)
        .unwrap();
        let enc_x = grad_check_with(&m.params, enc, &x, 1e-5).unwrap();
        let dec_x = grad_check_with(&m.params, dec, &x, 1e-5).unwrap();
        for err in [enc_p, dec_p, enc_x, dec_x] {
            assert!(err <= 1e-4, "{enc_p} {dec_p} {enc_x} {dec_x}");
        }
    }
}

#[test]
fn ctc_head_rows_are_distributions() {
    let m = model(Mode::Baseline, 2);
    let h = features(5, 8, 3);
    let lp = m.ctc_log_probs(&h);
    assert_eq!(lp.shape(), &[5, 7]);
    for r in 0..5 {
        let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-10);
    }
    let err = grad_check_params(
        &m.params,
        |g| {
            let hv = g.input(h.clone());
            let lp = m.ctc_head(g, hv);
            probe(g, lp, 4)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4);
}

#[test]
fn embeddings() {
    let m = model(Mode::Baseline, 3);
    let mut g = Graph::new(&m.params);
    let e = m.embed_tokens(&mut g, &[2, 5, 2]).unwrap();
    let t = g.value(e).clone();
    assert_eq!(t.shape(), &[3, 8]);
    assert_eq!(t.row(0), t.row(2));
    assert!(m.embed_tokens(&mut g, &[7]).is_err());
    let s = g.sum(e);
    let grads = g.backward(s);
    let table = grads.param(m.layout.embed).unwrap();
    for (row, chunk) in table.chunks(8).enumerate() {
        let touched = chunk.iter().any(|v| *v != 0.0);
        assert_eq!(touched, row == 2 || row == 5, "row {row}");
    }
}

#[test]
fn sememe_average_examples() {
    let cfg = ModelConfig {
        d_model: 2,
        heads: 1,
        ..tiny(Mode::Se)
    };
    let mut m = Model::new(cfg, lexicon(), 0).unwrap();
    let id = m.sememe_table().unwrap();
    m.params.get_mut(id).value = Tensor::matrix(3, 2, vec![3.0, 0.0, 0.0, 3.0, 7.0, -1.0]).unwrap();
    let mut g = Graph::new(&m.params);
    let c = m.sememe_avg(&mut g, &[2, 3, 4]).unwrap();
    assert_eq!(g.value(c).data(), &[1.5, 1.5, 7.0, -1.0, 0.0, 0.0]);
}

#[test]
fn enhancement_is_addition() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let e = g.input(Tensor::matrix(1, 2, vec![0.2, 0.3]).unwrap());
    let c = g.input(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
    let out = sememe_enhance(&mut g, e, c).unwrap();
    let v = g.value(out).data().to_vec();
    assert!((v[0] - 0.7).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    let zero = g.input(Tensor::zeros(&[1, 2]));
    let same = sememe_enhance(&mut g, e, zero).unwrap();
    assert_eq!(g.value(same).data(), &[0.2, 0.3]);
    let wrong = g.input(Tensor::zeros(&[2, 2]));
    assert!(sememe_enhance(&mut g, e, wrong).is_err());
    let w = g.input(Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
    let y = g.mul(out, w);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.wrt(c).unwrap(), grads.wrt(e).unwrap());
}

#[test]
fn sememe_encoder_shapes_and_gradients() {
    let wide = ModelConfig {
        d_model: 256,
        ..ModelConfig::default()
    };
    assert_eq!(wide.encoder_dims(), vec![512, 128, 256]);
    let bad = ModelConfig {
        sememe_encoder_dims: vec![16, 4],
        ..tiny(Mode::Sep)
    };
    assert!(matches!(Model::new(bad, lexicon(), 0), Err(Error::Config(_))));

    let m = model(Mode::Sep, 5);
    let e = features(3, 8, 6);
    let c = features(3, 8, 7);
    let mut g = Graph::new(&m.params);
    let (ev, cv) = (g.input(e.clone()), g.input(c.clone()));
    let out = m.sememe_encode(&mut g, ev, cv).unwrap();
    assert_eq!(g.value(out).shape(), &[3, 8]);
    let err = grad_check_params(
        &m.params,
        |g| {
            let (ev, cv) = (g.input(e.clone()), g.input(c.clone()));
            let out = m.sememe_encode(g, ev, cv).unwrap();
            probe(g, out, 8)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4);
}

#[test]
fn decoder_is_causal() {
    for mode in Mode::ALL {
        let m = model(mode, 9);
        let h = features(4, 8, 1);
        let a = m.decoder_outputs(&h, &[6, 2, 3, 4]).unwrap();
        let b = m.decoder_outputs(&h, &[6, 2, 5, 5]).unwrap();
        assert_eq!(a.logits.shape(), &[4, 7]);
        for i in 0..2 {
            for (x, y) in a.logits.row(i).iter().zip(b.logits.row(i)) {
                assert!((x - y).abs() <= 1e-12, "{mode} position {i}");
            }
        }
        assert!(m.decoder_outputs(&h, &[]).is_err());
        assert!(m.decoder_outputs(&h, &[2, 3]).is_err());
    }
}

#[test]
fn zero_head_predicts_one_half() {
    let mut m = model(Mode::Sp, 10);
    let (w, b) = m.sememe_head().unwrap();
    m.params.get_mut(w).value.data_mut().fill(0.0);
    m.params.get_mut(b).value.data_mut().fill(0.0);
    let out = m.decoder_outputs(&features(4, 8, 2), &[6, 2, 3]).unwrap();
    let p = out.sememe_probs.unwrap();
    assert_eq!(p.shape(), &[3, 3]);
    assert!(p.data().iter().all(|v| *v == 0.5));
}

#[test]
fn mode_equivalences() {
    let base = model(Mode::Baseline, 11);
    let h = features(5, 8, 3);
    let tokens = [6, 2, 3, 4, 5];
    let reference = base.decoder_outputs(&h, &tokens).unwrap().logits;

    let mut se = model(Mode::Se, 12);
    assert_eq!(se.transplant_from(&base), base.params.len());
    let table = se.sememe_table().unwrap();
    se.params.get_mut(table).value.data_mut().fill(0.0);
    let got = se.decoder_outputs(&h, &tokens).unwrap().logits;
    assert!(got.max_abs_diff(&reference) <= 1e-12);

    let mut sp = model(Mode::Sp, 13);
    sp.transplant_from(&base);
    let got = sp.decoder_outputs(&h, &tokens).unwrap().logits;
    assert!(got.max_abs_diff(&reference) <= 1e-12);
}

#[test]
fn parameter_counts() {
    let count = |mode, pred| {
        let cfg = ModelConfig {
            sememe_prediction: pred,
            ..tiny(mode)
        };
        Model::new(cfg, lexicon(), 0).unwrap().num_parameters()
    };
    let base = count(Mode::Baseline, false);
    for (mode, pred) in [(Mode::Sp, false), (Mode::Se, false), (Mode::Sep, false), (Mode::Sep, true)] {
        assert!(base < count(mode, pred));
    }
    let (d, s) = (8, 3);
    let stack = (2 * d * (d / 2) + d / 2) + ((d / 2) * d + d);
    assert_eq!(count(Mode::Sep, false) - base, stack + s * d);
    assert_eq!(count(Mode::Sp, false) - base, d * s + s);
    assert_eq!(count(Mode::Se, false) - base, s * d);
    assert_eq!(count(Mode::Sep, true) - count(Mode::Sep, false), d * s + s);
    let plain = Model::new(tiny(Mode::Baseline), SememeLexicon::empty(0, 0), 0).unwrap();
    assert!(plain.params.iter().all(|(_, p)| !p.name.starts_with("sememe")));
}

#[test]
fn forward_is_finite_for_bounded_inputs() {
    for mode in Mode::ALL {
        let m = model(mode, 14);
        let mut x = features(30, 4, 5);
        for v in x.data_mut() {
            *v *= 5.0;
        }
        let h = m.encode_features(&x).unwrap();
        assert!(h.is_finite());
        assert!(m.ctc_log_probs(&h).is_finite());
        let out = m.decoder_outputs(&h, &[6, 2, 3, 4, 5, 1]).unwrap();
        assert!(out.logits.is_finite() && out.g.is_finite());
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = model(Mode::Sep, 15);
    let bytes = m.to_checkpoint_bytes();
    let back = Model::from_checkpoint_bytes(&bytes, Some(&m.config), lexicon()).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), bytes);
    for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.max_abs_diff(&b.value) < 1e-6);
    }

    let other = ModelConfig {
        d_model: 16,
        ..m.config.clone()
    };
    match Model::from_checkpoint_bytes(&bytes, Some(&other), lexicon()) {
        Err(Error::Config(msg)) => assert!(msg.contains("d_model: expected 16, found 8"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match load_checkpoint(&path, None, lexicon()) {
        Err(Error::Load { path: p, .. }) => assert_eq!(p, path),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mode_parsing() {
    assert_eq!("sep".parse::<Mode>().unwrap(), Mode::Sep);
    assert!(matches!("viterbi".parse::<Mode>(), Err(Error::Config(_))));
}

