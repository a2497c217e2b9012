use super::*;
use crate::lexicon::TokenVocab;
use crate::model::Mode;
use rand::Rng;

fn vocab() -> TokenVocab {
    TokenVocab::new(&["a", "b", "c", "d"]).unwrap()
}

fn lexicon() -> SememeLexicon {
    SememeLexicon::from_entries(&vocab(), 3, [(2, vec![0, 1]), (3, vec![2]), (4, vec![1])]).unwrap()
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

fn quiet() -> TrainConfig {
    TrainConfig {
        warmup: 4,
        epochs: 2,
        batch_size: 4,
        average_k: 2,
        augment: AugmentPolicy::disabled(),
        ..TrainConfig::desk()
    }
}

fn utterances(n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=3);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(2..=5)).collect();
            let frames = 28 + rng.random_range(0..8);
            let data = (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            Utterance {
                id: format!("u{i}"),
                features: Tensor::matrix(frames, 4, data).unwrap(),
                tokens,
                domain: "src".into(),
            }
        })
        .collect()
}

#[test]
fn schedule_examples() {
    let (base, w) = (0.002, 25_000);
    assert_eq!(lr_schedule(w / 4, base, w), base / 4.0);
    assert_eq!(lr_schedule(w, base, w), base);
    assert_eq!(lr_schedule(4 * w, base, w), base / 2.0);
}

#[test]
fn schedule_shape() {
    let w = 500;
    for s in 1..w {
        assert!(lr_schedule(s, 1.0, w) < lr_schedule(s + 1, 1.0, w));
    }
    for s in w..5 * w {
        assert!(lr_schedule(s, 1.0, w) > lr_schedule(s + 1, 1.0, w));
    }
    let left = lr_schedule(w - 1, 1.0, w);
    let right = lr_schedule(w + 1, 1.0, w);
    assert!((1.0 - left) < 3.0 / w as f64 && (1.0 - right) < 3.0 / w as f64);
}

fn store_with_grads(grads: &[&[f64]]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, g) in grads.iter().enumerate() {
        let id = s.add(format!("p{i}"), Tensor::zeros(&[g.len()]), true);
        s.get_mut(id).grad = Tensor::vector(g.to_vec());
    }
    s
}

#[test]
fn clip_examples() {
    let mut s = store_with_grads(&[&[6.0], &[8.0]]);
    assert_eq!(clip_gradients(&mut s, 5.0).unwrap(), 0.5);
    assert_eq!(s.grad_norm(), 5.0);
    let mut s = store_with_grads(&[&[3.0]]);
    assert_eq!(clip_gradients(&mut s, 5.0).unwrap(), 1.0);
    let mut s = store_with_grads(&[&[3.0, 4.0]]);
    assert_eq!(clip_gradients(&mut s, 5.0).unwrap(), 1.0);
    assert_eq!(s.grad_norm(), 5.0);
    let mut s = store_with_grads(&[&[1.0], &[f64::NAN]]);
    let err = clip_gradients(&mut s, 5.0).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("p1")), "{err}");
}

#[test]
fn adam_examples() {
    let mut s = store_with_grads(&[&[1.0]]);
    let mut adam = Adam::new(&s, AdamConfig::default());
    adam.step(&mut s, 0.1);
    let p = s.value(s.find("p0").unwrap()).item();
    assert!((p + 0.1 / (1.0 + 1e-9)).abs() < 1e-15, "{p}");

    let mut s = store_with_grads(&[&[0.0, 0.0]]);
    let mut adam = Adam::new(&s, AdamConfig::default());
    adam.step(&mut s, 0.1);
    assert!(s.value(s.find("p0").unwrap()).data().iter().all(|v| *v == 0.0));

    let mut s = store_with_grads(&[&[-2.0]]);
    let mut adam = Adam::new(&s, AdamConfig::default());
    let mut last = 0.0;
    for _ in 0..2 {
        adam.step(&mut s, 0.1);
        let p = s.value(s.find("p0").unwrap()).item();
        assert!(p > last);
        last = p;
    }
}

#[test]
fn paper_profile_values() {
    let p = TrainConfig::paper();
    assert_eq!((p.lr, p.warmup, p.clip, p.accumulation), (0.002, 25_000, 5.0, 4));
    assert_eq!((p.epochs, p.batch_size, p.average_k), (240, 12, 30));
    assert_eq!((p.lambda, p.alpha, p.label_smoothing), (0.3, 0.3, 0.1));
    assert_eq!(Profile::Paper.model_config().dropout, 0.1);
    let d = TrainConfig::desk();
    assert_eq!((d.lambda, d.alpha, d.label_smoothing), (p.lambda, p.alpha, p.label_smoothing));
    assert_eq!((d.batch_size, d.warmup, d.epochs, d.average_k), (8, 500, 20, 5));
    let m = Profile::Desk.model_config();
    assert_eq!((m.d_model, m.encoder_blocks, m.decoder_blocks, m.heads, m.d_ffn), (64, 2, 2, 4, 256));
    assert!("laptop".parse::<Profile>().is_err());
    assert!(TrainConfig { warmup: 0, ..d.clone() }.validate().is_err());
    assert!(TrainConfig { lambda: 1.5, ..d }.validate().is_err());
}

#[test]
fn lambda_one_leaves_decoder_untouched() {
    for mode in [Mode::Baseline, Mode::Sp, Mode::Sep] {
        let mut mc = tiny(mode);
        mc.sememe_prediction = mode == Mode::Sep;
        let model = Model::new(mc, lexicon(), 3).unwrap();
        let cfg = TrainConfig { lambda: 1.0, ..quiet() };
        let u = &utterances(1, 4)[0];
        let mut g = Graph::new(&model.params);
        let (root, b) = utterance_objective(&model, &mut g, &u.features, &u.tokens, &cfg).unwrap();
        assert!(b.aed > 0.0);
        let grads = g.backward(root);
        for (id, p) in model.params.iter() {
            let gr = grads.param(id).unwrap_or(&[]);
            let zero = gr.iter().all(|v| *v == 0.0);
            if p.name.starts_with("dec.") || p.name.starts_with("sememe.") {
                assert!(zero, "{} has gradient", p.name);
            }
            if p.name == "ctc.w" || p.name.starts_with("enc.sub1") {
                assert!(!zero, "{} lacks gradient", p.name);
            }
        }
    }
}

fn flat(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn accumulation_matches_concatenated_batch() {
    let utts = utterances(8, 7);
    let refs: Vec<&Utterance> = utts.iter().collect();
    let model = Model::new(tiny(Mode::Sp), lexicon(), 5).unwrap();
    let before = flat(&model.params);

    let mut one = Trainer::new(model.clone(), TrainConfig { accumulation: 1, batch_size: 8, ..quiet() }).unwrap();
    one.optimizer_step(&[refs.clone()], 1).unwrap();
    let mut four = Trainer::new(model, TrainConfig { accumulation: 4, batch_size: 2, ..quiet() }).unwrap();
    let micro: Vec<Vec<&Utterance>> = refs.chunks(2).map(<[_]>::to_vec).collect();
    four.optimizer_step(&micro, 1).unwrap();

    let (a, b) = (flat(&one.model.params), flat(&four.model.params));
    let da: Vec<f64> = a.iter().zip(&before).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b.iter().zip(&before).map(|(x, y)| x - y).collect();
    let diff = da.iter().zip(&db).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = da.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    assert!(diff / norm <= 1e-6, "relative difference {}", diff / norm);
}

#[test]
fn runs_are_deterministic() {
    let utts = utterances(12, 9);
    let cfg = TrainConfig {
        augment: AugmentPolicy {
            enabled: true,
            freq_masks: 1,
            max_freq_width: 1,
            time_masks: 1,
            max_time_width: 2,
        },
        ..quiet()
    };
    let mut mc = tiny(Mode::Sp);
    mc.dropout = 0.1;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&mc, &cfg, &DecodeConfig::default(), lexicon(), &utts[..8], &utts[8..], dir.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.last_step, 4);
        std::fs::read(&out.metrics_path).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    let text = String::from_utf8(first).unwrap();
    let recs: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    match recs[0] {
        MetricsRecord::Step(s) => {
            assert_eq!(s.step, 1);
            assert!(s.se > 0.0 && s.ctc > 0.0 && s.aed > 0.0);
        }
        MetricsRecord::Epoch(_) => panic!("first record should be a step"),
    }
    assert!(matches!(recs[2], MetricsRecord::Epoch(EpochMetrics { epoch: 1, step: 2, .. })));
}

#[test]
fn baseline_logs_zero_sememe_loss() {
    let utts = utterances(6, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, ..quiet() };
    let out = train(&tiny(Mode::Baseline), &cfg, &DecodeConfig::default(), lexicon(), &utts[..4], &utts[4..], dir.path())
        .unwrap();
    for r in read_metrics(&out.metrics_path).unwrap() {
        if let MetricsRecord::Step(s) = r {
            assert_eq!(s.se, 0.0);
        }
    }
}

#[test]
fn divergence_halts_with_checkpoint_reference() {
    let utts = utterances(6, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr: 1e300, warmup: 1, clip: 1e300, epochs: 3, ..quiet() };
    let err = train(&tiny(Mode::Baseline), &cfg, &DecodeConfig::default(), lexicon(), &utts[..4], &utts[4..], dir.path())
        .unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("last good checkpoint")), "{err}");
}

fn ckpt(dir: &Path, name: &str, fill: f64, epoch: usize, dev_loss: f64) -> CheckpointRecord {
    let mut m = Model::new(tiny(Mode::Baseline), lexicon(), 1).unwrap();
    for p in m.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let path = dir.join(name);
    save_checkpoint(&m, &path).unwrap();
    CheckpointRecord {
        epoch,
        step: epoch as u64,
        dev_loss,
        dev_cer: 0.0,
        path,
    }
}

#[test]
fn averaging_examples() {
    let dir = tempfile::tempdir().unwrap();
    let mc = tiny(Mode::Baseline);
    let a = ckpt(dir.path(), "a", 0.0, 1, 2.0);
    let b = ckpt(dir.path(), "b", 2.0, 2, 1.0);
    let c = ckpt(dir.path(), "c", 100.0, 3, 9.0);
    let avg = average_checkpoints(&[a.clone(), b.clone(), c.clone()], 2, &mc, &lexicon()).unwrap();
    assert!(avg.params.iter().all(|(_, p)| p.value.data().iter().all(|v| *v == 1.0)));
    let all = average_checkpoints(&[a.clone(), b.clone()], 30, &mc, &lexicon()).unwrap();
    assert!(all.params.iter().all(|(_, p)| p.value.data().iter().all(|v| *v == 1.0)));

    let trained = Model::new(mc.clone(), lexicon(), 4).unwrap();
    let path = dir.path().join("t");
    save_checkpoint(&trained, &path).unwrap();
    let reference = load_checkpoint(&path, Some(&mc), lexicon()).unwrap();
    let copies: Vec<CheckpointRecord> = (1..=3)
        .map(|e| CheckpointRecord {
            epoch: e,
            step: 0,
            dev_loss: 1.0,
            dev_cer: 0.0,
            path: path.clone(),
        })
        .collect();
    let avg = average_checkpoints(&copies, 3, &mc, &lexicon()).unwrap();
    assert_eq!(avg.to_checkpoint_bytes(), reference.to_checkpoint_bytes());

    std::fs::write(&c.path, b"ASRM garbage").unwrap();
    let err = average_checkpoints(&[c], 1, &mc, &lexicon()).unwrap_err();
    assert!(matches!(&err, Error::Load { path, .. } if path.ends_with("c")), "{err}");
    assert!(average_checkpoints(&[], 1, &mc, &lexicon()).is_err());
}
