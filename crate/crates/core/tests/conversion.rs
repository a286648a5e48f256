use clvc_autograd::gradcheck::check_params;
use clvc_autograd::{Graph, Matrix};
use clvc_core::conversion::{ConversionConfig, ConversionItem, ConversionModel, EncoderStates};
use clvc_core::speaker::SpeakerEmbedding;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> ConversionConfig {
    ConversionConfig {
        content_dim: 5,
        encoder_conv_layers: 1,
        encoder_kernel: 3,
        encoder_dim: 4,
        speaker_dim: 3,
        attention_dim: 4,
        location_filters: 2,
        location_kernel: 3,
        prenet_dims: vec![4, 4],
        attention_rnn_dim: 5,
        decoder_dim: 5,
        postnet_layers: 2,
        postnet_dim: 4,
        postnet_kernel: 3,
        mel_dim: 4,
        window_left: 2,
        window_right: 2,
        ..Default::default()
    }
}

fn speaker(dim: usize, seed: u64) -> SpeakerEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpeakerEmbedding::from_unnormalized((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::uniform(rows, cols, 1.0, &mut rng)
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    random(1, n, seed).into_vec()
}

#[test]
fn gradients_match_finite_differences() {
    let mut model = ConversionModel::new(micro(), 21).unwrap();
    // Move zero-initialized biases off ReLU kinks.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for id in model.store.ids() {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let batch = vec![
        ConversionItem {
            content: random(6, 5, 1),
            speaker: speaker(3, 2),
            target: random(6, 4, 3),
        },
        ConversionItem {
            content: random(4, 5, 4),
            speaker: speaker(3, 5),
            target: random(4, 4, 6),
        },
    ];
    let loss = |store: &clvc_autograd::ParamStore| {
        let mut g = Graph::new();
        let (l, _, _) = model.batch_loss(&mut g, store, &batch, 9).unwrap();
        (g.scalar(l), g.backward(l).param_grads(store))
    };
    let (_, analytic) = loss(&model.store);
    let report = check_params(&model.store, &analytic, 1e-5, 1e-6, |s| loss(s).0);
    assert!(report.checked > 500);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn param(model: &ConversionModel, name: &str) -> Matrix {
    model.store.by_name(name).unwrap().clone()
}

/// Full-length location-sensitive energies, masked to the window, softmaxed.
fn brute_force_attention(
    model: &ConversionModel,
    query: &[f64],
    states: &Matrix,
    center: usize,
    prev: &[f64],
    cum: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = &model.config;
    let t = states.rows();
    let affine = |x: &[f64], w: &Matrix, b: &Matrix| -> Vec<f64> {
        (0..w.cols())
            .map(|o| b.get(0, o) + x.iter().enumerate().map(|(i, v)| v * w.get(i, o)).sum::<f64>())
            .collect()
    };
    let q = affine(query, &param(model, "cm/att/query/w"), &param(model, "cm/att/query/b"));
    let (lw, lb) = (param(model, "cm/att/loc_conv/w"), param(model, "cm/att/loc_conv/b"));
    let (dw, db) = (param(model, "cm/att/loc_dense/w"), param(model, "cm/att/loc_dense/b"));
    let (mw, mb) = (param(model, "cm/att/memory/w"), param(model, "cm/att/memory/b"));
    let (vw, vb) = (param(model, "cm/att/v/w"), param(model, "cm/att/v/b"));
    let k = c.location_kernel;
    let lo = center as isize - c.window_left as isize;
    let hi = (center + c.window_right) as isize;
    let mut energies = vec![f64::NEG_INFINITY; t];
    for (j, e) in energies.iter_mut().enumerate() {
        if (j as isize) < lo || (j as isize) > hi {
            continue;
        }
        let mut taps = vec![0.0; 2 * k];
        for tap in 0..k {
            let src = j as isize + tap as isize - (k / 2) as isize;
            if src >= 0 && (src as usize) < t {
                taps[2 * tap] = prev[src as usize];
                taps[2 * tap + 1] = cum[src as usize];
            }
        }
        let filt = affine(&taps, &lw, &lb);
        let loc = affine(&filt, &dw, &db);
        let key = affine(states.row(j), &mw, &mb);
        let act: Vec<f64> = (0..c.attention_dim).map(|a| (q[a] + key[a] + loc[a]).tanh()).collect();
        *e = affine(&act, &vw, &vb)[0];
    }
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let weights: Vec<f64> = exp.iter().map(|e| e / z).collect();
    let context = (0..states.cols())
        .map(|col| (0..t).map(|j| weights[j] * states.get(j, col)).sum())
        .collect();
    (weights, context)
}

#[test]
fn windowed_attention_matches_masked_softmax() {
    let model = ConversionModel::new(micro(), 31).unwrap();
    let t = 11;
    let states = EncoderStates {
        values: random(t, 7, 32),
        encoder_dim: 4,
    };
    let prev: Vec<f64> = random_vec(t, 33).iter().map(|v| v.abs()).collect();
    let cum: Vec<f64> = random_vec(t, 34).iter().map(|v| v.abs() * 3.0).collect();
    for center in [0, 1, 5, 9, 10] {
        let query = random_vec(5, 40 + center as u64);
        let (context, alignment) = model.local_attention_step(&query, &states, center, &prev, &cum).unwrap();
        let (weights, expected) = brute_force_attention(&model, &query, &states.values, center, &prev, &cum);
        let full = alignment.full(t);
        for j in 0..t {
            assert!((full[j] - weights[j]).abs() < 1e-12, "center {center} j {j}");
        }
        for (a, b) in context.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(alignment.violations(2, 2), 0);
    }
}

#[test]
fn rows_outside_window_do_not_affect_context() {
    let model = ConversionModel::new(micro(), 41).unwrap();
    let t = 12;
    let base = random(t, 7, 42);
    let prev = vec![0.0; t];
    let cum = vec![0.0; t];
    let query = random_vec(5, 43);
    let center = 6;
    let (context, _) = model
        .local_attention_step(&query, &EncoderStates { values: base.clone(), encoder_dim: 4 }, center, &prev, &cum)
        .unwrap();
    for j in (0..t).filter(|&j| j + 2 < center || j > center + 2) {
        let mut perturbed = base.clone();
        for v in perturbed.row_mut(j) {
            *v += 10.0;
        }
        let states = EncoderStates { values: perturbed, encoder_dim: 4 };
        let (other, _) = model.local_attention_step(&query, &states, center, &prev, &cum).unwrap();
        assert_eq!(context, other, "row {j}");
    }
    let mut inside = base.clone();
    inside.row_mut(center + 1)[0] += 1.0;
    let states = EncoderStates { values: inside, encoder_dim: 4 };
    let (other, _) = model.local_attention_step(&query, &states, center, &prev, &cum).unwrap();
    assert_ne!(context, other);
}

#[test]
fn output_length_equals_input_length() {
    let mut cfg = micro();
    cfg.window_left = 30;
    cfg.window_right = 30;
    let model = ConversionModel::new(cfg, 51).unwrap();
    for t in [1, 2, 29, 30, 31, 61, 62, 977] {
        let out = model.convert(&random(t, 5, t as u64), &speaker(3, 52), 0).unwrap();
        assert_eq!(out.mel.values.shape(), (t, 4));
        assert_eq!(out.alignments.len(), t);
        assert!(out.alignments.iter().all(|a| a.violations(30, 30) == 0));
        assert!(out.mel.values.all_finite());
    }
}

#[test]
fn conversion_is_deterministic_and_speaker_dependent() {
    let model = ConversionModel::new(micro(), 61).unwrap();
    let x = random(8, 5, 62);
    let a = model.convert(&x, &speaker(3, 63), 7).unwrap();
    let b = model.convert(&x, &speaker(3, 63), 7).unwrap();
    let c = model.convert(&x, &speaker(3, 64), 7).unwrap();
    assert_eq!(a.mel.values, b.mel.values);
    assert!(a.mel.values.max_abs_diff(&c.mel.values) > 1e-9);
}

#[test]
fn training_reduces_loss() {
    let mut cfg = micro();
    cfg.learning_rate = 1e-2;
    let mut model = ConversionModel::new(cfg, 71).unwrap();
    let batch = vec![ConversionItem {
        content: random(10, 5, 72),
        speaker: speaker(3, 73),
        target: random(10, 4, 74),
    }];
    let mut opt = model.optimizer();
    let (first_pre, first_post) = model.train_step(&batch, &mut opt, 0, 1).unwrap();
    let mut last = (0.0, 0.0);
    for step in 1..150 {
        last = model.train_step(&batch, &mut opt, step, 1).unwrap();
    }
    assert!(last.0 < 0.5 * first_pre && last.1 < 0.5 * first_post, "{first_pre} {first_post} {last:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alignments_stay_in_window(t in 1usize..40, seed in 0u64..1000) {
        let mut cfg = micro();
        cfg.window_left = 3;
        cfg.window_right = 5;
        let model = ConversionModel::new(cfg, seed).unwrap();
        let out = model.convert(&random(t, 5, seed + 1), &speaker(3, seed + 2), seed).unwrap();
        prop_assert_eq!(out.mel.values.rows(), t);
        for (i, a) in out.alignments.iter().enumerate() {
            prop_assert_eq!(a.center, i);
            prop_assert_eq!(a.violations(3, 5), 0);
            prop_assert!(a.start + 3 >= i && a.end() <= (i + 6).min(t));
        }
    }
}
