use clvc_autograd::gradcheck::check_params;
use clvc_autograd::{Graph, Matrix, ParamStore};
use clvc_core::audio::AudioClip;
use clvc_core::features::{FeatureConfig, FrontEnd};
use clvc_core::vocoder::{griffin_lim_trace, output_length, FlowConfig, FlowVocoder, VocoderItem};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> FlowConfig {
    FlowConfig {
        n_flows: 3,
        squeeze_group: 8,
        hidden: 6,
        kernel: 3,
        cond_dim: 3,
        mel_dim: 4,
        hop: 8,
        win: 8,
        ..Default::default()
    }
}

/// Random flow whose couplings are not the identity.
fn jittered(cfg: FlowConfig, seed: u64, scale: f64) -> FlowVocoder {
    let mut model = FlowVocoder::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    model
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_mel(frames: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::uniform(frames, dim, 1.0, &mut rng)
}

#[test]
fn log_det_matches_dense_jacobian() {
    for seed in 0..5 {
        let model = jittered(micro(), seed, 0.3);
        let runner = model.runner::<f64>().unwrap();
        let mel = random_mel(2, 4, seed + 100);
        let x = random_vec(16, seed + 200);
        let code = runner.forward(&x, &mel).unwrap();
        let eps = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(16, 16);
        for j in 0..16 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += eps;
            minus[j] -= eps;
            let zp = runner.forward(&plus, &mel).unwrap().z;
            let zm = runner.forward(&minus, &mel).unwrap().z;
            for i in 0..16 {
                jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * eps);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let rel = (numeric - code.log_det).abs() / code.log_det.abs().max(1e-3);
        assert!(rel < 1e-5, "seed {seed}: {numeric} vs {}", code.log_det);
    }
}

#[test]
fn graph_nll_agrees_with_runner() {
    let model = jittered(micro(), 7, 0.3);
    let item = VocoderItem {
        audio: random_vec(32, 8),
        mel: random_mel(4, 4, 9),
    };
    let code = model.runner::<f64>().unwrap().forward(&item.audio, &item.mel).unwrap();
    let n = 32.0;
    let sigma = 0.8;
    let quad: f64 = code.z.iter().map(|z| z * z).sum::<f64>() * 0.5 / (sigma * sigma);
    let expected = (quad + 0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - code.log_det) / n;
    assert!((model.nll(&item, sigma).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn round_trip_in_both_precisions() {
    let model = jittered(micro(), 11, 0.3);
    let mel = random_mel(12, 4, 12);
    let x = random_vec(96, 13);

    let r64 = model.runner::<f64>().unwrap();
    let back = r64.inverse(&r64.forward(&x, &mel).unwrap().z, &mel).unwrap();
    let err64 = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err64 < 1e-9, "{err64}");

    let r32 = model.runner::<f32>().unwrap();
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let back = r32.inverse(&r32.forward(&x32, &mel).unwrap().z, &mel).unwrap();
    let err32 = x32.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err32 < 1e-4, "{err32}");
}

#[test]
fn gradients_match_finite_differences() {
    let model = jittered(micro(), 21, 0.2);
    let batch = vec![
        VocoderItem {
            audio: random_vec(16, 22),
            mel: random_mel(2, 4, 23),
        },
        VocoderItem {
            audio: random_vec(24, 24),
            mel: random_mel(3, 4, 25),
        },
    ];
    let loss = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = model.batch_nll(&mut g, store, &batch).unwrap();
        (g.scalar(l), g.backward(l).param_grads(store))
    };
    let (_, analytic) = loss(&model.store);
    let report = check_params(&model.store, &analytic, 1e-5, 1e-6, |s| loss(s).0);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn zero_sigma_synthesis_is_deterministic() {
    let model = jittered(micro(), 31, 0.3);
    let mel = clvc_core::features::MelSpectrogram {
        values: random_mel(5, 4, 32),
    };
    let a = model.synthesize(&mel, 0.0, 1, 8000).unwrap();
    let b = model.synthesize(&mel, 0.0, 99, 8000).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.len(), output_length(5, 8, 8));
    let c = model.synthesize(&mel, 0.6, 1, 8000).unwrap();
    let d = model.synthesize(&mel, 0.6, 1, 8000).unwrap();
    assert_eq!(c.samples, d.samples);
    assert_ne!(a.samples, c.samples);
}

#[test]
fn griffin_lim_converges_on_a_harmonic_signal() {
    let cfg = FeatureConfig::default();
    let fe = FrontEnd::new(&cfg).unwrap();
    let sr = cfg.sample_rate as f64;
    let samples: Vec<f64> = (0..7200)
        .map(|i| {
            let t = i as f64 / sr;
            let f0 = 140.0 + 30.0 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
            (1..6).map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.2
        })
        .collect();
    let mel = fe.mel_spectrogram(&AudioClip::new(samples, cfg.sample_rate).unwrap()).unwrap();
    let (clip, trace) = griffin_lim_trace(&mel, &cfg, 30).unwrap();
    assert_eq!(clip.len(), output_length(mel.num_frames(), 768, 240));
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6), "{trace:?}");
    }
    assert!(trace[trace.len() - 1] < trace[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_flows_are_bijective(seed in 0u64..10_000, rows in 1usize..12) {
        let model = jittered(micro(), seed, 0.5);
        let runner = model.runner::<f64>().unwrap();
        let frames = rows;
        let mel = random_mel(frames, 4, seed + 1);
        let x = random_vec(rows * 8, seed + 2);
        let code = runner.forward(&x, &mel).unwrap();
        prop_assert_eq!(code.z.len(), x.len());
        prop_assert!(code.log_det.is_finite());
        let back = runner.inverse(&code.z, &mel).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
