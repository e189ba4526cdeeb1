use ndarray::{Array1, Array2};
use proptest::prelude::*;
use supica::rng::{standard_normal, stream};
use supica::supervision::{
    feature_map, loss_and_grads, FeatureMap, FeatureMapConfig, ModelKind, SupervisedTargetModel,
};

/// O(w²) real DFT power per window, no FFT involved.
fn naive_spectrogram(s: &[f64], cfg: &FeatureMapConfig) -> Vec<f64> {
    let w = cfg.window;
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= s.len() {
        for k in 0..=w / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in s[start..start + w].iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let p = re * re + im * im;
            out.push(if cfg.log_power {
                (p + cfg.log_eps).ln()
            } else {
                p
            });
        }
        start += cfg.hop;
    }
    out
}

fn random_signal(t: usize, seed: u64) -> Array1<f64> {
    let mut rng = stream(seed);
    (0..t).map(|_| standard_normal::<f64>(&mut rng)).collect()
}

#[test]
fn matches_naive_dft_at_32_16_8() {
    let cfg = FeatureMapConfig {
        window: 16,
        hop: 8,
        ..FeatureMapConfig::default()
    };
    let s = random_signal(32, 3);
    let phi = feature_map(s.view(), &cfg).unwrap();
    assert_eq!(phi.len(), 27);
    let oracle = naive_spectrogram(s.as_slice().unwrap(), &cfg);
    for (a, b) in phi.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn log_power_matches_naive_dft() {
    let cfg = FeatureMapConfig {
        window: 16,
        hop: 8,
        log_power: true,
        log_eps: 1e-6,
    };
    let s = random_signal(48, 4);
    let phi = feature_map(s.view(), &cfg).unwrap();
    let oracle = naive_spectrogram(s.as_slice().unwrap(), &cfg);
    assert_eq!(phi.len(), oracle.len());
    for (a, b) in phi.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn odd_window_keeps_floor_half_bins() {
    let cfg = FeatureMapConfig {
        window: 7,
        hop: 3,
        ..FeatureMapConfig::default()
    };
    let s = random_signal(20, 5);
    let phi = feature_map(s.view(), &cfg).unwrap();
    assert_eq!(phi.len(), 5 * 4);
    let oracle = naive_spectrogram(s.as_slice().unwrap(), &cfg);
    for (a, b) in phi.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn classification_gradients_match_finite_differences() {
    let cfg = FeatureMapConfig {
        window: 8,
        hop: 4,
        log_power: true,
        log_eps: 1e-6,
    };
    let t = 24;
    let fmap = FeatureMap::<f64>::new(cfg, t).unwrap();
    let mut rng = stream(12);
    let theta = Array2::from_shape_fn((3, fmap.dim()), |_| 0.1 * standard_normal::<f64>(&mut rng));
    let model =
        SupervisedTargetModel::new(ModelKind::SoftmaxClassification { n_classes: 3 }, theta)
            .unwrap();
    let s = random_signal(t, 13);
    let g = loss_and_grads(&model, s.view(), 2.0, &fmap).unwrap();
    let h = 1e-6;
    for j in 0..t {
        let mut up = s.clone();
        let mut dn = s.clone();
        up[j] += h;
        dn[j] -= h;
        let fd = (loss_and_grads(&model, up.view(), 2.0, &fmap).unwrap().loss
            - loss_and_grads(&model, dn.view(), 2.0, &fmap).unwrap().loss)
            / (2.0 * h);
        assert!((fd - g.grad_s[j]).abs() <= 1e-5 * g.grad_s[j].abs().max(1e-2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fft_agrees_with_naive_dft(
        window in 2usize..20,
        hop in 1usize..10,
        extra in 0usize..30,
        seed in any::<u64>(),
    ) {
        let cfg = FeatureMapConfig { window, hop, ..FeatureMapConfig::default() };
        let s = random_signal(window + extra, seed);
        let phi = feature_map(s.view(), &cfg).unwrap();
        prop_assert_eq!(phi.len(), cfg.dim(s.len()));
        let oracle = naive_spectrogram(s.as_slice().unwrap(), &cfg);
        for (a, b) in phi.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
