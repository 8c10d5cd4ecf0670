mod common;

use lfn_core::pipeline::{forward_on_tape, module_parameter_counts, parameter_count, Stage};
use lfn_core::{build_pyramid, forward, Error, ImagePair, ModelConfig, ModelWeights, Tape, Tensor};

fn pair(h: usize, w: usize, seed: u64) -> ImagePair<f32> {
    let mut r = common::rng(seed);
    let a = Tensor::random_uniform(&[3, h, w], 0.0, 1.0, &mut r);
    let b = Tensor::random_uniform(&[3, h, w], 0.0, 1.0, &mut r);
    ImagePair::new(a, b).unwrap()
}

/// `k·k·in·out + out`, counted by hand.
fn conv(k: usize, i: usize, o: usize) -> usize {
    k * k * i * o + o
}

#[test]
fn level_five_shape_walk() {
    let cfg = ModelConfig::default();
    let weights = ModelWeights::<f32>::init(&cfg);
    let mut tape = Tape::new();
    forward_on_tape(&mut tape, &weights, &cfg, &pair(64, 96, 1), Stage::full()).unwrap();
    let shape = |name: &str| tape.shape(tape.labeled(name).unwrap_or_else(|| panic!("no {name}"))).to_vec();
    assert_eq!(shape("conv5"), [128, 4, 6]);
    assert_eq!(shape("upconv5_M"), [2, 4, 6]);
    assert_eq!(shape("f-warp5_M"), [128, 4, 6]);
    assert_eq!(shape("corr5_M"), [49, 4, 6]);
    assert_eq!(shape("flow5_M"), [2, 4, 6]);
    assert_eq!(shape("concat5_S"), [258, 4, 6]);
    assert_eq!(shape("flow5_S"), [2, 4, 6]);
    assert_eq!(shape("concat5_R"), [131, 4, 6]);
    assert_eq!(shape("conv5_dist_R"), [9, 4, 6]);
    assert_eq!(shape("softmax5_R"), [9, 4, 6]);
    assert_eq!(shape("flow5_R"), [2, 4, 6]);
    assert_eq!(shape("flow1"), [2, 64, 96]);
}

#[test]
fn finer_levels_use_their_own_windows() {
    let cfg = ModelConfig::default().with_width_scale(0.25);
    let weights = ModelWeights::<f32>::init(&cfg);
    let mut tape = Tape::new();
    forward_on_tape(&mut tape, &weights, &cfg, &pair(64, 64, 2), Stage::full()).unwrap();
    let shape = |name: &str| tape.shape(tape.labeled(name).unwrap()).to_vec();
    assert_eq!(shape("corr3_M"), [49, 16, 16]);
    assert_eq!(shape("corr2_M"), [49, 32, 32]);
    assert_eq!(shape("conv4_dist_R"), [25, 8, 8]);
    assert_eq!(shape("conv2_dist_R"), [49, 32, 32]);
}

#[test]
fn encoder_parameters_match_a_hand_count() {
    let counts = module_parameter_counts(&ModelConfig::default());
    let netc = conv(7, 3, 32)
        + conv(3, 32, 32) * 3
        + conv(3, 32, 64)
        + conv(3, 64, 64)
        + conv(3, 64, 96)
        + conv(3, 96, 96)
        + conv(3, 96, 128)
        + conv(3, 128, 192);
    assert_eq!(netc, 558_432);
    assert_eq!(counts[0], ("NetC".to_string(), netc));
}

#[test]
fn total_parameters_are_near_the_reference_size() {
    let cfg = ModelConfig::default();
    let feat = [32, 32, 64, 96, 128, 192];
    let mut total = 558_432;
    for (i, level) in [6usize, 5, 4, 3, 2].into_iter().enumerate() {
        let k = [3, 3, 5, 5, 7][i];
        let f = feat[level - 1];
        let m = conv(3, 49, 128) + conv(3, 128, 64) + conv(3, 64, 32) + conv(k, 32, 2);
        let up = if level < 6 { 2 * 2 * 16 } else { 0 };
        let s = conv(3, 2 * f + 2, 128) + conv(3, 128, 64) + conv(3, 64, 32) + conv(k, 32, 2);
        let r = conv(3, f + 3, 128)
            + conv(3, 128, 128)
            + conv(3, 128, 64)
            + conv(3, 64, 64)
            + conv(3, 64, 32)
            + conv(3, 32, 32)
            + conv(k, 32, k * k);
        total += m + up + s + r;
    }
    let weights = ModelWeights::<f32>::init(&cfg);
    assert_eq!(parameter_count(&weights), total);
    assert_eq!(module_parameter_counts(&cfg).iter().map(|(_, n)| n).sum::<usize>(), total);
    let reference = 5.37e6;
    assert!((total as f64 - reference).abs() <= 0.15 * reference, "{total}");
}

#[test]
fn narrower_models_have_fewer_parameters() {
    let full = parameter_count(&ModelWeights::<f32>::init(&ModelConfig::default()));
    let half = parameter_count(&ModelWeights::<f32>::init(&ModelConfig::default().with_width_scale(0.5)));
    assert!(half * 3 < full);
}

#[test]
fn pyramid_halves_at_every_level() {
    let cfg = ModelConfig::default().with_width_scale(0.25);
    let weights = ModelWeights::<f32>::init(&cfg);
    for (h, w) in [(64, 64), (96, 64), (128, 160)] {
        let image = Tensor::random_uniform(&[3, h, w], 0.0, 1.0, &mut common::rng(3));
        let pyr = build_pyramid(&image, &weights, &cfg).unwrap();
        let channels = [8, 8, 16, 24, 32, 48];
        for k in 1..=6 {
            assert_eq!(pyr.level(k).shape(), &[channels[k - 1], h >> (k - 1), w >> (k - 1)]);
        }
    }
}

#[test]
fn extents_must_be_multiples_of_32() {
    let image = Tensor::<f32>::zeros(&[3, 48, 64]);
    let err = ImagePair::new(image.clone(), image).unwrap_err();
    assert!(matches!(err, Error::InvalidShape { .. }));
    assert!(err.to_string().contains("pad"));
    let gray = Tensor::<f32>::zeros(&[1, 64, 64]);
    assert!(ImagePair::new(gray.clone(), gray).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::default().with_width_scale(0.25);
    let a = ModelWeights::<f32>::init(&cfg);
    let b = ModelWeights::<f32>::init(&cfg);
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
    let p = pair(64, 64, 4);
    let one = forward(&p, &a, &cfg).unwrap();
    let two = forward(&p, &b, &cfg).unwrap();
    assert_eq!(one.flow.tensor(), two.flow.tensor());
    assert!(one.flow.tensor().data().iter().all(|v| v.is_finite()));
}

#[test]
fn different_seeds_give_different_weights() {
    let cfg = ModelConfig { seed: 9, ..ModelConfig::default().with_width_scale(0.25) };
    let a = ModelWeights::<f32>::init(&cfg);
    let b = ModelWeights::<f32>::init(&ModelConfig { seed: 10, ..cfg.clone() });
    assert_ne!(a.get("conv3_1.weight").unwrap(), b.get("conv3_1.weight").unwrap());
}

#[test]
fn weights_are_validated_against_the_config() {
    let cfg = ModelConfig::default().with_width_scale(0.25);
    let mut w = ModelWeights::<f32>::init(&cfg);
    w.validate(&cfg).unwrap();
    w.insert("conv6.weight", Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(w.validate(&cfg), Err(Error::WeightShape { .. })));
    let mut extra = ModelWeights::<f32>::init(&cfg);
    extra.insert("conv9.weight", Tensor::zeros(&[1]));
    assert!(matches!(extra.validate(&cfg), Err(Error::UnexpectedWeight(_))));
    assert!(ModelWeights::<f32>::new().validate(&cfg).is_err());
}

#[test]
fn copy_level_transfers_only_matching_shapes() {
    let cfg = ModelConfig::default().with_width_scale(0.25);
    let mut w = ModelWeights::<f32>::init(&cfg);
    let copied = w.copy_level(6, 5);
    // Level 5 matching and the hidden R layers share shapes with level 6;
    // the S input width depends on the feature channels.
    assert!(copied.contains(&"conv5_1_M.weight".to_string()));
    assert!(!copied.contains(&"conv5_1_S.weight".to_string()));
    assert_eq!(w.get("conv5_2_R.weight").unwrap(), w.get("conv6_2_R.weight").unwrap());
    assert!(copied.iter().all(|n| n.contains('5')));
}
