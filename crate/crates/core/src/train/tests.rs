use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tokenizer::{decode_sequence, UpMode};

fn tiny_model() -> DiTConfig {
    DiTConfig { depth: 1, width: 16, heads: 2, time_dim: 16, ..Default::default() }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        steps: 3,
        batch: 3,
        data: SyntheticSpec { height: 16, width: 16, size: 64, texture: 0.08 },
        norm_samples: 8,
        ..Default::default()
    }
}

#[test]
fn samples_are_reproducible() {
    let spec = SyntheticSpec::default();
    for index in [0, 5, 1234] {
        let a = generate_sample(&spec, 3, index);
        let b = generate_sample(&spec, 3, index);
        assert_eq!(a.image, b.image);
        assert_eq!(a.class_id, b.class_id);
        assert!(a.image.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert_ne!(generate_sample(&spec, 3, 0).image, generate_sample(&spec, 4, 0).image);
}

#[test]
fn classes_are_balanced() {
    let mut counts = [0usize; NUM_CLASSES];
    for i in 0..8000 {
        counts[class_of(11, i)] += 1;
    }
    for c in counts {
        assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
    }
}

/// Direct 2-D DFT magnitude of the luminance at integer frequency (ky, kx).
fn dft_mag(img: &Image<f64>, ky: usize, kx: usize) -> f64 {
    let (h, w) = (img.height, img.width);
    let (mut re, mut im) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let l = (0..3).map(|c| img.at(c, y, x)).sum::<f64>() / 3.0;
            let a = -2.0 * std::f64::consts::PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
            re += l * a.cos();
            im += l * a.sin();
        }
    }
    re.hypot(im)
}

#[test]
fn checkerboard_spectrum_peaks_at_its_frequency() {
    let spec = SyntheticSpec::default();
    for (class, seed) in [(SyntheticClass::Checker4, 1u64), (SyntheticClass::Checker8, 2)] {
        let f = class.frequency().unwrap();
        let img = render(&spec, class, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut best = (0.0, 0, 0);
        for ky in 0..spec.height {
            for kx in 0..spec.width {
                if ky == 0 && kx == 0 {
                    continue;
                }
                let m = dft_mag(&img, ky, kx);
                if m > best.0 {
                    best = (m, ky, kx);
                }
            }
        }
        let fold = |k: usize, n: usize| k.min(n - k);
        assert_eq!((fold(best.1, spec.height), fold(best.2, spec.width)), (f, f), "{class:?}");
    }
}

#[test]
fn saliency_is_normalized() {
    let s = generate_sample(&SyntheticSpec::default(), 0, 9);
    let max = s.saliency.values.iter().cloned().fold(0.0, f64::max);
    assert!((max - 1.0).abs() < 1e-12);
    assert!(s.saliency.values.iter().all(|&v| v >= 0.0));
}

#[test]
fn foveated_target_extremes() {
    let codec = CodecConfig::default();
    let s = generate_sample(&SyntheticSpec { height: 32, width: 32, ..Default::default() }, 0, 2);
    let norm = LatentNorm::identity(codec.channels());

    let ones = foveated_target(std::slice::from_ref(&s.image), &FoveationMask::all_ones(1, 8, 8).unwrap(), &codec, &norm).unwrap();
    assert_eq!(ones.tokens, codec.encode(std::slice::from_ref(&s.image)).unwrap().to_tokens());

    let zeros = foveated_target(std::slice::from_ref(&s.image), &FoveationMask::all_zeros(1, 8, 8).unwrap(), &codec, &norm).unwrap();
    let low = codec.encode_low(&[s.image.down2().unwrap()]).unwrap().to_tokens();
    assert_eq!(zeros.tokens, low);

    // decoding the all-LR target gives the bilinear upsampling of the downsampled image
    let out = decode_sequence(&codec, &zeros).unwrap().remove(0);
    let up = s.image.down2().unwrap().up2(UpMode::Bilinear);
    let mae = out.data.iter().zip(&up.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / up.data.len() as f64;
    assert!(mae < 1e-12);

    assert!(foveated_target(std::slice::from_ref(&s.image), &FoveationMask::all_ones(1, 4, 4).unwrap(), &codec, &norm).is_err());
}

#[test]
fn fitted_norm_whitens_latents() {
    let codec = CodecConfig::default();
    let spec = SyntheticSpec { height: 16, width: 16, ..Default::default() };
    let norm = fit_norm(&spec, &codec, 0, 32).unwrap();
    let mut all = Vec::new();
    for i in 0..32 {
        let s = generate_sample(&spec, 0, i);
        for mask in [FoveationMask::all_ones(1, 4, 4).unwrap(), FoveationMask::all_zeros(1, 4, 4).unwrap()] {
            all.push(foveated_target(std::slice::from_ref(&s.image), &mask, &codec, &norm).unwrap());
        }
    }
    let vals: Vec<f64> = all.iter().flat_map(|s| (0..s.len()).map(move |r| s.tokens.row(r)[0])).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 0.3 && (0.5..2.0).contains(&var), "mean {mean} var {var}");
}

#[test]
fn draw_mask_strategies() {
    let s = generate_sample(&SyntheticSpec::default(), 0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for strategy in [MaskStrategy::Randomized, MaskStrategy::Saliency, MaskStrategy::Bbox, MaskStrategy::None] {
        let config = TrainConfig { strategy, ..Default::default() };
        for _ in 0..20 {
            let m = draw_mask(&config, &s, 16, 16, &mut rng).unwrap();
            assert_eq!((m.frames(), m.height(), m.width()), (1, 16, 16));
            m.validate().unwrap();
            if strategy == MaskStrategy::None {
                assert!(m.is_all_ones());
            }
            if strategy == MaskStrategy::Bbox {
                assert!(m.bits().iter().any(|&b| b));
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { radius_min: 0.7, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { budget_min: 0.0, ..Default::default() }.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let trainer = Trainer::new(TrainConfig { steps: 0, ..tiny_train() }, tiny_model()).unwrap();
    let ck = trainer.checkpoint();
    let init = DiT::<f32>::new(tiny_model(), 0).unwrap();
    for (a, b) in ck.params.iter().zip(init.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(ck.meta.step, 0);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut trainer = Trainer::new(TrainConfig { lr: 0.0, ..tiny_train() }, tiny_model()).unwrap();
    let before = trainer.model.params.clone();
    let trace = trainer.run(|_, _, _| Ok(())).unwrap();
    assert_eq!(trace.len(), 3);
    assert!(trace.iter().all(|(_, l)| l.is_finite() && *l > 0.0));
    for (a, b) in trainer.model.params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let config = TrainConfig { steps: 4, strategy: MaskStrategy::Saliency, ..tiny_train() };
    let mut a = Trainer::new(config.clone(), tiny_model()).unwrap();
    let trace_a = a.run(|_, _, _| Ok(())).unwrap();

    let mut b = Trainer::new(TrainConfig { steps: 2, ..config.clone() }, tiny_model()).unwrap();
    let mut trace_b = b.run(|_, _, _| Ok(())).unwrap();
    let bytes = b.checkpoint().to_bytes().unwrap();
    let mut c = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), config).unwrap();
    assert_eq!(c.step, 2);
    trace_b.extend(c.run(|_, _, _| Ok(())).unwrap());

    assert_eq!(trace_a, trace_b);
    for (x, y) in a.model.params.iter().zip(c.model.params.iter()) {
        assert_eq!(x.value, y.value);
    }
    // training moved the parameters
    let init = DiT::<f32>::new(tiny_model(), 0).unwrap();
    assert!(a.model.params.iter().zip(init.params.iter()).any(|(x, y)| x.value != y.value));
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let mut trainer = Trainer::new(TrainConfig { steps: 2, ..tiny_train() }, tiny_model()).unwrap();
    trainer.run(|_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    trainer.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta, trainer.checkpoint().meta);
    let model = loaded.model().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = make_circle(4, 4, (2.0, 2.0), 1.2).unwrap();
    let s = generate_sample(&trainer.config.data, 0, 7);
    let z = foveated_target(&[s.image.cast::<f32>()], &mask, &trainer.model.config.codec, &trainer.norm).unwrap();
    let t: f64 = rng.gen();
    assert_eq!(trainer.model.forward(&z, t, 1).unwrap(), model.forward(&z, t, 1).unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let trainer = Trainer::new(TrainConfig { steps: 0, ..tiny_train() }, tiny_model()).unwrap();
    let bytes = trainer.checkpoint().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut trainer = Trainer::new(tiny_train(), tiny_model()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.ckpt");
    trainer.dump_path = Some(dump.clone());
    let id = trainer.model.params.find("out.b").unwrap();
    trainer.model.params.get_mut(id).value.data_mut()[0] = f32::NAN;
    let err = trainer.step_once().unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(trainer.step, 0);
    assert!(Checkpoint::load(&dump).is_ok());
}

#[test]
fn median_of_small_sets() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
}

#[test]
fn video_clips_masks_and_training() {
    let s = generate_sample(&SyntheticSpec { height: 16, width: 16, ..Default::default() }, 0, 3);
    let clip = pan_clip(&s.image, 3);
    assert_eq!(clip[0], s.image);
    assert_eq!(clip[2].at(1, 5, 7), s.image.at(1, 5, 3));
    assert_eq!(clip[1].at(0, 2, 0), s.image.at(0, 2, 14));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for strategy in [MaskStrategy::Randomized, MaskStrategy::Saliency, MaskStrategy::None] {
        let config = TrainConfig { strategy, frames: 4, ..Default::default() };
        let m = draw_mask(&config, &s, 8, 8, &mut rng).unwrap();
        assert_eq!((m.frames(), m.height(), m.width()), (4, 8, 8));
    }

    let config = TrainConfig { frames: 3, steps: 2, ..tiny_train() };
    let mut trainer = Trainer::new(config, tiny_model()).unwrap();
    let trace = trainer.run(|_, _, _| Ok(())).unwrap();
    assert!(trace.iter().all(|(_, l)| l.is_finite()));
}
