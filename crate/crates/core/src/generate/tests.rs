use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mask::make_circle;
use crate::model::DiTConfig;
use crate::train::{CheckpointMeta, TrainConfig};

fn small() -> DiTConfig {
    DiTConfig { depth: 2, width: 16, heads: 2, time_dim: 16, ..Default::default() }
}

fn checkpoint(model: &DiT<f32>) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            model: model.config.clone(),
            norm: LatentNorm { mean: vec![0.1; 48], std: vec![0.5; 48] },
            train: TrainConfig::default(),
            step: 0,
        },
        params: model.params.clone(),
        moments: None,
    }
}

fn random_model(seed: u64) -> DiT<f32> {
    let mut m = DiT::new(small(), seed).unwrap();
    m.randomize(seed + 100, 0.2);
    m
}

#[test]
fn zero_velocity_sampling_decodes_the_noise() {
    let model = DiT::<f32>::new(small(), 0).unwrap();
    let ck = checkpoint(&model);
    let mask = make_circle(6, 6, (3.0, 3.0), 1.5).unwrap();
    let config = SampleConfig { steps: 7, seed: 3, class_id: 2 };
    let out = sample(&ck, &mask, &config).unwrap();

    let layout = Arc::new(TokenLayout::new(&mask).unwrap());
    let noise = initial_noise::<f32>(layout.len(), 48, 3);
    let expected = decode_latent(&small().codec, &ck.meta.norm, &FoveatedSequence::new(layout, noise).unwrap()).unwrap();
    assert_eq!(out, expected);
    assert_eq!((out[0].height, out[0].width), (24, 24));
}

#[test]
fn constant_velocity_is_integrated_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Tensor::<f64>::from_fn(&[13, 5], |_| rng.gen_range(-2.0..2.0));
    let z1 = Tensor::<f64>::from_fn(&[13, 5], |_| rng.gen_range(-2.0..2.0));
    let v = Tensor::from_fn(&[13, 5], |i| z1.data()[i] - z0.data()[i]);
    for steps in [1, 2, 3, 7, 50, 333] {
        let mut calls = Vec::new();
        let out = euler(z1.clone(), steps, |_, t| {
            calls.push(t);
            Ok(v.clone())
        })
        .unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-12, "{steps} steps");
        assert_eq!(calls.len(), steps);
        assert_eq!(calls[0], 1.0);
        assert!((calls[steps - 1] - 1.0 / steps as f64).abs() < 1e-15);
    }
    assert!(euler(z1.clone(), 0, |_, _| Ok(v.clone())).is_err());
    assert!(euler(z1, 2, |_, _| Ok(Tensor::zeros(&[1, 5]))).is_err());
}

#[test]
fn all_ones_mask_matches_full_resolution_path() {
    let ck = checkpoint(&random_model(2));
    let config = SampleConfig { steps: 6, seed: 9, class_id: 5 };
    let a = sample(&ck, &FoveationMask::all_ones(1, 6, 8).unwrap(), &config).unwrap();
    let b = sample_full(&ck, 1, 6, 8, &config).unwrap();
    assert_eq!(a, b);
    assert!(a[0].data.iter().all(|v| v.is_finite()));
}

#[test]
fn sampling_is_deterministic_and_seeded() {
    let ck = checkpoint(&random_model(3));
    let mask = make_circle(8, 8, (2.0, 5.0), 2.5).unwrap();
    let config = SampleConfig { steps: 5, seed: 4, class_id: 1 };
    let a = sample(&ck, &mask, &config).unwrap();
    assert_eq!(a, sample(&ck, &mask, &config).unwrap());
    // naive and foveated share everything but the checkpoint
    assert_eq!(a, sample_naive(&ck, &mask, &config).unwrap());
    assert_ne!(a, sample(&ck, &mask, &SampleConfig { seed: 5, ..config.clone() }).unwrap());
    let other = checkpoint(&random_model(4));
    assert_ne!(a, sample_naive(&other, &mask, &config).unwrap());
}

#[test]
fn sampling_rejects_bad_configs() {
    let ck = checkpoint(&random_model(5));
    let mask = FoveationMask::all_ones(1, 4, 4).unwrap();
    assert!(sample(&ck, &mask, &SampleConfig { steps: 0, ..Default::default() }).is_err());
    assert!(sample(&ck, &mask, &SampleConfig { class_id: 8, ..Default::default() }).is_err());
    let mut bad = ck.clone();
    bad.meta.norm = LatentNorm::identity(12);
    assert!(sample(&bad, &mask, &SampleConfig::default()).is_err());
}

fn smooth(h: usize, w: usize) -> Image<f64> {
    Image::from_fn(h, w, |c, y, x| 0.3 * ((y as f64 * 0.2).sin() + (x as f64 * 0.15 + c as f64).cos()) - 0.1)
}

#[test]
fn psnr_closed_forms() {
    let a = smooth(16, 16);
    let mask = make_circle(4, 4, (2.0, 2.0), 1.2).unwrap();
    let r = evaluate_pair(&a, &a, &mask).unwrap();
    assert_eq!(r.psnr_down, PSNR_CAP);
    assert_eq!(r.seam_a, r.seam_b);
    let b = Image::from_fn(16, 16, |c, y, x| a.at(c, y, x) + 0.1);
    let r = evaluate_pair(&a, &b, &mask).unwrap();
    assert!((r.psnr_down - 20.0 * (2.0f64 / 0.1).log10()).abs() < 1e-9, "{}", r.psnr_down);
    assert!(evaluate_pair(&a, &smooth(16, 8), &mask).is_err());
}

#[test]
fn seam_energy_detects_boundary_steps() {
    let mask = make_circle(8, 8, (4.0, 4.0), 2.5).unwrap();
    let inside = pixel_mask(&mask, 0, 4);
    let base = smooth(32, 32);
    let stepped = Image::from_fn(32, 32, |c, y, x| base.at(c, y, x) + if inside[y * 32 + x] { 0.5 } else { 0.0 });
    let s0 = seam_energy(&base, &mask).unwrap();
    let s1 = seam_energy(&stepped, &mask).unwrap();
    assert!(s1 > s0 + 0.4, "{s0} {s1}");
    assert!(s0.abs() < 0.05);
    // no boundary, no seam
    assert_eq!(seam_energy(&stepped, &FoveationMask::all_ones(1, 8, 8).unwrap()).unwrap(), 0.0);
    assert!(seam_energy(&base, &FoveationMask::all_ones(1, 8, 6).unwrap()).is_err());
}

#[test]
fn seam_energy_is_mirror_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let img = Image::from_fn(32, 32, |_, _, _| rng.gen_range(-1.0..1.0));
        let mask = make_circle(8, 8, (rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)), rng.gen_range(1.0..4.0)).unwrap();
        let a = seam_energy(&img, &mask).unwrap();
        let b = seam_energy(&img.flip_horizontal(), &mask.flip_horizontal()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
