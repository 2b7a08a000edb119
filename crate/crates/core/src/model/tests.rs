use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mask::FoveationMask;
use crate::tokenizer::TokenClass;

fn small() -> DiTConfig {
    DiTConfig { depth: 2, width: 16, heads: 2, time_dim: 16, ..Default::default() }
}

fn random_mask(rng: &mut ChaCha8Rng, f: usize, h: usize, w: usize) -> FoveationMask {
    let p: f64 = rng.gen();
    let blocks: Vec<bool> = (0..f * (h / 2) * (w / 2)).map(|_| rng.gen_bool(p)).collect();
    FoveationMask::from_blocks(f, h, w, |t, by, bx| blocks[(t * (h / 2) + by) * (w / 2) + bx]).unwrap()
}

fn random_seq(rng: &mut ChaCha8Rng, mask: &FoveationMask, c: usize) -> FoveatedSequence<f64> {
    let layout = Arc::new(TokenLayout::new(mask).unwrap());
    let tokens = Tensor::from_fn(&[layout.len(), c], |_| rng.gen_range(-2.0..2.0));
    FoveatedSequence::new(layout, tokens).unwrap()
}

#[test]
fn untrained_model_outputs_zero_with_matching_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = DiT::<f64>::new(small(), 7).unwrap();
    for _ in 0..50 {
        let (h, w) = [(4, 4), (6, 8), (8, 8)][rng.gen_range(0..3)];
        let f = rng.gen_range(1..3);
        let mask = random_mask(&mut rng, f, h, w);
        let z = random_seq(&mut rng, &mask, 48);
        let v = model.forward(&z, rng.gen(), rng.gen_range(0..8)).unwrap();
        assert_eq!(v.tokens.shape(), z.tokens.shape());
        assert!(v.tokens.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = DiT::<f64>::new(small(), 7).unwrap();
    let mask = FoveationMask::all_ones(1, 4, 4).unwrap();
    let z = random_seq(&mut rng, &mask, 48);
    assert!(matches!(model.forward(&z, 0.5, 8), Err(Error::Validation(_))));
    assert!(model.forward(&z, 1.5, 0).is_err());
    let mut bad = z.clone();
    bad.tokens.data_mut()[3] = f64::NAN;
    assert!(matches!(model.forward(&bad, 0.5, 0), Err(Error::NonFinite(_))));
    assert!(DiT::<f64>::new(DiTConfig { width: 15, ..small() }, 0).is_err());
}

#[test]
fn permuting_lr_tokens_permutes_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = DiT::<f64>::new(small(), 7).unwrap();
    model.randomize(11, 0.3);
    for _ in 0..5 {
        let mask = random_mask(&mut rng, 1, 8, 8);
        let z = random_seq(&mut rng, &mask, 48);
        let layout = &z.layout;
        // reverse the order of the LR entries, leave HR entries in place
        let lr = layout.lr_indices();
        let mut perm: Vec<usize> = (0..layout.len()).collect();
        for (slot, &src) in lr.iter().zip(lr.iter().rev()) {
            perm[*slot] = src;
        }
        let permuted = Arc::new(layout.permuted(&perm).unwrap());
        let rows: Vec<f64> = perm.iter().flat_map(|&p| z.tokens.row(p).to_vec()).collect();
        let zp = FoveatedSequence::new(permuted, Tensor::new(&[layout.len(), 48], rows).unwrap()).unwrap();

        let a = model.forward(&z, 0.4, 3).unwrap();
        let b = model.forward(&zp, 0.4, 3).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in b.tokens.row(i).iter().zip(a.tokens.row(p)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        assert!(zp.layout.entries().iter().zip(layout.entries()).all(|(x, y)| x.class == y.class));
        assert!(layout.entries().iter().any(|e| e.class == TokenClass::Lr) || lr.is_empty());
    }
}

#[test]
fn interpolation_endpoints_and_untrained_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = random_mask(&mut rng, 1, 6, 6);
    let z0 = random_seq(&mut rng, &mask, 48);
    let noise = Tensor::from_fn(z0.tokens.shape(), |_| rng.gen_range(-1.0..1.0));
    let (zt, target) = interpolate(&z0.tokens, &noise, 0.0);
    assert_eq!(zt, z0.tokens);
    let (zt, _) = interpolate(&z0.tokens, &noise, 1.0);
    assert_eq!(zt, noise);

    let model = DiT::<f64>::new(small(), 7).unwrap();
    let direct: f64 = z0
        .tokens
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, n)| (n - a) * (n - a))
        .sum::<f64>()
        / noise.numel() as f64;
    for t in [0.0, 0.3, 1.0] {
        let l = model.loss(&z0, &noise, t, 2).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }
    assert_eq!(target.data()[0], noise.data()[0] - z0.tokens.data()[0]);
    assert!(model.loss(&z0, &Tensor::zeros(&[1, 48]), 0.5, 0).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = DiT::<f32>::new(small(), 9).unwrap();
    model.randomize(2, 0.3);
    let mask = random_mask(&mut rng, 1, 8, 8);
    let z = random_seq(&mut rng, &mask, 48);
    let z32 = FoveatedSequence::new(z.layout.clone(), z.tokens.cast::<f32>()).unwrap();
    let a = model.forward(&z32, 0.7, 1).unwrap();
    let b = model.forward(&z32, 0.7, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(DiT::<f32>::new(small(), 9).unwrap().params.iter().count(), model.params.len());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = DiTConfig { depth: 1, width: 8, heads: 2, time_dim: 8, ..Default::default() };
    let mask = random_mask(&mut rng, 1, 4, 4);
    let report = check_loss_gradient(cfg, &mask, 40, 1e-5, 3).unwrap();
    assert_eq!(report.checked, 40);
    assert!(report.max_rel_err <= 1e-5, "{report:?}");
}

#[test]
fn from_params_validates_names_and_shapes() {
    let model = DiT::<f32>::new(small(), 1).unwrap();
    let again = DiT::from_params(small(), model.params.clone()).unwrap();
    assert_eq!(again.params.len(), model.params.len());
    assert!(DiT::from_params(DiTConfig { depth: 3, ..small() }, model.params.clone()).is_err());
}
