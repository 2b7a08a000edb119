use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{grad_check, GradCheckReport};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.get2(i, l) * b.get2(l, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);

    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
    assert_eq!(x.matmul(&y).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let got = a.matmul(&b).unwrap();
    assert!(got.max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&b), Err(crate::Error::Dimension { .. })));
}

#[test]
fn softmax_cases() {
    let z = Tensor::<f64>::zeros(&[1, 4]).softmax_rows();
    assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let s = Tensor::new(&[1, 2], vec![1000.0f64, 0.0]).unwrap().softmax_rows();
    assert!((s.data()[0] - 1.0).abs() <= 1e-12 && s.data()[1].abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 7]);
    let naive: Vec<f64> = {
        let e: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let t: f64 = e.iter().sum();
        e.iter().map(|v| v / t).collect()
    };
    let got = x.softmax_rows();
    for (a, b) in got.data().iter().zip(&naive) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_cases() {
    let ones = Tensor::<f64>::full(&[3], 1.0);
    let zeros = Tensor::<f64>::zeros(&[3]);
    let c = Tensor::new(&[1, 3], vec![2.5f64, 2.5, 2.5]).unwrap();
    assert!(c.layer_norm(&ones, &zeros, 1e-5).unwrap().data().iter().all(|v| *v == 0.0));

    let g = Tensor::<f64>::full(&[2], 1.0);
    let b = Tensor::<f64>::zeros(&[2]);
    let r = Tensor::new(&[1, 2], vec![1.0f64, -1.0]).unwrap();
    let out = r.layer_norm(&g, &b, 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out.data()[0] - expect).abs() < 1e-12 && (out.data()[1] + expect).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6]);
    let gain = rand_tensor(&mut rng, &[6]);
    let bias = rand_tensor(&mut rng, &[6]);
    let got = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    for r in 0..2 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for c in 0..6 {
            let want = (row[c] - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((got.get2(r, c) - want).abs() < 1e-12);
        }
    }
    // unit variance before affine
    let plain = x.layer_norm(&Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 0.0).unwrap();
    for r in 0..2 {
        let row = plain.row(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn backward_simple_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let p = store.add("p", rand_tensor(&mut rng, &[3, 4]));

    let mut g = Graph::new();
    let v = g.param(&store, p);
    let loss = g.sum(v);
    g.backward(loss, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|&x| x == 1.0));

    store.zero_grad();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    g.backward(loss, &mut store).unwrap();
    for (gr, val) in store.get(p).grad.data().iter().zip(store.get(p).value.data()) {
        assert_eq!(*gr, 2.0 * val);
    }
}

#[test]
fn backward_on_detached_or_nonscalar_is_usage_error() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::full(&[2], 1.0));
    let mut g = Graph::new();
    let c = g.input(Tensor::full(&[2], 3.0));
    let s = g.sum(c);
    assert!(matches!(g.backward(s, &mut store), Err(crate::Error::Usage(_))));
    let v = g.param(&store, p);
    assert!(matches!(g.backward(v, &mut store), Err(crate::Error::Usage(_))));
}

/// Builds `sum(op(params) * probe)` so every output coordinate contributes.
fn check_op<F>(shapes: &[&[usize]], seed: u64, op: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), rand_tensor(&mut rng, s)))
        .collect();
    let probe_seed = rng.gen::<u64>();
    let build = |st: &ParamStore<f64>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        let out = op(&mut g, &vars);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe = rand_tensor(&mut prng, g.value(out).shape());
        let pv = g.input(probe);
        let prod = g.mul(out, pv)?;
        let loss = g.sum(prod);
        Ok((g, loss))
    };
    let coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).value.numel()).map(move |i| (id, i)))
        .collect();
    grad_check(&mut store, &coords, 1e-5, 1e-3, build).unwrap()
}

fn assert_grad_ok(name: &str, r: GradCheckReport) {
    assert!(r.max_rel_err <= 1e-6, "{name}: max rel err {} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn gradcheck_every_primitive() {
    assert_grad_ok("matmul", check_op(&[&[3, 4], &[4, 2]], 10, |g, v| g.matmul(v[0], v[1]).unwrap()));
    assert_grad_ok("matmul_nt", check_op(&[&[3, 4], &[5, 4]], 11, |g, v| g.matmul_nt(v[0], v[1], 0.7).unwrap()));
    assert_grad_ok("add", check_op(&[&[3, 4], &[3, 4]], 12, |g, v| g.add(v[0], v[1]).unwrap()));
    assert_grad_ok("sub", check_op(&[&[3, 4], &[3, 4]], 13, |g, v| g.sub(v[0], v[1]).unwrap()));
    assert_grad_ok("mul", check_op(&[&[3, 4], &[3, 4]], 14, |g, v| g.mul(v[0], v[1]).unwrap()));
    assert_grad_ok("add_row", check_op(&[&[3, 4], &[4]], 15, |g, v| g.add_row(v[0], v[1]).unwrap()));
    assert_grad_ok("mul_row", check_op(&[&[3, 4], &[1, 4]], 16, |g, v| g.mul_row(v[0], v[1]).unwrap()));
    assert_grad_ok("scale", check_op(&[&[3, 4]], 17, |g, v| g.scale(v[0], -1.3)));
    assert_grad_ok("gelu", check_op(&[&[3, 4]], 18, |g, v| g.gelu(v[0])));
    assert_grad_ok("silu", check_op(&[&[3, 4]], 19, |g, v| g.silu(v[0])));
    assert_grad_ok("softmax", check_op(&[&[3, 5]], 20, |g, v| g.softmax_rows(v[0])));
    assert_grad_ok("layer_norm", check_op(&[&[3, 6]], 21, |g, v| g.layer_norm(v[0], 1e-5).unwrap()));
    assert_grad_ok(
        "layer_norm_affine",
        check_op(&[&[3, 6], &[6], &[6]], 22, |g, v| g.layer_norm_affine(v[0], v[1], v[2], 1e-5).unwrap()),
    );
    let idx: Arc<[usize]> = vec![2, 0, 2, 1].into();
    let i2 = idx.clone();
    assert_grad_ok("gather", check_op(&[&[3, 4]], 23, move |g, v| g.gather_rows(v[0], i2.clone()).unwrap()));
    let sidx: Arc<[usize]> = vec![4, 0, 2].into();
    assert_grad_ok("scatter", check_op(&[&[3, 4]], 24, move |g, v| g.scatter_rows(v[0], sidx.clone(), 5).unwrap()));
    assert_grad_ok("slice_cols", check_op(&[&[3, 6]], 25, |g, v| g.slice_cols(v[0], 2, 3).unwrap()));
    assert_grad_ok("concat_cols", check_op(&[&[3, 2], &[3, 4]], 26, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()));
    let angles: Vec<f64> = (0..3 * 2).map(|i| 0.37 * i as f64 - 0.9).collect();
    let table = Arc::new(RopeTable::from_angles(3, 2, &angles));
    assert_grad_ok("rope", check_op(&[&[3, 8]], 27, move |g, v| g.rope(v[0], table.clone()).unwrap()));
    assert_grad_ok("sum", check_op(&[&[3, 4]], 28, |g, v| g.sum(v[0])));
    assert_grad_ok("mean", check_op(&[&[3, 4]], 29, |g, v| g.mean(v[0])));
    assert_grad_ok("mse", check_op(&[&[3, 4], &[3, 4]], 30, |g, v| g.mse(v[0], v[1]).unwrap()));
}

#[test]
fn adam_moves_against_gradient() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let mut opt = Adam::new(AdamConfig::default(), &store);
    store.get_mut(p).grad = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
    opt.update(&mut store);
    // first bias-corrected step has magnitude ~lr
    let v = store.get(p).value.data();
    assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9 && (v[1] - (-1.0 + 1e-3)).abs() < 1e-9);

    let mut opt0 = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
    let before = store.get(p).value.clone();
    opt0.update(&mut store);
    assert_eq!(store.get(p).value, before);
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-scale..scale));
            let s = x.softmax_rows();
            for r in 0..rows {
                let row = s.row(r);
                let t: f64 = row.iter().sum();
                prop_assert!((t - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn matmul_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::from_fn(&[7, 9], |_| rng.gen_range(-1.0..1.0));
            let b = Tensor::<f32>::from_fn(&[9, 5], |_| rng.gen_range(-1.0..1.0));
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
