use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::max_rel_error;
use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted(v: Var<'_>, rng_seed: u64) -> Var<'_> {
    // Random linear functional so that every output element matters.
    let shape = v.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = v
        .graph()
        .constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    v.mul(w).sum()
}

const TOL: f64 = 1e-5;

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let err = max_rel_error(&[x, w, b], move |_, v| {
            weighted(conv2d(v[0], v[1], Some(v[2]), stride, pad), 7)
        });
        assert!(err < TOL, "stride {stride} pad {pad} k {k}: {err}");
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[1, 2, 5, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let out = conv2d_forward(&x, &w, None, 2, 1);
    assert_eq!(out.shape(), &[1, 3, 3, 2]);
    for co in 0..3 {
        for oi in 0..3 {
            for oj in 0..2 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let ii = (oi * 2 + ki) as isize - 1;
                            let jj = (oj * 2 + kj) as isize - 1;
                            if (0..5).contains(&ii) && (0..4).contains(&jj) {
                                s += x.data()[(ci * 5 + ii as usize) * 4 + jj as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                assert!((out.data()[(co * 3 + oi) * 2 + oj] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let g = rand_tensor(&[2], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let err = max_rel_error(&[x.clone(), g.clone(), b.clone()], |_, v| {
        weighted(batch_norm_train(v[0], v[1], v[2], 1e-5).0, 11)
    });
    assert!(err < TOL, "train: {err}");
    let err = max_rel_error(&[x, g, b], |gr, v| {
        let m = gr.constant(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
        let s = gr.constant(Tensor::new(&[2], vec![0.5, 2.0]).unwrap());
        weighted(batch_norm_eval(v[0], v[1], v[2], m, s, 1e-5), 12)
    });
    assert!(err < TOL, "eval: {err}");
}

#[test]
fn layer_norm_and_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let g = rand_tensor(&[4], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let err = max_rel_error(&[x.clone(), g, b], |_, v| {
        weighted(layer_norm(v[0], v[1], v[2], 1e-5), 13)
    });
    assert!(err < TOL, "layer_norm: {err}");
    let w = rand_tensor(&[5, 4], &mut rng);
    let bb = rand_tensor(&[5], &mut rng);
    let err = max_rel_error(&[x, w, bb], |_, v| weighted(linear(v[0], v[1], v[2]), 14));
    assert!(err < TOL, "linear: {err}");
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
    assert!(
        max_rel_error(std::slice::from_ref(&x), |_, v| weighted(
            max_pool2(v[0]),
            15
        )) < TOL
    );
    assert!(
        max_rel_error(std::slice::from_ref(&x), |_, v| weighted(
            avg_pool2(v[0]),
            16
        )) < TOL
    );
    assert!(max_rel_error(&[x], |_, v| weighted(global_avg_pool(v[0]), 17)) < TOL);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 3], &mut rng);
    let pos = Tensor::from_fn(&[2, 3], |i| 0.1 + 0.13 * i as f64);
    assert!(
        max_rel_error(&[a.clone(), b.clone()], |_, v| weighted(
            v[0].mul(v[1]).add(v[0]).sub(v[1]),
            18
        )) < TOL
    );
    assert!(
        max_rel_error(std::slice::from_ref(&a), |_, v| weighted(
            v[0].sigmoid(),
            19
        )) < TOL
    );
    assert!(max_rel_error(std::slice::from_ref(&a), |_, v| weighted(v[0].gelu(), 20)) < TOL);
    assert!(max_rel_error(std::slice::from_ref(&a), |_, v| weighted(v[0].relu(), 21)) < TOL);
    assert!(max_rel_error(std::slice::from_ref(&pos), |_, v| v[0].powf(0.5).mean()) < TOL);
    assert!(max_rel_error(&[pos], |_, v| v[0].powf(2.0).sum().scale(3.0)) < TOL);
    assert!(max_rel_error(&[a], |_, v| weighted(v[0].reshape(&[3, 2]), 22)) < TOL);
}

#[test]
fn resize_and_channel_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[2, 2, 3, 2], &mut rng);
    assert!(
        max_rel_error(std::slice::from_ref(&x), |_, v| weighted(
            resize_bilinear(v[0], 7, 5),
            23
        )) < TOL
    );
    let y = rand_tensor(&[2, 3, 3, 2], &mut rng);
    assert!(
        max_rel_error(&[x.clone(), y], |_, v| weighted(
            concat_channels(&[v[0], v[1]]),
            24
        )) < TOL
    );
    let picks = vec![vec![1, 0], vec![1, 1]];
    assert!(
        max_rel_error(std::slice::from_ref(&x), move |_, v| weighted(
            gather_channels(v[0], &picks),
            25
        )) < TOL
    );
    let m = rand_tensor(&[2, 1, 3, 2], &mut rng);
    assert!(
        max_rel_error(&[x.clone(), m], |_, v| weighted(
            mul_channel_mask(v[0], v[1]),
            26
        )) < TOL
    );
    assert!(max_rel_error(&[x], |_, v| squared_variation_sum(v[0])) < TOL);
}

#[test]
fn cross_entropy_gradient_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = rand_tensor(&[3, 4], &mut rng);
    assert!(max_rel_error(&[l], |_, v| cross_entropy(v[0], &[0, 3, 1])) < TOL);
    let g = Graph::inference();
    let logits = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let ce = cross_entropy(logits, &[0]).value().item();
    assert!((ce - 2.407_605_964_444_38).abs() < 1e-9);
}

#[test]
fn token_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let tok = rand_tensor(&[4], &mut rng);
    let table = rand_tensor(&[4, 4], &mut rng);
    assert!(
        max_rel_error(std::slice::from_ref(&x), |_, v| weighted(
            transpose_last2(v[0]),
            27
        )) < TOL
    );
    assert!(
        max_rel_error(&[x.clone(), tok], |_, v| weighted(
            prepend_token(v[0], v[1]),
            28
        )) < TOL
    );
    assert!(
        max_rel_error(std::slice::from_ref(&x), |_, v| weighted(
            first_token(v[0]),
            29
        )) < TOL
    );
    let x4 = rand_tensor(&[2, 4, 4], &mut rng);
    assert!(max_rel_error(&[x4, table], |_, v| weighted(add_broadcast(v[0], v[1]), 30)) < TOL);
    let q = rand_tensor(&[2, 3, 4], &mut rng);
    let k = rand_tensor(&[2, 3, 4], &mut rng);
    assert!(
        max_rel_error(&[q, k, x], |_, v| weighted(
            multi_head_attention(v[0], v[1], v[2], 2),
            31
        )) < TOL
    );
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 1.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let loss = c.mul(p).sum();
    let grads = g.backward(loss);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}
