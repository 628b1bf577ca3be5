use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stfuse::gradcheck::{check, op_cases, rand_tensor, relative_error, weighted_sum};
use stfuse::tensor::NEG_SENTINEL;
use stfuse::{Graph, Segment, Tensor, TensorError};

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true);
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences_at_hand_point() {
    let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
    let r = check(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match &err {
        TensorError::ShapeMismatch { left, right, .. } => {
            assert_eq!(left, &vec![2, 3]);
            assert_eq!(right, &vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![2.0, 1.0]));
    let y = g.softmax(x, 0).unwrap();
    let e = g.value(y).data();
    assert!((e[0] - 0.731059).abs() < 1e-6);
    assert!((e[1] - 0.268941).abs() < 1e-6);

    let x = g.constant(Tensor::vector(vec![NEG_SENTINEL, 2.0, 1.0, NEG_SENTINEL]));
    let y = g.softmax(x, 0).unwrap();
    let e = g.value(y).data();
    assert_eq!(e[0], 0.0);
    assert_eq!(e[3], 0.0);
    assert!((e[1] - 0.731059).abs() < 1e-6);
    assert!((e[2] - 0.268941).abs() < 1e-6);
}

#[test]
fn softmax_over_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let e = g.value(y).data();
    assert!((e[0] - 0.731059).abs() < 1e-6);
    assert!((e[2] - 0.268941).abs() < 1e-6);
    assert!((e[1] - 0.5).abs() < 1e-15);
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softplus_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 100.0]), true);
    let y = g.softplus(x);
    assert!((g.value(y).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((g.value(y).data()[1] - 100.0).abs() < 1e-9);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!((grads.get(x).unwrap()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn elementwise_suite_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::vector(vec![1.0; 3]));
    let beta = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    let e = g.value(y).data();
    assert!((e[0] + 1.224745).abs() < 1e-4);
    assert!(e[1].abs() < 1e-12);
    assert!((e[2] - 1.224745).abs() < 1e-4);

    let m = g.constant(Tensor::vector(vec![2.0, 4.0]));
    let mu = g.mean(m);
    assert_eq!(g.value(mu).item(), 3.0);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3, 2]), true);
    let s = g.sum(x);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0; 12]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn interior_gradients_are_not_reported() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = g.scale(x, 3.0);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(y).is_none());
    assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (name, shapes, f) in op_cases() {
        for _ in 0..3 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = check(&inputs, &f).unwrap();
            assert!(r.passes(1e-4), "{name}: {r:?}");
        }
    }
}

#[test]
fn composed_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let r = check(&inputs, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.layer_norm(h, v[2], v[3])?;
        let h = g.gelu(h);
        let segs = [Segment { start: 0, len: 4 }];
        let a = g.attention(h, h, h, &segs, 2, true, None)?;
        let p = g.softmax(a, 1)?;
        let s = weighted_sum(g, p, 99)?;
        let sq = g.mul(s, s)?;
        Ok(g.sqrt(sq))
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn attention_rows_sum_to_one_over_visible_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[5, 4]));
    let valid = [true, false, true, true, true];
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    let y = g.attention(q, q, q, &segs, 2, false, Some(&valid)).unwrap();
    let probs = g.attention_probs(y).unwrap();
    for (seg, p) in segs.iter().zip(probs) {
        let l = seg.len;
        for h in 0..2 {
            for i in 0..l {
                let row = &p[h * l * l + i * l..h * l * l + (i + 1) * l];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for (j, &pj) in row.iter().enumerate() {
                    if !valid[seg.start + j] {
                        assert_eq!(pj, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs));
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn forward_is_bit_identical(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.constant(rand_tensor(&mut rng, &[6, 8]));
            let b = g.constant(rand_tensor(&mut rng, &[8, 8]));
            let h = g.matmul(a, b).unwrap();
            let segs = [Segment { start: 0, len: 6 }];
            let y = g.attention(h, h, h, &segs, 4, false, None).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
