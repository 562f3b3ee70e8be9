use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum<'g>(g: &mut Graph<'g, f64>, x: Var) -> Result<Var> {
    let t = g.value(x);
    let w: Vec<f64> = (0..t.numel())
        .map(|i| 0.3 + 0.17 * (i % 7) as f64 - 0.05 * (i % 3) as f64)
        .collect();
    let wt = Tensor::new(t.shape().to_vec(), w)?;
    let wv = g.constant_owned(wt);
    let m = g.mul(x, wv)?;
    Ok(g.sum(m))
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant_owned(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant_owned(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant_owned(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let v = g.constant_owned(Tensor::from_f64(&[2, 1], &[5.0, 7.0]).unwrap());
    let out = g.matmul(p, v).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant_owned(Tensor::zeros(&[2, 3]));
    let b = g.constant_owned(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let r = grad_check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert_eq!(r.coordinates, 20);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn square_gradient_at_three() {
    let params = vec![Tensor::from_f64(&[1], &[3.0]).unwrap()];
    let r = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-8, "{r:?}");

    let mut g = Graph::<f64>::new();
    let x = g.param(&params[0]);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert!((grads.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn constant_function_has_zero_gradients() {
    let params = vec![Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap()];
    let r = grad_check(|g, _v| Ok(g.constant_owned(Tensor::scalar(4.2))), &params, 1e-5).unwrap();
    assert_eq!(r.max_absolute_error, 0.0);
    assert_eq!(r.max_relative_error, 0.0);
}

#[test]
fn two_uses_of_one_parameter_accumulate() {
    let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.param(&x);
    let twice = g.add(v, v).unwrap();
    let s = g.sum(twice);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(v).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Case = (
        &'static str,
        Vec<Tensor<f64>>,
        fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    );
    let cases: Vec<Case> = vec![
        (
            "linear",
            vec![
                random(&[3, 5], &mut rng),
                random(&[4, 5], &mut rng),
                random(&[4], &mut rng),
            ],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y)
            },
        ),
        (
            "add_row",
            vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)],
            |g, v| {
                let y = g.add_row(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        ("scale", vec![random(&[2, 3], &mut rng)], |g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y)
        }),
        ("gelu", vec![random(&[2, 5], &mut rng)], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y)
        }),
        (
            "layernorm",
            vec![
                random(&[3, 6], &mut rng),
                random(&[6], &mut rng),
                random(&[6], &mut rng),
            ],
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y)
            },
        ),
        ("softmax_last", vec![random(&[3, 4], &mut rng)], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y)
        }),
        ("softmax_first", vec![random(&[3, 4], &mut rng)], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y)
        }),
        (
            "concat_slice",
            vec![random(&[2, 3], &mut rng), random(&[3, 3], &mut rng)],
            |g, v| {
                let c = g.concat_rows(&[v[0], v[1], v[0]])?;
                let s = g.slice_rows(c, 1, 6)?;
                weighted_sum(g, s)
            },
        ),
        ("reshape_mean", vec![random(&[2, 6], &mut rng)], |g, v| {
            let r = g.reshape(v[0], &[4, 3])?;
            let m = g.mean_rows(r)?;
            weighted_sum(g, m)
        }),
        ("cross_entropy", vec![random(&[3, 4], &mut rng)], |g, v| {
            g.cross_entropy(v[0], &[0, 3, 1])
        }),
        (
            "attention",
            vec![
                random(&[3, 4], &mut rng),
                random(&[5, 4], &mut rng),
                random(&[5, 4], &mut rng),
            ],
            |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, None)?;
                weighted_sum(g, y)
            },
        ),
        (
            "masked_attention",
            vec![
                random(&[3, 4], &mut rng),
                random(&[5, 4], &mut rng),
                random(&[5, 4], &mut rng),
            ],
            |g, v| {
                let mask = AttentionMask::from_fn(3, 5, |q, k| (q + k) % 3 != 1);
                let y = g.attention(v[0], v[1], v[2], 2, Some(&mask))?;
                weighted_sum(g, y)
            },
        ),
    ];
    for (name, params, f) in cases {
        let r = grad_check(f, &params, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant_owned(Tensor::filled(&[4], 1.0));
    let zeros = g.constant_owned(Tensor::zeros(&[4]));
    let x = g.constant_owned(Tensor::filled(&[1, 4], 3.5));
    let y = g.layernorm(x, ones, zeros, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = g.constant_owned(Tensor::filled(&[2], 1.0));
    let b2 = g.constant_owned(Tensor::zeros(&[2]));
    let x = g.constant_owned(Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
    let y = g.layernorm(x, g2, b2, 1e-6).unwrap();
    // variance 1, so the output is (±1)/sqrt(1 + 1e-6)
    let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    assert!((g.value(y).data()[1] + expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant_owned(Tensor::zeros(&[1, 4]));
    let l = g.cross_entropy(uniform, &[2]).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

    let confident = g.constant_owned(Tensor::from_f64(&[1, 3], &[0.0, 1000.0, 0.0]).unwrap());
    let l = g.cross_entropy(confident, &[1]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);

    let x = g.constant_owned(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let l = g.cross_entropy(x, &[2]).unwrap();
    assert!((g.value(l).data()[0] - 0.40761).abs() < 1e-5);

    assert!(matches!(
        g.cross_entropy(x, &[3]),
        Err(Error::Label { label: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(&logits);
    let l = g.cross_entropy(v, &[0]).unwrap();
    let grads = g.backward(l).unwrap();
    let p = crate::tensor::softmax(&logits, 1).unwrap();
    let gv = grads.get(v).unwrap();
    assert!((gv[0] - (p.data()[0] - 1.0)).abs() < 1e-12);
    assert!((gv[1] - p.data()[1]).abs() < 1e-12);
    assert!((gv[2] - p.data()[2]).abs() < 1e-12);
}

/// Literal additive-mask attention written without any skipping.
fn dense_masked_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    mask: &AttentionMask,
) -> Vec<f64> {
    let (nq, d) = q.dims2().unwrap();
    let nk = k.dims2().unwrap().0;
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut s: Vec<f64> = (0..nk)
                .map(|j| {
                    let raw: f64 = (0..dh)
                        .map(|c| q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt();
                    if mask.get(i, j) {
                        raw
                    } else {
                        raw + MASK_FILL
                    }
                })
                .collect();
            crate::tensor::softmax_in_place(&mut s);
            for j in 0..nk {
                for c in 0..dh {
                    out[i * d + h * dh + c] += s[j] * v.data()[j * d + h * dh + c];
                }
            }
        }
    }
    out
}

#[test]
fn skipped_mask_entries_equal_additive_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v) = (
        random(&[4, 6], &mut rng),
        random(&[7, 6], &mut rng),
        random(&[7, 6], &mut rng),
    );
    let mask = AttentionMask::from_fn(4, 7, |i, j| j <= i + 1 || j == 6);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let out = g.attention(qv, kv, vv, 3, Some(&mask)).unwrap();
    let reference = dense_masked_attention(&q, &k, &v, 3, &mask);
    for (a, b) in g.value(out).data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn full_mask_equals_unmasked_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (
        random(&[5, 4], &mut rng),
        random(&[5, 4], &mut rng),
        random(&[5, 4], &mut rng),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let a = g.attention(qv, kv, vv, 2, None).unwrap();
    let full = AttentionMask::full(5, 5);
    let b = g.attention(qv, kv, vv, 2, Some(&full)).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn diagonal_mask_returns_own_value_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, k, v) = (
        random(&[3, 4], &mut rng),
        random(&[3, 4], &mut rng),
        random(&[3, 4], &mut rng),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let out = g.attention(qv, kv, vv, 2, Some(&AttentionMask::diagonal(3))).unwrap();
    assert_eq!(g.value(out).data(), v.data());
}

#[test]
fn all_masked_row_is_a_mask_error() {
    let mut g = Graph::<f32>::new();
    let q = g.constant_owned(Tensor::zeros(&[2, 2]));
    let mut mask = AttentionMask::full(2, 2);
    mask.set(1, 0, false);
    mask.set(1, 1, false);
    assert!(matches!(g.attention(q, q, q, 1, Some(&mask)), Err(Error::Mask(_))));
}

#[test]
fn masked_rows_sum_to_one_over_allowed_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random(&[4, 4], &mut rng);
    let k = random(&[6, 4], &mut rng);
    // Values of all ones: every output coordinate equals the row's weight sum.
    let v = Tensor::filled(&[6, 4], 1.0);
    let mask = AttentionMask::from_fn(4, 6, |i, j| (i * j) % 4 != 1);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let out = g.attention(qv, kv, vv, 1, Some(&mask)).unwrap();
    for x in g.value(out).data() {
        assert!((x - 1.0).abs() < 1e-12);
    }
}
