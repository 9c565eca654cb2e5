use dslab_tensor::gradcheck::{self, DEFAULT_STEP};
use dslab_tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PER_OP_TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Fixed random weights turn any tensor into a scalar with a non-trivial
/// gradient everywhere.
fn probe_loss(t: &Tensor, seed: u64) -> Tensor {
    let w = random(t.shape(), seed).detach();
    t.mul(&w).unwrap().sum()
}

fn assert_grads(wrt: &[Tensor], f: impl Fn() -> dslab_tensor::Result<Tensor>) {
    let report = gradcheck::check(wrt, f, DEFAULT_STEP, 1).unwrap();
    assert!(
        report.max_rel_err < PER_OP_TOL,
        "max relative error {} (abs {})",
        report.max_rel_err,
        report.max_abs_err
    );
}

#[test]
fn matmul_identity() {
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let eye = Tensor::new(eye, &[3, 3]).unwrap();
    let x = random(&[3, 5], 1);
    assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
}

#[test]
fn matmul_by_hand() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.to_vec(), vec![3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = random(&[2, 3], 0).matmul(&random(&[2, 3], 1)).unwrap_err();
    match err {
        TensorError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn matmul_gradient() {
    let a = random(&[4, 5], 2);
    let b = random(&[5, 3], 3);
    assert_grads(&[a.clone(), b.clone()], || Ok(probe_loss(&a.matmul(&b)?, 9)));
}

#[test]
fn patch_project_zero_image() {
    let img = Tensor::zeros(&[1, 8, 8]);
    let w = random(&[6, 1, 4, 4], 4);
    let b = Tensor::zeros(&[6]);
    let out = img.patch_project(&w, &b).unwrap();
    assert_eq!(out.shape(), &[4, 6]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_project_matches_brute_force_extraction() {
    let (h, w, p, d) = (4, 4, 2, 3);
    let img = random(&[1, h, w], 5);
    let weight = random(&[d, 1, p, p], 6);
    let bias = random(&[d], 7);
    let out = img.patch_project(&weight, &bias).unwrap();
    assert_eq!(out.shape(), &[4, d]);

    let px = img.to_vec();
    let wv = weight.to_vec();
    let bv = bias.to_vec();
    for (token, (pr, pc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        for k in 0..d {
            let mut acc = bv[k];
            for i in 0..p {
                for j in 0..p {
                    acc += wv[k * p * p + i * p + j] * px[(pr * p + i) * w + pc * p + j];
                }
            }
            let got = out.to_vec()[token * d + k];
            assert!((got - acc).abs() < 1e-12, "token {token} dim {k}: {got} vs {acc}");
        }
    }
}

#[test]
fn patch_project_multichannel_brute_force() {
    let (c, h, w, p, d) = (2, 6, 4, 2, 5);
    let img = random(&[c, h, w], 30);
    let weight = random(&[d, c, p, p], 31);
    let bias = random(&[d], 32);
    let out = img.patch_project(&weight, &bias).unwrap().to_vec();
    let (px, wv, bv) = (img.to_vec(), weight.to_vec(), bias.to_vec());
    let gw = w / p;
    for pr in 0..h / p {
        for pc in 0..gw {
            for k in 0..d {
                let mut acc = bv[k];
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            acc += wv[((k * c + ch) * p + i) * p + j]
                                * px[ch * h * w + (pr * p + i) * w + pc * p + j];
                        }
                    }
                }
                assert!((out[(pr * gw + pc) * d + k] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn patch_project_rejects_indivisible_image() {
    let img = random(&[1, 6, 8], 0);
    let err = img
        .patch_project(&random(&[2, 1, 4, 4], 1), &Tensor::zeros(&[2]))
        .unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }), "{err}");
}

#[test]
fn patch_project_gradient() {
    let img = random(&[1, 8, 8], 10);
    let weight = random(&[3, 1, 4, 4], 11);
    let bias = random(&[3], 12);
    let wrt = [img.clone(), weight.clone(), bias.clone()];
    assert_grads(&wrt, || Ok(probe_loss(&img.patch_project(&weight, &bias)?, 13)));
}

#[test]
fn cross_entropy_degenerate_and_uniform() {
    let one = Tensor::new(vec![3.7], &[1, 1]).unwrap();
    assert_eq!(one.softmax_cross_entropy(&[0]).unwrap().item(), 0.0);
    let uniform = Tensor::full(&[2, 4], 0.25);
    let loss = uniform.softmax_cross_entropy(&[1, 3]).unwrap().item();
    assert!((loss - 4f64.ln()).abs() < 1e-15, "{loss}");
    assert!((loss - 1.3863).abs() < 1e-4);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let err = random(&[2, 3], 0).softmax_cross_entropy(&[0, 3]).unwrap_err();
    assert!(matches!(err, TensorError::Index { index: 3, bound: 3, .. }));
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let x = Tensor::new(vec![1000.0, 0.0, -1000.0], &[1, 3]).unwrap();
    let loss = x.softmax_cross_entropy(&[0]).unwrap().item();
    assert!(loss.is_finite() && loss.abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient() {
    let logits = random(&[3, 5], 14);
    assert_grads(std::slice::from_ref(&logits), || {
        logits.softmax_cross_entropy(&[4, 0, 2])
    });
}

#[test]
fn backward_of_sum_is_ones() {
    let x = random(&[2, 3, 4], 15);
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 24]);
}

#[test]
fn backward_of_square_is_twice_x() {
    let x = random(&[5, 2], 16);
    x.mul(&x).unwrap().sum().backward().unwrap();
    let expected: Vec<f64> = x.to_vec().iter().map(|v| 2.0 * v).collect();
    assert_eq!(x.grad().unwrap(), expected);
}

#[test]
fn elementwise_gradients() {
    let a = random(&[3, 4], 17);
    let b = random(&[3, 4], 18);
    let wrt = [a.clone(), b.clone()];
    assert_grads(&wrt, || Ok(probe_loss(&a.add(&b)?.mul(&a)?.sub(&b.scale(0.3))?, 19)));
    assert_grads(std::slice::from_ref(&a), || Ok(probe_loss(&a.exp(), 20)));
    assert_grads(std::slice::from_ref(&a), || Ok(probe_loss(&a.gelu(), 21)));
    assert_grads(std::slice::from_ref(&a), || Ok(a.mean()));
}

#[test]
fn scalar_broadcast_gradients() {
    let x = random(&[3, 4], 22);
    let s = random(&[1], 23);
    let bias = random(&[4], 24);
    let wrt = [x.clone(), s.clone(), bias.clone()];
    assert_grads(&wrt, || Ok(probe_loss(&x.mul_scalar(&s)?.add_bias(&bias)?, 25)));
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = random(&[6, 7], 26).scale(30.0);
    let y = x.softmax_rows(false).unwrap().to_vec();
    for row in y.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let sq = random(&[5, 5], 27).scale(10.0);
    let y = sq.softmax_rows(true).unwrap().to_vec();
    for (i, row) in y.chunks(5).enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i + 1..].iter().all(|&v| v == 0.0), "row {i} leaks the future");
    }
}

#[test]
fn softmax_gradients() {
    let x = random(&[4, 6], 28);
    assert_grads(std::slice::from_ref(&x), || Ok(probe_loss(&x.softmax_rows(false)?, 29)));
    let sq = random(&[5, 5], 33);
    assert_grads(std::slice::from_ref(&sq), || Ok(probe_loss(&sq.softmax_rows(true)?, 34)));
}

#[test]
fn layer_norm_gradient() {
    let x = random(&[4, 8], 35);
    let gamma = random(&[8], 36);
    let beta = random(&[8], 37);
    let wrt = [x.clone(), gamma.clone(), beta.clone()];
    assert_grads(&wrt, || Ok(probe_loss(&x.layer_norm(&gamma, &beta)?, 38)));
}

#[test]
fn layer_norm_normalises_rows() {
    let x = random(&[3, 16], 39).scale(5.0);
    let y = x
        .layer_norm(&Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]))
        .unwrap()
        .to_vec();
    for row in y.chunks(16) {
        let mu = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn embedding_gradient_and_bounds() {
    let table = random(&[6, 4], 40);
    let ids = [3, 0, 3, 5];
    assert_grads(std::slice::from_ref(&table), || Ok(probe_loss(&table.embedding(&ids)?, 41)));
    assert!(matches!(
        table.embedding(&[6]).unwrap_err(),
        TensorError::Index { index: 6, bound: 6, .. }
    ));
}

#[test]
fn normalisation_and_pooling_gradients() {
    let x = random(&[3, 5], 42);
    assert_grads(std::slice::from_ref(&x), || Ok(probe_loss(&x.l2_normalize_rows()?, 43)));
    assert_grads(std::slice::from_ref(&x), || Ok(probe_loss(&x.mean_rows()?, 44)));
    assert_grads(std::slice::from_ref(&x), || Ok(probe_loss(&x.transpose()?, 45)));
    assert!(Tensor::zeros(&[1, 3]).l2_normalize_rows().is_err());
}

#[test]
fn slicing_and_concat_gradients() {
    let a = random(&[3, 4], 46);
    let b = random(&[2, 4], 47);
    let c = random(&[3, 2], 48);
    let wrt = [a.clone(), b.clone(), c.clone()];
    assert_grads(&wrt, || {
        let rows = Tensor::concat_rows(&[a.clone(), b.clone()])?.slice_rows(1, 3)?;
        let cols = Tensor::concat_cols(&[a.clone(), c.clone()])?.slice_cols(2, 3)?;
        Ok(probe_loss(&rows, 49).add(&probe_loss(&cols, 50))?)
    });
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let a = random(&[4, 6], 51);
        let w = random(&[6, 6], 52);
        let loss = a.matmul(&w).unwrap().gelu().softmax_rows(false).unwrap().softmax_cross_entropy(&[0, 1, 2, 3]).unwrap();
        loss.backward().unwrap();
        (loss.item().to_bits(), w.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(vals, &[3, 4]).unwrap();
        let y = x.softmax_rows(false).unwrap().to_vec();
        for row in y.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn matmul_is_linear_in_lhs(a in proptest::collection::vec(-3.0f64..3.0, 6),
                               b in proptest::collection::vec(-3.0f64..3.0, 6),
                               c in -2.0f64..2.0) {
        let at = Tensor::new(a, &[2, 3]).unwrap();
        let bt = Tensor::new(b, &[3, 2]).unwrap();
        let lhs = at.scale(c).matmul(&bt).unwrap().to_vec();
        let rhs = at.matmul(&bt).unwrap().scale(c).to_vec();
        for (x, y) in lhs.iter().zip(&rhs) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
