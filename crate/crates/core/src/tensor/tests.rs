use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testing::{check_gradients, project};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = random(&[2, 2], 1);
    let i2 = g.constant(Tensor::identity(2));
    let av = g.constant(a.clone());
    let out = g.matmul(i2, av).unwrap();
    assert_eq!(g.value(out), &a);

    let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let y = g.matmul(x, ones).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Dimension { .. }));
}

#[test]
fn matmul_gradients_of_sum() {
    let a = random(&[5, 4], 7);
    let b = random(&[4, 3], 8);
    let r = check_gradients(
        &[a, b],
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn matmul_bt_and_transpose_gradients() {
    let a = random(&[3, 4], 1);
    let b = random(&[5, 4], 2);
    let w = random(&[5, 3], 3);
    let r = check_gradients(
        &[a, b],
        &|g, v| {
            let y = g.matmul_bt(v[0], v[1])?;
            let y = g.transpose(y)?;
            project(g, y, &w)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    assert!(g.value(y).is_finite());
}

#[test]
fn softmax_bad_axis_is_dimension_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.softmax(x, 2),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn softmax_rows_are_simplex_on_any_axis() {
    let x = random(&[3, 4, 5], 11).map(|v| v * 30.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    for axis in 0..3 {
        let y = g.softmax(xv, axis).unwrap();
        let y = g.value(y);
        let shape = y.shape().to_vec();
        assert!(y.data().iter().all(|&v| v >= 0.0));
        let (outer, n, inner): (usize, usize, usize) = (
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        );
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| y.data()[(o * n + j) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_vjp_matches_differences() {
    let x = random(&[3, 7], 5);
    let w = random(&[3, 7], 6);
    let r = check_gradients(
        &[x],
        &|g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, &w)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[4]));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);
    assert!(d[0] != -1.0, "eps must be applied");
}

#[test]
fn layer_norm_gradients() {
    let x = random(&[4, 8], 21);
    let gain = random(&[8], 22);
    let bias = random(&[8], 23);
    let w = random(&[4, 8], 24);
    let r = check_gradients(
        &[x, gain, bias],
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, &w)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn conv2d_identity_and_counting() {
    let mut g = Graph::new();
    let x = random(&[1, 4, 4], 3);
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::ones(&[1, 5, 5]));
    let k3 = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(ones, k3, None, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 5, 5]);
    assert_eq!(v.at(&[0, 2, 2]), 9.0);
    assert_eq!(v.at(&[0, 0, 0]), 4.0);
    assert_eq!(v.at(&[0, 0, 2]), 6.0);
}

#[test]
fn conv2d_rejects_non_integral_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 16, 16]));
    let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(
        g.conv2d(x, k, None, 2, 1),
        Err(TensorError::Config { .. })
    ));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(
        g.conv2d(x, k, None, 1, 1),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (4, 2, 8)] {
        let x = random(&[2, 8, 8], 31);
        let w = random(&[3, 2, k, k], 32);
        let b = random(&[3], 33);
        let oh = (8 + 2 * pad - k) / stride + 1;
        let p = random(&[3, oh, oh], 34);
        let r = check_gradients(
            &[x, w, b],
            &|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, &p)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "stride {stride}: {r:?}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convᵀ(y)> for shared weights.
    let x = random(&[2, 8, 8], 41);
    let w = random(&[3, 2, 4, 4], 42);
    let y = random(&[3, 4, 4], 43);
    let mut g = Graph::new();
    let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
    let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let ty = g.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
    assert_eq!(g.shape(ty), &[2, 8, 8]);
    let lhs: f64 = g
        .value(cx)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = g
        .value(ty)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn conv_transpose_gradients() {
    let x = random(&[2, 3, 3], 51);
    let w = random(&[2, 3, 4, 4], 52);
    let b = random(&[3], 53);
    let p = random(&[3, 6, 6], 54);
    let r = check_gradients(
        &[x, w, b],
        &|g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, &p)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn contract_examples_and_oracle() {
    let fmap = random(&[4, 5, 5], 61);
    let mut g = Graph::new();
    let f = g.constant(fmap.clone());
    let sel = g.constant(t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]));
    let y = g.contract(sel, f).unwrap();
    assert_eq!(g.value(y).data(), &fmap.data()[..25]);

    let zero = g.constant(Tensor::zeros(&[2, 4]));
    let y = g.contract(zero, f).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let emb = random(&[3, 4], 62);
    let e = g.constant(emb.clone());
    let y = g.contract(e, f).unwrap();
    let oracle = contract_loop_oracle(emb.data(), fmap.data(), 3, 4, 5, 5);
    assert_eq!(g.value(y).data(), oracle.as_slice());

    let bad = g.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(
        g.contract(bad, f),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn contract_gradients() {
    let emb = random(&[3, 4], 71);
    let fmap = random(&[4, 5, 5], 72);
    let p = random(&[3, 5, 5], 73);
    let r = check_gradients(
        &[emb, fmap],
        &|g, v| {
            let y = g.contract(v[0], v[1])?;
            project(g, y, &p)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn backward_trivial_cases() {
    let x = random(&[3, 2], 81);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_fan_out_and_accumulation() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.5), true);
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 2.0);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 4.0);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(TensorError::Usage { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let c = g.constant(Tensor::scalar(3.0));
    let y = g.mul(x, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 3.0);
    assert!(g.grad(c).is_none());
    assert!(!g.requires_grad(c));
}

#[test]
fn graph_is_topologically_ordered() {
    let mut g = Graph::new();
    let a = g.leaf(random(&[2, 2], 1), true);
    let b = g.gelu(a);
    let c = g.matmul(b, a).unwrap();
    let d = g.sum(c);
    for v in [b, c, d] {
        assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
    }
    assert_eq!(g.op_kind(c), "matmul");
}

#[test]
fn elementwise_gradients() {
    let a = random(&[3, 4], 91);
    // Keep the divisor away from zero and min/max away from ties.
    let b = random(&[3, 4], 92).map(|v| {
        if v.abs() < 0.2 {
            v.signum() * 0.5 + v
        } else {
            v
        }
    });
    let row = random(&[4], 93);
    let p = random(&[3, 4], 94);
    let r = check_gradients(
        &[a, b, row],
        &|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let q = g.div(m, v[1])?;
            let mn = g.minimum(q, v[1])?;
            let mx = g.maximum(mn, v[0])?;
            let sg = g.sigmoid(mx);
            let ge = g.gelu(sg);
            let ab = g.abs(v[1]);
            let sum = g.add(ge, ab)?;
            let sc = g.scale(sum, 1.7);
            let sh = g.add_scalar(sc, -0.3);
            let rr = g.add_row(sh, v[2])?;
            let re = g.relu(rr);
            project(g, re, &p)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn shape_plumbing_gradients() {
    let a = random(&[4, 6], 101);
    let b = random(&[4, 2], 102);
    let p = random(&[3, 8], 103);
    let r = check_gradients(
        &[a, b],
        &|g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 0, 1, 3)?;
            let r = g.reshape(s, &[3, 8])?;
            let gathered = g.gather_rows(r, &[2, 0, 2])?;
            let m = g.mean_rows(gathered)?;
            let rows = g.concat(&[r, m], 0)?;
            let top = g.slice(rows, 0, 1, 3)?;
            project(g, top, &p)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn concat_and_slice_values() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let s = g.slice(c, 1, 1, 2).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
    assert!(g.concat(&[a, b], 0).is_err());
    assert!(g.slice(c, 1, 2, 2).is_err());
}

#[test]
fn resize_identity_and_gradients() {
    let x = random(&[2, 3, 4], 111);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.resize_bilinear(xv, 3, 4).unwrap();
    assert_eq!(g.value(y), &x);
    let c = g.constant(Tensor::full(&[1, 3, 3], 0.7));
    let y = g.resize_bilinear(c, 12, 9).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));

    let p = random(&[2, 12, 10], 112);
    let r = check_gradients(
        &[x],
        &|g, v| {
            let y = g.resize_bilinear(v[0], 12, 10)?;
            project(g, y, &p)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn cross_entropy_values_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 16]));
    let l = g
        .cross_entropy(x, &[Some(1), None, Some(15)], None)
        .unwrap();
    assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);

    let logits = random(&[4, 5], 121).map(|v| v * 3.0);
    let r = check_gradients(
        &[logits],
        &|g, v| {
            Ok(g.cross_entropy(
                v[0],
                &[Some(0), None, Some(4), Some(2)],
                Some(&[1.0, 1.0, 0.1, 2.0]),
            )?)
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");

    let mut g = Graph::new();
    let x = g.leaf(random(&[2, 3], 3), true);
    let l = g.cross_entropy(x, &[None, None], None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn bce_values_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4]));
    let l = g.bce_with_logits(x, &[0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let x = g.constant(t(&[2], &[800.0, -800.0]));
    let l = g.bce_with_logits(x, &[1.0, 0.0]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);

    let logits = random(&[6], 131).map(|v| v * 4.0);
    let r = check_gradients(
        &[logits],
        &|g, v| Ok(g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.3])?),
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}
