use proptest::prelude::*;

use super::*;
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;
use crate::Error;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut seeded(seed, Stream::Probe))
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_small_case_matches_triple_loop() {
    let a = t64(&[2, 2], &[1., 2., 3., 4.]);
    let b = t64(&[2, 2], &[5., 6., 7., 8.]);
    let expected = naive_matmul(a.data(), b.data(), 2, 2, 2);
    assert_eq!(expected, vec![19., 22., 43., 50.]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(c).data(), expected.as_slice());
}

#[test]
fn matmul_identity_and_zero() {
    let a = random64(&[3, 4], 1);
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let id = g.constant(Tensor::eye(4));
    let zero = g.constant(Tensor::zeros(&[4, 2]));
    let ai = g.matmul(va, id).unwrap();
    let az = g.matmul(va, zero).unwrap();
    assert_eq!(g.value(ai), &a);
    assert!(g.value(az).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn batched_and_transposed_matmul_match_oracle() {
    let a = random64(&[2, 3, 4], 2);
    let b = random64(&[2, 5, 4], 3);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul_t(va, vb, false, true).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 5]);
    for bi in 0..2 {
        let ab = &a.data()[bi * 12..(bi + 1) * 12];
        let bb = &b.data()[bi * 20..(bi + 1) * 20];
        let mut bt = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt[j * 5 + i] = bb[i * 4 + j];
            }
        }
        let expect = naive_matmul(ab, &bt, 3, 4, 5);
        let got = &g.value(c).data()[bi * 15..(bi + 1) * 15];
        for (x, y) in got.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2], &[0.0, 2f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);

    let c = g.constant(Tensor::full(&[5], 0.7));
    let u = g.softmax(c, 0).unwrap();
    assert!(g.value(u).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

    let a = random64(&[3, 4], 4);
    let shifted = a.map(|v| v + 3.5);
    let va = g.constant(a);
    let vs = g.constant(shifted);
    let sa = g.softmax(va, 1).unwrap();
    let ss = g.softmax(vs, 1).unwrap();
    assert!(g.value(sa).rel_diff(g.value(ss)) < 1e-14);
    assert!(matches!(g.softmax(va, 2), Err(Error::Index { .. })));
}

#[test]
fn softmax_along_inner_axis_matches_transposed_last_axis() {
    let a = random64(&[3, 4, 2], 5);
    let mut g = Graph::new();
    let va = g.constant(a);
    let s1 = g.softmax(va, 1).unwrap();
    let t = g.swap_axes(va, 1, 2).unwrap();
    let s2 = g.softmax(t, 2).unwrap();
    let back = g.swap_axes(s2, 1, 2).unwrap();
    assert!(g.value(s1).rel_diff(g.value(back)) < 1e-15);
}

#[test]
fn layer_norm_oracles() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[3]));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(t64(&[3], &[1., 2., 3.]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    // mean 2, biased variance 2/3
    let r = (1.5f64).sqrt();
    let expect = [-r, 0.0, r];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    let c = g.constant(Tensor::full(&[3], 4.2));
    let yc = g.layer_norm(c, gain, bias, 1e-5).unwrap();
    assert!(g.value(yc).data().iter().all(|&v| v.abs() < 1e-9));

    let xs = random64(&[4, 3], 6);
    let scaled = xs.map(|v| v * 7.0);
    let (a, b) = (g.constant(xs), g.constant(scaled));
    let ya = g.layer_norm(a, gain, bias, 1e-12).unwrap();
    let yb = g.layer_norm(b, gain, bias, 1e-12).unwrap();
    assert!(g.value(ya).rel_diff(g.value(yb)) < 1e-9);
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::<f64>::new();
    let uniform = g.param(&Tensor::zeros(&[1, 2, 6]));
    let l = g.cross_entropy(uniform, &[3, 4], 0, 0.0).unwrap();
    assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-14);
    // label smoothing does not move the uniform-logit loss
    let ls = g.cross_entropy(uniform, &[3, 4], 0, 0.1).unwrap();
    assert!((g.value(ls).data()[0] - 6f64.ln()).abs() < 1e-14);

    let mut sharp = vec![0.0; 6];
    sharp[3] = 60.0;
    let s = g.constant(t64(&[1, 1, 6], &sharp));
    let ls = g.cross_entropy(s, &[3], 0, 0.0).unwrap();
    assert!(g.value(ls).data()[0] < 1e-20);

    let pads = g.cross_entropy(uniform, &[0, 0], 0, 0.1).unwrap();
    assert_eq!(g.value(pads).data()[0], 0.0);
    g.backward(pads).unwrap();
    assert!(g.grad(uniform).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

    assert!(matches!(
        g.cross_entropy(uniform, &[3, 6], 0, 0.0),
        Err(Error::Index { index: 6, .. })
    ));
}

#[test]
fn elementwise_identities() {
    let x = random64(&[2, 3], 7);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let s = g.add(vx, z).unwrap();
    assert_eq!(g.value(s), &x);
    let t = g.transpose(vx).unwrap();
    let tt = g.transpose(t).unwrap();
    assert_eq!(g.value(tt), &x);
    let r = g.reshape(vx, &[3, 2]).unwrap();
    assert!(g.reshape(r, &[4, 2]).is_err());
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(vx, bad).is_err());
}

#[test]
fn embedding_agrees_with_one_hot_matmul() {
    let table = random64(&[7, 3], 8);
    let ids = [4usize, 0, 6, 4, 2];
    let mut onehot = vec![0.0; ids.len() * 7];
    for (r, &i) in ids.iter().enumerate() {
        onehot[r * 7 + i] = 1.0;
    }
    let mut g = Graph::new();
    let vt = g.constant(table);
    let e = g.embedding(vt, &ids, &[5]).unwrap();
    let oh = g.constant(t64(&[5, 7], &onehot));
    let m = g.matmul(oh, vt).unwrap();
    assert_eq!(g.value(e), g.value(m));
    assert!(matches!(
        g.embedding(vt, &[7], &[1]),
        Err(Error::Index { index: 7, bound: 7, .. })
    ));
}

#[test]
fn backward_closed_forms() {
    let x = random64(&[4], 9);
    let mut g = Graph::new();
    let vx = g.param(&x);
    let s = g.sum(vx);
    g.backward(s).unwrap();
    assert!(g.grad(vx).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let vx = g.param(&x);
    let sq = g.mul(vx, vx).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let grad = g.grad(vx).unwrap();
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }

    let mut g = Graph::new();
    let vx = g.param(&x);
    assert!(matches!(g.backward(vx), Err(Error::Contract(_))));
}

#[test]
fn accumulation_equals_sum_of_single_consumers() {
    let x = random64(&[3, 3], 10);
    let w = random64(&[3, 3], 11);
    let branch_a = |g: &mut Graph<f64>, v: Var, w: Var| {
        let y = g.matmul(v, w).unwrap();
        let r = g.relu(y);
        g.sum(r)
    };
    let branch_b = |g: &mut Graph<f64>, v: Var| {
        let s = g.softmax(v, 1).unwrap();
        let m = g.mul(s, v).unwrap();
        g.sum(m)
    };
    let grad_of = |both: u8| {
        let mut g = Graph::new();
        let vx = g.param(&x);
        let vw = g.constant(w.clone());
        let loss = match both {
            0 => branch_a(&mut g, vx, vw),
            1 => branch_b(&mut g, vx),
            _ => {
                let a = branch_a(&mut g, vx, vw);
                let b = branch_b(&mut g, vx);
                g.add(a, b).unwrap()
            }
        };
        g.backward(loss).unwrap();
        g.grad(vx).unwrap()
    };
    let (a, b, ab) = (grad_of(0), grad_of(1), grad_of(2));
    let summed = Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect(),
    )
    .unwrap();
    assert!(ab.rel_diff(&summed) < 1e-6);
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(&random64(&[4, 5], 12));
        let w = g.param(&random64(&[5, 3], 13));
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 2, 1], 9, 0.1).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_sum_is_exact() {
    let x = random64(&[5], 14);
    let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn grad_check_softmax_dot() {
    let x = random64(&[6], 15);
    let r = grad_check(
        |g, v| {
            let s = g.softmax(v, 0)?;
            let m = g.mul(s, v)?;
            Ok(g.sum(m))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

/// Every primitive, each checked at both precisions.
const PRIMITIVES: &[(&str, &[&[usize]])] = &[
    ("matmul", &[&[3, 4], &[4, 2]]),
    ("matmul_tt_batched", &[&[2, 4, 3], &[2, 2, 4]]),
    ("matmul_shared_ta", &[&[2, 4, 3], &[4, 2]]),
    ("add_bias_relu", &[&[3, 4], &[4]]),
    ("softmax_axis0", &[&[3, 4], &[3, 4]]),
    ("masked_softmax", &[&[1, 2, 3, 3], &[1, 2, 3, 3]]),
    ("layer_norm", &[&[3, 5], &[5], &[5], &[3, 5]]),
    ("cross_entropy", &[&[2, 3, 5]]),
    ("embedding_concat_swap", &[&[6, 3], &[2, 3]]),
    ("alias", &[&[4]]),
];

fn primitive_loss<T: crate::Scalar>(name: &str, g: &mut Graph<T>, v: &[Var]) -> crate::Result<Var> {
    match name {
        "matmul" => {
            let y = g.matmul(v[0], v[1])?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        }
        "matmul_tt_batched" => {
            let y = g.matmul_t(v[0], v[1], true, true)?;
            let y2 = g.mul(y, y)?;
            Ok(g.mean(y2))
        }
        "matmul_shared_ta" => {
            let y = g.matmul_t(v[0], v[1], true, false)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        }
        "add_bias_relu" => {
            let y = g.add_bias(v[0], v[1])?;
            let r = g.relu(y);
            let r2 = g.mul(r, r)?;
            Ok(g.sum(r2))
        }
        "softmax_axis0" => {
            let s = g.softmax(v[0], 0)?;
            let m = g.mul(s, v[1])?;
            Ok(g.sum(m))
        }
        "masked_softmax" => {
            let mask = AttnMask::causal(&[true; 3], 1, 3);
            let s = g.masked_softmax(v[0], &mask)?;
            let m = g.mul(s, v[1])?;
            Ok(g.sum(m))
        }
        "layer_norm" => {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let m = g.mul(y, v[3])?;
            Ok(g.sum(m))
        }
        "cross_entropy" => g.cross_entropy(v[0], &[1, 4, 0, 2, 3, 0], 0, 0.1),
        "embedding_concat_swap" => {
            let e = g.embedding(v[0], &[1, 5, 5, 2], &[2, 2])?;
            let c = g.concat(&[e, e], 1)?;
            let r = g.reshape(v[1], &[2, 1, 3])?;
            let c2 = g.concat(&[c, r], 1)?;
            let s = g.swap_axes(c2, 0, 2)?;
            let s2 = g.mul(s, s)?;
            let sc = g.scale(s2, T::from_f64_lossy(0.5));
            Ok(g.sum(sc))
        }
        "alias" => {
            let a = g.alias(v[0]);
            let b = g.alias(v[0]);
            let m = g.mul(a, b)?;
            Ok(g.sum(m))
        }
        other => unreachable!("{other}"),
    }
}

fn primitive_inputs(seed: usize, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random64(s, 100 + seed as u64 * 10 + i as u64))
        .collect()
}

#[test]
fn every_primitive_passes_grad_check_at_64_bit() {
    for (seed, &(name, shapes)) in PRIMITIVES.iter().enumerate() {
        let inputs = primitive_inputs(seed, shapes);
        let r = grad_check_many(|g, v| primitive_loss(name, g, v), &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
    }
}

#[test]
fn every_primitive_passes_grad_check_at_32_bit() {
    for (seed, &(name, shapes)) in PRIMITIVES.iter().enumerate() {
        let inputs: Vec<Tensor<f32>> = primitive_inputs(seed, shapes).iter().map(Tensor::cast).collect();
        let r = grad_check_many(|g, v| primitive_loss(name, g, v), &inputs, 1e-2).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn masked_softmax_rejects_rows_without_keys() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let mask = AttnMask::key_padding(&[false, false], 1, 2, 2);
    assert!(matches!(g.masked_softmax(x, &mask), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[n], &values).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn masked_rows_sum_to_one_over_visible_keys(
        values in prop::collection::vec(-20.0f64..20.0, 12),
        vis in prop::collection::vec(any::<bool>(), 4),
    ) {
        let mut vis = vis;
        vis[0] = true;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 3, 4], &values).unwrap());
        let mask = AttnMask::key_padding(&vis, 1, 3, 4);
        let y = g.masked_softmax(x, &mask).unwrap();
        for row in g.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for (p, &v) in row.iter().zip(&vis) {
                if !v { prop_assert_eq!(*p, 0.0); }
            }
        }
    }
}
