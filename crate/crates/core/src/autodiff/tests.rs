use std::sync::Arc;

use super::*;
use crate::error::Error;

fn mat(rows: &[&[f32]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn param(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

#[test]
fn matmul_identity_and_analytic_cases() {
    let mut tape = Tape::new();
    let eye = tape.leaf(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = tape.leaf(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.leaf(&mat(&[&[1.0, 0.0]]));
    let b = tape.leaf(&mat(&[&[0.0], &[5.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(out), &[1, 1]);
    assert_eq!(tape.value(out), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_symmetry_stability_and_normalisation() {
    let mut tape = Tape::new();
    let x = tape.leaf(&mat(&[&[0.0, 0.0], &[1000.0, 0.0]]));
    let y = tape.softmax_rows(x);
    let v = tape.value(y);
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!((v[2] - 1.0).abs() < 1e-6 && v[3] >= 0.0 && v[3] < 1e-6);
    assert!(v.iter().all(|p| p.is_finite()));

    let data: Vec<f32> = (0..128).map(|i| ((i * 37 % 23) as f32 - 11.0) * 0.7).collect();
    let x = tape.leaf(&Tensor::new(vec![8, 16], data).unwrap());
    let y = tape.softmax_rows(x);
    for row in tape.value(y).chunks_exact(16) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn layer_norm_constant_row_and_unit_variance_row() {
    let mut tape = Tape::new();
    let g = tape.leaf(&Tensor::filled(vec![2], 1.0));
    let b = tape.leaf(&Tensor::zeros(vec![2]));
    let x = tape.leaf(&mat(&[&[3.0, 3.0], &[1.0, -1.0]]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    let v = tape.value(y);
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);

    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!((tape.value(y)[2] - 1.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_uniform_and_margin() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::zeros(vec![3, 8]));
    let ce = tape.cross_entropy(logits, &[0, 5, 7], &[true; 3]).unwrap();
    assert!((tape.scalar(ce) - 8f32.ln()).abs() < 1e-6);
    assert!((tape.scalar(ce) - 2.0794).abs() < 1e-4);

    let mut favour = vec![0.0f32; 8];
    favour[3] = 2.0;
    let logits = tape.leaf(&Tensor::new(vec![1, 8], favour).unwrap());
    let ce = tape.cross_entropy(logits, &[3], &[true]).unwrap();
    assert!(tape.scalar(ce) < 8f32.ln());
}

#[test]
fn cross_entropy_mask_equals_sliced_computation() {
    let data: Vec<f32> = (0..40).map(|i| ((i * 13 % 17) as f32 - 8.0) * 0.3).collect();
    let targets = [1usize, 4, 0, 2];
    let mask = [true, false, true, false];

    let mut tape = Tape::new();
    let logits = tape.leaf(&param(Tensor::new(vec![4, 10], data.clone()).unwrap()));
    let full = tape.cross_entropy(logits, &targets, &mask).unwrap();

    let kept: Vec<f32> = [0usize, 2].iter().flat_map(|&r| data[r * 10..(r + 1) * 10].to_vec()).collect();
    let mut tape2 = Tape::new();
    let sliced = tape2.leaf(&Tensor::new(vec![2, 10], kept).unwrap());
    let ce = tape2.cross_entropy(sliced, &[1, 0], &[true, true]).unwrap();
    assert!((tape.scalar(full) - tape2.scalar(ce)).abs() < 1e-6);

    tape.backward(full).unwrap();
    let g = tape.grad(logits).unwrap();
    assert!(g[10..20].iter().chain(&g[30..40]).all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_all_false_mask_is_zero_without_gradient() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&param(Tensor::filled(vec![2, 4], 0.3)));
    let ce = tape.cross_entropy(logits, &[0, 1], &[false, false]).unwrap();
    assert_eq!(tape.scalar(ce), 0.0);
    tape.backward(ce).unwrap();
    assert!(tape.grad(logits).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn mse_cases() {
    let mut tape = Tape::new();
    let p = tape.leaf(&param(mat(&[&[1.0, 2.0], &[7.0, -3.0]])));
    let same = tape.mse_masked(p, p, &[true, true]).unwrap();
    assert_eq!(tape.scalar(same), 0.0);

    let t = tape.leaf(&mat(&[&[1.0, 4.0], &[0.0, 0.0]]));
    let l = tape.mse_masked(p, t, &[true, false]).unwrap();
    assert_eq!(tape.scalar(l), 2.0);

    // perturbing a mask-false row leaves the value bit-identical
    let p2 = tape.leaf(&mat(&[&[1.0, 2.0], &[-100.0, 55.0]]));
    let l2 = tape.mse_masked(p2, t, &[true, false]).unwrap();
    assert_eq!(tape.scalar(l).to_bits(), tape.scalar(l2).to_bits());

    tape.backward(l).unwrap();
    let g = tape.grad(p).unwrap();
    assert_eq!(&g[2..], &[0.0, 0.0]);
    assert_eq!(&g[..2], &[0.0, -2.0]);

    let none = tape.mse_masked(p, t, &[false, false]).unwrap();
    assert_eq!(tape.scalar(none), 0.0);
}

#[test]
fn backward_square_and_accumulation() {
    let x = param(Tensor::new(vec![1], vec![3.0]).unwrap());
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[6.0]);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[12.0]);

    let mut x = x;
    x.accumulate_grad(tape.grad(xv).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), &[12.0]);
}

#[test]
fn backward_independent_input_gets_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()));
    let y = tape.leaf(&param(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap()));
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert_eq!(tape.grad(y).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&param(Tensor::zeros(vec![2, 2])));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn embedding_rejects_unknown_ids_and_scatters_gradient() {
    let mut tape = Tape::new();
    let table = tape.leaf(&param(Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()));
    assert!(tape.embedding(table, &[3]).is_err());
    let e = tape.embedding(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    let loss = tape.sum(e);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn concat_gather_transpose_round_trip() {
    let mut tape = Tape::new();
    let a = tape.leaf(&param(mat(&[&[1.0, 2.0]])));
    let b = tape.leaf(&param(mat(&[&[3.0, 4.0], &[5.0, 6.0]])));
    let c = tape.concat_rows(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), &[3, 2]);
    let g = tape.gather_rows(c, &[2, 0]).unwrap();
    assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0]);
    let t = tape.transpose(g).unwrap();
    assert_eq!(tape.value(t), &[5.0, 1.0, 6.0, 2.0]);
    let loss = tape.sum(t);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn attention_checks_layout_size() {
    let mut tape = Tape::new();
    let q = tape.leaf(&Tensor::zeros(vec![3, 4]));
    let layout = Arc::new(
        AttentionLayout::new(
            vec![AttentionSpan {
                image: 0..2,
                text: 2..2,
            }],
            2,
        )
        .unwrap(),
    );
    assert!(tape.attention(q, q, q, 2, layout).is_err());
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.77).sin()).collect();
        let x = tape.leaf(&param(Tensor::new(vec![4, 6], data).unwrap()));
        let w = tape.leaf(&param(Tensor::new(vec![6, 6], (0..36).map(|i| (i as f32).cos() * 0.1).collect()).unwrap()));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax_rows(h);
        let loss = tape.cross_entropy(s, &[0, 1, 2, 3], &[true; 4]).unwrap();
        tape.backward(loss).unwrap();
        (tape.scalar(loss).to_bits(), tape.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
