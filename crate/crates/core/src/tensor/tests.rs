use super::*;
use crate::rng;
use rand::Rng;

fn leaf(t: &Tape, data: &[f64], shape: &[usize]) -> Var {
    t.leaf(data.to_vec(), shape, true).unwrap()
}

#[test]
fn add_componentwise() {
    let t = Tape::new();
    let a = leaf(&t, &[1.0, 2.0], &[2]);
    let b = leaf(&t, &[3.0, 4.0], &[2]);
    assert_eq!(a.add(&b).unwrap().value(), vec![4.0, 6.0]);
}

#[test]
fn mul_by_zeros_gives_zero_value_and_grad() {
    let t = Tape::new();
    let x = leaf(&t, &[1.5, -2.0, 3.0], &[3]);
    let z = t.constant(vec![0.0; 3], &[3]).unwrap();
    let y = x.mul(&z).unwrap();
    assert_eq!(y.value(), vec![0.0; 3]);
    t.backward(&y.sum_all()).unwrap();
    assert_eq!(x.grad(), vec![0.0; 3]);
}

#[test]
fn relu_backward_mask_with_zero_subgradient() {
    let t = Tape::new();
    let x = leaf(&t, &[-1.0, 2.0], &[2]);
    let y = x.relu().sum_all();
    t.backward(&y).unwrap();
    assert_eq!(x.grad(), vec![0.0, 1.0]);

    // subgradient at exactly 0 is 0
    let t = Tape::new();
    let x = leaf(&t, &[0.0], &[1]);
    let y = x.relu().sum_all();
    t.backward(&y).unwrap();
    assert_eq!(x.grad(), vec![0.0]);
}

#[test]
fn shape_mismatch_error_names_both_shapes() {
    let t = Tape::new();
    let a = leaf(&t, &[1.0, 2.0], &[2]);
    let b = leaf(&t, &[1.0, 2.0, 3.0], &[3]);
    let err = a.add(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "got: {msg}");
}

#[test]
fn matmul_identity_and_hand_sum() {
    let t = Tape::new();
    let a = leaf(&t, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(a.matmul(&eye).unwrap().value(), a.value());

    let ones = t.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
    assert_eq!(a.matmul(&ones).unwrap().value(), vec![3.0, 7.0]);
}

#[test]
fn matmul_identity_associativity_bitwise() {
    let mut r = rng::stream(11);
    let t = Tape::new();
    let a_data: Vec<f64> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b_data: Vec<f64> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a = leaf(&t, &a_data, &[3, 3]);
    let b = leaf(&t, &b_data, &[3, 3]);
    let eye = t.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
    let left = a.matmul(&eye).unwrap().matmul(&b).unwrap().value();
    let right = a.matmul(&b).unwrap().value();
    assert_eq!(left, right); // bitwise
}

#[test]
fn matmul_inner_dim_mismatch() {
    let t = Tape::new();
    let a = leaf(&t, &[0.0; 6], &[2, 3]);
    let b = leaf(&t, &[0.0; 8], &[2, 4]);
    assert!(matches!(a.matmul(&b), Err(TensorError::InnerDimMismatch { .. })));
}

#[test]
fn softmax_constant_vector_is_uniform() {
    let t = Tape::new();
    let x = leaf(&t, &[0.7; 4], &[4]);
    let y = x.softmax(0).unwrap().value();
    for v in y {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_extreme_gap_no_overflow() {
    let t = Tape::new();
    let x = leaf(&t, &[1e4, 1e4 - 1000.0], &[2]);
    let y = x.softmax(0).unwrap().value();
    assert!(y.iter().all(|v| v.is_finite()));
    assert!((y[0] - 1.0).abs() < 1e-12);
    assert!(y[1].abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::stream(42);
    for _ in 0..50 {
        let t = Tape::new();
        let data: Vec<f64> = (0..24).map(|_| r.gen_range(-50.0..50.0)).collect();
        let x = leaf(&t, &data, &[4, 6]);
        let y = x.softmax(1).unwrap().value();
        for row in y.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, f64::NAN], &[2]);
    assert!(matches!(x.softmax(0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn layer_norm_constant_row_zero_before_affine() {
    let t = Tape::new();
    let x = leaf(&t, &[3.0; 5], &[5]);
    let gain = t.constant(vec![1.0; 5], &[5]).unwrap();
    let bias = t.constant(vec![0.0; 5], &[5]).unwrap();
    let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().value();
    for v in y {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_normalizes_each_row() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 8.0], &[2, 4]);
    let gain = t.constant(vec![1.0; 4], &[4]).unwrap();
    let bias = t.constant(vec![0.0; 4], &[4]).unwrap();
    let y = x.layer_norm(&gain, &bias, 1e-10).unwrap().value();
    for row in y.chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn conv3d_identity_kernel() {
    let mut r = rng::stream(5);
    let t = Tape::new();
    let data: Vec<f64> = (0..27).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = leaf(&t, &data, &[1, 3, 3, 3]);
    let w = t.constant(vec![1.0], &[1, 1, 1, 1, 1]).unwrap();
    let y = x.conv3d(&w, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(y.value(), data);
}

#[test]
fn conv3d_kernel_too_large() {
    let t = Tape::new();
    let x = leaf(&t, &[0.0; 8], &[1, 2, 2, 2]);
    let w = t.constant(vec![0.0; 125], &[1, 1, 5, 5, 5]).unwrap();
    assert!(matches!(
        x.conv3d(&w, None, [1, 1, 1], [1, 1, 1]),
        Err(TensorError::KernelTooLarge { .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, 2.0, 3.0], &[3]);
    t.backward(&x.sum_all()).unwrap();
    assert_eq!(x.grad(), vec![1.0; 3]);
}

#[test]
fn backward_of_zero_scaled_graph_is_zero() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, -2.0], &[2]);
    let loss = x.exp().sum_all().scale(0.0);
    t.backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, 2.0], &[2]);
    assert!(matches!(t.backward(&x), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn repeated_backward_accumulates() {
    let t = Tape::new();
    let x = leaf(&t, &[2.0], &[1]);
    let loss = x.scale(3.0).sum_all();
    t.backward(&loss).unwrap();
    t.backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![6.0]);
    t.zero_grad();
    t.backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![3.0]);
}

#[test]
fn grad_of_leaf_unreachable_from_loss_is_zero() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0], &[1]);
    let y = leaf(&t, &[5.0], &[1]);
    let loss = x.scale(2.0).sum_all();
    t.backward(&loss).unwrap();
    assert_eq!(y.grad(), vec![0.0]);
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut r = rng::stream(99);
        let t = Tape::new();
        let a: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let av = leaf(&t, &a, &[3, 4]);
        let bv = leaf(&t, &b, &[4, 3]);
        let loss = av.matmul(&bv).unwrap().softmax(1).unwrap().sum_all();
        loss.scalar_value().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn index_select_gathers_and_scatters() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
    let y = x.index_select(0, &[2, 0, 2]).unwrap();
    assert_eq!(y.value(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    t.backward(&y.sum_all()).unwrap();
    // row 2 selected twice, row 1 never
    assert_eq!(x.grad(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn index_select_rejects_out_of_range() {
    let t = Tape::new();
    let x = leaf(&t, &[0.0; 4], &[2, 2]);
    assert!(matches!(x.index_select(0, &[2]), Err(TensorError::IndexOutOfRange { .. })));
}

#[test]
fn permute_roundtrip() {
    let t = Tape::new();
    let x = leaf(&t, &(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
    let y = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(y.shape(), vec![4, 2, 3]);
    let back = y.permute(&[1, 2, 0]).unwrap();
    assert_eq!(back.value(), x.value());
}

#[test]
fn trilinear_matches_corner_formula() {
    // Direct 8-corner interpolation on a random grid, independent math.
    let mut r = rng::stream(123);
    let t = Tape::new();
    let grid_data: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let grid = leaf(&t, &grid_data, &[2, 3, 3, 3]);
    for _ in 0..20 {
        let c: [f64; 3] = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let coords = t.constant(vec![c[0], c[1], c[2]], &[1, 3]).unwrap();
        let out = grid.trilinear_sample(&coords).unwrap().value();
        for ch in 0..2 {
            let at = |z: usize, y: usize, x: usize| grid_data[ch * 27 + z * 9 + y * 3 + x];
            let p: Vec<f64> = c.iter().map(|v| v * 2.0).collect();
            let i0: Vec<usize> = p.iter().map(|v| v.floor() as usize).collect();
            let i1: Vec<usize> = i0.iter().map(|&v| (v + 1).min(2)).collect();
            let f: Vec<f64> = p.iter().zip(&i0).map(|(v, &i)| v - i as f64).collect();
            let mut expect = 0.0;
            for (dz, wz) in [(0, 1.0 - f[0]), (1, f[0])] {
                for (dy, wy) in [(0, 1.0 - f[1]), (1, f[1])] {
                    for (dx, wx) in [(0, 1.0 - f[2]), (1, f[2])] {
                        let z = if dz == 0 { i0[0] } else { i1[0] };
                        let y = if dy == 0 { i0[1] } else { i1[1] };
                        let x = if dx == 0 { i0[2] } else { i1[2] };
                        expect += wz * wy * wx * at(z, y, x);
                    }
                }
            }
            assert!((out[ch] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn trilinear_clamps_to_border() {
    let t = Tape::new();
    let grid = leaf(&t, &(0..8).map(|v| v as f64).collect::<Vec<_>>(), &[1, 2, 2, 2]);
    let coords = t.constant(vec![-0.5, -0.5, -0.5, 2.0, 2.0, 2.0], &[2, 3]).unwrap();
    let out = grid.trilinear_sample(&coords).unwrap().value();
    assert_eq!(out, vec![0.0, 7.0]);
}

#[test]
fn masked_softmax_excludes_masked_entries() {
    let t = Tape::new();
    let x = leaf(&t, &[1.0, 2.0, 3.0, 4.0], &[1, 4]);
    let mask: std::rc::Rc<[bool]> = vec![false, true, false, true].into();
    let y = x.masked_softmax(1, mask).unwrap().value();
    assert_eq!(y[1], 0.0);
    assert_eq!(y[3], 0.0);
    assert!((y[0] + y[2] - 1.0).abs() < 1e-12);
}

#[test]
fn concat_stacks_along_axis() {
    let t = Tape::new();
    let a = leaf(&t, &[1.0, 2.0], &[1, 2]);
    let b = leaf(&t, &[3.0, 4.0, 5.0, 6.0], &[2, 2]);
    let c = Var::concat(&[&a, &b], 0).unwrap();
    assert_eq!(c.shape(), vec![3, 2]);
    assert_eq!(c.value(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    t.backward(&c.index_select(0, &[0]).unwrap().sum_all()).unwrap();
    assert_eq!(a.grad(), vec![1.0, 1.0]);
    assert_eq!(b.grad(), vec![0.0; 4]);
}
