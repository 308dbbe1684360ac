use atrous_lab::autodiff::Tape;
use atrous_lab::nn::{
    batch_norm2d, bilinear_resize, conv2d, conv_transpose2d, global_avg_pool, scaled_dot_attention, BatchNorm2d,
    BnStats, ConvGeom, Mode, BN_EPS,
};
use atrous_lab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::conv_oracle;

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeom) -> Tensor<f64> {
    let tape = Tape::new();
    let bias = b.map(|b| tape.constant(b));
    conv2d(tape.constant(x), tape.constant(w), bias, g).unwrap().to_tensor()
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
    let tape = Tape::new();
    conv_transpose2d(tape.constant(x), tape.constant(w), None, g).unwrap().to_tensor()
}

#[test]
fn ones_kernel_counts_taps() {
    let x = Tensor::<f64>::ones(vec![1, 1, 5, 5]);
    let w = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
    let y = conv(&x, &w, None, ConvGeom::same(3, 1));
    assert_eq!(y.get(&[0, 0, 2, 2]), 9.0);
    assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
    let y = conv(&x, &w, None, ConvGeom::same(3, 2));
    assert_eq!(y.shape(), &[1, 1, 5, 5]);
    assert_eq!(y.get(&[0, 0, 2, 2]), 9.0);
}

#[test]
fn dilated_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rates = [1usize, 6, 12, 18];
    for case in 0..200 {
        let d = if case < 8 { rates[case % 4] } else { rng.random_range(1..20) };
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let x = Tensor::<f64>::randn(vec![b, ci, h, w], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![co, ci, 3, 3], 1.0, &mut rng);
        let g = ConvGeom::same(3, d);
        let got = conv(&x, &k, None, g);
        let want = conv_oracle(&x, &k, g);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-6, "case {case} d {d}");
    }
    let x = Tensor::<f64>::randn(vec![2, 3, 9, 9], 1.0, &mut rng);
    for d in rates {
        let k = Tensor::<f64>::randn(vec![4, 3, 3, 3], 1.0, &mut rng);
        let g = ConvGeom::same(3, d);
        assert!(conv(&x, &k, None, g).max_abs_diff(&conv_oracle(&x, &k, g)) <= 1e-6);
    }
}

#[test]
fn strided_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::randn(vec![2, 2, 9, 7], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
    let g = ConvGeom { stride: 2, padding: 1, dilation: 1 };
    assert!(conv(&x, &k, None, g).max_abs_diff(&conv_oracle(&x, &k, g)) <= 1e-9);
}

#[test]
fn conv_bias_and_zero_input() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
    let w = Tensor::<f64>::ones(vec![3, 2, 3, 3]);
    let b = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = conv(&x, &w, Some(&b), ConvGeom::same(3, 1));
    for c in 0..3 {
        assert!((0..16).all(|i| y.data()[c * 16 + i] == b.data()[c]));
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.constant(&Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(conv2d(x, w, None, ConvGeom::same(3, 1)).is_err());
}

#[test]
fn transposed_conv_of_single_pixel() {
    let x = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
    let w = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
    let y = conv_t(&x, &w, ConvGeom { stride: 2, padding: 0, dilation: 1 });
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..50 {
        let stride = rng.random_range(1..3);
        let dilation = rng.random_range(1..3);
        let k = rng.random_range(1..4);
        let padding = rng.random_range(0..2);
        let g = ConvGeom { stride, padding, dilation };
        let eff = dilation * (k - 1) + 1;
        // pick an input size with integral output
        let n_out = rng.random_range(1..5);
        let h = ((n_out - 1) * stride + eff) as isize - 2 * padding as isize;
        if h <= 0 {
            continue;
        }
        let h = h as usize;
        let x = Tensor::<f64>::randn(vec![2, 3, h, h], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![2, 3, k, k], 1.0, &mut rng);
        let y = conv(&x, &w, None, g);
        let r = Tensor::<f64>::randn(y.shape().to_vec(), 1.0, &mut rng);
        // transposed conv weights are [C_in, C_out, k, k]: same array, roles swapped
        let xt = conv_t(&r, &w, g);
        assert_eq!(xt.shape(), x.shape(), "case {case}");
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn transposed_conv_zero_input_gives_bias() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros(vec![1, 2, 3, 3]));
    let w = tape.constant(&Tensor::ones(vec![2, 1, 2, 2]));
    let b = tape.constant(&Tensor::full(vec![1], 0.25));
    let y = conv_transpose2d(x, w, Some(b), ConvGeom { stride: 2, padding: 0, dilation: 1 }).unwrap();
    assert!(y.to_tensor().data().iter().all(|&v| v == 0.25));
}

fn pool(x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    global_avg_pool(tape.constant(x)).unwrap().to_tensor()
}

#[test]
fn global_pool_cases() {
    assert_eq!(pool(&Tensor::full(vec![1, 1, 3, 2], 1.75)).data(), &[1.75]);
    let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pool(&x);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[2.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::randn(vec![2, 3, 5, 4], 1.0, &mut rng);
    let y = pool(&x);
    for (i, plane) in x.data().chunks(20).enumerate() {
        assert!((y.data()[i] - plane.iter().sum::<f64>() / 20.0).abs() <= 1e-7);
    }
}

fn bn_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
    let tape = Tape::new();
    let c = gamma.len();
    let g = tape.constant_vec(vec![c], gamma.to_vec());
    let b = tape.constant_vec(vec![c], beta.to_vec());
    batch_norm2d(tape.constant(x), g, b, BnStats::Batch, BN_EPS).unwrap().y.to_tensor()
}

#[test]
fn batch_norm_of_standardised_input() {
    let x = Tensor::from_vec(vec![2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let y = bn_train(&x, &[1.0], &[0.0]);
    let scale = (1.0 + BN_EPS).powf(-0.5);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() <= 1e-12);
    }
}

#[test]
fn batch_norm_inference_uses_running_stats() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![1, 1, 2, 2]));
    let g = tape.constant_vec(vec![1], vec![2.0]);
    let b = tape.constant_vec(vec![1], vec![1.0]);
    let s = BnStats::Running { mean: &[0.0], var: &[1.0] };
    let y = batch_norm2d(x, g, b, s, 0.0).unwrap().y.to_tensor();
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn batch_norm_training_output_is_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let x = Tensor::<f64>::randn(vec![3, 2, 4, 5], 3.0, &mut rng);
        let y = bn_train(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| (0..20).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 2 + c) * 20 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 60.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}

#[test]
fn batch_norm_layer_updates_running_stats_in_training_only() {
    let bn = BatchNorm2d::<f64>::new(1);
    let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let tape = Tape::new();
    bn.forward(&tape, tape.constant(&x), Mode::Train).unwrap();
    let ups = tape.take_stat_updates();
    let mean = ups.iter().find(|(id, _)| *id == bn.running_mean.id()).unwrap();
    assert!((mean.1[0] - 0.25).abs() < 1e-12);
    let var = ups.iter().find(|(id, _)| *id == bn.running_var.id()).unwrap();
    // unbiased variance 5/3 blended with momentum 0.1 into 1
    assert!((var.1[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    let tape = Tape::new();
    bn.forward(&tape, tape.constant(&x), Mode::Eval).unwrap();
    assert!(tape.take_stat_updates().is_empty());
}

fn resize(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let tape = Tape::new();
    bilinear_resize(tape.constant(x), h, w).unwrap().to_tensor()
}

/// Half-pixel-centre bilinear interpolation with edge clamping.
fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, h, oh);
                for xo in 0..ow {
                    let (x0, x1, fx) = src(xo, w, ow);
                    let v = |yy, xx| x.get(&[n, ch, yy, xx]);
                    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::from_vec(vec![b, c, oh, ow], out).unwrap()
}

#[test]
fn bilinear_same_size_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::<f64>::randn(vec![1, 2, 3, 5], 1.0, &mut rng);
    assert!(resize(&x, 3, 5).bit_eq(&x));
}

#[test]
fn bilinear_constant_plane() {
    let y = resize(&Tensor::full(vec![1, 1, 1, 1], 3.5), 4, 4);
    assert!(y.data().iter().all(|&v| v == 3.5));
}

#[test]
fn bilinear_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::<f64>::randn(vec![2, 1, 2, 2], 1.0, &mut rng);
    assert!(resize(&x, 4, 4).max_abs_diff(&bilinear_oracle(&x, 4, 4)) <= 1e-6);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let (oh, ow) = (rng.random_range(1..13), rng.random_range(1..13));
        let x = Tensor::<f64>::randn(vec![1, 2, h, w], 1.0, &mut rng);
        assert!(resize(&x, oh, ow).max_abs_diff(&bilinear_oracle(&x, oh, ow)) <= 1e-6);
    }
}

fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    scaled_dot_attention(tape.constant(q), tape.constant(k), tape.constant(v)).unwrap().to_tensor()
}

#[test]
fn single_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let q = Tensor::<f64>::randn(vec![1, 3, 4], 5.0, &mut rng);
    let k = Tensor::<f64>::randn(vec![1, 1, 4], 1.0, &mut rng);
    let v = Tensor::<f64>::randn(vec![1, 1, 2], 1.0, &mut rng);
    let y = attend(&q, &k, &v);
    for row in y.data().chunks(2) {
        assert!((row[0] - v.data()[0]).abs() < 1e-12 && (row[1] - v.data()[1]).abs() < 1e-12);
    }
}

#[test]
fn identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let q = Tensor::<f64>::randn(vec![1, 2, 3], 1.0, &mut rng);
    let k = Tensor::from_vec(vec![1, 4, 3], [0.3, -0.2, 0.9].repeat(4)).unwrap();
    let v = Tensor::<f64>::randn(vec![1, 4, 2], 1.0, &mut rng);
    let y = attend(&q, &k, &v);
    for j in 0..2 {
        let mean = (0..4).map(|i| v.data()[i * 2 + j]).sum::<f64>() / 4.0;
        assert!((y.data()[j] - mean).abs() < 1e-12);
        assert!((y.data()[2 + j] - mean).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_explicit_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..50 {
        let (nq, nk, d, dv) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..4));
        let q = Tensor::<f64>::randn(vec![2, nq, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![2, nk, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![2, nk, dv], 1.0, &mut rng);
        let y = attend(&q, &k, &v);
        for b in 0..2 {
            for i in 0..nq {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| (0..d).map(|c| q.get(&[b, i, c]) * k.get(&[b, j, c])).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dv {
                    let want: f64 = (0..nk).map(|j| e[j] / z * v.get(&[b, j, c])).sum();
                    assert!((y.get(&[b, i, c]) - want).abs() <= 1e-6);
                }
            }
        }
    }
}
