use atrous_lab::autodiff::{gradcheck, Tape};
use atrous_lab::nn::{ConvGeom, Linear, Mode, Module, ParamKind, BN_EPS};
use atrous_lab::peft::{count_parameters, lora_forward, Aspp, AtrousAttention, AtrousLoraAdapter, LoraAdapter};
use atrous_lab::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{conv_oracle, pointwise};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set(p: &mut atrous_lab::nn::Param<f64>, t: Tensor<f64>) {
    let grad = p.tensor.requires_grad;
    p.tensor = t.with_requires_grad(grad);
}

#[test]
fn zero_up_projection_reproduces_base() {
    let mut r = rng(1);
    let base = Linear::<f64>::new(8, 6, true, &mut r);
    let lora = LoraAdapter::<f64>::new(8, 6, 2, &mut r).unwrap();
    let x = Tensor::<f64>::randn(vec![3, 8], 1.0, &mut r);
    let tape = Tape::new();
    let xv = tape.constant(&x);
    let a = lora_forward(&tape, xv, &base, &lora).unwrap().to_tensor();
    let b = base.forward(&tape, xv).unwrap().to_tensor();
    assert!(a.bit_eq(&b));
}

#[test]
fn lora_trainable_count() {
    let lora = LoraAdapter::<f32>::new(64, 64, 4, &mut rng(2)).unwrap();
    assert_eq!(count_parameters(&lora).trainable, 512);
    let lora8 = LoraAdapter::<f32>::new(64, 64, 8, &mut rng(2)).unwrap();
    assert_eq!(count_parameters(&lora8).trainable, 1024);
}

#[test]
fn lora_rank_bounds() {
    assert!(LoraAdapter::<f32>::new(8, 6, 0, &mut rng(3)).is_err());
    assert!(LoraAdapter::<f32>::new(8, 6, 6, &mut rng(3)).is_err());
    assert!(LoraAdapter::<f32>::new(8, 6, 5, &mut rng(3)).is_ok());
}

#[test]
fn lora_matches_dense_materialisation() {
    let mut r = rng(4);
    for _ in 0..50 {
        let base = Linear::<f64>::new(7, 5, false, &mut r);
        let mut lora = LoraAdapter::<f64>::new(7, 5, 3, &mut r).unwrap();
        set(&mut lora.w_b, Tensor::randn(vec![5, 3], 1.0, &mut r));
        let x = Tensor::<f64>::randn(vec![4, 7], 1.0, &mut r);
        let tape = Tape::new();
        let y = lora_forward(&tape, tape.constant(&x), &base, &lora).unwrap().to_tensor();
        let (wo, wa, wb) = (base.weight.tensor.data(), lora.w_a.tensor.data(), lora.w_b.tensor.data());
        for n in 0..4 {
            for o in 0..5 {
                let mut acc = 0.0;
                for i in 0..7 {
                    let delta: f64 = (0..3).map(|k| wb[o * 3 + k] * wa[k * 7 + i]).sum();
                    acc += (wo[o * 7 + i] + delta) * x.data()[n * 7 + i];
                }
                assert!((y.data()[n * 5 + o] - acc).abs() <= 1e-6);
            }
        }
    }
}

fn zero_all(m: &mut impl Module<f64>) {
    m.visit_mut("", &mut |n, p| {
        if !n.ends_with("gamma") && !n.ends_with("running_var") {
            let s = p.tensor.shape().to_vec();
            set(p, Tensor::zeros(s));
        }
    });
}

#[test]
fn zero_aspp_outputs_zero() {
    let mut aspp = Aspp::<f64>::new(3, 4, &[1, 6, 12, 18], &mut rng(5)).unwrap();
    zero_all(&mut aspp);
    let x = Tensor::<f64>::randn(vec![2, 3, 5, 5], 1.0, &mut rng(6));
    for mode in [Mode::Train, Mode::Eval] {
        let tape = Tape::new();
        let y = aspp.forward(&tape, tape.constant(&x), mode).unwrap().to_tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn aspp_concatenates_rates_plus_pool() {
    let aspp = Aspp::<f64>::new(3, 8, &[1, 6, 12, 18], &mut rng(7)).unwrap();
    let x = Tensor::<f64>::randn(vec![1, 3, 6, 6], 1.0, &mut rng(8));
    let tape = Tape::new();
    assert_eq!(aspp.concat(&tape, tape.constant(&x)).unwrap().shape(), vec![1, 40, 6, 6]);
    assert_eq!(aspp.fuse_proj.in_channels(), 40);
    assert!(Aspp::<f64>::new(3, 8, &[], &mut rng(7)).is_err());
    assert!(Aspp::<f64>::new(3, 8, &[0, 1], &mut rng(7)).is_err());
}

/// Batch-statistics BN followed by ReLU, computed per channel by hand.
fn bn_relu(y: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
    let (b, c, hw) = (y.shape()[0], y.shape()[1], y.shape()[2] * y.shape()[3]);
    let mut out = y.data().to_vec();
    for ch in 0..c {
        let idx: Vec<usize> = (0..b).flat_map(|n| (0..hw).map(move |p| (n * c + ch) * hw + p)).collect();
        let mean = idx.iter().map(|&i| y.data()[i]).sum::<f64>() / idx.len() as f64;
        let var = idx.iter().map(|&i| (y.data()[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = (gamma[ch] * (y.data()[i] - mean) / (var + BN_EPS).sqrt() + beta[ch]).max(0.0);
        }
    }
    Tensor::from_vec(y.shape().to_vec(), out).unwrap()
}

#[test]
fn single_rate_aspp_reduces_to_conv_bn_relu() {
    let mut r = rng(9);
    let mut aspp = Aspp::<f64>::new(2, 3, &[1], &mut r).unwrap();
    // fusion passes the conv branch through and drops the pooled branch
    let mut fuse = vec![0.0; 3 * 6];
    for c in 0..3 {
        fuse[c * 6 + c] = 1.0;
    }
    set(&mut aspp.fuse_proj.weight, Tensor::from_vec(vec![3, 6, 1, 1], fuse).unwrap());
    let x = Tensor::<f64>::randn(vec![2, 2, 5, 4], 1.0, &mut r);
    let tape = Tape::new();
    let got = aspp.forward(&tape, tape.constant(&x), Mode::Train).unwrap().to_tensor();
    let conv = conv_oracle(&x, &aspp.branches[0].weight.tensor, ConvGeom::same(3, 1));
    let want = bn_relu(&conv, aspp.fuse_bn.gamma.tensor.data(), aspp.fuse_bn.beta.tensor.data());
    assert!(got.max_abs_diff(&want) <= 1e-6);
}

#[test]
fn zero_gate_projection_halves_aspp() {
    let mut r = rng(10);
    let mut att = AtrousAttention::<f64>::new(3, 4, &[1, 2], &mut r).unwrap();
    let s = att.attn_proj.weight.tensor.shape().to_vec();
    set(&mut att.attn_proj.weight, Tensor::zeros(s));
    let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut r);
    let tape = Tape::new();
    let tr = att.trace(&tape, tape.constant(&x), Mode::Train).unwrap();
    assert!(tr.gate.to_tensor().data().iter().all(|&g| g == 0.5));
    let (a, o) = (tr.aspp.to_tensor(), tr.out.to_tensor());
    assert!(a.data().iter().zip(o.data()).all(|(a, o)| *o == 0.5 * a));
}

#[test]
fn zero_aspp_output_gives_zero_attention() {
    let mut r = rng(11);
    let mut att = AtrousAttention::<f64>::new(3, 4, &[1, 2], &mut r).unwrap();
    zero_all(&mut att.aspp);
    let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut r);
    let tape = Tape::new();
    let y = att.forward(&tape, tape.constant(&x), Mode::Train).unwrap().to_tensor();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

/// The module written out line by line: dilated branches, pooled branch,
/// concatenation, fusion, BN, ReLU, sigmoid gate, product.
fn attention_oracle(att: &AtrousAttention<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c = att.aspp.fuse_proj.out_channels();
    let mut feats: Vec<Tensor<f64>> = att
        .aspp
        .branches
        .iter()
        .zip(&att.aspp.rates)
        .map(|(br, &d)| conv_oracle(x, &br.weight.tensor, ConvGeom::same(3, d)))
        .collect();
    let ci = x.shape()[1];
    let mut gap = vec![0.0; b * ci];
    for (i, plane) in x.data().chunks(h * w).enumerate() {
        gap[i] = plane.iter().sum::<f64>() / (h * w) as f64;
    }
    let pooled = pointwise(&Tensor::from_vec(vec![b, ci, 1, 1], gap).unwrap(), att.aspp.pool_proj.weight.tensor.data(), None, c);
    let pooled = Tensor::from_vec(
        vec![b, c, h, w],
        pooled.data().iter().flat_map(|&v| std::iter::repeat(v).take(h * w)).collect(),
    )
    .unwrap();
    feats.push(pooled);
    let k = feats.len();
    let mut cat = vec![0.0; b * k * c * h * w];
    for n in 0..b {
        for (j, f) in feats.iter().enumerate() {
            let src = &f.data()[n * c * h * w..(n + 1) * c * h * w];
            let dst = (n * k + j) * c * h * w;
            cat[dst..dst + c * h * w].copy_from_slice(src);
        }
    }
    let cat = Tensor::from_vec(vec![b, k * c, h, w], cat).unwrap();
    let fused = pointwise(&cat, att.aspp.fuse_proj.weight.tensor.data(), None, c);
    let y = bn_relu(&fused, att.aspp.fuse_bn.gamma.tensor.data(), att.aspp.fuse_bn.beta.tensor.data());
    let bias = att.attn_proj.bias.as_ref().map(|p| p.tensor.data().to_vec());
    let logits = pointwise(&y, att.attn_proj.weight.tensor.data(), bias.as_deref(), 1);
    let mut out = y.data().to_vec();
    for n in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                let g = 1.0 / (1.0 + (-logits.data()[n * h * w + p]).exp());
                out[(n * c + ch) * h * w + p] *= g;
            }
        }
    }
    Tensor::from_vec(vec![b, c, h, w], out).unwrap()
}

#[test]
fn attention_matches_line_by_line_oracle() {
    let mut r = rng(12);
    for case in 0..20 {
        let mut att = AtrousAttention::<f64>::new(3, 4, &[1, 6, 12, 18], &mut r).unwrap();
        set(att.attn_proj.bias.as_mut().unwrap(), Tensor::randn(vec![1], 0.5, &mut r));
        set(&mut att.aspp.fuse_bn.gamma, Tensor::randn(vec![4], 1.0, &mut r));
        set(&mut att.aspp.fuse_bn.beta, Tensor::randn(vec![4], 1.0, &mut r));
        let x = Tensor::<f64>::randn(vec![2, 3, 5 + case % 3, 6], 1.0, &mut r);
        let tape = Tape::new();
        let got = att.forward(&tape, tape.constant(&x), Mode::Train).unwrap().to_tensor();
        assert!(got.max_abs_diff(&attention_oracle(&att, &x)) <= 1e-6, "case {case}");
    }
}

#[test]
fn adapter_with_zero_up_projection_is_the_base() {
    let mut r = rng(13);
    let base = Linear::<f64>::new(6, 6, true, &mut r);
    let ad = AtrousLoraAdapter::new(base.clone(), 2, Some(&[1, 6, 12, 18]), (2, 3), &mut r).unwrap();
    let x = Tensor::<f64>::randn(vec![2, 6, 6], 1.0, &mut r);
    let tape = Tape::new();
    let xv = tape.constant(&x);
    let y = ad.forward(&tape, xv, Mode::Train).unwrap().to_tensor();
    assert!(y.bit_eq(&base.forward(&tape, xv).unwrap().to_tensor()));
}

#[test]
fn adapter_closed_form_with_identity_attention() {
    let mut r = rng(14);
    let base = Linear::<f64>::new(5, 4, true, &mut r);
    let mut ad = AtrousLoraAdapter::new(base, 2, Some(&[1]), (2, 2), &mut r).unwrap();
    let att = ad.attention.as_mut().unwrap();
    // rate-1 branch with a centre-tap identity kernel
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0;
    k[(2 + 1) * 9 + 4] = 1.0;
    set(&mut att.aspp.branches[0].weight, Tensor::from_vec(vec![2, 2, 3, 3], k).unwrap());
    set(&mut att.aspp.fuse_proj.weight, Tensor::from_vec(vec![2, 4, 1, 1], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap());
    set(&mut att.aspp.fuse_bn.running_var, Tensor::full(vec![2], 1.0 - BN_EPS));
    set(&mut att.attn_proj.weight, Tensor::zeros(vec![1, 2, 1, 1]));
    set(&mut att.attn_proj.bias.as_mut().unwrap(), Tensor::zeros(vec![1]));
    let wa: Vec<f64> = Tensor::<f64>::uniform(vec![10], 1.0, &mut r).data().iter().map(|v| v.abs()).collect();
    set(&mut ad.lora.w_a, Tensor::from_vec(vec![2, 5], wa).unwrap());
    set(&mut ad.lora.w_b, Tensor::randn(vec![4, 2], 1.0, &mut r));
    // positive inputs keep the bottleneck clear of the ReLU
    let x: Vec<f64> = Tensor::<f64>::uniform(vec![20], 1.0, &mut r).data().iter().map(|v| v.abs() + 0.1).collect();
    let x = Tensor::from_vec(vec![1, 4, 5], x).unwrap();
    let tape = Tape::new();
    let got = ad.forward(&tape, tape.constant(&x), Mode::Eval).unwrap().to_tensor();
    let base = ad.base.forward(&tape, tape.constant(&x)).unwrap().to_tensor();
    let (wa, wb) = (ad.lora.w_a.tensor.data(), ad.lora.w_b.tensor.data());
    for n in 0..4 {
        let h: Vec<f64> = (0..2).map(|k| (0..5).map(|i| wa[k * 5 + i] * x.data()[n * 5 + i]).sum()).collect();
        for o in 0..4 {
            let want = base.data()[n * 4 + o] + 0.5 * (0..2).map(|k| h[k] * wb[o * 2 + k]).sum::<f64>();
            assert!((got.data()[n * 4 + o] - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn adapter_rejects_token_count_off_grid() {
    let mut r = rng(15);
    let ad = AtrousLoraAdapter::new(Linear::<f64>::new(6, 6, true, &mut r), 2, Some(&[1]), (2, 3), &mut r).unwrap();
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![1, 5, 6]));
    assert!(ad.forward(&tape, x, Mode::Eval).is_err());
}

#[test]
fn adapter_gradients_check_and_base_gets_none() {
    let mut r = rng(16);
    let mut ad = AtrousLoraAdapter::new(Linear::<f64>::new(6, 6, true, &mut r), 2, Some(&[1, 6, 12, 18]), (2, 3), &mut r).unwrap();
    set(&mut ad.lora.w_b, Tensor::randn(vec![6, 2], 0.5, &mut r));
    let x = Tensor::<f64>::randn(vec![2, 6, 6], 1.0, &mut r);

    let trainable: Vec<_> = ad.named_params().into_iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| (p.id(), p.tensor.clone())).collect();
    assert!(ad.named_params().iter().all(|(n, p)| !n.starts_with("base") || p.kind() == ParamKind::Frozen));
    let ids: Vec<_> = trainable.iter().map(|(id, _)| *id).collect();
    let inputs: Vec<Tensor<f64>> = trainable.into_iter().map(|(_, t)| t).collect();
    let r = gradcheck(
        |tape, v| {
            for (id, var) in ids.iter().zip(v) {
                tape.bind_param(*id, *var);
            }
            let w: Vec<f64> = (0..72).map(|i| (i as f64 * 0.37).sin()).collect();
            let y = ad.forward(tape, tape.constant(&x), Mode::Train)?;
            Ok(y.mul(tape.constant_vec(vec![2, 6, 6], w))?.sum_all())
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");

    let tape = Tape::new();
    let loss = ad.forward(&tape, tape.constant(&x), Mode::Train).unwrap().sum_all();
    tape.backward(loss).unwrap();
    for (n, p) in ad.named_params() {
        let g = tape.param_grad(p.id());
        if n.starts_with("base") {
            assert!(g.map_or(true, |g| g.data().iter().all(|&v| v == 0.0)), "{n}");
        } else if p.is_trainable() {
            assert!(g.is_some(), "{n}");
        }
    }
}
