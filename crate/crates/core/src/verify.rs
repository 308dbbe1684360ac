//! Finite-difference gradient suite over every differentiable building block.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{concat, gradcheck, GradcheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{bce_loss, combined_loss, dice_loss};
use crate::model::{AdapterConfig, BBox, ModelConfig, Segmenter};
use crate::nn::{
    batch_norm2d, bilinear_resize, conv2d, conv_transpose2d, global_avg_pool, layer_norm, scaled_dot_attention,
    BnStats, ConvGeom, Linear, Mode, Module, MultiHeadAttention, ParamId, ParamKind, BN_EPS, LN_EPS,
};
use crate::peft::{lora_forward, Aspp, AtrousAttention, AtrousLoraAdapter, LoraAdapter};
use crate::tensor::Tensor;

/// Group of checks selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Tensor,
    Layers,
    Peft,
    Model,
    Loss,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "tensor" => Suite::Tensor,
            "layers" => Suite::Layers,
            "peft" => Suite::Peft,
            "model" => Suite::Model,
            "loss" => Suite::Loss,
            _ => return Err(Error::Validation(format!("unknown gradcheck module {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub module: Suite,
    pub name: String,
    #[serde(flatten)]
    pub report: GradcheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub module: Suite,
    pub tol: f64,
    /// Tolerance used for the end-to-end model check.
    pub model_tol: f64,
    pub pass: bool,
    pub seconds: f64,
    pub checks: Vec<CheckResult>,
}

/// End-to-end checks run at this multiple of the requested tolerance.
pub const MODEL_TOL_FACTOR: f64 = 10.0;


type F<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

fn hr<G>(g: G) -> G
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    g
}

struct Runner {
    module: Suite,
    tol: f64,
    rng: ChaCha8Rng,
    out: Vec<CheckResult>,
}

/// Fixed pseudo-random weights so the probed scalar depends on every output.
fn probe<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7373 + 0.31).sin()).collect();
    Ok(y.mul(y.tape().constant_vec(y.shape(), w))?.sum_all())
}

impl Runner {
    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), std, &mut self.rng)
    }

    /// Values with magnitude in `[lo, lo + span)` and random sign.
    fn away_from_zero(&mut self, shape: &[usize], lo: f64, span: f64) -> Tensor<f64> {
        let u = Tensor::<f64>::uniform(shape.to_vec(), 1.0, &mut self.rng);
        let data = u.data().iter().map(|&v| v.signum() * (lo + span * v.abs())).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape")
    }

    fn check(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: &F, tol: f64) -> Result<()> {
        let report = gradcheck(f, &inputs, tol)?;
        self.out.push(CheckResult {
            module: self.module,
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    /// Checks `f` w.r.t. `inputs` and the parameters of `m` (all non-buffers,
    /// or only trainable ones).
    fn check_module<M: Module<f64>>(
        &mut self,
        name: &str,
        m: &M,
        trainable_only: bool,
        inputs: Vec<Tensor<f64>>,
        f: &F,
        tol: f64,
    ) -> Result<()> {
        let mut ids: Vec<ParamId> = Vec::new();
        let mut all = inputs;
        let n_in = all.len();
        m.visit("", &mut |_, p| {
            if p.is_trainable() || (!trainable_only && p.kind() != ParamKind::Buffer) {
                ids.push(p.id());
                all.push(p.tensor.clone());
            }
        });
        let g = hr(move |tape, v| {
            for (k, &id) in ids.iter().enumerate() {
                tape.bind_param(id, v[n_in + k]);
            }
            f(tape, &v[..n_in])
        });
        self.check(name, all, &g, tol)
    }
}

fn tensor_checks(r: &mut Runner) -> Result<()> {
    let tol = r.tol;
    let (a, b) = (r.randn(&[2, 1, 3, 4], 1.0), r.randn(&[3, 4, 2], 1.0));
    r.check("matmul_batched_broadcast", vec![a, b], &|_, v| probe(v[0].matmul(v[1])?), tol)?;
    let (a, b) = (r.randn(&[2, 3, 4], 1.0), r.randn(&[3, 1], 1.0));
    r.check("add_sub_mul_broadcast", vec![a, b], &|_, v| probe(v[0].add(v[1])?.mul(v[1])?.sub(v[0])?), tol)?;
    let (a, b) = (r.randn(&[3, 4], 1.0), r.away_from_zero(&[4], 0.5, 1.0));
    r.check("div", vec![a, b], &|_, v| probe(v[0].div(v[1])?), tol)?;
    let x = r.away_from_zero(&[12], 0.1, 2.0);
    r.check("exp_tanh_sigmoid_gelu", vec![x.clone()], &|_, v| {
        probe(concat(&[v[0].exp(), v[0].tanh(), v[0].sigmoid(), v[0].gelu(), v[0].square()], 0)?)
    }, tol)?;
    r.check("relu_away_from_kink", vec![x.clone()], &|_, v| probe(v[0].relu()), tol)?;
    r.check("clamp_inside_and_outside", vec![x.clone()], &|_, v| probe(v[0].clamp(-0.95, 0.97)), tol)?;
    let p = r.away_from_zero(&[8], 0.2, 2.0);
    r.check("ln_sqrt", vec![p], &|_, v| {
        let a = v[0].square().add_scalar(0.5);
        probe(concat(&[a.ln(), a.sqrt()], 0)?)
    }, tol)?;
    let x = r.randn(&[2, 3, 4], 1.0);
    r.check("sum_mean_axis", vec![x.clone()], &|_, v| {
        probe(concat(&[v[0].sum_axis(1)?, v[0].mean_axis(1)?], 0)?)
    }, tol)?;
    r.check("permute_narrow_broadcast", vec![x.clone()], &|_, v| {
        let p = v[0].permute(&[2, 0, 1])?.narrow(0, 1, 2)?;
        probe(p.reshape(&[2, 2, 3, 1])?.broadcast_to(&[2, 2, 3, 5])?)
    }, tol)?;
    r.check("softmax_last", vec![x], &|_, v| probe(v[0].softmax_last()), tol)?;
    let (x, w, b) = (r.randn(&[2, 3, 5], 1.0), r.randn(&[4, 5], 0.5), r.randn(&[4], 0.5));
    r.check("linear", vec![x, w, b], &|_, v| probe(v[0].linear(v[1], Some(v[2]))?), tol)?;
    Ok(())
}

fn layer_checks(r: &mut Runner) -> Result<()> {
    let tol = r.tol;
    for d in [1usize, 6, 12, 18] {
        let (x, w, b) = (r.randn(&[1, 2, 7, 7], 1.0), r.randn(&[2, 2, 3, 3], 0.4), r.randn(&[2], 0.2));
        let g = ConvGeom::same(3, d);
        r.check(&format!("dilated_conv2d_d{d}"), vec![x, w, b], &move |_, v| {
            probe(conv2d(v[0], v[1], Some(v[2]), g)?)
        }, tol)?;
    }
    let (x, w) = (r.randn(&[2, 2, 7, 6], 1.0), r.randn(&[3, 2, 3, 2], 0.4));
    let g = ConvGeom { stride: 2, padding: 1, dilation: 1 };
    r.check("conv2d_strided", vec![x, w], &move |_, v| probe(conv2d(v[0], v[1], None, g)?), tol)?;
    let (x, w, b) = (r.randn(&[2, 3, 3, 3], 1.0), r.randn(&[3, 2, 2, 2], 0.4), r.randn(&[2], 0.2));
    let g = ConvGeom { stride: 2, padding: 0, dilation: 1 };
    r.check("transposed_conv2d", vec![x, w, b], &move |_, v| {
        probe(conv_transpose2d(v[0], v[1], Some(v[2]), g)?)
    }, tol)?;
    let (x, gm, bt) = (r.randn(&[2, 3, 3, 2], 1.5), r.randn(&[3], 1.0), r.randn(&[3], 1.0));
    r.check("batch_norm_train", vec![x.clone(), gm.clone(), bt.clone()], &|_, v| {
        probe(batch_norm2d(v[0], v[1], v[2], BnStats::Batch, BN_EPS)?.y)
    }, tol)?;
    r.check("batch_norm_eval", vec![x, gm, bt], &|_, v| {
        let s = BnStats::Running { mean: &[0.1, -0.2, 0.3], var: &[0.5, 1.5, 2.0] };
        probe(batch_norm2d(v[0], v[1], v[2], s, BN_EPS)?.y)
    }, tol)?;
    let (x, gm, bt) = (r.randn(&[2, 3, 6], 1.5), r.randn(&[6], 1.0), r.randn(&[6], 1.0));
    r.check("layer_norm", vec![x, gm, bt], &|_, v| probe(layer_norm(v[0], v[1], v[2], LN_EPS)?), tol)?;
    let x = r.randn(&[1, 2, 3, 4], 1.0);
    r.check("bilinear_resize_up_down", vec![x.clone()], &|_, v| {
        probe(concat(&[bilinear_resize(v[0], 7, 5)?.reshape(&[70])?, bilinear_resize(v[0], 2, 3)?.reshape(&[12])?], 0)?)
    }, tol)?;
    r.check("global_avg_pool", vec![x], &|_, v| probe(global_avg_pool(v[0])?), tol)?;
    let (q, k, vv) = (r.randn(&[1, 2, 3, 4], 1.0), r.randn(&[1, 2, 5, 4], 1.0), r.randn(&[1, 2, 5, 4], 1.0));
    r.check("softmax_attention", vec![q, k, vv], &|_, v| probe(scaled_dot_attention(v[0], v[1], v[2])?), tol)?;
    let mha = MultiHeadAttention::<f64>::new(6, 6, 2, &mut r.rng)?;
    let (q, kv) = (r.randn(&[2, 3, 6], 1.0), r.randn(&[2, 4, 6], 1.0));
    let m = mha.clone();
    r.check_module("multi_head_attention", &mha, false, vec![q, kv], &move |t, v| probe(m.forward(t, v[0], v[1], v[1])?), tol)?;
    Ok(())
}

struct LoraPair<T: crate::tensor::Element> {
    base: Linear<T>,
    lora: LoraAdapter<T>,
}

crate::nn::param::impl_module!(LoraPair { base, lora });

fn peft_checks(r: &mut Runner) -> Result<()> {
    let tol = r.tol;
    let base = Linear::<f64>::new(6, 5, true, &mut r.rng).frozen();
    let mut lora = LoraAdapter::<f64>::new(6, 5, 2, &mut r.rng)?;
    lora.w_b.tensor = r.randn(&[5, 2], 0.5).with_requires_grad(true);
    let x = r.randn(&[2, 3, 6], 1.0);
    let (bm, lm) = (base.clone(), lora.clone());
    let pair = LoraPair { base: base.clone(), lora: lora.clone() };
    r.check_module("lora_forward", &pair, false, vec![x], &move |t, v| {
        probe(lora_forward(t, v[0], &bm, &lm)?)
    }, tol)?;

    let aspp = Aspp::<f64>::new(3, 2, &[1, 2, 3], &mut r.rng)?;
    let x = r.randn(&[2, 3, 4, 4], 1.0);
    let m = aspp.clone();
    r.check_module("aspp", &aspp, false, vec![x.clone()], &move |t, v| probe(m.forward(t, v[0], Mode::Train)?), tol)?;

    let mut att = AtrousAttention::<f64>::new(3, 2, &[1, 6, 12, 18], &mut r.rng)?;
    att.attn_proj.bias.as_mut().expect("bias").tensor = r.randn(&[1], 0.3).with_requires_grad(true);
    let m = att.clone();
    r.check_module("atrous_attention", &att, false, vec![x], &move |t, v| probe(m.forward(t, v[0], Mode::Train)?), tol)?;

    let base = Linear::<f64>::new(6, 6, true, &mut r.rng);
    let mut ad = AtrousLoraAdapter::new(base, 2, Some(&[1, 6, 12, 18]), (2, 3), &mut r.rng)?;
    ad.lora.w_b.tensor = r.randn(&[6, 2], 0.5).with_requires_grad(true);
    let x = r.randn(&[2, 6, 6], 1.0);
    let m = ad.clone();
    r.check_module("atrous_lora", &ad, false, vec![x], &move |t, v| probe(m.forward(t, v[0], Mode::Train)?), tol)?;
    Ok(())
}

fn loss_checks(r: &mut Runner) -> Result<()> {
    let tol = r.tol;
    let u = Tensor::<f64>::uniform(vec![3, 10], 1.0, &mut r.rng);
    let p = Tensor::from_vec(vec![3, 10], u.data().iter().map(|v| 0.5 + 0.45 * v).collect())?;
    let t = Tensor::from_vec(
        vec![3, 10],
        Tensor::<f64>::uniform(vec![30], 1.0, &mut r.rng).data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    )?;
    let (t1, t2, t3) = (t.clone(), t.clone(), t);
    r.check("bce_loss", vec![p.clone()], &move |_, v| bce_loss(v[0], &t1), tol)?;
    r.check("dice_loss", vec![p.clone()], &move |_, v| dice_loss(v[0], &t2), tol)?;
    r.check("combined_loss", vec![p], &move |_, v| combined_loss(v[0], &t3), tol)?;
    Ok(())
}

/// Toy segmenter used for the end-to-end check.
pub fn toy_model(seed: u64) -> Result<Segmenter<f64>> {
    let adapters = AdapterConfig {
        rank: 2,
        rates: vec![1, 2],
        ..AdapterConfig::default()
    };
    let mut m = Segmenter::<f64>::new(&ModelConfig::toy(), &adapters, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // non-zero up-projections so the adapter paths carry gradient
    m.encoder.blocks.iter_mut().for_each(|b| {
        for (_, p) in b.projections_mut() {
            if let Some(a) = p.adapter_mut() {
                let s = a.lora.w_b.tensor.shape().to_vec();
                a.lora.w_b.tensor = Tensor::randn(s, 0.5, &mut rng).with_requires_grad(true);
            }
        }
    });
    Ok(m)
}

fn model_checks(r: &mut Runner) -> Result<()> {
    let tol = r.tol * MODEL_TOL_FACTOR;
    let model = toy_model(7)?;
    let s = model.config.img_size;
    let img = Tensor::<f64>::uniform(vec![2, 3, s, s], 1.0, &mut r.rng);
    let img = Tensor::from_vec(img.shape().to_vec(), img.data().iter().map(|v| 0.5 + 0.5 * v).collect())?;
    let mask: Vec<f64> = (0..2 * s * s).map(|i| if (i / s) % s > 5 && i % s < 9 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(vec![2, s * s], mask)?;
    let boxes = [BBox::new(1, 2, 10, 14), BBox::new(3, 0, 16, 9)];
    let m = model.clone();
    r.check_module("end_to_end_toy", &model, true, vec![img], &move |t, v| {
        let p = m.forward(t, v[0], &boxes, Mode::Train)?;
        combined_loss(p.reshape(&[2, s * s])?, &mask)
    }, tol)?;
    Ok(())
}

pub fn run_suite(module: Suite, tol: f64) -> Result<SuiteReport> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tolerance {tol} must be positive")));
    }
    let start = Instant::now();
    let mut out = Vec::new();
    let groups: &[Suite] = match module {
        Suite::All => &[Suite::Tensor, Suite::Layers, Suite::Peft, Suite::Loss, Suite::Model],
        other => std::slice::from_ref(match other {
            Suite::Tensor => &Suite::Tensor,
            Suite::Layers => &Suite::Layers,
            Suite::Peft => &Suite::Peft,
            Suite::Loss => &Suite::Loss,
            _ => &Suite::Model,
        }),
    };
    for &g in groups {
        let mut r = Runner {
            module: g,
            tol,
            rng: ChaCha8Rng::seed_from_u64(1000 + g as u64),
            out: Vec::new(),
        };
        match g {
            Suite::Tensor => tensor_checks(&mut r)?,
            Suite::Layers => layer_checks(&mut r)?,
            Suite::Peft => peft_checks(&mut r)?,
            Suite::Loss => loss_checks(&mut r)?,
            Suite::Model => model_checks(&mut r)?,
            Suite::All => unreachable!("expanded above"),
        }
        out.extend(r.out);
    }
    Ok(SuiteReport {
        module,
        tol,
        model_tol: tol * MODEL_TOL_FACTOR,
        pass: out.iter().all(|c| c.report.pass),
        seconds: start.elapsed().as_secs_f64(),
        checks: out,
    })
}
