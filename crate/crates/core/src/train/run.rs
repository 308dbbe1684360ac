use std::collections::HashMap;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::optim::AdamW;
use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{perturb_bbox, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{binarize, combined_loss, dsc, Mask};
use crate::model::{component_rng, BBox, Segmenter};
use crate::nn::{Mode, Module, ParamKind};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub loss: f64,
    /// Mean DSC of the training-mode predictions seen during the epoch.
    pub dsc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub struct TrainOutcome {
    pub model: Segmenter<f32>,
    pub history: History,
}

/// Stacked images `[B, 3, S, S]`, masks `[B, S·S]` and boxes.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<BBox>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let is = first.image.shape().to_vec();
    let ms = first.mask.shape().to_vec();
    let mut img = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.numel());
    for s in samples {
        if s.image.shape() != is || s.mask.shape() != ms {
            return Err(Error::shape("collate", format!("sample {} differs in shape", s.id)));
        }
        img.extend_from_slice(s.image.data());
        mask.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    let mut ishape = vec![b];
    ishape.extend(is);
    Ok((
        Tensor::from_vec(ishape, img)?,
        Tensor::from_vec(vec![b, first.mask.numel()], mask)?,
        samples.iter().map(|s| s.bbox).collect(),
    ))
}

pub(crate) fn check_samples(model: &Segmenter<f32>, samples: &[SegSample]) -> Result<()> {
    let s = model.config.img_size;
    for x in samples {
        if x.image.shape() != [3, s, s] || x.mask.shape() != [s, s] {
            return Err(Error::Config(format!(
                "sample {} has image {:?} / mask {:?}, model expects {s}x{s}",
                x.id,
                x.image.shape(),
                x.mask.shape()
            )));
        }
    }
    Ok(())
}

fn frozen_snapshot(model: &Segmenter<f32>) -> Vec<(String, Tensor<f32>)> {
    model
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.kind() == ParamKind::Frozen)
        .map(|(n, p)| (n, p.tensor.clone()))
        .collect()
}

/// Trains a freshly built model for `cfg`.
pub fn train(cfg: &RunConfig, train_set: &[SegSample], eval_set: Option<&[SegSample]>) -> Result<TrainOutcome> {
    train_model(cfg, cfg.build_model()?, train_set, eval_set)
}

/// Trains `model` in place of a fresh one; everything else comes from `cfg`.
pub fn train_model(
    cfg: &RunConfig,
    mut model: Segmenter<f32>,
    train_set: &[SegSample],
    eval_set: Option<&[SegSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_samples(&model, train_set)?;
    if let Some(e) = eval_set {
        check_samples(&model, e)?;
    }
    let frozen = frozen_snapshot(&model);
    let tc = &cfg.train;
    let size = model.config.img_size;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut rng = component_rng(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut dsc_sum) = (0.0, 0usize, 0.0);
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks, mut boxes) = collate(&batch)?;
            for b in &mut boxes {
                *b = perturb_bbox(b, tc.bbox_shift, size, &mut rng);
            }
            let tape = Tape::new();
            let x = tape.constant(&images);
            let prob = model.forward(&tape, x, &boxes, Mode::Train)?;
            let flat = prob.reshape(&masks.shape().to_vec())?;
            let loss = combined_loss(flat, &masks)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                return Err(Error::NonFinite {
                    batch: format!("epoch {epoch} batch {bi} (samples {})", ids.join(",")),
                    detail: format!("combined loss {lv}"),
                });
            }
            let pv = prob.to_tensor();
            for (k, s) in batch.iter().enumerate() {
                let p = Tensor::from_vec(vec![size, size], pv.data()[k * size * size..(k + 1) * size * size].to_vec())?;
                dsc_sum += dsc(&binarize(&p, tc.threshold)?, &Mask::from_tensor(&s.mask)?)?;
            }
            tape.backward(loss)?;
            let mut grads = HashMap::new();
            model.visit("", &mut |name, p| {
                if p.is_trainable() {
                    if let Some(g) = tape.param_grad(p.id()) {
                        grads.insert(name.to_string(), g);
                    }
                }
            });
            opt.step(&mut model, &grads)?;
            let stats: HashMap<_, _> = tape.take_stat_updates().into_iter().collect();
            if !stats.is_empty() {
                model.visit_mut("", &mut |_, p| {
                    if let Some(v) = stats.get(&p.id()) {
                        p.tensor.data_mut().copy_from_slice(v);
                    }
                });
            }
            loss_sum += lv;
            batches += 1;
        }
        let eval_dsc = match eval_set {
            Some(e) if epoch == tc.epochs || (tc.eval_every > 0 && epoch % tc.eval_every == 0) => {
                Some(evaluate(&model, e, tc.threshold, tc.hd_spacing, tc.batch_size)?.mean_dsc)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            dsc: dsc_sum / train_set.len() as f64,
            eval_dsc,
        };
        info!(
            "epoch {:>3}  loss {:.5}  train dsc {:.4}{}",
            rec.epoch,
            rec.loss,
            rec.dsc,
            rec.eval_dsc.map(|d| format!("  eval dsc {d:.4}")).unwrap_or_default()
        );
        history.epochs.push(rec);
    }

    let after: HashMap<String, &Tensor<f32>> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, &p.tensor))
        .collect();
    for (name, t) in &frozen {
        if !after.get(name).is_some_and(|a| a.bit_eq(t)) {
            return Err(Error::State(format!("frozen parameter {name} changed during training")));
        }
    }
    Ok(TrainOutcome { model, history })
}
