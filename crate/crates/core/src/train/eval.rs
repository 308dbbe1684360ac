use serde::{Deserialize, Serialize};

use super::run::{check_samples, collate};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{binarize, dsc, hausdorff, Mask};
use crate::model::Segmenter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub hd: f64,
    pub hd_sentinel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Summary { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_dsc: f64,
    pub dsc: Summary,
    pub hd: Summary,
    pub hd_sentinel_count: usize,
    pub samples: Vec<SampleMetrics>,
}

/// Scores predicted masks against ground truth.
pub fn evaluate_masks(ids: &[String], preds: &[Mask], gts: &[Mask], spacing: f64) -> Result<EvalReport> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for ((id, p), t) in ids.iter().zip(preds).zip(gts) {
        let h = hausdorff(p, t)?;
        samples.push(SampleMetrics {
            id: id.clone(),
            dsc: dsc(p, t)?,
            hd: h.value * spacing,
            hd_sentinel: h.sentinel,
        });
    }
    let d = Summary::of(&samples.iter().map(|s| s.dsc).collect::<Vec<_>>());
    let h = Summary::of(&samples.iter().map(|s| s.hd).collect::<Vec<_>>());
    Ok(EvalReport {
        count: samples.len(),
        mean_dsc: d.mean,
        dsc: d,
        hd: h,
        hd_sentinel_count: samples.iter().filter(|s| s.hd_sentinel).count(),
        samples,
    })
}

/// Inference-mode predictions on the unperturbed boxes.
pub fn predict_masks(model: &Segmenter<f32>, samples: &[SegSample], threshold: f64, batch: usize) -> Result<Vec<Mask>> {
    check_samples(model, samples)?;
    let s = model.config.img_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, _, boxes) = collate(&refs)?;
        let p = model.predict(&images, &boxes)?;
        for k in 0..chunk.len() {
            let plane = Tensor::from_vec(vec![s, s], p.data()[k * s * s..(k + 1) * s * s].to_vec())?;
            out.push(binarize(&plane, threshold)?);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Segmenter<f32>,
    samples: &[SegSample],
    threshold: f64,
    spacing: f64,
    batch: usize,
) -> Result<EvalReport> {
    let preds = predict_masks(model, samples, threshold, batch)?;
    let gts = samples.iter().map(|s| Mask::from_tensor(&s.mask)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    evaluate_masks(&ids, &preds, &gts, spacing)
}
