use serde::Serialize;

use super::eval::evaluate;
use super::run::train;
use crate::config::RunConfig;
use crate::data::SegSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    pub total: usize,
    pub trainable: usize,
    pub trainable_ratio: f64,
    /// Held-out mean DSC when an eval set is given, else the last train DSC.
    pub final_dsc: f64,
}

/// One training run per rank with shared seed and data.
pub fn rank_sweep(
    cfg: &RunConfig,
    ranks: &[usize],
    train_set: &[SegSample],
    eval_set: Option<&[SegSample]>,
) -> Result<Vec<SweepRow>> {
    if ranks.is_empty() {
        return Err(Error::Config("rank list is empty".into()));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut c = cfg.clone();
        c.adapter.rank = rank;
        let out = train(&c, train_set, eval_set)?;
        let count = out.model.count();
        let final_dsc = match eval_set {
            Some(e) => evaluate(&out.model, e, c.train.threshold, c.train.hd_spacing, c.train.batch_size)?.mean_dsc,
            None => out.history.epochs.last().map_or(0.0, |r| r.dsc),
        };
        rows.push(SweepRow {
            rank,
            total: count.total,
            trainable: count.trainable,
            trainable_ratio: count.ratio,
            final_dsc,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rank,total,trainable,trainable_ratio,final_dsc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.8},{:.6}\n",
            r.rank, r.total, r.trainable, r.trainable_ratio, r.final_dsc
        ));
    }
    s
}
