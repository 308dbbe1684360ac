use std::collections::HashMap;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

/// AdamW with decoupled weight decay; moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Names that currently hold moment state.
    pub fn state_names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.moments.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(_, v)| v.as_slice())
    }

    /// One update of every trainable parameter of `model`.
    pub fn step<T: Element, M: Module<T>>(&mut self, model: &mut M, grads: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut missing = None;
        model.visit("", &mut |name, p| {
            if p.is_trainable() && missing.is_none() && !grads.contains_key(name) {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Contract(format!("no gradient for trainable parameter {name}")));
        }
        self.step += 1;
        let c = self.cfg.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = &mut self.moments;
        let mut shape_err = None;
        model.visit_mut("", &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let g = &grads[name];
            if g.shape() != p.tensor.shape() {
                shape_err = Some(format!("{name}: grad {:?} for {:?}", g.shape(), p.tensor.shape()));
                return;
            }
            let n = p.tensor.numel();
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64();
                let mut wf = w.to_f64();
                wf *= 1.0 - c.lr * c.weight_decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                wf -= c.lr * mh / (vh.sqrt() + c.eps);
                *w = T::from_f64(wf);
            }
        });
        match shape_err {
            Some(m) => Err(Error::Contract(m)),
            None => Ok(()),
        }
    }
}
