//! Parameter updates.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Plain SGD: `w ← w − η·g` on every entry named in `grads`.
///
/// Every gradient must name an existing trainable entry; the set is checked
/// before anything is written, so a rejected step leaves `params` untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, eta: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        for (w, gv) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= eta * gv;
        }
    }
    Ok(())
}

fn check_grads(params: &ParamSet, grads: &Gradients) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .map_err(|_| Error::Contract(format!("gradient for unknown parameter '{name}'")))?;
        if !p.trainable {
            return Err(Error::Contract(format!(
                "gradient for frozen parameter '{name}'"
            )));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("'{name}' is {:?} but gradient is {:?}", p.tensor.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// Adam, used only for centralized backbone pre-training.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        check_grads(params, grads)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, gv), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
