use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Update rule for the shared parameters θ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    /// θ ← θ − β∇θ
    #[default]
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::config(
                    "train.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Moment estimates carried between updates; empty for plain descent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Array>,
    pub second_moment: Vec<Array>,
}

impl OptimizerState {
    /// Applies one update. `grads` follow [`ParamSet::arrays`] order.
    pub fn apply(
        &mut self,
        optimizer: &Optimizer,
        lr: f64,
        params: &mut ParamSet,
        grads: &[Array],
    ) -> Result<()> {
        let n = params.arrays().count();
        if grads.len() != n {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {n} parameter arrays", grads.len()),
            ));
        }
        self.step += 1;
        match *optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.arrays_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Array::zeros(g.shape())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .arrays_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        if !params.arrays().all(Array::is_finite) {
            return Err(Error::Numerical("parameters became non-finite".into()));
        }
        Ok(())
    }
}
