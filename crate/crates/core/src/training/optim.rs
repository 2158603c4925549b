use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adagrad,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

pub const ADAGRAD_EPS: f64 = 1e-10;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter accumulators, indexed like the store.
#[derive(Clone, Debug)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    steps: u64,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = params
            .iter()
            .map(|p| vec![F::zero(); p.tensor.len()])
            .collect();
        Optimizer {
            kind,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to the `i`-th stored array;
    /// `None` leaves that array untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &[Option<Vec<F>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} arrays",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let lr = F::from_f64_lossy(lr);
        let t = self.steps as i32;
        let (b1, b2) = (F::from_f64_lossy(ADAM_BETA1), F::from_f64_lossy(ADAM_BETA2));
        let one = F::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_deref() else {
                continue;
            };
            if !p.learnable {
                continue;
            }
            let theta = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Adagrad => {
                    let eps = F::from_f64_lossy(ADAGRAD_EPS);
                    let acc = &mut self.second[i];
                    for j in 0..theta.len() {
                        acc[j] = acc[j] + g[j] * g[j];
                        theta[j] = theta[j] - lr * g[j] / (acc[j] + eps).sqrt();
                    }
                }
                OptimizerKind::Adam => {
                    let eps = F::from_f64_lossy(ADAM_EPS);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..theta.len() {
                        m[j] = b1 * m[j] + (one - b1) * g[j];
                        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                        let mh = m[j] / corr1;
                        let vh = v[j] / corr2;
                        theta[j] = theta[j] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            if let Some(j) = theta.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{}[{j}] after optimizer step",
                    p.name
                )));
            }
        }
        Ok(())
    }
}
