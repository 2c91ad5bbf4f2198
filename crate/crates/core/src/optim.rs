//! First-order optimizers keyed by parameter name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkit::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
    #[default]
    Momentum,
    /// Adam with `β1 = momentum`, `β2 = 0.999`.
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    step: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Result<Self> {
        ensure!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        ensure!(
            (0.0..1.0).contains(&momentum),
            "momentum must be in [0, 1), got {momentum}"
        );
        Ok(Self {
            kind,
            lr,
            momentum,
            step: 0,
            slots: HashMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f32]) -> Result<()> {
        ensure!(
            grad.len() == param.numel(),
            "gradient for {name} has {} entries, parameter has {}",
            grad.len(),
            param.numel()
        );
        let len = grad.len();
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
        let t = self.step.max(1) as i32;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((p, &g), m) in param.values_mut().iter_mut().zip(grad).zip(m.iter_mut()) {
                    *m = self.momentum * *m + g as f64;
                    *p = (*p as f64 - self.lr * *m) as f32;
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, &g), m), v) in param
                    .values_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let g = g as f64;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *p = (*p as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }

    /// Updates every trainable parameter that received a gradient on `tape`.
    pub fn apply(&mut self, tape: &Tape, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = tape.grad_of(p) {
                let g = g.to_vec();
                self.update(&name, p, &g)?;
            }
        }
        Ok(())
    }
}
