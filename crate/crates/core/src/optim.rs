//! First-order optimizers over [`MlpParams`].

use std::sync::Arc;

use crate::error::{GwclError, Result};
use crate::net::{MlpGrads, MlpParams};
use crate::registry::{Named, Registry};

/// A stateful update rule. State is exported as named flat arrays so
/// checkpoints can restore it exactly.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn learning_rate(&self) -> f64;
    fn steps(&self) -> u64;
    fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()>;
    /// Clears accumulated state and switches to a new learning rate.
    fn reset(&mut self, learning_rate: f64);
    fn export_state(&self) -> Vec<(String, Vec<f64>)>;
    fn import_state(&mut self, state: &[(String, Vec<f64>)]) -> Result<()>;
}

/// Builds an [`Optimizer`] for a given learning rate.
pub trait OptimizerKind: Named + Send + Sync {
    fn build(&self, learning_rate: f64) -> Box<dyn Optimizer>;
}

pub struct AdamKind;
pub struct SgdKind;

impl Named for AdamKind {
    fn name(&self) -> &'static str {
        "adam"
    }
}

impl OptimizerKind for AdamKind {
    fn build(&self, learning_rate: f64) -> Box<dyn Optimizer> {
        Box::new(Adam::new(learning_rate))
    }
}

impl Named for SgdKind {
    fn name(&self) -> &'static str {
        "sgd"
    }
}

impl OptimizerKind for SgdKind {
    fn build(&self, learning_rate: f64) -> Box<dyn Optimizer> {
        Box::new(Sgd::new(learning_rate))
    }
}

pub fn optimizers() -> Registry<dyn OptimizerKind> {
    Registry::<dyn OptimizerKind>::new("optimizer")
        .with(Arc::new(AdamKind))
        .with(Arc::new(SgdKind))
}

fn check_finite(grads: &MlpGrads) -> Result<()> {
    const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
    for (name, t) in NAMES.iter().zip(grads.tensors()) {
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(GwclError::Diverged(format!("non-finite gradient in {name}[{i}]")));
        }
    }
    Ok(())
}

fn check_shapes(params: &MlpParams, grads: &MlpGrads) -> Result<()> {
    for (p, g) in params.tensors().iter().zip(grads.tensors()) {
        if p.len() != g.len() {
            return Err(GwclError::Dimension(format!(
                "gradient tensor has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Bias-corrected adaptive moments (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates one flat tensor; `t` is the already-incremented step count.
    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64]) {
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        check_shapes(params, grads)?;
        check_finite(grads)?;
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (slot, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            self.update(slot, p, g);
        }
        Ok(())
    }

    fn reset(&mut self, learning_rate: f64) {
        *self = Adam {
            lr: learning_rate,
            ..Adam::new(learning_rate)
        };
    }

    fn export_state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("t".to_string(), vec![self.t as f64])];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("m{i}"), m.clone()));
            out.push((format!("v{i}"), v.clone()));
        }
        out
    }

    fn import_state(&mut self, state: &[(String, Vec<f64>)]) -> Result<()> {
        let get = |name: &str| state.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone());
        let t = get("t").and_then(|v| v.first().copied()).ok_or_else(|| {
            GwclError::InvalidParameter("adam state has no step counter".into())
        })?;
        self.t = t as u64;
        self.m.clear();
        self.v.clear();
        let mut i = 0;
        while let (Some(m), Some(v)) = (get(&format!("m{i}")), get(&format!("v{i}"))) {
            self.m.push(m);
            self.v.push(v);
            i += 1;
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    t: u64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, t: 0 }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        check_shapes(params, grads)?;
        check_finite(grads)?;
        self.t += 1;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= self.lr * gi;
            }
        }
        Ok(())
    }

    fn reset(&mut self, learning_rate: f64) {
        *self = Sgd::new(learning_rate);
    }

    fn export_state(&self) -> Vec<(String, Vec<f64>)> {
        vec![("t".to_string(), vec![self.t as f64])]
    }

    fn import_state(&mut self, state: &[(String, Vec<f64>)]) -> Result<()> {
        self.t = state
            .iter()
            .find(|(n, _)| n == "t")
            .and_then(|(_, v)| v.first().copied())
            .unwrap_or(0.0) as u64;
        Ok(())
    }
}
