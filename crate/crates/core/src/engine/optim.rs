//! SGD with momentum and AdamW over 64-bit state buffers.

use std::fmt;
use std::str::FromStr;

use crate::error::{QuanError, Result};
use crate::layers::Param;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

fn check_lengths(p: usize, g: usize, bufs: &[usize]) -> Result<()> {
    if g != p || bufs.iter().any(|&b| b != p) {
        return Err(QuanError::Shape(format!(
            "optimizer buffers {bufs:?} and gradient {g} do not match {p} parameters"
        )));
    }
    Ok(())
}

/// `g ← g + wd·p; v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[velocity.len()])?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

/// One AdamW step at step count `t ≥ 1`, with decoupled decay `p ← p − lr·wd·p`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[m.len(), v.len()])?;
    if t == 0 {
        return Err(QuanError::Range("AdamW step count starts at 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *p -= cfg.lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = QuanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(QuanError::Config(format!("unknown optimizer '{s}' (expected sgd or adamw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hyper {
    Sgd(SgdConfig),
    AdamW(AdamWConfig),
}

/// Optimizer with per-parameter buffers mirroring the parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hyper: Hyper,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn sgd(cfg: SgdConfig) -> Self {
        Optimizer {
            hyper: Hyper::Sgd(cfg),
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn adamw(cfg: AdamWConfig) -> Self {
        Optimizer {
            hyper: Hyper::AdamW(cfg),
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    /// Default hyperparameters for `kind` at learning rate `lr`.
    pub fn with_defaults(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::sgd(SgdConfig { lr, ..SgdConfig::default() }),
            OptimizerKind::AdamW => Optimizer::adamw(AdamWConfig { lr, ..AdamWConfig::default() }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.hyper {
            Hyper::Sgd(_) => OptimizerKind::SgdMomentum,
            Hyper::AdamW(_) => OptimizerKind::AdamW,
        }
    }

    pub fn lr(&self) -> f64 {
        match self.hyper {
            Hyper::Sgd(c) => c.lr,
            Hyper::AdamW(c) => c.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.hyper {
            Hyper::Sgd(c) => c.lr = lr,
            Hyper::AdamW(c) => c.lr = lr,
        }
    }

    pub fn set_weight_decay(&mut self, wd: f64) {
        match &mut self.hyper {
            Hyper::Sgd(c) => c.weight_decay = wd,
            Hyper::AdamW(c) => c.weight_decay = wd,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using the accumulated gradients of `params`.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.hyper, Hyper::AdamW(_)) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(QuanError::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.t += 1;
        let mut work = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(QuanError::Numeric(format!("non-finite gradient in {}", p.name)));
            }
            work.clear();
            work.extend(p.value.iter().map(|v| v.to_f64()));
            match self.hyper {
                Hyper::Sgd(c) => sgd_step(&mut work, &p.grad, &mut self.first[i], &c)?,
                Hyper::AdamW(c) => adamw_step(&mut work, &p.grad, &mut self.first[i], &mut self.second[i], self.t, &c)?,
            }
            for (dst, &v) in p.value.iter_mut().zip(&work) {
                *dst = T::from_f64(v);
            }
        }
        Ok(())
    }
}
