//! Optimizers and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    ensure!(step <= total_steps, Argument, "step {step} exceeds the schedule length {total_steps}");
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Heavy-ball SGD: `v = mu * v + g; p -= lr * v`.
    Sgd { momentum: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            OptimKind::Adam { beta1, beta2, eps } => format!("adam {beta1} {beta2} {eps}"),
            OptimKind::Sgd { momentum } => format!("sgd {momentum}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("bad optimizer description `{s}`")))
        };
        match parts.first() {
            Some(&"adam") => Ok(OptimKind::Adam {
                beta1: num(1)?,
                beta2: num(2)?,
                eps: num(3)?,
            }),
            Some(&"sgd") => Ok(OptimKind::Sgd { momentum: num(1)? }),
            _ => Err(Error::Integrity(format!("bad optimizer description `{s}`"))),
        }
    }
}

/// An optimizer with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub t: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl Optimizer {
    pub fn new(kind: OptimKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            ensure!(p.shape() == g.shape(), Argument, "gradient shape mismatch for `{name}`");
            match self.kind {
                OptimKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv -= lr * gv;
                        }
                        continue;
                    }
                    if !self.first.contains(name) {
                        self.first.insert(name.clone(), Tensor::zeros(g.shape()));
                    }
                    let v = self.first.get_mut(name)?;
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    for store in [&mut self.first, &mut self.second] {
                        if !store.contains(name) {
                            store.insert(name.clone(), Tensor::zeros(g.shape()));
                        }
                    }
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let m = self.first.get_mut(name)?.data_mut();
                    let v = self.second.get_mut(name)?.data_mut();
                    for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-6).unwrap(), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-4, 1e-6).unwrap() - (3e-4 + 1e-6) / 2.0).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 1.0, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.3, -5.0]).unwrap());
        let mut opt = Optimizer::new(OptimKind::adam());
        opt.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimKind::Sgd { momentum: 0.5 });
        opt.step(&mut p, &g, 1.0).unwrap();
        opt.step(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], -2.5);
        assert_eq!(OptimKind::parse(&opt.kind.describe()).unwrap(), opt.kind);
    }
}
