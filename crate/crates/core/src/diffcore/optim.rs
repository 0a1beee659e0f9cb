use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off unless set.
    pub clip_norm: Option<f64>,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            plateau_factor: 0.1,
            plateau_patience: 5,
        }
    }
}

/// Reduce-on-plateau bookkeeping for a metric that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub bad_epochs: usize,
    pub factor: f64,
    pub patience: usize,
}

/// Adam moments for a fixed set of parameters plus the plateau scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    params: Vec<String>,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
    step: u64,
    lr: f64,
    cfg: OptimizerConfig,
    plateau: PlateauState,
}

impl<S: Real> OptimizerState<S> {
    /// Optimise every parameter of `store`.
    pub fn new(store: &ParameterStore<S>, cfg: OptimizerConfig) -> Result<Self> {
        let names = store.names().map(str::to_string).collect();
        Self::for_params(store, names, cfg)
    }

    /// Optimise only `params`; everything else in the store is left alone.
    pub fn for_params(store: &ParameterStore<S>, params: Vec<String>, cfg: OptimizerConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", cfg.lr)));
        }
        let mut moments = BTreeMap::new();
        for name in &params {
            let t = store
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            moments.insert(name.clone(), (vec![S::zero(); t.len()], vec![S::zero(); t.len()]));
        }
        Ok(OptimizerState {
            params,
            moments,
            step: 0,
            lr: cfg.lr,
            plateau: PlateauState {
                best: f64::INFINITY,
                bad_epochs: 0,
                factor: cfg.plateau_factor,
                patience: cfg.plateau_patience,
            },
            cfg,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn plateau(&self) -> &PlateauState {
        &self.plateau
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn moments(&self, name: &str) -> Option<(&[S], &[S])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected Adam update of every tracked parameter, then zero
    /// all gradients in the store.
    pub fn adam_step(&mut self, store: &mut ParameterStore<S>) -> Result<()> {
        for name in &self.params {
            let ok = store.get(name).map(|t| t.requires_grad()).unwrap_or(false);
            if !ok {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        let clip = match self.cfg.clip_norm {
            Some(max) => {
                let sq: f64 = self
                    .params
                    .iter()
                    .flat_map(|n| store.get(n).unwrap().grad().unwrap())
                    .map(|g| g.to_f64().unwrap_or(0.0).powi(2))
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    S::of(max / norm)
                } else {
                    S::one()
                }
            }
            None => S::one(),
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(self.cfg.beta1), S::of(self.cfg.beta2));
        let c1 = S::of(1.0 - self.cfg.beta1.powi(t));
        let c2 = S::of(1.0 - self.cfg.beta2.powi(t));
        let lr = S::of(self.lr);
        let eps = S::of(self.cfg.eps);
        for name in &self.params {
            let tensor = store.get_mut(name).unwrap();
            let grad = tensor.grad().unwrap().to_vec();
            let (m, v) = self.moments.get_mut(name).unwrap();
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// Record one epoch's validation metric (lower is better). After
    /// `patience` consecutive epochs without improvement the learning rate is
    /// multiplied by `factor` and the counter restarts. Returns whether a
    /// decay happened.
    pub fn plateau_decay(&mut self, metric: f64) -> bool {
        let p = &mut self.plateau;
        if metric < p.best {
            p.best = metric;
            p.bad_epochs = 0;
            return false;
        }
        p.bad_epochs += 1;
        if p.bad_epochs >= p.patience {
            p.bad_epochs = 0;
            self.lr *= p.factor;
            return true;
        }
        false
    }
}
