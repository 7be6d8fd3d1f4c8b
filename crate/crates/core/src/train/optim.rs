//! Adam with optional decoupled weight decay, keyed by canonical parameter
//! names so moments survive checkpointing exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::TensorArchive;
use crate::nets::{GradStore, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0,1): {} / {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("Adam eps must be > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, net: &mut dyn ParamSet<T>, grads: &GradStore<T>, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let eps = T::from_f64(self.config.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.config.weight_decay);
        let bc1 = T::from_f64(1.0 - self.config.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.config.beta2.powi(self.t as i32));
        let m = &mut self.m;
        let v = &mut self.v;
        net.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let m_t = m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v_t = v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let pd = p.data_mut();
            let gd = g.data();
            let md = m_t.data_mut();
            let vd = v_t.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let mut update = lr_t * mhat / (vhat.sqrt() + eps);
                if wd > T::zero() {
                    update = update + lr_t * wd * pd[i];
                }
                pd[i] = pd[i] - update;
            }
        });
    }

    /// Store moments (and the step counter via the returned value) into an
    /// archive under `prefix`.
    pub fn save_into(&self, archive: &mut TensorArchive<T>, prefix: &str) -> u64 {
        for (name, t) in &self.m {
            archive.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            archive.insert(format!("{prefix}.v.{name}"), t.clone());
        }
        self.t
    }

    /// Restore moments stored by [`Adam::save_into`].
    pub fn load_from(
        config: AdamConfig,
        t: u64,
        archive: &TensorArchive<T>,
        prefix: &str,
    ) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        for (name, tensor) in archive.iter() {
            if let Some(param) = name.strip_prefix(&m_prefix) {
                m.insert(param.to_string(), tensor.clone());
            } else if let Some(param) = name.strip_prefix(&v_prefix) {
                v.insert(param.to_string(), tensor.clone());
            }
        }
        Adam { config, t, m, v }
    }
}
