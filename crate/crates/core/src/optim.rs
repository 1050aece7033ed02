//! Adam with global-norm gradient clipping and exportable state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{flat_f32, ParamSet};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    slots: Vec<Slot>,
    step: u64,
    config: AdamConfig,
}

impl Adam {
    /// Optimizes every variable of `params`.
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let slots = params
            .iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            step: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global l2 norm of the gradients of the optimized variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Variables without a gradient keep their value but their
    /// moments still decay, as with a zero gradient. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for s in &mut self.slots {
            let g = match grads.get(s.var.as_tensor()) {
                // Gradients carry autograd history; keeping it would chain every
                // step's graph into the moments.
                Some(g) => g.detach().affine(scale, 0.0)?,
                None => s.var.as_tensor().zeros_like()?,
            };
            s.m = ((&s.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            s.v = ((&s.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let next = (s.var.as_tensor().detach() - (update * c.lr)?)?;
            s.var.set(&next.detach())?;
        }
        Ok(norm)
    }

    /// Moment tensors plus the step counter, for checkpointing.
    pub fn export(&self) -> Result<(u64, Vec<(String, Vec<usize>, Vec<f32>)>)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for s in &self.slots {
            out.push((
                format!("m.{}", s.name),
                s.m.dims().to_vec(),
                flat_f32(&s.m)?,
            ));
            out.push((
                format!("v.{}", s.name),
                s.v.dims().to_vec(),
                flat_f32(&s.v)?,
            ));
        }
        Ok((self.step, out))
    }

    pub fn import(&mut self, step: u64, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f32>)> = entries
            .iter()
            .map(|(n, d, v)| (n.as_str(), (d, v)))
            .collect();
        for s in &mut self.slots {
            for (key, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let name = format!("{key}.{}", s.name);
                let (dims, data) = lookup
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {name}")))?;
                if dims.as_slice() != slot.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {name} has wrong shape"
                    )));
                }
                *slot = Tensor::from_vec((*data).clone(), dims.as_slice(), slot.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};

    #[test]
    fn minimizes_a_quadratic() {
        let pb = ParamBuilder::fresh(0, true);
        let x = pb.get(&[3], "x", Init::Ones).unwrap();
        let params = pb.params();
        let mut opt = Adam::new(&params, AdamConfig::with_lr(0.05)).unwrap();
        let target = Tensor::new(&[0.5f32, -1.0, 2.0], x.device()).unwrap();
        for _ in 0..500 {
            let loss = (&x - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&g).unwrap();
        }
        let v = x.to_vec1::<f32>().unwrap();
        for (a, b) in v.iter().zip([0.5f32, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-2, "{v:?}");
        }
    }

    #[test]
    fn clipping_bounds_first_step() {
        let pb = ParamBuilder::fresh(0, true);
        let x = pb.get(&[1], "x", Init::Zeros).unwrap();
        let params = pb.params();
        let mut cfg = AdamConfig::with_lr(0.1);
        cfg.clip_norm = Some(1.0);
        let mut opt = Adam::new(&params, cfg).unwrap();
        let loss = (&x * 100.0).unwrap().sum_all().unwrap();
        let norm = opt.step(&loss.backward().unwrap()).unwrap();
        assert!((norm - 100.0).abs() < 1e-4);
        // Adam's first step has magnitude lr regardless of scale.
        assert!((x.to_vec1::<f32>().unwrap()[0] + 0.1).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(Adam::new(&ParamSet::default(), AdamConfig::with_lr(0.0)).is_err());
    }
}
