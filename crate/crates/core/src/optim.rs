//! AdamW with global gradient-norm clipping.

use serde::{Deserialize, Serialize};
use tsd_autograd::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is rescaled to when larger; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(5.0),
        }
    }
}

/// Learning-rate multiplier over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from 1 to 0 over the run.
    Cosine,
}

impl LrSchedule {
    /// Factor for update `step` (0-based) of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    lr_factor: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// State for the tensors of `stores`, in order.
    pub fn new(config: AdamWConfig, stores: &[&ParamStore]) -> Self {
        let sizes: Vec<usize> = stores
            .iter()
            .flat_map(|s| s.iter().map(|(_, t)| t.len()))
            .collect();
        Self {
            config,
            step: 0,
            lr_factor: 1.0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiplies the configured learning rate for the following updates.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.lr_factor = factor;
    }

    /// Applies one update. `grads` holds one gradient per tensor, in the same
    /// order as the stores; `None` means no gradient reached that tensor.
    /// Returns the gradient norm before clipping.
    pub fn update(
        &mut self,
        params: &mut [&mut ParamStore],
        grads: &[Option<Vec<f64>>],
    ) -> Result<f64> {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Training(format!("gradient norm is {norm}")));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let lr = c.lr * self.lr_factor;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors: Vec<&mut Tensor> = params
            .iter_mut()
            .flat_map(|s| s.iter_mut().map(|(_, t)| t))
            .collect();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::Training(
                "gradient list does not match the parameters".into(),
            ));
        }
        for (i, t) in tensors.into_iter().enumerate() {
            let data = t.data_mut();
            if c.weight_decay > 0.0 {
                for w in data.iter_mut() {
                    *w -= lr * c.weight_decay * *w;
                }
            }
            let Some(gr) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = gr[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsd_autograd::Shape;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec(Shape::new(1, 1, 2), vec![1.0, -1.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            clip_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&store]);
        opt.update(&mut [&mut store], &[Some(vec![0.5, -2.0])])
            .unwrap();
        let w = store.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(9, 10) < 0.03);
    }

    #[test]
    fn clipping_and_divergence() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::zeros(Shape::new(1, 1, 2)));
        let mut opt = AdamW::new(AdamWConfig::default(), &[&store]);
        let norm = opt
            .update(&mut [&mut store], &[Some(vec![30.0, 40.0])])
            .unwrap();
        assert_eq!(norm, 50.0);
        assert!(opt
            .update(&mut [&mut store], &[Some(vec![f64::NAN, 0.0])])
            .is_err());
    }
}
