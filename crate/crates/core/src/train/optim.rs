//! AdamW and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `p ← p·(1 − lr·wd)`, then the bias-corrected moment step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != self.m.len() || grads.0.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                tensors.len(),
                grads.0.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in tensors.iter().zip(&grads.0).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in tensors.iter_mut().zip(&grads.0).enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                p.data[k] = p.data[k] * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = t_max`, or a
/// constant `lr_max` when `cosine` is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t_max: usize,
    pub t: usize,
    pub cosine: bool,
}

pub fn cosine_lr(lr_max: f64, lr_min: f64, t: usize, t_max: usize) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

impl Scheduler {
    pub fn new(lr_max: f64, lr_min: f64, t_max: usize, cosine: bool) -> Result<Self> {
        if !(lr_min.is_finite() && lr_max.is_finite() && 0.0 <= lr_min && lr_min <= lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({lr_min}) <= lr_max ({lr_max})"
            )));
        }
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(Scheduler {
            lr_max,
            lr_min,
            t_max,
            t: 0,
            cosine,
        })
    }

    pub fn lr(&self) -> f64 {
        if self.cosine {
            cosine_lr(self.lr_max, self.lr_min, self.t, self.t_max).expect("t_max checked")
        } else {
            self.lr_max
        }
    }

    pub fn advance(&mut self) {
        self.t = (self.t + 1).min(self.t_max);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Mat::from_vec(1, 1, vec![p]));
        s
    }

    fn grad(g: f64) -> Gradients {
        Gradients(vec![Mat::from_vec(1, 1, vec![g])])
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = scalar(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, &grad(0.0), 0.1).unwrap();
        assert_eq!(s.tensors()[0].data[0], 0.7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = scalar(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.tensors()[0].data[0] - want).abs() < 1e-15);
        assert!((want - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, &grad(0.0), 0.1).unwrap();
        assert!((s.tensors()[0].data[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = scalar(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let bad = Gradients(vec![Mat::zeros(2, 1)]);
        assert!(matches!(opt.step(&mut s, &bad, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let (hi, lo) = (3e-3, 3e-5);
        assert_eq!(cosine_lr(hi, lo, 0, 100).unwrap(), hi);
        assert!((cosine_lr(hi, lo, 100, 100).unwrap() - lo).abs() < 1e-12);
        assert!((cosine_lr(hi, lo, 50, 100).unwrap() - (hi + lo) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(hi, lo, 0, 0).is_err());
        assert!(Scheduler::new(lo, hi, 10, true).is_err());
        let mut s = Scheduler::new(hi, lo, 7, true).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..7 {
            assert!(s.lr() <= prev);
            prev = s.lr();
            s.advance();
        }
        assert!((s.lr() - lo).abs() < 1e-12);
        let c = Scheduler::new(hi, lo, 7, false).unwrap();
        assert_eq!(c.lr(), hi);
    }
}
