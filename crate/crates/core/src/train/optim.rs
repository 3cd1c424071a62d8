use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
    Linear,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            "linear" => Ok(Schedule::Linear),
            other => Err(Error::config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            warmup_ratio: 0.0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!(
                "warmup ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step` under warmup and decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).floor() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = self.steps.saturating_sub(warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (PI * progress).cos()),
            Schedule::Linear => self.lr * (1.0 - progress),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: DenseMatrix,
    v: DenseMatrix,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates one parameter in place. `t` is the 1-based step count.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut DenseMatrix,
        grad: &DenseMatrix,
        lr: f64,
        t: usize,
    ) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if let Some(pos) = grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {name} at flat index {pos}"
            )));
        }
        if t == 0 {
            return Err(Error::Contract("AdamW step count is 1-based".into()));
        }
        let (b1, b2) = self.betas;
        let st = self
            .state
            .entry(name.to_owned())
            .or_insert_with(|| Moments {
                m: DenseMatrix::zeros(param.rows(), param.cols()),
                v: DenseMatrix::zeros(param.rows(), param.cols()),
            });
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let p = param.as_mut_slice();
        let m = st.m.as_mut_slice();
        let v = st.v.as_mut_slice();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut opt = AdamW::new(&cfg(0.0));
        let mut p = DenseMatrix::filled(2, 2, 1.5);
        for t in 1..=5 {
            opt.step("p", &mut p, &DenseMatrix::zeros(2, 2), 0.1, t)
                .unwrap();
        }
        assert_eq!(p, DenseMatrix::filled(2, 2, 1.5));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(&cfg(0.0));
        let mut p = DenseMatrix::filled(1, 1, 2.0);
        opt.step("p", &mut p, &DenseMatrix::filled(1, 1, 1.0), 0.1, 1)
            .unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((p.get(0, 0) - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut opt = AdamW::new(&cfg(0.5));
        let mut p = DenseMatrix::filled(1, 3, 4.0);
        opt.step("p", &mut p, &DenseMatrix::zeros(1, 3), 0.1, 1)
            .unwrap();
        assert_eq!(p, DenseMatrix::filled(1, 3, 4.0 * (1.0 - 0.1 * 0.5)));
    }

    #[test]
    fn nan_grad_names_param() {
        let mut opt = AdamW::new(&cfg(0.0));
        let mut p = DenseMatrix::zeros(1, 2);
        let g = DenseMatrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        let err = opt.step("layer0.A", &mut p, &g, 0.1, 1).unwrap_err();
        assert!(err.to_string().contains("layer0.A"), "{err}");
    }

    #[test]
    fn schedules() {
        let mut c = TrainConfig {
            steps: 10,
            lr: 1.0,
            warmup_ratio: 0.2,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.5);
        assert_eq!(c.lr_at(1), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        c.schedule = Schedule::Linear;
        assert_eq!(c.lr_at(2), 1.0);
        assert!((c.lr_at(6) - 0.5).abs() < 1e-12);
        c.schedule = Schedule::Cosine;
        assert!((c.lr_at(6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_ratio: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
