//! Parameter update rules and learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgd,
    Adam,
    Rmsprop,
    Adagrad,
    Nadam,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Adam,
        Variant::Sgd,
        Variant::Nadam,
        Variant::Rmsprop,
        Variant::Adagrad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Adam => "adam",
            Variant::Rmsprop => "rmsprop",
            Variant::Adagrad => "adagrad",
            Variant::Nadam => "nadam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Variant::Sgd),
            "adam" => Ok(Variant::Adam),
            "rmsprop" => Ok(Variant::Rmsprop),
            "adagrad" => Ok(Variant::Adagrad),
            "nadam" => Ok(Variant::Nadam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Hyperparameters of an optimizer. Only `lr` and `weight_decay` usually
/// need changing; the rest default to the customary constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            variant: Variant::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            rho: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn new(variant: Variant, lr: f64) -> Self {
        OptimizerConfig {
            variant,
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.lr)));
        }
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !unit.contains(&self.rho)
        {
            return Err(Error::invalid("beta1, beta2 and rho must lie in [0, 1)"));
        }
        if !unit.contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Optimizer with per-parameter slots. For SGD `first` is the momentum
/// buffer; for Adagrad `second` is the squared-gradient accumulator.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    fn ensure_slots(&mut self, params: &[&mut Tensor]) -> Result<()> {
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
            return Ok(());
        }
        if self.shapes.len() != params.len()
            || self.shapes.iter().zip(params).any(|(s, p)| s != p.shape())
        {
            return Err(Error::shape("optimizer slots do not match the parameters"));
        }
        Ok(())
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("step learning rate {lr} must be > 0")));
        }
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} has shape {:?}, gradient {:?}",
                    p.name(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.ensure_slots(params)?;
        self.t += 1;
        let c = &self.cfg;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let bc1_next = 1.0 - c.beta1.powi(t + 1);
        let decay = c.weight_decay;

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let pd = p.data_mut();
            let gd = g.data();
            match c.variant {
                Variant::Sgd => {
                    for i in 0..pd.len() {
                        let mut d = gd[i] + decay * pd[i];
                        if c.momentum > 0.0 {
                            m[i] = c.momentum * m[i] + d;
                            d = m[i];
                        }
                        pd[i] -= lr * d;
                    }
                }
                Variant::Adagrad => {
                    for i in 0..pd.len() {
                        v[i] += gd[i] * gd[i];
                        pd[i] -= lr * decay * pd[i] + lr * gd[i] / (v[i].sqrt() + c.eps);
                    }
                }
                Variant::Rmsprop => {
                    for i in 0..pd.len() {
                        v[i] = c.rho * v[i] + (1.0 - c.rho) * gd[i] * gd[i];
                        pd[i] -= lr * decay * pd[i] + lr * gd[i] / (v[i].sqrt() + c.eps);
                    }
                }
                Variant::Adam => {
                    for i in 0..pd.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gd[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        pd[i] -= lr * decay * pd[i] + lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
                Variant::Nadam => {
                    for i in 0..pd.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gd[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                        let m_bar =
                            c.beta1 * m[i] / bc1_next + (1.0 - c.beta1) * gd[i] / bc1;
                        let v_hat = v[i] / bc2;
                        pd[i] -= lr * decay * pd[i] + lr * m_bar / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Slot tensors for persistence, named `opt.m.<param>` / `opt.v.<param>`.
    pub fn state_tensors(&self, param_names: &[String]) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (k, shape) in self.shapes.iter().enumerate() {
            let name = param_names.get(k).cloned().unwrap_or_else(|| k.to_string());
            out.push(
                Tensor::new(shape.clone(), self.first[k].clone())
                    .expect("slot matches shape")
                    .with_name(format!("opt.m.{name}")),
            );
            out.push(
                Tensor::new(shape.clone(), self.second[k].clone())
                    .expect("slot matches shape")
                    .with_name(format!("opt.v.{name}")),
            );
        }
        out
    }

    /// Restores slots saved by [`Optimizer::state_tensors`].
    pub fn load_state(&mut self, steps: u64, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() % 2 != 0 {
            return Err(Error::invalid("optimizer state must hold (m, v) pairs"));
        }
        self.t = steps;
        self.shapes.clear();
        self.first.clear();
        self.second.clear();
        for pair in tensors.chunks_exact(2) {
            if pair[0].shape() != pair[1].shape() {
                return Err(Error::shape("optimizer slot pair shapes differ"));
            }
            self.shapes.push(pair[0].shape().to_vec());
            self.first.push(pair[0].data().to_vec());
            self.second.push(pair[1].data().to_vec());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    #[default]
    CosineAnnealing,
}

/// Per-epoch learning-rate schedule over one period of `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    pub period: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eta_max: f64, eta_min: f64, period: usize) -> Result<Self> {
        if !(eta_min <= eta_max) || eta_min < 0.0 {
            return Err(Error::invalid(format!(
                "schedule needs 0 <= eta_min <= eta_max, got {eta_min} and {eta_max}"
            )));
        }
        if period == 0 {
            return Err(Error::invalid("schedule period must be at least 1"));
        }
        Ok(Schedule {
            kind,
            eta_max,
            eta_min,
            period,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.eta_max,
            ScheduleKind::CosineAnnealing => {
                cosine_annealing_lr(self.eta_max, self.eta_min, self.period, epoch)
            }
        }
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·t/T))`; epochs past `T` stay at
/// `η_min`.
pub fn cosine_annealing_lr(eta_max: f64, eta_min: f64, period: usize, epoch: usize) -> f64 {
    if epoch >= period {
        return eta_min;
    }
    if epoch == 0 {
        return eta_max;
    }
    let phase = PI * epoch as f64 / period as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![n], v).unwrap().with_name("p")
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut opt = Optimizer::new(OptimizerConfig::new(Variant::Sgd, 0.1)).unwrap();
        let mut p = single(vec![1.0, -2.0]);
        opt.step(&mut [&mut p], &[Tensor::zeros(vec![2])], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = single(vec![1.0]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(vec![1])], 0.0).is_err());
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(vec![2])], 0.1).is_err());
        assert!(Optimizer::new(OptimizerConfig::new(Variant::Adam, -1.0)).is_err());
        let cfg = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(Optimizer::new(cfg).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("lamb".parse::<Variant>().is_err());
    }

    #[test]
    fn cosine_points() {
        assert_eq!(cosine_annealing_lr(0.1, 0.001, 10, 0), 0.1);
        assert_eq!(cosine_annealing_lr(0.1, 0.001, 10, 10), 0.001);
        assert_eq!(cosine_annealing_lr(0.1, 0.001, 10, 50), 0.001);
        let mid = cosine_annealing_lr(0.1, 0.001, 10, 5);
        assert!((mid - 0.0505).abs() < 1e-12);
        assert!(Schedule::new(ScheduleKind::CosineAnnealing, 0.1, 0.2, 10).is_err());
        assert!(Schedule::new(ScheduleKind::CosineAnnealing, 0.1, 0.0, 0).is_err());
    }
}
