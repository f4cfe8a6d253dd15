//! SGD with momentum, Adam, and the polynomial learning-rate schedule.
//!
//! Optimizers hold one buffer set per parameter, in the order of
//! [`Parameters::params_mut`](crate::nn::Parameters::params_mut). A step
//! receives one optional gradient per parameter; parameters without a
//! gradient are skipped entirely, buffers included, so frozen parameters
//! stay bit-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_len(op: &'static str, params: usize, grads: usize, buffers: usize) -> Result<()> {
    if params != grads || params != buffers {
        return Err(Error::invalid(
            op,
            format!("{params} parameters, {grads} gradients, {buffers} buffers"),
        ));
    }
    Ok(())
}

fn check_shape(op: &'static str, p: &Tensor, other: &Tensor) -> Result<()> {
    if p.shape() != other.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.shape().to_vec(),
            rhs: other.shape().to_vec(),
        });
    }
    Ok(())
}

/// Restores named buffers written by `export`, checking count and shapes.
fn import(op: &'static str, into: &mut [Tensor], tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
    for (i, slot) in into.iter_mut().enumerate() {
        let name = format!("{prefix}.{i}");
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("{op}: checkpoint lacks optimizer buffer {name}")))?;
        check_shape(op, slot, t)?;
        *slot = t.clone();
    }
    Ok(())
}

fn export(out: &mut BTreeMap<String, Tensor>, buffers: &[Tensor], prefix: &str) {
    for (i, t) in buffers.iter().enumerate() {
        out.insert(format!("{prefix}.{i}"), t.clone());
    }
}

/// `v ← μ v + g + wd θ`, `θ ← θ − lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        check_len("sgd step", params.len(), grads.len(), self.velocity.len())?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            check_shape("sgd step", p, g)?;
            check_shape("sgd step", p, v)?;
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn export_state(&self, out: &mut BTreeMap<String, Tensor>, prefix: &str) {
        export(out, &self.velocity, &format!("{prefix}.velocity"));
    }

    pub fn import_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        import("sgd state", &mut self.velocity, tensors, &format!("{prefix}.velocity"))
    }
}

/// Adam with bias-corrected moments. The step counter advances once per
/// call to [`Adam::step`], whichever parameters received gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        check_len("adam step", params.len(), grads.len(), self.m.len())?;
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            check_shape("adam step", p, g)?;
            check_shape("adam step", p, m)?;
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pi, &gi), mi), vi) in iter {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn export_state(&self, out: &mut BTreeMap<String, Tensor>, prefix: &str) {
        export(out, &self.m, &format!("{prefix}.m"));
        export(out, &self.v, &format!("{prefix}.v"));
        out.insert(format!("{prefix}.steps"), Tensor::scalar(self.steps as f64));
    }

    pub fn import_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        import("adam state", &mut self.m, tensors, &format!("{prefix}.m"))?;
        import("adam state", &mut self.v, tensors, &format!("{prefix}.v"))?;
        let name = format!("{prefix}.steps");
        let steps = tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("adam state: checkpoint lacks {name}")))?
            .item()?;
        if steps < 0.0 || steps.fract() != 0.0 {
            return Err(Error::Config(format!("adam state: bad step count {steps}")));
        }
        self.steps = steps as u64;
        Ok(())
    }
}

/// `lr(t) = base · (1 − t / max_iterations)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub base: f64,
    pub power: f64,
    pub max_iterations: usize,
}

impl PolySchedule {
    pub fn new(base: f64, power: f64, max_iterations: usize) -> Self {
        Self {
            base,
            power,
            max_iterations,
        }
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        poly_lr(t, self)
    }
}

pub fn poly_lr(t: usize, schedule: &PolySchedule) -> Result<f64> {
    let max = schedule.max_iterations;
    if max == 0 || t > max {
        return Err(Error::invalid("poly_lr", format!("iteration {t} outside 0..={max}")));
    }
    Ok(schedule.base * (1.0 - t as f64 / max as f64).powf(schedule.power))
}
