//! AdamW with decoupled weight decay, and the one-cycle learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments for every parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Weight decay applies to every
    /// tensor, biases included. `names` label errors.
    ///
    /// ```text
    /// m <- b1 m + (1 - b1) g
    /// v <- b2 v + (1 - b2) g^2
    /// w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
    /// ```
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "optimizer tracks {} tensors, got {} parameters and {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("`{name}` is {:?} but its gradient is {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("gradient of `{name}`"),
                });
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * *w;
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `max_lr / div_factor` to `max_lr`, then linear
/// anneal to `max_lr / final_div_factor` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2 {
            return Err(Error::invalid("total_steps", "must be >= 2"));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::invalid("pct_start", "must lie in (0, 1)"));
        }
        if !(self.max_lr > 0.0 && self.div_factor > 0.0 && self.final_div_factor > 0.0) {
            return Err(Error::invalid("one-cycle", "lr and div factors must be positive"));
        }
        Ok(())
    }

    /// Step at which the peak is reached.
    pub fn peak_step(&self) -> usize {
        let raw = (self.pct_start * self.total_steps as f64).round() as usize;
        raw.clamp(1, self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step >= self.total_steps {
            return Err(Error::invalid(
                "step",
                format!("{step} outside schedule of {} steps", self.total_steps),
            ));
        }
        let peak = self.peak_step();
        let last = self.total_steps - 1;
        let initial = self.max_lr / self.div_factor;
        let fin = self.max_lr / self.final_div_factor;
        // the warmup is measured down from max_lr and the anneal up from
        // the final value, so both the peak and the last step are exact
        Ok(if step <= peak {
            let remaining = 1.0 - step as f64 / peak as f64;
            self.max_lr - (self.max_lr - initial) * remaining
        } else {
            let remaining = (last - step) as f64 / (last - peak) as f64;
            fin + (self.max_lr - fin) * remaining
        })
    }
}

pub fn one_cycle_lr(schedule: &OneCycleSchedule, step: usize) -> Result<f64> {
    schedule.lr(step)
}
