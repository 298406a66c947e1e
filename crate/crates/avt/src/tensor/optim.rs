//! SGD with classical momentum and the warmup + cosine learning-rate schedule.

use super::{Scalar, Tensor};

/// Hyperparameters for [`SgdMomentum`].
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { base_lr: 1e-4, momentum: 0.9, weight_decay: 1e-6 }
    }
}

/// Classical momentum SGD. Weight decay is applied as gradient augmentation
/// (g ← g + wd·θ); gradients are zeroed after each step.
pub struct SgdMomentum<F: Scalar> {
    cfg: SgdConfig,
    lr: f64,
    params: Vec<(String, Tensor<F>)>,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(params: Vec<(String, Tensor<F>)>, cfg: SgdConfig) -> Self {
        let velocity = params.iter().map(|(_, p)| vec![F::ZERO; p.len()]).collect();
        SgdMomentum { lr: cfg.base_lr, cfg, params, velocity }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    /// Momentum buffers keyed like the parameters, for checkpointing.
    pub fn velocity_snapshot(&self) -> Vec<(String, Vec<F>)> {
        self.params
            .iter()
            .zip(&self.velocity)
            .map(|((name, _), v)| (format!("optim.v.{name}"), v.clone()))
            .collect()
    }

    pub fn restore_velocity(&mut self, name: &str, values: &[F]) -> bool {
        for ((pname, _), v) in self.params.iter().zip(self.velocity.iter_mut()) {
            if format!("optim.v.{pname}") == name {
                assert_eq!(v.len(), values.len(), "velocity size mismatch for {name}");
                v.copy_from_slice(values);
                return true;
            }
        }
        false
    }

    /// One update over every registered parameter. Panics if a parameter has
    /// no populated gradient.
    pub fn step(&mut self) {
        let lr = F::from_f64(self.lr);
        let mom = F::from_f64(self.cfg.momentum);
        let wd = F::from_f64(self.cfg.weight_decay);
        for ((name, p), vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let grad = p
                .grad()
                .unwrap_or_else(|| panic!("missing gradient on parameter `{name}`"));
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                vel[i] = mom * vel[i] + g;
                data[i] -= lr * vel[i];
            }
            drop(data);
            p.zero_grad();
        }
    }
}

/// Learning rate at integer epoch `e`: linear ramp 0 → `base` over
/// `[0, warmup)`, then cosine decay `base` → 0 over `[warmup, total]`.
pub fn lr_at_epoch(e: u32, total: u32, warmup: u32, base: f64) -> f64 {
    assert!(e <= total, "epoch {e} beyond schedule end {total}");
    if e < warmup {
        base * f64::from(e) / f64::from(warmup)
    } else {
        let span = f64::from(total - warmup);
        let progress = f64::from(e - warmup) / span;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
