//! Adam with per-tensor state, plus a counter of live per-layer optimizer state.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
        if param.shape() != grad.shape() || param.len() != self.m.len() {
            return Err(Error::shape("adam", "parameter, gradient and state differ"));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        param.ensure_finite("adam")
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Marks one layer's optimizer state as resident for its lifetime.
#[derive(Debug)]
pub struct ResidencyGuard(());

impl ResidencyGuard {
    pub fn acquire() -> Self {
        LIVE.with(|l| {
            let n = l.get() + 1;
            l.set(n);
            PEAK.with(|p| p.set(p.get().max(n)));
        });
        Self(())
    }
}

impl Drop for ResidencyGuard {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - 1));
    }
}

/// Layers with optimizer state alive right now on this thread.
pub fn resident_layers() -> usize {
    LIVE.with(Cell::get)
}

/// Largest simultaneous residency since the last reset on this thread.
pub fn peak_resident_layers() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak_residency() {
    PEAK.with(|p| p.set(LIVE.with(Cell::get)));
}
