//! Noise schedule and forward process.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta variance schedule with precomputed cumulative products.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced over [beta_start, beta_end].
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || beta_start <= 0.0 || beta_end >= 1.0 || beta_end <= beta_start {
            return Err(Error::contract(format!(
                "bad schedule: steps={steps}, beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alphas_bar.push(prod);
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepRange {
                t,
                max: self.len(),
            })
    }
}

/// A noised image paired with its timestep.
#[derive(Debug, Clone)]
pub struct NoisySample {
    /// [B, 3, H, W]
    pub z_t: Tensor,
    /// One timestep per batch element, each in [0, len).
    pub t: Vec<usize>,
}

/// Forward process: `z_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`, with a
/// per-element timestep.
pub fn noise_sample(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<NoisySample> {
    if x0.dims() != eps.dims() {
        return Err(Error::contract(format!(
            "x0 shape {:?} != eps shape {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let batch = x0.dim(0)?;
    if t.len() != batch {
        return Err(Error::contract(format!(
            "{} timesteps for batch of {batch}",
            t.len()
        )));
    }
    let mut sqrt_ab = Vec::with_capacity(batch);
    let mut sqrt_1m = Vec::with_capacity(batch);
    for &ti in t {
        let ab = schedule.alpha_bar(ti)?;
        sqrt_ab.push(ab.sqrt());
        sqrt_1m.push((1.0 - ab).sqrt());
    }
    let shape = (batch, 1, 1, 1);
    let dev = x0.device();
    let a = Tensor::from_vec(sqrt_ab, shape, dev)?.to_dtype(x0.dtype())?;
    let b = Tensor::from_vec(sqrt_1m, shape, dev)?.to_dtype(x0.dtype())?;
    let z_t = x0.broadcast_mul(&a)?.add(&eps.broadcast_mul(&b)?)?;
    Ok(NoisySample {
        z_t,
        t: t.to_vec(),
    })
}
