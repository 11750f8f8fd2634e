//! Deterministic (eta = 0) sampler with per-step conditioning.
//!
//! The conditioning callback is invoked exactly once per denoising step with
//! the current timestep and noisy state, which is what allows the concept
//! embedding to be re-predicted during synthesis. With a constant callback
//! this reduces to ordinary conditional sampling.

use candle_core::Tensor;
use rand_chacha::ChaCha20Rng;

use super::schedule::NoiseSchedule;
use super::unet::{DeltaMap, Denoiser};
use crate::error::{Error, Result};
use crate::params::{randn, TensorEnv};

/// Per-step conditioning source: `(t, z_t) -> [B, L, d]`.
pub type CondProvider<'a> = dyn FnMut(usize, &Tensor) -> Result<Tensor> + 'a;

/// Evenly spaced training timesteps used for sampling, descending.
pub fn sampler_timesteps(train_timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_timesteps {
        return Err(Error::contract(format!(
            "sampler steps {steps} must be in [1, {train_timesteps}]"
        )));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (i + 1) * train_timesteps / steps - 1)
        .collect();
    ts.reverse();
    Ok(ts)
}

/// Run the deterministic reverse process from pure noise.
///
/// `rng` provides only the initial noise, so a fixed seed gives a fixed
/// image for a fixed conditioning sequence.
pub fn sample(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond_provider: &mut CondProvider,
    steps: usize,
    rng: &mut ChaCha20Rng,
    delta: Option<&DeltaMap>,
) -> Result<Tensor> {
    let cfg = denoiser.config();
    if schedule.len() != cfg.train_timesteps {
        return Err(Error::contract(format!(
            "schedule length {} != model train_timesteps {}",
            schedule.len(),
            cfg.train_timesteps
        )));
    }
    let timesteps = sampler_timesteps(cfg.train_timesteps, steps)?;
    // Draws are made in f64 and cast, so f32 and f64 models see the same
    // initial noise for the same seed.
    let env = TensorEnv::cpu(candle_core::DType::F32);
    let mut z = randn(rng, &[1, 3, cfg.resolution, cfg.resolution], &env)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let cond = cond_provider(t, &z)?;
        let z_model = z.to_dtype(cond.dtype())?;
        let eps_hat = denoiser.forward(&z_model, &[t], &cond, delta)?;
        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = if i + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[i + 1])?
        } else {
            1.0
        };
        let x0_hat = ((&z_model - (eps_hat.affine((1.0 - ab_t).sqrt(), 0.0))?)? / ab_t.sqrt())?;
        let x0_hat = x0_hat.clamp(-1.0, 1.0)?;
        z = (x0_hat.affine(ab_prev.sqrt(), 0.0)?
            + eps_hat.affine((1.0 - ab_prev).sqrt(), 0.0)?)?
        .to_dtype(candle_core::DType::F32)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_are_descending_and_in_range() {
        let ts = sampler_timesteps(200, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 199);
        assert_eq!(*ts.last().unwrap(), 3);
        for w in ts.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(sampler_timesteps(200, 0).is_err());
        assert!(sampler_timesteps(200, 201).is_err());
    }

    #[test]
    fn full_length_sampling_visits_every_step_count() {
        let ts = sampler_timesteps(10, 10).unwrap();
        assert_eq!(ts, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
    }
}
