//! The eps-prediction denoising loss.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::schedule::{noise_sample, NoiseSchedule, NoisySample};
use super::unet::{DeltaMap, Denoiser};
use crate::error::{Error, Result};
use crate::params::{randn, TensorEnv};

/// Mean squared error between sampled and predicted noise, optionally
/// weighted by a per-pixel mask (broadcast over channels). The reduction
/// divides by the full element count, so an all-ones mask reproduces the
/// unmasked loss exactly.
pub fn masked_eps_loss(eps: &Tensor, pred: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if eps.dims() != pred.dims() {
        return Err(Error::contract(format!(
            "eps shape {:?} != prediction shape {:?}",
            eps.dims(),
            pred.dims()
        )));
    }
    let sq = eps.sub(pred)?.sqr()?;
    let weighted = match mask {
        Some(m) => {
            let (b, _, h, w) = eps.dims4()?;
            if m.dims() != [b, 1, h, w] {
                return Err(Error::contract(format!(
                    "mask shape {:?}, expected [{b}, 1, {h}, {w}]",
                    m.dims()
                )));
            }
            sq.broadcast_mul(&m.to_dtype(eps.dtype())?)?
        }
        None => sq,
    };
    Ok(weighted.mean_all()?)
}

/// One Monte-Carlo evaluation of the denoising loss over a batch, with t and
/// eps sampled per element from `rng`. Returns the scalar loss plus the
/// sampled timesteps and noise so that callers can reuse them.
pub fn diffusion_loss_with<P>(
    predict: P,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    rng: &mut ChaCha20Rng,
    mask: Option<&Tensor>,
) -> Result<(Tensor, NoisySample, Tensor)>
where
    P: FnOnce(&NoisySample) -> Result<Tensor>,
{
    let batch = x0.dim(0)?;
    if batch == 0 {
        return Err(Error::contract("empty batch"));
    }
    let t: Vec<usize> = (0..batch)
        .map(|_| rng.gen_range(0..schedule.len()))
        .collect();
    let env = TensorEnv {
        device: x0.device().clone(),
        dtype: x0.dtype(),
    };
    let eps = randn(rng, x0.dims(), &env)?;
    let sample = noise_sample(schedule, x0, &t, &eps)?;
    let pred = predict(&sample)?;
    let loss = masked_eps_loss(&eps, &pred, mask)?;
    Ok((loss, sample, eps))
}

/// Denoising loss of the denoiser itself under fixed conditioning.
pub fn diffusion_loss(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: &Tensor,
    rng: &mut ChaCha20Rng,
    delta: Option<&DeltaMap>,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (loss, _, _) = diffusion_loss_with(
        |s| denoiser.forward(&s.z_t, &s.t, cond, delta),
        schedule,
        x0,
        rng,
        mask,
    )?;
    Ok(loss)
}
