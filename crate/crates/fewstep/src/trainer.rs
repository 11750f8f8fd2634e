//! Domain pretraining and single-image personalization.
//!
//! Pretraining jointly optimizes the denoiser, the encoder head and the
//! weight offsets over a rendered identity dataset (total loss: diffusion
//! plus a weighted embedding-norm penalty). Personalization runs a handful
//! of optimization steps on one concept image, replicated across stratified
//! timesteps so every step observes the concept at multiple noise scales.
//! Both regimes are bit-deterministic under a fixed seed on one device.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{masked_eps_loss, noise_sample, NoiseSchedule, NoisySample};
use crate::encoder::{compose_embedding, concept_embedding_at, embedding_reg_loss};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant};
use crate::params::randn;
use crate::prompts::{template_pool, PromptTemplate};
use crate::rng::RngStreams;
use crate::sprite::LoadedDataset;

/// The full ablation flag matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Personalization performs zero optimization steps.
    pub no_tuning: bool,
    /// Tune encoder + offsets only; denoiser base weights frozen.
    pub tune_components_only: bool,
    /// Tune denoiser base weights only.
    pub tune_denoiser_only: bool,
    /// Encoder head sees no denoiser features.
    pub no_iterative_refinement: bool,
    /// Drop the embedding-norm penalty from the total loss.
    pub no_embedding_reg: bool,
    /// Free full-rank offsets.
    pub direct_offsets: bool,
    /// No weight offsets; the embedding encoder alone.
    pub encoder_only: bool,
    /// Offset constant predicted from backbone features.
    pub hypernetwork: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.tune_components_only && self.tune_denoiser_only {
            return Err(Error::InvalidConfig(
                "tune_components_only and tune_denoiser_only are mutually exclusive".into(),
            ));
        }
        self.variant().validate()
    }

    /// The subset of flags that changes the parameter set.
    pub fn variant(&self) -> ModelVariant {
        ModelVariant {
            no_iterative_refinement: self.no_iterative_refinement,
            direct_offsets: self.direct_offsets,
            encoder_only: self.encoder_only,
            hypernetwork: self.hypernetwork,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub device_count: usize,
    pub lambda_reg: f64,
    pub steps: usize,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-4,
            batch_size: 4,
            device_count: 1,
            lambda_reg: 0.01,
            steps: 2000,
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Learning-rate scaling convention: the rate actually applied.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 * self.device_count as f64
    }

    /// The reg weight entering the total loss (zero under no_embedding_reg).
    pub fn effective_lambda(&self) -> f64 {
        if self.flags.no_embedding_reg {
            0.0
        } else {
            self.lambda_reg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.device_count == 0 {
            return Err(Error::InvalidConfig("batch_size and device_count must be positive".into()));
        }
        if self.lambda_reg < 0.0 || !self.lambda_reg.is_finite() {
            return Err(Error::InvalidConfig("lambda_reg must be non-negative".into()));
        }
        self.flags.validate()
    }
}

/// Personalization presets mirroring the two published regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningPreset {
    /// Strong regularization, 15 steps.
    FaceLike,
    /// Weak regularization, 5 steps, lower base rate.
    Generic,
}

impl TuningPreset {
    pub fn config(self, seed: u64) -> TrainConfig {
        match self {
            TuningPreset::FaceLike => TrainConfig {
                base_lr: 2e-4,
                batch_size: 16,
                lambda_reg: 0.1,
                steps: 15,
                seed,
                ..Default::default()
            },
            TuningPreset::Generic => TrainConfig {
                base_lr: 1.5e-4,
                batch_size: 16,
                lambda_reg: 1e-4,
                steps: 5,
                seed,
                ..Default::default()
            },
        }
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub diffusion: f64,
    pub reg: f64,
}

/// Write a loss trace as `step,total,diffusion,reg` CSV.
pub fn write_loss_csv(path: &Path, trace: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,total,diffusion,reg\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.diffusion, r.reg));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainResult {
    pub trace: Vec<LossRow>,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationResult {
    pub trace: Vec<LossRow>,
    pub steps: usize,
    pub concept_image_hash: String,
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(step: usize, diffusion: f64, reg: f64) -> Result<()> {
    if !diffusion.is_finite() || !reg.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diffusion,
            reg,
        });
    }
    Ok(())
}

/// Aggregated backbone features for the hypernetwork offset variant:
/// concatenated taps, averaged over the batch.
fn hyper_features(taps: &[Tensor]) -> Result<Tensor> {
    let cat = Tensor::cat(taps, 1)?;
    Ok(cat.mean(0)?)
}

fn optimizer(vars: Vec<candle_core::Var>, lr: f64) -> Result<candle_nn::AdamW> {
    Ok(candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Build one element's conditioning sequence per record template, with the
/// concept embedding spliced at each template's placeholder. `e_c` is [B, d].
fn splice_per_template(
    model: &Model,
    template_ids: &[usize],
    e_c: &Tensor,
) -> Result<Tensor> {
    let pool = template_pool();
    let mut rows = Vec::with_capacity(template_ids.len());
    for (i, &tid) in template_ids.iter().enumerate() {
        let template = pool
            .get(tid)
            .ok_or_else(|| Error::contract(format!("template id {tid} out of range")))?;
        let row = e_c.narrow(0, i, 1)?;
        rows.push(model.embeddings.splice(template, &row)?);
    }
    Ok(Tensor::cat(&rows, 0)?)
}

/// One full forward pass of the training objective on a noised batch.
/// Returns (total, diffusion, reg) tensors.
pub fn objective(
    model: &Model,
    sample: &NoisySample,
    eps: &Tensor,
    taps: &[Tensor],
    template_ids: &[usize],
    lambda: f64,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let emb = concept_embedding_at(
        &model.head,
        taps,
        &model.denoiser,
        &model.embeddings,
        &sample.z_t,
        &sample.t,
        model.cfg.offset_scale,
        false,
    )?;
    let cond = splice_per_template(model, template_ids, &emb.e_c)?;
    let delta = match &model.offsets {
        Some(set) => {
            let hf = if set.cfg.mode == crate::offsets::OffsetMode::Hyper {
                Some(hyper_features(taps)?)
            } else {
                None
            };
            Some(set.materialize_all(hf.as_ref())?)
        }
        None => None,
    };
    let pred = model
        .denoiser
        .forward(&sample.z_t, &sample.t, &cond, delta.as_ref())?;
    let diffusion = masked_eps_loss(eps, &pred, mask)?;
    let reg = embedding_reg_loss(&emb.offset)?;
    let total = diffusion.add(&reg.affine(lambda, 0.0)?)?;
    Ok((total, diffusion, reg))
}

/// Joint domain pretraining over a rendered identity dataset. The concept
/// image of each batch element is the training image itself. Optimizes
/// denoiser, encoder head and offsets; backbone and word embeddings frozen.
pub fn pretrain(model: &mut Model, dataset: &LoadedDataset, cfg: &TrainConfig) -> Result<PretrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("pretraining needs a nonempty dataset"));
    }
    let env = model.store.env().clone();
    let vars = model
        .store
        .vars_with_prefixes(&["denoiser.", "encoder.", "offsets."]);
    let mut opt = optimizer(vars, cfg.effective_lr())?;
    let streams = RngStreams::new(cfg.seed);
    let mut data_rng = streams.stream("data", 0);
    let lambda = cfg.effective_lambda();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x0 = dataset.batch_signed(&idx, &env)?;
        let unit = dataset.batch_unit(&idx, &env)?;
        let taps = model.backbone.extract_features(&unit)?;
        let template_ids: Vec<usize> = idx.iter().map(|&i| dataset.records[i].template_id).collect();
        let mut noise_rng = streams.stream("noise", step as u64);
        let t: Vec<usize> = (0..idx.len())
            .map(|_| noise_rng.gen_range(0..model.schedule.len()))
            .collect();
        let eps = randn(&mut noise_rng, x0.dims(), &env)?;
        let sample = noise_sample(&model.schedule, &x0, &t, &eps)?;
        let (total, diffusion, reg) = objective(model, &sample, &eps, &taps, &template_ids, lambda, None)?;
        let row = LossRow {
            step,
            total: scalar_f64(&total)?,
            diffusion: scalar_f64(&diffusion)?,
            reg: scalar_f64(&reg)?,
        };
        check_finite(step, row.diffusion, row.reg)?;
        opt.backward_step(&total)?;
        trace.push(row);
    }
    Ok(PretrainResult {
        trace,
        steps: cfg.steps,
    })
}

/// `B` replicas of a single image, each noised at an independently drawn
/// timestep; timesteps are stratified (all distinct while `B <= T`).
pub fn build_tuning_batch(
    x0: &Tensor,
    b: usize,
    schedule: &NoiseSchedule,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<(NoisySample, Tensor)> {
    if b == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let (one, c, h, w) = x0.dims4()?;
    if one != 1 {
        return Err(Error::contract(format!("expected a single image, got batch {one}")));
    }
    let total = schedule.len();
    let t: Vec<usize> = if b <= total {
        // One draw per stratum [i*T/B, (i+1)*T/B).
        (0..b)
            .map(|i| {
                let lo = i * total / b;
                let hi = ((i + 1) * total / b).max(lo + 1);
                rng.gen_range(lo..hi)
            })
            .collect()
    } else {
        (0..b).map(|_| rng.gen_range(0..total)).collect()
    };
    let env = crate::params::TensorEnv {
        device: x0.device().clone(),
        dtype: x0.dtype(),
    };
    let rep = x0.broadcast_as((b, c, h, w))?.contiguous()?;
    let eps = randn(rng, &[b, c, h, w], &env)?;
    let sample = noise_sample(schedule, &rep, &t, &eps)?;
    Ok((sample, eps))
}

/// Var name prefixes trained during personalization under `flags`.
pub fn tuned_prefixes(flags: &AblationFlags) -> Vec<&'static str> {
    if flags.no_tuning {
        vec![]
    } else if flags.tune_components_only {
        vec!["encoder.", "offsets."]
    } else if flags.tune_denoiser_only {
        vec!["denoiser."]
    } else if flags.encoder_only {
        vec!["encoder."]
    } else {
        vec!["denoiser.", "encoder.", "offsets."]
    }
}

/// Few-step tuning on one concept image. `concept_unit` is the image in
/// [0, 1] (backbone range), `concept_signed` the same image in [-1, 1]
/// (diffusion range), both [1, 3, R, R]. The optional mask is [1, 1, R, R].
pub fn personalize(
    model: &mut Model,
    concept_unit: &Tensor,
    concept_signed: &Tensor,
    template: &PromptTemplate,
    cfg: &TrainConfig,
    mask: Option<&Tensor>,
) -> Result<PersonalizationResult> {
    cfg.validate()?;
    template.validate()?;
    let env = model.store.env().clone();
    let image_hash = crate::params::tensor_hash(concept_signed)?;
    if let Some(m) = mask {
        let (mb, mc, mh, mw) = m.dims4()?;
        let (_, _, h, w) = concept_signed.dims4()?;
        if (mb, mc, mh, mw) != (1, 1, h, w) {
            return Err(Error::contract(format!(
                "mask shape [{mb}, {mc}, {mh}, {mw}], expected [1, 1, {h}, {w}]"
            )));
        }
    }
    if cfg.flags.no_tuning {
        return Ok(PersonalizationResult {
            trace: vec![],
            steps: 0,
            concept_image_hash: image_hash,
        });
    }
    let prefixes = tuned_prefixes(&cfg.flags);
    let vars = model.store.vars_with_prefixes(&prefixes);
    if vars.is_empty() {
        return Err(Error::contract("no trainable parameters under the given flags"));
    }
    let mut opt = optimizer(vars, cfg.effective_lr())?;
    let streams = RngStreams::new(cfg.seed);
    let lambda = cfg.effective_lambda();
    let taps_single = model.backbone.extract_features(concept_unit)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let template_ids = vec![template.id; cfg.batch_size];
    for step in 0..cfg.steps {
        let mut rng = streams.stream("noise", step as u64);
        let (sample, eps) = build_tuning_batch(concept_signed, cfg.batch_size, &model.schedule, &mut rng)?;
        let taps: Vec<Tensor> = taps_single
            .iter()
            .map(|x| {
                let w = x.dim(1)?;
                Ok(x.broadcast_as((cfg.batch_size, w))?.contiguous()?)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch_mask = match mask {
            Some(m) => {
                let (_, _, h, w) = m.dims4()?;
                Some(
                    m.to_dtype(env.dtype)?
                        .broadcast_as((cfg.batch_size, 1, h, w))?
                        .contiguous()?,
                )
            }
            None => None,
        };
        let (total, diffusion, reg) = objective(
            model,
            &sample,
            &eps,
            &taps,
            &template_ids,
            lambda,
            batch_mask.as_ref(),
        )?;
        let row = LossRow {
            step,
            total: scalar_f64(&total)?,
            diffusion: scalar_f64(&diffusion)?,
            reg: scalar_f64(&reg)?,
        };
        check_finite(step, row.diffusion, row.reg)?;
        opt.backward_step(&total)?;
        trace.push(row);
    }
    Ok(PersonalizationResult {
        trace,
        steps: cfg.steps,
        concept_image_hash: image_hash,
    })
}

/// Outcome of the embedding-only baseline: the optimized free embedding and
/// its loss trace.
pub struct EmbeddingOnlyResult {
    pub embedding: Tensor,
    pub trace: Vec<LossRow>,
}

/// Textual-inversion style baseline: optimize one free concept embedding
/// (initialized at the domain embedding) with the diffusion loss. No
/// encoder, no offsets, no model tuning.
pub fn baseline_embedding_only(
    model: &Model,
    concept_signed: &Tensor,
    template: &PromptTemplate,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    mask: Option<&Tensor>,
) -> Result<EmbeddingOnlyResult> {
    template.validate()?;
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let env = model.store.env().clone();
    let init = model.embeddings.domain_embedding()?.unsqueeze(0)?;
    let var = candle_core::Var::from_tensor(&init)?;
    let mut opt = optimizer(vec![var.clone()], lr)?;
    let streams = RngStreams::new(seed);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = streams.stream("noise", step as u64);
        let (sample, eps) = build_tuning_batch(concept_signed, batch_size, &model.schedule, &mut rng)?;
        let e_c = var
            .as_tensor()
            .broadcast_as((batch_size, model.embeddings.dim()))?
            .contiguous()?;
        let cond = model.embeddings.splice(template, &e_c)?;
        let pred = model.denoiser.forward(&sample.z_t, &sample.t, &cond, None)?;
        let batch_mask = match mask {
            Some(m) => {
                let (_, _, h, w) = m.dims4()?;
                Some(
                    m.to_dtype(env.dtype)?
                        .broadcast_as((batch_size, 1, h, w))?
                        .contiguous()?,
                )
            }
            None => None,
        };
        let loss = masked_eps_loss(&eps, &pred, batch_mask.as_ref())?;
        let row = LossRow {
            step,
            total: scalar_f64(&loss)?,
            diffusion: scalar_f64(&loss)?,
            reg: 0.0,
        };
        check_finite(step, row.diffusion, 0.0)?;
        opt.backward_step(&loss)?;
        trace.push(row);
    }
    let _ = compose_embedding; // keeps the composition helper linked for docs
    Ok(EmbeddingOnlyResult {
        embedding: var.as_tensor().clone(),
        trace,
    })
}
