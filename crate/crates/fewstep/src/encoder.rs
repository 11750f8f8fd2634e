//! Concept inversion encoder.
//!
//! A frozen convolutional backbone extracts hierarchical features of the
//! concept image; a small head fuses those with pooled denoiser features of
//! the current noisy sample and predicts a word-embedding offset. The
//! concept embedding is the frozen domain word embedding plus a scaled
//! offset, re-predicted at every denoising timestep. The backbone is
//! trained once as an identity classifier on rendered sprites and never
//! updated afterwards; its penultimate activations double as the feature
//! probe used by the evaluation metrics.

use candle_core::{Tensor, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::prompts::{PromptTemplate, DOMAIN_TOKEN};
use crate::rng::RngStreams;
use crate::sprite::LoadedDataset;

/// Default offset scale applied when composing the concept embedding.
pub const OFFSET_SCALE: f64 = 0.1;

/// Negative slope of the head's activation.
pub const LEAKY_SLOPE: f64 = 0.2;

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub resolution: usize,
    /// Output channels of the six conv blocks.
    pub channels: Vec<usize>,
    /// Width of the penultimate (probe) layer.
    pub hidden: usize,
    /// Identity classes the classifier was trained over.
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: vec![16, 16, 32, 32, 64, 64],
            hidden: 128,
            num_classes: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 6 {
            return Err(Error::InvalidConfig(format!(
                "backbone needs 6 blocks, got {}",
                self.channels.len()
            )));
        }
        if self.resolution % 8 != 0 || self.resolution == 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone resolution {} must be a positive multiple of 8",
                self.resolution
            )));
        }
        if self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("backbone hidden/num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Widths of the tap vectors (every second block, pooled).
    pub fn tap_widths(&self) -> Vec<usize> {
        vec![self.channels[1], self.channels[3], self.channels[5]]
    }
}

/// Everything one backbone pass produces.
pub struct BackboneOutput {
    /// Pooled activations of blocks 2, 4 and 6, each [B, W].
    pub taps: Vec<Tensor>,
    /// Activated penultimate layer, [B, hidden]. The similarity probe.
    pub penultimate: Tensor,
    /// Classifier logits, [B, num_classes].
    pub logits: Tensor,
}

/// Six-block convolutional sprite-identity classifier with feature taps.
pub struct FeatureBackbone {
    cfg: BackboneConfig,
    convs: Vec<(Tensor, Tensor)>,
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
}

impl FeatureBackbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w = store.param(
                &format!("backbone.block{i}.conv.weight"),
                &[c_out, c_in, 3, 3],
                Init::Normal { std },
            )?;
            let b = store.param(&format!("backbone.block{i}.conv.bias"), &[c_out], Init::Zeros)?;
            convs.push((w, b));
            c_in = c_out;
        }
        let c_last = *cfg.channels.last().unwrap();
        let fc1 = (
            store.param(
                "backbone.fc1.weight",
                &[cfg.hidden, c_last],
                Init::Normal { std: (1.0 / c_last as f64).sqrt() },
            )?,
            store.param("backbone.fc1.bias", &[cfg.hidden], Init::Zeros)?,
        );
        let fc2 = (
            store.param(
                "backbone.fc2.weight",
                &[cfg.num_classes, cfg.hidden],
                Init::Normal { std: (1.0 / cfg.hidden as f64).sqrt() },
            )?,
            store.param("backbone.fc2.bias", &[cfg.num_classes], Init::Zeros)?,
        );
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x` is [B, 3, R, R] with values in [0, 1].
    pub fn forward(&self, x: &Tensor) -> Result<BackboneOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::contract(format!(
                "backbone input [{c}, {h}, {w}], expected [3, {r}, {r}]",
                r = self.cfg.resolution
            )));
        }
        let mut hid = x.clone();
        let mut taps = Vec::with_capacity(3);
        for (i, (cw, cb)) in self.convs.iter().enumerate() {
            // Stride-2 stem halves the spatial cost of every later block.
            let stride = if i == 0 { 2 } else { 1 };
            hid = hid
                .conv2d(cw, 1, stride, 1, 1)?
                .broadcast_add(&cb.reshape((1, (), 1, 1))?)?
                .silu()?;
            if i % 2 == 1 {
                taps.push(hid.mean(D::Minus1)?.mean(D::Minus1)?);
                hid = hid.avg_pool2d(2)?;
            }
        }
        let pooled = hid.mean(D::Minus1)?.mean(D::Minus1)?;
        let penultimate = leaky_relu(&linear(&pooled, &self.fc1.0, &self.fc1.1)?, LEAKY_SLOPE)?;
        let logits = linear(&penultimate, &self.fc2.0, &self.fc2.1)?;
        Ok(BackboneOutput {
            taps,
            penultimate,
            logits,
        })
    }

    /// Tap vectors of a concept image batch. Pure in the image.
    pub fn extract_features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward(image)?.taps)
    }
}

/// Outcome of a backbone training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneTrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Train the backbone as an identity classifier over `dataset`. Labels are
/// identity seeds in sorted order. Returns the final train accuracy; callers
/// enforce their own accuracy floor.
pub fn train_backbone(
    store: &ParamStore,
    backbone: &FeatureBackbone,
    dataset: &LoadedDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<BackboneTrainReport> {
    if dataset.is_empty() || batch_size == 0 || steps == 0 {
        return Err(Error::contract("backbone training needs data, steps and a batch"));
    }
    let env = store.env().clone();
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = dataset.records.iter().map(|r| r.identity.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if seeds.len() > backbone.cfg.num_classes {
        return Err(Error::contract(format!(
            "{} identities exceed backbone num_classes {}",
            seeds.len(),
            backbone.cfg.num_classes
        )));
    }
    let labels: Vec<u32> = dataset
        .records
        .iter()
        .map(|r| seeds.binary_search(&r.identity.seed).unwrap() as u32)
        .collect();
    let vars = store.vars_with_prefixes(&["backbone."]);
    let mut opt = candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            ..Default::default()
        },
    )?;
    let mut rng = RngStreams::new(seed).stream("backbone-train", 0);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let mut idx = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = dataset.batch_unit(&idx, &env)?;
        let y = Tensor::from_vec(
            idx.iter().map(|&i| labels[i]).collect::<Vec<u32>>(),
            idx.len(),
            &env.device,
        )?;
        let out = backbone.forward(&x)?;
        let loss = candle_nn::loss::cross_entropy(&out.logits, &y)?;
        final_loss = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !final_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diffusion: final_loss,
                reg: 0.0,
            });
        }
        opt.backward_step(&loss)?;
    }
    // Train accuracy over the full dataset, in modest chunks.
    let mut correct = 0usize;
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
        let x = dataset.batch_unit(chunk, &env)?;
        let logits = backbone.forward(&x)?.logits;
        let pred = logits.argmax(D::Minus1)?.to_dtype(candle_core::DType::U32)?;
        let pred: Vec<u32> = pred.to_vec1()?;
        for (p, &i) in pred.iter().zip(chunk.iter()) {
            if *p == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(BackboneTrainReport {
        steps,
        final_loss,
        train_accuracy: correct as f64 / dataset.len() as f64,
    })
}

/// Word-embedding table for the toy vocabulary.
pub struct EmbeddingTable {
    table: Tensor,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, vocab: usize, dim: usize) -> Result<Self> {
        let table = store.param("embeddings.table", &[vocab, dim], Init::Normal { std: 0.02 })?;
        Ok(Self { table, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embeddings for a token id sequence, [L, d].
    pub fn lookup(&self, ids: &[u16]) -> Result<Tensor> {
        let vocab = self.table.dim(0)?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::contract(format!("token id {id} outside vocab {vocab}")));
            }
        }
        let idx = Tensor::from_vec(
            ids.iter().map(|&i| i as u32).collect::<Vec<u32>>(),
            ids.len(),
            self.table.device(),
        )?;
        Ok(self.table.index_select(&idx, 0)?)
    }

    /// The frozen domain word embedding, [d].
    pub fn domain_embedding(&self) -> Result<Tensor> {
        Ok(self.lookup(&[DOMAIN_TOKEN])?.squeeze(0)?)
    }

    /// Template conditioning with `e_c` ([B, d]) spliced at the placeholder
    /// position. All other positions carry the template's own embeddings.
    pub fn splice(&self, template: &PromptTemplate, e_c: &Tensor) -> Result<Tensor> {
        let (b, d) = e_c.dims2()?;
        if d != self.dim {
            return Err(Error::contract(format!(
                "concept embedding width {d} != table width {}",
                self.dim
            )));
        }
        let base = self.lookup(&template.token_ids)?; // [L, d]
        let l = template.token_ids.len();
        let p = template.placeholder_index;
        let expanded = base.unsqueeze(0)?.broadcast_as((b, l, d))?;
        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        if p > 0 {
            parts.push(expanded.narrow(1, 0, p)?);
        }
        parts.push(e_c.unsqueeze(1)?);
        if p + 1 < l {
            parts.push(expanded.narrow(1, p + 1, l - p - 1)?);
        }
        Ok(Tensor::cat(&parts, 1)?.contiguous()?)
    }

    /// Conditioning without any concept: the domain embedding fills the
    /// placeholder. [1, L, d].
    pub fn domain_conditioning(&self, template: &PromptTemplate) -> Result<Tensor> {
        let e = self.domain_embedding()?.unsqueeze(0)?;
        self.splice(template, &e)
    }
}

/// A composed concept embedding with the exact pieces it was built from.
pub struct ConceptEmbedding {
    /// [B, d]
    pub e_c: Tensor,
    /// [B, d], the raw encoder output.
    pub offset: Tensor,
    pub s: f64,
    /// [d]
    pub domain_embedding: Tensor,
}

/// `e_c = domain + s * offset`, elementwise over the batch.
pub fn compose_embedding(
    offset: &Tensor,
    domain_embedding: &Tensor,
    s: f64,
) -> Result<ConceptEmbedding> {
    let (_, d) = offset.dims2()?;
    if domain_embedding.dims1()? != d {
        return Err(Error::contract(format!(
            "offset width {d} != domain embedding width {}",
            domain_embedding.dims1()?
        )));
    }
    let e_c = offset.affine(s, 0.0)?.broadcast_add(domain_embedding)?;
    Ok(ConceptEmbedding {
        e_c,
        offset: offset.clone(),
        s,
        domain_embedding: domain_embedding.clone(),
    })
}

/// Squared L2 norm of the offset, averaged over the batch.
pub fn embedding_reg_loss(offset: &Tensor) -> Result<Tensor> {
    let sq = offset.sqr()?.sum(D::Minus1)?;
    Ok(sq.mean_all()?)
}

/// Head that fuses backbone taps with pooled denoiser features.
pub struct EncoderHead {
    tap_proj: Vec<(Tensor, Tensor)>,
    unet_proj: Vec<(Tensor, Tensor)>,
    out: (Tensor, Tensor),
    proj_width: usize,
    embed_dim: usize,
}

impl EncoderHead {
    /// `denoiser_widths` is `None` for the no-iterative-refinement ablation,
    /// which drops the denoiser-feature path entirely. The final map starts
    /// at zero so the initial offset (and hence the initial concept
    /// embedding deviation) is exactly zero.
    pub fn new(
        store: &mut ParamStore,
        tap_widths: &[usize],
        denoiser_widths: Option<&[usize]>,
        proj_width: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if tap_widths.is_empty() {
            return Err(Error::contract("encoder head needs at least one backbone tap"));
        }
        let mut tap_proj = Vec::new();
        for (i, &w) in tap_widths.iter().enumerate() {
            tap_proj.push((
                store.param(
                    &format!("encoder.tap{i}.weight"),
                    &[proj_width, w],
                    Init::Normal { std: (1.0 / w as f64).sqrt() },
                )?,
                store.param(&format!("encoder.tap{i}.bias"), &[proj_width], Init::Zeros)?,
            ));
        }
        let mut unet_proj = Vec::new();
        if let Some(widths) = denoiser_widths {
            for (i, &w) in widths.iter().enumerate() {
                unet_proj.push((
                    store.param(
                        &format!("encoder.unet{i}.weight"),
                        &[proj_width, w],
                        Init::Normal { std: (1.0 / w as f64).sqrt() },
                    )?,
                    store.param(&format!("encoder.unet{i}.bias"), &[proj_width], Init::Zeros)?,
                ));
            }
        }
        let out = (
            store.param("encoder.out.weight", &[embed_dim, proj_width], Init::Zeros)?,
            store.param("encoder.out.bias", &[embed_dim], Init::Zeros)?,
        );
        Ok(Self {
            tap_proj,
            unet_proj,
            out,
            proj_width,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn uses_denoiser_features(&self) -> bool {
        !self.unet_proj.is_empty()
    }

    /// Predict the embedding offset, [B, d]. `denoiser_feats` must be given
    /// exactly when the head was built with a denoiser path.
    pub fn predict_offset(
        &self,
        backbone_taps: &[Tensor],
        denoiser_feats: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        if backbone_taps.len() != self.tap_proj.len() {
            return Err(Error::contract(format!(
                "{} backbone taps, head expects {}",
                backbone_taps.len(),
                self.tap_proj.len()
            )));
        }
        let mut projected: Vec<Tensor> = Vec::new();
        for (t, (w, b)) in backbone_taps.iter().zip(self.tap_proj.iter()) {
            projected.push(linear(t, w, b)?);
        }
        match (denoiser_feats, self.unet_proj.is_empty()) {
            (Some(feats), false) => {
                if feats.len() != self.unet_proj.len() {
                    return Err(Error::contract(format!(
                        "{} denoiser features, head expects {}",
                        feats.len(),
                        self.unet_proj.len()
                    )));
                }
                for (t, (w, b)) in feats.iter().zip(self.unet_proj.iter()) {
                    projected.push(linear(t, w, b)?);
                }
            }
            (None, true) => {}
            (Some(_), true) => {
                return Err(Error::contract(
                    "denoiser features passed to a head built without that path",
                ))
            }
            (None, false) => {
                return Err(Error::contract(
                    "head was built with a denoiser-feature path but none were passed",
                ))
            }
        }
        let n = projected.len() as f64;
        let mut acc = projected[0].clone();
        for p in &projected[1..] {
            acc = acc.add(p)?;
        }
        let pooled = acc.affine(1.0 / n, 0.0)?;
        let _ = self.proj_width;
        let act = leaky_relu(&pooled, LEAKY_SLOPE)?;
        linear(&act, &self.out.0, &self.out.1)
    }
}

/// Predict a batch of concept embeddings for noisy samples `z_t` at
/// timesteps `t`, given precomputed backbone taps of the concept images.
/// `detach` severs the gradient into the denoiser's feature path.
pub fn concept_embedding_at(
    head: &EncoderHead,
    backbone_taps: &[Tensor],
    denoiser: &Denoiser,
    embeddings: &EmbeddingTable,
    z_t: &Tensor,
    t: &[usize],
    s: f64,
    detach: bool,
) -> Result<ConceptEmbedding> {
    let feats = if head.uses_denoiser_features() {
        let mut f = denoiser.pooled_block_features(z_t, t)?;
        if detach {
            f = f.iter().map(|x| x.detach()).collect();
        }
        Some(f)
    } else {
        None
    };
    let offset = head.predict_offset(backbone_taps, feats.as_deref())?;
    compose_embedding(&offset, &embeddings.domain_embedding()?, s)
}

/// Per-timestep conditioning for sampling: caches the backbone taps of one
/// concept image and re-predicts the concept embedding at each step.
pub struct ConceptConditioner<'a> {
    head: &'a EncoderHead,
    denoiser: &'a Denoiser,
    embeddings: &'a EmbeddingTable,
    template: &'a PromptTemplate,
    taps: Vec<Tensor>,
    pub s: f64,
    pub detach: bool,
}

impl<'a> ConceptConditioner<'a> {
    /// `concept_image` is [1, 3, R, R] in [0, 1].
    pub fn new(
        head: &'a EncoderHead,
        backbone: &'a FeatureBackbone,
        denoiser: &'a Denoiser,
        embeddings: &'a EmbeddingTable,
        template: &'a PromptTemplate,
        concept_image: &Tensor,
        s: f64,
        detach: bool,
    ) -> Result<Self> {
        template.validate()?;
        let taps = backbone.extract_features(concept_image)?;
        Ok(Self {
            head,
            denoiser,
            embeddings,
            template,
            taps,
            s,
            detach,
        })
    }

    /// The concept embedding for one state, plus the full conditioning
    /// sequence with it spliced in. `z_t` is [B, 3, R, R]; the cached taps
    /// broadcast over the batch.
    pub fn embed(&self, t: &[usize], z_t: &Tensor) -> Result<(ConceptEmbedding, Tensor)> {
        let b = z_t.dim(0)?;
        let taps: Vec<Tensor> = self
            .taps
            .iter()
            .map(|x| {
                let w = x.dim(1)?;
                Ok(x.broadcast_as((b, w))?.contiguous()?)
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = concept_embedding_at(
            self.head,
            &taps,
            self.denoiser,
            self.embeddings,
            z_t,
            t,
            self.s,
            self.detach,
        )?;
        let cond = self.embeddings.splice(self.template, &emb.e_c)?;
        Ok((emb, cond))
    }

    /// Conditioning callback for the sampler.
    pub fn provider(&self) -> impl FnMut(usize, &Tensor) -> Result<Tensor> + '_ {
        move |t, z| {
            let (_, cond) = self.embed(&[t], z)?;
            Ok(cond)
        }
    }
}
