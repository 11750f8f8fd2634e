//! Dataset generation and loading.
//!
//! A dataset is a directory with `manifest.jsonl` (one record per image),
//! `images/*.png` and `masks/*.png`. Generation is a pure function of its
//! arguments: per-image randomness is derived from (seed, identity index,
//! image index), so re-running with the same arguments reproduces the
//! manifest byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{
    generate_identity_with, render, sample_context, RenderContext, SpriteDomainConfig,
    SpriteIdentity,
};
use crate::error::{Error, Result};
use crate::params::TensorEnv;
use crate::prompts::{template_pool, PromptTemplate};
use crate::rng::RngStreams;
use candle_core::Tensor;

/// One manifest line: an image, its exact mask, and everything needed to
/// re-render it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetRecord {
    pub identity: SpriteIdentity,
    pub context: RenderContext,
    pub template_id: usize,
    pub image: String,
    pub mask: String,
}

/// Manifest plus location of an on-disk dataset.
#[derive(Debug, Clone)]
pub struct SpriteDataset {
    pub root: PathBuf,
    pub resolution: usize,
    pub records: Vec<DatasetRecord>,
}

impl SpriteDataset {
    pub fn unique_identity_seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.records.iter().map(|r| r.identity.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }

    pub fn load_manifest(root: &Path, resolution: usize) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.jsonl"))?;
        let records = text
            .lines()
            .map(serde_json::from_str::<DatasetRecord>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            resolution,
            records,
        })
    }

    /// Read every image and mask into memory as f32 pixels.
    pub fn load_images(&self) -> Result<LoadedDataset> {
        let mut images = Vec::with_capacity(self.records.len());
        let mut masks = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let img = image::open(self.root.join(&rec.image))?.to_rgb8();
            if img.width() as usize != self.resolution || img.height() as usize != self.resolution {
                return Err(Error::contract(format!(
                    "image {} is {}x{}, expected {}",
                    rec.image,
                    img.width(),
                    img.height(),
                    self.resolution
                )));
            }
            images.push(img.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect());
            let m = image::open(self.root.join(&rec.mask))?.to_luma8();
            masks.push(m.pixels().map(|p| (p.0[0] > 127) as u8).collect());
        }
        Ok(LoadedDataset {
            resolution: self.resolution,
            records: self.records.clone(),
            images,
            masks,
        })
    }
}

/// A dataset with pixel data resident in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub resolution: usize,
    pub records: Vec<DatasetRecord>,
    /// Per record: resolution*resolution*3 interleaved RGB in [0, 1].
    pub images: Vec<Vec<f32>>,
    /// Per record: resolution*resolution binary foreground flags.
    pub masks: Vec<Vec<u8>>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Bias the sampled context towards whatever the template describes, so that
/// prompts carry real conditioning signal.
fn constrain_context(
    ctx: &mut RenderContext,
    template: &PromptTemplate,
    cfg: &SpriteDomainConfig,
    rng: &mut impl Rng,
    resolution: usize,
) {
    let side = resolution as f64;
    if let Some(bg) = template.background_target() {
        for ch in 0..3 {
            ctx.background_color[ch] = (bg[ch] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
    }
    match template.id {
        4 => ctx.rotation = rng.gen_range(30.0..330.0),
        5 => ctx.scale = cfg.scale_range[1] * side,
        6 => ctx.scale = cfg.scale_range[0] * side,
        _ => {}
    }
    // Re-center if a scale override broke the bounds.
    for axis in 0..2 {
        let slack = (side / 2.0 - ctx.scale - 1.0).max(0.0);
        ctx.position[axis] = ctx.position[axis].clamp(-slack, slack);
    }
}

/// Generate `n_identities * images_per` rendered sprites under `out_dir`.
pub fn make_dataset(
    out_dir: &Path,
    cfg: &SpriteDomainConfig,
    n_identities: usize,
    images_per: usize,
    resolution: usize,
    seed: u64,
) -> Result<SpriteDataset> {
    if n_identities == 0 || images_per == 0 {
        return Err(Error::contract(
            "n_identities and images_per must both be >= 1",
        ));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let streams = RngStreams::new(seed);
    let pool = template_pool();
    let mut records = Vec::with_capacity(n_identities * images_per);
    for id_idx in 0..n_identities {
        let identity_seed = streams.stream("data", id_idx as u64).gen::<u64>();
        let identity = generate_identity_with(cfg, identity_seed);
        for img_idx in 0..images_per {
            let mut rng = streams.stream("data-ctx", (id_idx * images_per + img_idx) as u64);
            let template = &pool[rng.gen_range(0..pool.len())];
            let mut ctx = sample_context(cfg, &mut rng, resolution);
            constrain_context(&mut ctx, template, cfg, &mut rng, resolution);
            let rendered = render(&identity, &ctx, resolution)?;
            let stem = format!("{id_idx:04}_{img_idx:04}");
            let image_rel = format!("images/{stem}.png");
            let mask_rel = format!("masks/{stem}.png");
            save_image_png(&out_dir.join(&image_rel), &rendered.image, resolution)?;
            save_mask_png(&out_dir.join(&mask_rel), &rendered.mask, resolution)?;
            records.push(DatasetRecord {
                identity: identity.clone(),
                context: ctx,
                template_id: template.id,
                image: image_rel,
                mask: mask_rel,
            });
        }
    }
    let mut manifest = String::new();
    for rec in &records {
        manifest.push_str(&serde_json::to_string(rec)?);
        manifest.push('\n');
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    Ok(SpriteDataset {
        root: out_dir.to_path_buf(),
        resolution,
        records,
    })
}

pub(crate) fn save_image_png(path: &Path, pixels: &[f32], resolution: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(resolution as u32, resolution as u32, bytes)
        .ok_or_else(|| Error::contract("pixel buffer does not match resolution"))?;
    img.save(path)?;
    Ok(())
}

fn save_mask_png(path: &Path, mask: &[u8], resolution: usize) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(resolution as u32, resolution as u32, bytes)
        .ok_or_else(|| Error::contract("mask buffer does not match resolution"))?;
    img.save(path)?;
    Ok(())
}


impl LoadedDataset {
    /// One image as [3, H, W] with values in [0, 1].
    pub fn image_unit(&self, i: usize, env: &TensorEnv) -> Result<Tensor> {
        let r = self.resolution;
        let px = self
            .images
            .get(i)
            .ok_or_else(|| Error::contract(format!("image index {i} out of range")))?;
        let t = Tensor::from_vec(px.clone(), (r, r, 3), &env.device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(env.dtype)?;
        Ok(t)
    }

    /// One image as [3, H, W] with values in [-1, 1] (the diffusion range).
    pub fn image_signed(&self, i: usize, env: &TensorEnv) -> Result<Tensor> {
        Ok(self.image_unit(i, env)?.affine(2.0, -1.0)?)
    }

    /// One foreground mask as [1, H, W] with values in {0, 1}.
    pub fn mask(&self, i: usize, env: &TensorEnv) -> Result<Tensor> {
        let r = self.resolution;
        let m = self
            .masks
            .get(i)
            .ok_or_else(|| Error::contract(format!("mask index {i} out of range")))?;
        let vals: Vec<f32> = m.iter().map(|&v| v as f32).collect();
        let t = Tensor::from_vec(vals, (1, r, r), &env.device)?.to_dtype(env.dtype)?;
        Ok(t)
    }

    /// Stacked [B, 3, H, W] batch in [-1, 1].
    pub fn batch_signed(&self, idx: &[usize], env: &TensorEnv) -> Result<Tensor> {
        let ts = idx
            .iter()
            .map(|&i| self.image_signed(i, env))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Stacked [B, 3, H, W] batch in [0, 1].
    pub fn batch_unit(&self, idx: &[usize], env: &TensorEnv) -> Result<Tensor> {
        let ts = idx
            .iter()
            .map(|&i| self.image_unit(i, env))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Stacked [B, 1, H, W] masks.
    pub fn batch_masks(&self, idx: &[usize], env: &TensorEnv) -> Result<Tensor> {
        let ts = idx
            .iter()
            .map(|&i| self.mask(i, env))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }
}
