//! Refinement diagnostics and evaluation metrics.
//!
//! Covers freezing the per-timestep embedding prediction at a cutoff,
//! embedding-distance curves over the sampling trajectory, probe-based
//! concept similarity, analytic prompt adherence for background-color
//! templates, and the smoothed step-count-to-threshold comparison.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::sample;
use crate::encoder::{ConceptConditioner, FeatureBackbone};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompts::PromptTemplate;
use crate::rng::RngStreams;

/// One sampling step of a refinement run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub t: usize,
    pub offset_norm: f64,
    /// ||e_c - domain embedding||, equal to s * offset_norm.
    pub embedding_distance: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub t_stop: usize,
    pub records: Vec<RefinementRecord>,
}

fn vector_norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?
        .sqr()?
        .sum_all()?
        .sqrt()?
        .to_scalar::<f64>()?)
}

/// Convert a sampler output in [-1, 1] to the image range [0, 1].
pub fn signed_to_unit(t: &Tensor) -> Result<Tensor> {
    Ok(t.clamp(-1.0, 1.0)?.affine(0.5, 0.5)?)
}

/// Read a PNG as a [1, 3, H, W] tensor in [0, 1].
pub fn load_image_unit(path: &Path, env: &crate::params::TensorEnv) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    let t = Tensor::from_vec(px, (h, w, 3), &env.device)?
        .permute((2, 0, 1))?
        .contiguous()?
        .to_dtype(env.dtype)?;
    Ok(t.unsqueeze(0)?)
}

/// Write a [3, H, W] or [1, 3, H, W] unit-range tensor as a PNG.
pub fn save_image_png(path: &Path, image_t: &Tensor) -> Result<()> {
    let t = if image_t.dims().len() == 4 {
        image_t.get(0)?
    } else {
        image_t.clone()
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::contract(format!("expected 3 channels, got {c}")));
    }
    let data = t
        .clamp(0.0, 1.0)?
        .permute((1, 2, 0))?
        .contiguous()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let bytes: Vec<u8> = data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::contract("pixel buffer size mismatch"))?;
    img.save(path)?;
    Ok(())
}

/// Sample with the per-timestep conditioner, freezing the predicted concept
/// embedding once the trajectory passes below `t_stop`: at steps with
/// `t < t_stop` the last prediction is reused. The first step always
/// predicts, so `t_stop = 0` never freezes and `t_stop = T` freezes
/// everything after the first step. The initial noise comes from the
/// "sampler" stream of `seed`, independent of `t_stop`, so runs with
/// different cutoffs differ only through the conditioning.
pub fn refinement_freeze_sample(
    model: &Model,
    concept_unit: &Tensor,
    template: &PromptTemplate,
    t_stop: usize,
    steps: usize,
    seed: u64,
) -> Result<(Tensor, RefinementTrace)> {
    let total = model.schedule.len();
    if t_stop > total {
        return Err(Error::contract(format!(
            "t_stop {t_stop} outside [0, {total}]"
        )));
    }
    let conditioner = ConceptConditioner::new(
        &model.head,
        &model.backbone,
        &model.denoiser,
        &model.embeddings,
        template,
        concept_unit,
        model.cfg.offset_scale,
        false,
    )?;
    let delta = match &model.offsets {
        Some(set) => {
            let hf = if set.cfg.mode == crate::offsets::OffsetMode::Hyper {
                let taps = model.backbone.extract_features(concept_unit)?;
                Some(Tensor::cat(&taps, 1)?.mean(0)?)
            } else {
                None
            };
            Some(set.materialize_all(hf.as_ref())?)
        }
        None => None,
    };
    let mut records: Vec<RefinementRecord> = Vec::with_capacity(steps);
    let mut held: Option<Tensor> = None;
    let mut held_record: Option<(f64, f64)> = None;
    let mut provider = |t: usize, z: &Tensor| -> Result<Tensor> {
        let freeze = held.is_some() && t < t_stop;
        if freeze {
            let (offset_norm, embedding_distance) = held_record.unwrap();
            records.push(RefinementRecord {
                t,
                offset_norm,
                embedding_distance,
                frozen: true,
            });
            return Ok(held.clone().unwrap());
        }
        let (emb, cond) = conditioner.embed(&[t], z)?;
        let offset_norm = vector_norm(&emb.offset)?;
        let distance = vector_norm(&emb.e_c.broadcast_sub(&emb.domain_embedding)?)?;
        records.push(RefinementRecord {
            t,
            offset_norm,
            embedding_distance: distance,
            frozen: false,
        });
        held = Some(cond.clone());
        held_record = Some((offset_norm, distance));
        Ok(cond)
    };
    let mut rng = RngStreams::new(seed).stream("sampler", 0);
    let image = sample(
        &model.denoiser,
        &model.schedule,
        &mut provider,
        steps,
        &mut rng,
        delta.as_ref(),
    )?;
    Ok((
        image,
        RefinementTrace {
            t_stop,
            records,
        },
    ))
}

/// Per-step mean of ||e_c - domain embedding|| over sampling runs with the
/// given seeds. Returns (timesteps, mean distances), both of length `steps`.
pub fn embedding_distance_curve(
    model: &Model,
    concept_unit: &Tensor,
    template: &PromptTemplate,
    seeds: &[u64],
    steps: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if seeds.is_empty() {
        return Err(Error::contract("need at least one seed"));
    }
    let mut acc = vec![0.0f64; steps];
    let mut ts = vec![0usize; steps];
    for &seed in seeds {
        let (_, trace) = refinement_freeze_sample(model, concept_unit, template, 0, steps, seed)?;
        for (i, r) in trace.records.iter().enumerate() {
            acc[i] += r.embedding_distance;
            ts[i] = r.t;
        }
    }
    for v in &mut acc {
        *v /= seeds.len() as f64;
    }
    Ok((ts, acc))
}

/// Write a (timestep, value) curve as CSV.
pub fn write_curve_csv(path: &Path, timesteps: &[usize], values: &[f64]) -> Result<()> {
    if timesteps.len() != values.len() {
        return Err(Error::contract("curve lengths differ"));
    }
    let mut out = String::from("t,value\n");
    for (t, v) in timesteps.iter().zip(values.iter()) {
        out.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Render a curve as a simple PNG line plot (white background, black axes,
/// dark polyline). Values are drawn left to right in input order.
pub fn plot_curve_png(path: &Path, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::contract("nothing to plot"));
    }
    let (w, h) = (480u32, 320u32);
    let (mx, my) = (40i64, 20i64);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let plot_w = w as i64 - 2 * mx;
    let plot_h = h as i64 - 2 * my;
    let px = |i: usize| -> i64 {
        if values.len() == 1 {
            mx + plot_w / 2
        } else {
            mx + (i as i64 * plot_w) / (values.len() as i64 - 1)
        }
    };
    let py = |v: f64| -> i64 { my + plot_h - ((v - lo) / span * plot_h as f64) as i64 };
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    for x in mx..=(w as i64 - mx) {
        put(x, h as i64 - my, [0, 0, 0]);
    }
    for y in my..=(h as i64 - my) {
        put(mx, y, [0, 0, 0]);
    }
    for i in 1..values.len() {
        let (x0, y0) = (px(i - 1), py(values[i - 1]));
        let (x1, y1) = (px(i), py(values[i]));
        let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for k in 0..=n {
            let x = x0 + (x1 - x0) * k / n;
            let y = y0 + (y1 - y0) * k / n;
            put(x, y, [40, 40, 160]);
            put(x, y + 1, [40, 40, 160]);
        }
    }
    img.save(path).map_err(Error::from)?;
    Ok(())
}

fn penultimate_rows(backbone: &FeatureBackbone, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let pen = backbone.forward(images)?.penultimate.to_dtype(DType::F64)?;
    let n = pen.dim(0)?;
    (0..n).map(|i| Ok(pen.get(i)?.to_vec1()?)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean pairwise cosine similarity between the probe features of two image
/// sets ([Na, 3, R, R] and [Nb, 3, R, R], values in [0, 1]).
pub fn concept_similarity(
    backbone: &FeatureBackbone,
    images_a: &Tensor,
    images_b: &Tensor,
) -> Result<f64> {
    if images_a.dim(0)? == 0 || images_b.dim(0)? == 0 {
        return Err(Error::contract("concept similarity needs nonempty image sets"));
    }
    let fa = penultimate_rows(backbone, images_a)?;
    let fb = penultimate_rows(backbone, images_b)?;
    let mut acc = 0.0;
    for a in &fa {
        for b in &fb {
            acc += cosine(a, b);
        }
    }
    Ok(acc / (fa.len() * fb.len()) as f64)
}

/// Per-channel tolerance when matching border color against the template's
/// declared background.
pub const BACKGROUND_TOLERANCE: f64 = 0.2;

/// Fraction of images whose one-pixel border matches the template's declared
/// background color. Only defined for templates carrying a background
/// target.
pub fn prompt_adherence(images: &Tensor, template: &PromptTemplate) -> Result<f64> {
    let target = template
        .background_target()
        .ok_or_else(|| Error::UnsupportedTemplate(format!("template {}", template.id)))?;
    let (n, c, h, w) = images.dims4()?;
    if c != 3 || n == 0 {
        return Err(Error::contract(format!("expected [N, 3, H, W] images, got {:?}", images.dims())));
    }
    let data = images
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut hits = 0usize;
    for img in 0..n {
        let at = |ch: usize, y: usize, x: usize| data[((img * 3 + ch) * h + y) * w + x];
        let mut ok = true;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for x in 0..w {
                sum += at(ch, 0, x) + at(ch, h - 1, x);
                cnt += 2;
            }
            for y in 1..h - 1 {
                sum += at(ch, y, 0) + at(ch, y, w - 1);
                cnt += 2;
            }
            if (sum / cnt as f64 - target[ch]).abs() > BACKGROUND_TOLERANCE {
                ok = false;
                break;
            }
        }
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// First step whose smoothed loss is at or below `threshold`. Smoothing
/// averages the window of up to 5 values starting at the step (shorter near
/// the end of the trace). None when never reached.
///
/// ```
/// use fewstep::analysis::steps_to_threshold;
///
/// let trace = [1.0, 0.5, 0.2];
/// // window means: [0.5667, 0.35, 0.2] -> first <= 0.5 at index 1
/// assert_eq!(steps_to_threshold(&trace, 0.5), Some(1));
/// assert_eq!(steps_to_threshold(&trace, 0.01), None);
/// ```
pub fn steps_to_threshold(trace: &[f64], threshold: f64) -> Option<usize> {
    if trace.is_empty() {
        return None;
    }
    for i in 0..trace.len() {
        let end = (i + 5).min(trace.len());
        let window = &trace[i..end];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        if mean <= threshold {
            return Some(i);
        }
    }
    None
}
