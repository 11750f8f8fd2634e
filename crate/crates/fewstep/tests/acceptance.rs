//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line.
//!
//! Most criteria share a disk-cached fixture under the target tmp dir: a
//! 64-identity sprite dataset (16 renders per identity), a trained identity
//! backbone, and a model jointly pretrained for 2000 steps. The first run
//! builds the fixture (tens of minutes); later runs reload the cached
//! checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::{DType, Tensor};
use rand::Rng;

use fewstep::analysis::{concept_similarity, refinement_freeze_sample, signed_to_unit, steps_to_threshold};
use fewstep::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use fewstep::diffusion::{sample, DenoiserConfig};
use fewstep::encoder::{
    compose_embedding, embedding_reg_loss, train_backbone, BackboneConfig, ConceptConditioner,
    FeatureBackbone,
};
use fewstep::importance::{layer_score, TensorMap};
use fewstep::model::{Model, ModelConfig, ModelVariant};
use fewstep::offsets::{OffsetConfig, OffsetMode, OffsetSpec};
use fewstep::params::{randn, ParamStore, TensorEnv};
use fewstep::prompts::{template_pool, PromptTemplate};
use fewstep::rng::RngStreams;
use fewstep::sprite::{make_dataset, LoadedDataset, SpriteDataset};
use fewstep::trainer::{
    baseline_embedding_only, build_tuning_batch, objective, personalize, pretrain, tuned_prefixes,
    AblationFlags, TrainConfig, TuningPreset,
};
use fewstep::Result;

const TRAIN_IDENTITIES: usize = 64;
const TRAIN_IMAGES_PER_IDENTITY: usize = 16;
const IMAGES_PER_IDENTITY: usize = 4;
const HELD_OUT_IDENTITIES: usize = 5;
const PRETRAIN_STEPS: usize = 2000;
const RESOLUTION: usize = 32;

/// Measurement cap for criterion 6 (the 15-step budget may overrun to 200).
const STEP_CAP: usize = 200;

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn env32() -> TensorEnv {
    TensorEnv::cpu_f32()
}

fn fixture_model_cfg() -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            resolution: RESOLUTION,
            channels: vec![16, 32, 64],
            up_channels: vec![32, 16, 16],
            embed_dim: 32,
            prompt_len: 8,
            time_dim: 32,
            train_timesteps: 200,
            norm_groups: 4,
        },
        backbone: BackboneConfig {
            resolution: RESOLUTION,
            channels: vec![16, 16, 32, 32, 64, 64],
            hidden: 64,
            num_classes: 128,
        },
        offsets: OffsetConfig {
            k: 16,
            shared_v0: false,
            mode: OffsetMode::Regularized,
        },
        proj_width: 64,
        offset_scale: 0.1,
        beta_start: 1e-4,
        beta_end: 0.05,
    }
}

fn pretrain_cfg() -> TrainConfig {
    TrainConfig {
        base_lr: 2.5e-4,
        batch_size: 4,
        device_count: 1,
        lambda_reg: 0.01,
        steps: PRETRAIN_STEPS,
        seed: 0,
        flags: AblationFlags::default(),
    }
}

struct Fixture {
    root: PathBuf,
    cfg: ModelConfig,
    train: LoadedDataset,
    held: LoadedDataset,
}

impl Fixture {
    fn backbone_dir(&self) -> PathBuf {
        self.root.join("backbone")
    }

    fn pretrained_dir(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    /// A fresh model instance carrying the pretrained weights.
    fn pretrained_model(&self) -> Model {
        let mut model =
            Model::new(&self.cfg, ModelVariant::default(), env32(), 0).expect("model");
        load_checkpoint(&mut model.store, &self.pretrained_dir()).expect("load pretrained");
        model
    }

    /// A fresh model of the given variant, started from the fixture backbone
    /// and nudged off the zero-output initialization point.
    fn warm_model(&self, variant: ModelVariant, seed: u64) -> Model {
        let mut model = Model::new(&self.cfg, variant, env32(), seed).expect("model");
        let (_, tensors) = read_checkpoint(&self.backbone_dir()).expect("backbone ckpt");
        model.store.load_subset(&tensors).expect("backbone load");
        perturb(&model.store, &["denoiser.out_conv."], 0.05, seed ^ 0x9e37);
        model
    }

    fn held_concept(&self, identity: usize) -> (Tensor, Tensor) {
        let i = identity * IMAGES_PER_IDENTITY;
        let unit = self.held.image_unit(i, &env32()).unwrap().unsqueeze(0).unwrap();
        let signed = unit.affine(2.0, -1.0).unwrap();
        (unit, signed)
    }

    /// All renders of one held-out identity, [IMAGES_PER_IDENTITY, 3, H, W].
    fn held_renders(&self, identity: usize) -> Tensor {
        let idx: Vec<usize> = (0..IMAGES_PER_IDENTITY)
            .map(|j| identity * IMAGES_PER_IDENTITY + j)
            .collect();
        self.held.batch_unit(&idx, &env32()).unwrap()
    }
}

/// Add scaled noise to every parameter matching one of the prefixes.
fn perturb(store: &ParamStore, prefixes: &[&str], scale: f64, seed: u64) {
    let mut rng = RngStreams::new(seed).stream("perturb", 0);
    let env = store.env().clone();
    for (name, var) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            let noise = randn(&mut rng, var.dims(), &env).unwrap();
            var.set(&var.as_tensor().add(&noise.affine(scale, 0.0).unwrap()).unwrap())
                .unwrap();
        }
    }
}

fn ensure_dataset(dir: &Path, n: usize, per: usize, seed: u64) -> LoadedDataset {
    if !dir.join("manifest.jsonl").exists() {
        make_dataset(dir, &Default::default(), n, per, RESOLUTION, seed).expect("dataset");
    }
    SpriteDataset::load_manifest(dir, RESOLUTION)
        .expect("dataset manifest")
        .load_images()
        .expect("dataset images")
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_fixture_v2");
        std::fs::create_dir_all(&root).expect("fixture root");
        let cfg = fixture_model_cfg();
        let train = ensure_dataset(&root.join("train"), TRAIN_IDENTITIES, TRAIN_IMAGES_PER_IDENTITY, 1000);
        let held = ensure_dataset(&root.join("held"), HELD_OUT_IDENTITIES, IMAGES_PER_IDENTITY, 2000);
        let fx = Fixture { root, cfg, train, held };

        if !fx.backbone_dir().join("manifest.json").exists() {
            let mut store = ParamStore::new(env32(), RngStreams::new(7).stream("init", 0));
            let backbone = FeatureBackbone::new(&mut store, &fx.cfg.backbone).expect("backbone");
            let report =
                train_backbone(&store, &backbone, &fx.train, 8000, 32, 5e-3, 7).expect("train");
            assert!(
                report.train_accuracy >= 0.9,
                "fixture backbone accuracy {} too low",
                report.train_accuracy
            );
            save_checkpoint(&store, &fx.backbone_dir(), "fixture").expect("save backbone");
        }

        if !fx.pretrained_dir().join("manifest.json").exists() {
            let mut model = Model::new(&fx.cfg, ModelVariant::default(), env32(), 0).expect("model");
            let (_, tensors) = read_checkpoint(&fx.backbone_dir()).expect("backbone ckpt");
            model.store.load_subset(&tensors).expect("backbone load");
            pretrain(&mut model, &fx.train, &pretrain_cfg()).expect("pretrain");
            save_checkpoint(&model.store, &fx.pretrained_dir(), "fixture").expect("save pretrained");
        }
        fx
    })
}

fn template0() -> PromptTemplate {
    template_pool().into_iter().next().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn l2_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b)
        .unwrap()
        .sqr()
        .unwrap()
        .sum_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
        .sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn criterion_1_zero_offset_identity() {
    let fx = fixture();
    // Pretrained weights everywhere except the offsets, which keep their
    // zero-producing fresh initialization.
    let mut with_offsets = Model::new(&fx.cfg, ModelVariant::default(), env32(), 42).unwrap();
    let (_, pretrained) = read_checkpoint(&fx.pretrained_dir()).unwrap();
    let non_offset: HashMap<String, Tensor> = pretrained
        .iter()
        .filter(|(k, _)| !k.starts_with("offsets."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    with_offsets.store.load_subset(&non_offset).unwrap();
    let mut without_offsets = Model::new(
        &fx.cfg,
        ModelVariant { encoder_only: true, ..Default::default() },
        env32(),
        42,
    )
    .unwrap();
    without_offsets.store.load_subset(&non_offset).unwrap();

    let template = template0();
    let (unit, _) = fx.held_concept(0);
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (a, _) = refinement_freeze_sample(&with_offsets, &unit, &template, 0, 10, seed).unwrap();
        let (b, _) = refinement_freeze_sample(&without_offsets, &unit, &template, 0, 10, seed).unwrap();
        worst = worst.max(max_abs_diff(&a, &b));
    }
    verdict(
        1,
        "zero-offset identity",
        worst <= 1e-6,
        &format!("max abs pixel diff over 10 seeds = {worst:.3e} (bound 1e-6)"),
    );
}

#[test]
fn criterion_2_rank_bound() {
    let env = TensorEnv::cpu_f64();
    let (m, n, k) = (64usize, 64usize, 16usize);
    let mut rng = RngStreams::new(2).stream("draws", 0);
    let mut worst_full = 0.0f64;
    let mut worst_biasfree = 0.0f64;
    for draw in 0..100 {
        let mut store = ParamStore::new(env.clone(), RngStreams::new(draw).stream("init", 0));
        let spec = OffsetSpec::new(&mut store, "l.q", m, n, k, None).unwrap();
        for (name, var) in store.iter() {
            let _ = name;
            let noise = randn(&mut rng, var.dims(), &env).unwrap();
            var.set(&noise.affine(0.3, 0.0).unwrap()).unwrap();
        }
        let sv = singular_values(&spec.materialize().unwrap());
        worst_full = worst_full.max(sv[3] / sv[0].max(f64::MIN_POSITIVE));
        for (name, var) in store.iter() {
            if name.ends_with(".bias") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let sv = singular_values(&spec.materialize().unwrap());
        worst_biasfree = worst_biasfree.max(sv[1] / sv[0].max(f64::MIN_POSITIVE));
    }
    verdict(
        2,
        "rank bound",
        worst_full < 1e-6 && worst_biasfree < 1e-6,
        &format!("worst sigma4/sigma1 = {worst_full:.3e}, bias-free sigma2/sigma1 = {worst_biasfree:.3e}"),
    );
}

fn singular_values(t: &Tensor) -> Vec<f64> {
    let (m, n) = t.dims2().unwrap();
    let data = t
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mat = nalgebra::DMatrix::from_row_slice(m, n, &data);
    let mut sv: Vec<f64> = mat.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn criterion_3_gradient_verification() {
    let fx = fixture();
    let env = TensorEnv::cpu_f64();
    let model = Model::new(&fx.cfg, ModelVariant::default(), env.clone(), 3).unwrap();
    // Fresh initialization is a stationary point of several parameter groups
    // (the output conv starts at zero), so check gradients at a generic
    // nearby point instead. The offset path is perturbed harder: its
    // gradients shrink cubically with the offset magnitude, and gradients
    // below ~1e-8 drown in the roundoff floor of central differences at
    // h = 1e-5 (about 1e-11 on a loss of order one).
    perturb(&model.store, &["denoiser.", "encoder."], 0.05, 33);
    perturb(&model.store, &["offsets."], 0.25, 34);

    let unit = fx.held.image_unit(0, &env).unwrap().unsqueeze(0).unwrap();
    let signed = unit.affine(2.0, -1.0).unwrap();
    let taps_one = model.backbone.extract_features(&unit).unwrap();
    let batch = 2usize;
    let taps: Vec<Tensor> = taps_one
        .iter()
        .map(|x| {
            let w = x.dim(1).unwrap();
            x.broadcast_as((batch, w)).unwrap().contiguous().unwrap()
        })
        .collect();
    let mut noise_rng = RngStreams::new(5).stream("noise", 0);
    let (sample_b, eps) = build_tuning_batch(&signed, batch, &model.schedule, &mut noise_rng).unwrap();
    let template_ids = vec![0usize; batch];
    let lambda = 0.1;
    let loss = |model: &Model| -> f64 {
        let (total, _, _) = objective(model, &sample_b, &eps, &taps, &template_ids, lambda, None).unwrap();
        total.to_scalar::<f64>().unwrap()
    };

    let (total, _, _) = objective(&model, &sample_b, &eps, &taps, &template_ids, lambda, None).unwrap();
    let grads = total.backward().unwrap();

    // 5 parameters from each of the four groups named by the criterion.
    let groups: [&dyn Fn(&str) -> bool; 4] = [
        &|n: &str| n.starts_with("offsets.") && n.ends_with(".v0"),
        &|n: &str| n.starts_with("offsets.") && !n.ends_with(".v0"),
        &|n: &str| n.starts_with("encoder."),
        &|n: &str| n.starts_with("denoiser."),
    ];
    let mut pick_rng = RngStreams::new(3).stream("pick", 0);
    let mut checked = 0usize;
    let mut worst_rel = 0.0f64;
    let h = 1e-5;
    for select in groups {
        let names: Vec<String> = model
            .store
            .names()
            .iter()
            .filter(|n| select(n))
            .cloned()
            .collect();
        assert!(!names.is_empty(), "empty parameter group");
        for _ in 0..5 {
            let name = &names[pick_rng.gen_range(0..names.len())];
            let var = model.store.get(name).unwrap();
            let numel: usize = var.dims().iter().product();
            let idx = pick_rng.gen_range(0..numel);
            let flat = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let analytic = grads
                .get(var)
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
                .unwrap_or(0.0);

            let set_at = |value: f64| {
                let mut v = flat.clone();
                v[idx] = value;
                let t = Tensor::from_vec(v, var.dims().to_vec(), &env.device).unwrap();
                var.set(&t).unwrap();
            };
            set_at(flat[idx] + h);
            let up = loss(&model);
            set_at(flat[idx] - h);
            let down = loss(&model);
            set_at(flat[idx]);
            let fd = (up - down) / (2.0 * h);
            // Mixed tolerance: 1e-3 relative with a 1e-9 absolute floor. The
            // floor covers accumulated f64 roundoff in the two loss
            // evaluations (about 1e-10 at h = 1e-5), which dominates for
            // parameters whose true gradient is below ~1e-7.
            let ratio = (analytic - fd).abs() / (1e-3 * analytic.abs().max(fd.abs()) + 1e-9);
            if std::env::var("ACCEPTANCE_DEBUG").is_ok() {
                println!("gradcheck {name}[{idx}]: analytic {analytic:.6e} fd {fd:.6e} ratio {ratio:.3e}");
            }
            worst_rel = worst_rel.max(ratio);
            checked += 1;
        }
    }
    verdict(
        3,
        "gradient verification",
        checked == 20 && worst_rel <= 1.0,
        &format!(
            "{checked} parameters checked, worst error = {:.3}x the 1e-3 relative (+1e-9 absolute) tolerance",
            worst_rel
        ),
    );
}

#[test]
fn criterion_4_importance_oracle() {
    let env = TensorEnv::cpu_f64();
    let mk = |v: &[f64]| Tensor::new(v, &env.device).unwrap();
    let base: TensorMap = HashMap::from([("layer.weight".to_string(), mk(&[1.0, 2.0, 1.0, 2.0]))]);
    let tuned: TensorMap =
        HashMap::from([("layer.weight".to_string(), mk(&[1.1, 1.9, 1.1, 2.2]))]);
    // Hand computation: mean |diff| = 0.125, mean |base| = 1.5, ratio 1/12.
    let score = layer_score(&base, &tuned, "layer").unwrap().score.unwrap();
    let oracle = 0.125 / 1.5;
    let hand_ok = (score - oracle).abs() <= 1e-9;

    let zero = layer_score(&base, &base, "layer").unwrap().score.unwrap();
    let zero_ok = zero == 0.0;

    let mut covariant_ok = true;
    for k in [0.5, 2.0, 10.0] {
        let scaled: TensorMap = HashMap::from([(
            "layer.weight".to_string(),
            mk(&[1.0 + 0.1 * k, 2.0 - 0.1 * k, 1.0 + 0.1 * k, 2.0 + 0.2 * k]),
        )]);
        let s = layer_score(&base, &scaled, "layer").unwrap().score.unwrap();
        covariant_ok &= (s - k * oracle).abs() <= 1e-9;
    }
    verdict(
        4,
        "importance-score oracle",
        hand_ok && zero_ok && covariant_ok,
        &format!(
            "hand oracle diff {:.1e}, identical-checkpoint score {zero}, scale covariance {}",
            (score - oracle).abs(),
            covariant_ok
        ),
    );
}

#[test]
fn criterion_5_embedding_algebra() {
    let env = TensorEnv::cpu_f64();
    let mut rng = RngStreams::new(5).stream("draws", 0);
    let d = 32usize;
    let s = 0.1;
    let domain = randn(&mut rng, &[d], &env).unwrap();
    let mut worst_dist = 0.0f64;
    let mut worst_reg = 0.0f64;
    for _ in 0..1000 {
        let offset = randn(&mut rng, &[1, d], &env).unwrap();
        let emb = compose_embedding(&offset, &domain, s).unwrap();
        let dist = l2_diff(&emb.e_c, &domain.unsqueeze(0).unwrap());
        let norm = offset.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        worst_dist = worst_dist.max((dist - s * norm).abs() / (s * norm).max(1e-300));
        let reg = embedding_reg_loss(&offset).unwrap().to_scalar::<f64>().unwrap();
        worst_reg = worst_reg.max((reg - norm * norm).abs() / (norm * norm).max(1e-300));
    }
    verdict(
        5,
        "embedding algebra",
        worst_dist <= 1e-9 && worst_reg <= 1e-9,
        &format!("worst relative errors: distance {worst_dist:.3e}, reg loss {worst_reg:.3e} (bound 1e-9)"),
    );
}

/// Smoothed steps-to-threshold of a diffusion-loss trace, capped for runs
/// that never reach the threshold.
fn capped_steps(trace: &[f64], threshold: f64) -> f64 {
    steps_to_threshold(trace, threshold).unwrap_or(STEP_CAP) as f64
}

#[test]
fn criterion_6_domain_tuning_benefit() {
    let fx = fixture();
    let template = template0();
    let threshold = 0.035;
    let mut tuned_scores = Vec::new();
    let mut baseline_scores = Vec::new();
    for identity in 0..HELD_OUT_IDENTITIES {
        let (unit, signed) = fx.held_concept(identity);
        for seed in 0..5u64 {
            let cfg = TrainConfig {
                base_lr: 2e-4,
                batch_size: 4,
                device_count: 1,
                lambda_reg: 0.1,
                steps: STEP_CAP,
                seed,
                flags: AblationFlags::default(),
            };
            let mut model = fx.pretrained_model();
            let tuned = personalize(&mut model, &unit, &signed, &template, &cfg, None).unwrap();
            let trace: Vec<f64> = tuned.trace.iter().map(|r| r.diffusion).collect();
            tuned_scores.push(capped_steps(&trace, threshold));

            let model = fx.pretrained_model();
            let base = baseline_embedding_only(
                &model,
                &signed,
                &template,
                STEP_CAP,
                cfg.effective_lr(),
                cfg.batch_size,
                seed,
                None,
            )
            .unwrap();
            let trace: Vec<f64> = base.trace.iter().map(|r| r.diffusion).collect();
            baseline_scores.push(capped_steps(&trace, threshold));
        }
    }
    let tuned_median = median(&mut tuned_scores);
    let baseline_median = median(&mut baseline_scores);
    verdict(
        6,
        "domain-tuning benefit",
        tuned_median < baseline_median,
        &format!(
            "median steps to loss {threshold}: personalize {tuned_median} vs embedding-only baseline {baseline_median} (25 runs each)"
        ),
    );
}

#[test]
fn criterion_7_few_step_efficacy() {
    let fx = fixture();
    let template = template0();
    let sampler_steps = 15;
    let seeds = [0u64, 1, 2];
    let mut gains = Vec::new();
    for identity in 0..HELD_OUT_IDENTITIES {
        let (unit, signed) = fx.held_concept(identity);
        let renders = fx.held_renders(identity);
        let mut model = fx.pretrained_model();
        let sim = |model: &Model| -> f64 {
            let images: Vec<Tensor> = seeds
                .iter()
                .map(|&s| {
                    let (x, _) =
                        refinement_freeze_sample(model, &unit, &template, 0, sampler_steps, s).unwrap();
                    signed_to_unit(&x).unwrap().get(0).unwrap()
                })
                .collect();
            let generated = Tensor::stack(&images, 0).unwrap();
            concept_similarity(&model.backbone, &generated, &renders).unwrap()
        };
        let before = sim(&model);
        let cfg = TuningPreset::FaceLike.config(0);
        assert_eq!(cfg.lambda_reg, 0.1);
        assert_eq!(cfg.steps, 15);
        let result = personalize(&mut model, &unit, &signed, &template, &cfg, None).unwrap();
        assert_eq!(result.steps, 15);
        let after = sim(&model);
        gains.push(after - before);
    }
    let mut sorted = gains.clone();
    let med = median(&mut sorted);
    verdict(
        7,
        "few-step personalization efficacy",
        med >= 0.05,
        &format!("median concept-similarity gain after exactly 15 steps = {med:.4} (bound 0.05), per-identity {gains:?}"),
    );
}

#[test]
fn criterion_8_refinement_machinery() {
    let fx = fixture();
    let model = fx.pretrained_model();
    let template = template0();
    let (unit, _) = fx.held_concept(1);
    let steps = 10;
    let t_max = model.schedule.len();

    let mut worst = 0.0f64;
    let mut min_l2 = f64::INFINITY;
    for seed in 0..5u64 {
        let (frozen0, _) = refinement_freeze_sample(&model, &unit, &template, 0, steps, seed).unwrap();
        // The default pipeline: per-timestep conditioning, no freeze logic.
        let conditioner = ConceptConditioner::new(
            &model.head,
            &model.backbone,
            &model.denoiser,
            &model.embeddings,
            &template,
            &unit,
            model.cfg.offset_scale,
            false,
        )
        .unwrap();
        let delta = model.offsets.as_ref().unwrap().materialize_all(None).unwrap();
        let mut provider = conditioner.provider();
        let mut rng = RngStreams::new(seed).stream("sampler", 0);
        let plain = sample(&model.denoiser, &model.schedule, &mut provider, steps, &mut rng, Some(&delta)).unwrap();
        worst = worst.max(max_abs_diff(&frozen0, &plain));

        let (full_freeze, trace) =
            refinement_freeze_sample(&model, &unit, &template, t_max, steps, seed).unwrap();
        assert!(trace.records.iter().skip(1).all(|r| r.frozen));
        min_l2 = min_l2.min(l2_diff(&frozen0, &full_freeze));
    }
    verdict(
        8,
        "refinement machinery",
        worst == 0.0 && min_l2 > 0.0,
        &format!("t_stop=0 vs default max abs diff {worst} (bit-exact required), min L2 to full freeze {min_l2:.3e}"),
    );
}

#[test]
fn criterion_9_ablation_scopes() {
    let fx = fixture();
    let template = template0();
    let (unit, signed) = fx.held_concept(2);
    let flag_sets: Vec<(&str, AblationFlags)> = vec![
        ("no_tuning", AblationFlags { no_tuning: true, ..Default::default() }),
        ("tune_components_only", AblationFlags { tune_components_only: true, ..Default::default() }),
        ("tune_denoiser_only", AblationFlags { tune_denoiser_only: true, ..Default::default() }),
        ("no_iterative_refinement", AblationFlags { no_iterative_refinement: true, ..Default::default() }),
        ("no_embedding_reg", AblationFlags { no_embedding_reg: true, ..Default::default() }),
        ("direct_offsets", AblationFlags { direct_offsets: true, ..Default::default() }),
        ("encoder_only", AblationFlags { encoder_only: true, ..Default::default() }),
        ("hypernetwork", AblationFlags { hypernetwork: true, ..Default::default() }),
    ];
    let mut failures = Vec::new();
    for (label, flags) in &flag_sets {
        let mut model = if flags.variant() == ModelVariant::default() {
            fx.pretrained_model()
        } else {
            fx.warm_model(flags.variant(), 9)
        };
        let before = model.store.hashes().unwrap();
        let cfg = TrainConfig {
            base_lr: 5e-4,
            batch_size: 4,
            device_count: 1,
            lambda_reg: 0.1,
            steps: 50,
            seed: 9,
            flags: *flags,
        };
        personalize(&mut model, &unit, &signed, &template, &cfg, None).unwrap();
        let after = model.store.hashes().unwrap();
        let tunable = tuned_prefixes(flags);
        let mut moved: HashMap<&str, bool> = HashMap::new();
        for (name, h) in &after {
            let changed = before.get(name) != Some(h);
            let prefix = tunable.iter().find(|p| name.starts_with(**p));
            match prefix {
                Some(p) => {
                    let e = moved.entry(p).or_insert(false);
                    *e |= changed;
                }
                None => {
                    if changed {
                        failures.push(format!("{label}: out-of-scope parameter {name} moved"));
                    }
                }
            }
        }
        for p in &tunable {
            if !moved.get(p).copied().unwrap_or(false) {
                failures.push(format!("{label}: no parameter under {p} moved"));
            }
        }
    }
    verdict(
        9,
        "ablation scopes",
        failures.is_empty(),
        &if failures.is_empty() {
            format!("{} flags each matched their declared tuning scope at 50 steps", flag_sets.len())
        } else {
            failures.join("; ")
        },
    );
}

#[test]
#[ignore = "manual calibration probe"]
fn calibration_probe() {
    let fx = fixture();
    let template = template0();
    let probe_dir = fx.root.join("probe");
    std::fs::create_dir_all(&probe_dir).unwrap();
    // Probe separation: within-identity vs cross-identity similarity.
    for id in 0..HELD_OUT_IDENTITIES {
        let renders = fx.held_renders(id);
        let self_sim = concept_similarity(&fx.pretrained_model().backbone, &renders, &renders).unwrap();
        let other = fx.held_renders((id + 1) % HELD_OUT_IDENTITIES);
        let cross_sim = concept_similarity(&fx.pretrained_model().backbone, &renders, &other).unwrap();
        println!("identity {id}: self sim {self_sim:.4}, cross sim {cross_sim:.4}");
    }
    // Per-identity before/after at a few settings.
    for (lr, steps, sampler_steps) in [(5e-4, 15usize, 15usize), (2e-4, 15, 15), (1e-4, 15, 15)] {
        for identity in 0..HELD_OUT_IDENTITIES {
            let (unit, signed) = fx.held_concept(identity);
            let renders = fx.held_renders(identity);
            let mut model = fx.pretrained_model();
            let sim = |model: &Model, tag: &str| -> f64 {
                let images: Vec<Tensor> = (0..3u64)
                    .map(|s| {
                        let (x, _) =
                            refinement_freeze_sample(model, &unit, &template, 0, sampler_steps, s).unwrap();
                        let u = signed_to_unit(&x).unwrap();
                        fewstep::analysis::save_image_png(
                            &probe_dir.join(format!("id{identity}_lr{lr}_{tag}_s{s}.png")),
                            &u,
                        )
                        .unwrap();
                        u.get(0).unwrap()
                    })
                    .collect();
                concept_similarity(&model.backbone, &Tensor::stack(&images, 0).unwrap(), &renders).unwrap()
            };
            let before = sim(&model, "before");
            let cfg = TrainConfig {
                base_lr: lr,
                batch_size: 16,
                device_count: 1,
                lambda_reg: 0.1,
                steps,
                seed: 0,
                flags: AblationFlags::default(),
            };
            let result = personalize(&mut model, &unit, &signed, &template, &cfg, None).unwrap();
            let after = sim(&model, "after");
            let last = result.trace.last().unwrap();
            println!(
                "lr {lr} id {identity}: sim {before:.4} -> {after:.4} (gain {:+.4}), final loss {:.4}",
                after - before,
                last.diffusion
            );
        }
    }
}

#[test]
#[ignore = "manual threshold probe"]
fn threshold_probe() {
    let fx = fixture();
    let template = template0();
    let smoothed = |trace: &[f64], at: usize| -> f64 {
        let end = (at + 5).min(trace.len());
        trace[at..end].iter().sum::<f64>() / (end - at) as f64
    };
    for identity in 0..HELD_OUT_IDENTITIES {
        let (unit, signed) = fx.held_concept(identity);
        for seed in 0..2u64 {
            let cfg = TrainConfig {
                base_lr: 2e-4,
                batch_size: 4,
                device_count: 1,
                lambda_reg: 0.1,
                steps: STEP_CAP,
                seed,
                flags: AblationFlags::default(),
            };
            let mut model = fx.pretrained_model();
            let tuned = personalize(&mut model, &unit, &signed, &template, &cfg, None).unwrap();
            let trace: Vec<f64> = tuned.trace.iter().map(|r| r.diffusion).collect();
            let t: Vec<f64> = [0usize, 5, 10, 25, 50, 100, 195]
                .iter()
                .map(|&i| smoothed(&trace, i))
                .collect();
            println!("id {identity} seed {seed} personalize smoothed {t:?}");

            let model = fx.pretrained_model();
            let base = baseline_embedding_only(
                &model,
                &signed,
                &template,
                STEP_CAP,
                cfg.effective_lr(),
                cfg.batch_size,
                seed,
                None,
            )
            .unwrap();
            let trace: Vec<f64> = base.trace.iter().map(|r| r.diffusion).collect();
            let t: Vec<f64> = [0usize, 5, 10, 25, 50, 100, 195]
                .iter()
                .map(|&i| smoothed(&trace, i))
                .collect();
            println!("id {identity} seed {seed} baseline    smoothed {t:?}");
        }
    }
}

#[test]
fn criterion_10_persistence() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&fx.cfg, ModelVariant::default(), env32(), 77).unwrap();
    perturb(&model.store, &["denoiser.", "encoder.", "offsets.", "backbone."], 0.1, 78);
    let before = model.store.hashes().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&model.store, &ckpt, "acceptance").unwrap();

    let mut restored = Model::new(&fx.cfg, ModelVariant::default(), env32(), 78).unwrap();
    load_checkpoint(&mut restored.store, &ckpt).unwrap();
    let after = restored.store.hashes().unwrap();
    let round_trip_ok = before == after;

    // Flip one byte in a tensor blob and expect the corruption error.
    let blob = std::fs::read_dir(ckpt.join("tensors"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, &bytes).unwrap();
    let corrupt: Result<_> = read_checkpoint(&ckpt);
    let corruption_ok = matches!(corrupt, Err(fewstep::Error::Corruption(_)));

    verdict(
        10,
        "persistence",
        round_trip_ok && corruption_ok,
        &format!("round trip bit-exact: {round_trip_ok}, corrupted blob raised the corruption error: {corruption_ok}"),
    );
}
