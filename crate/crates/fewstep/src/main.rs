//! Command-line surface tying the library modules into reproducible
//! experiment runs.
//!
//! Every subcommand reads a JSON experiment config, writes its artifacts
//! under an output directory, and records one run manifest describing the
//! inputs and outputs. Exit codes: 0 success, 2 usage error, 3 validation
//! failure, 1 anything else. Errors print as one-line JSON on stderr.
//! `FEWSTEP_OUT` overrides the root that relative output paths resolve
//! against.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use fewstep::analysis::{
    concept_similarity, embedding_distance_curve, load_image_unit, plot_curve_png,
    prompt_adherence, refinement_freeze_sample, save_image_png, signed_to_unit, write_curve_csv,
};
use fewstep::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use fewstep::config::{load_config, ExperimentConfig, RunManifest};
use fewstep::encoder::{train_backbone, FeatureBackbone};
use fewstep::importance::{aggregate, scores_csv, TensorMap};
use fewstep::model::Model;
use fewstep::params::{ParamStore, TensorEnv};
use fewstep::prompts::{template_pool, PromptTemplate};
use fewstep::rng::RngStreams;
use fewstep::sprite::{make_dataset, LoadedDataset, SpriteDataset};
use fewstep::trainer::{personalize, pretrain, write_loss_csv, AblationFlags, TrainConfig};
use fewstep::{Error, Result};

#[derive(Parser)]
#[command(name = "fewstep", version, about = "Encoder-based domain tuning on a toy diffusion model")]
struct Cli {
    /// Experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a sprite dataset to disk.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frozen feature backbone as an identity classifier.
    TrainBackbone {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly pretrain denoiser, encoder and offsets on the domain.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint to start from.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-step tuning on a single concept image.
    Personalize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Optional foreground mask PNG (white = foreground).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Prompt template id.
        #[arg(long, default_value_t = 0)]
        template: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an image for a prompt, conditioned on a concept image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Prompt template id.
        #[arg(long)]
        prompt: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler steps; defaults to the analysis section of the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score per-layer weight drift between a base and tuned checkpoints.
    AnalyzeImportance {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        tuned: Vec<PathBuf>,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-layer score CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Embedding-distance curve and prediction-freeze comparison.
    AnalyzeRefinement {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Prompt template id.
        #[arg(long, default_value_t = 0)]
        template: usize,
        /// Freeze cutoff; defaults to the analysis section of the config.
        #[arg(long)]
        t_stop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concept-similarity and prompt-adherence metrics for a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Prompt template id.
        #[arg(long, default_value_t = 1)]
        template: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One pretrain + personalize summary row per ablation flag.
    ReproduceAblation {
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint to start every variant from.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let code = match &e {
            Error::InvalidConfig(_) => 3,
            _ => 1,
        };
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(code);
    }
}

fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("FEWSTEP_OUT") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

fn load_or_default(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn template_by_id(id: usize) -> Result<PromptTemplate> {
    template_pool()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown prompt template id {id}")))
}

fn load_dataset(dir: &Path, resolution: usize) -> Result<LoadedDataset> {
    SpriteDataset::load_manifest(dir, resolution)?.load_images()
}

fn load_mask(path: &Path, env: &TensorEnv) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let vals: Vec<f32> = img
        .into_raw()
        .iter()
        .map(|&b| if b > 127 { 1.0f32 } else { 0.0 })
        .collect();
    let t = Tensor::from_vec(vals, (1, 1, h, w), &env.device)?.to_dtype(env.dtype)?;
    Ok(t)
}

/// Build the model for a flag set and optionally warm-start the backbone.
fn build_model(cfg: &ExperimentConfig, flags: &AblationFlags, backbone: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(&cfg.model, flags.variant(), TensorEnv::cpu_f32(), cfg.seed)?;
    if let Some(dir) = backbone {
        let (_, tensors) = read_checkpoint(dir)?;
        model.store.load_subset(&tensors)?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let cfg = load_or_default(&cli.config)?;
    let config_hash = cfg.hash()?;
    let env = TensorEnv::cpu_f32();

    match cli.cmd {
        Command::GenerateData { out } => {
            let out = resolve_out(&out);
            make_dataset(
                &out,
                &cfg.data.domain,
                cfg.data.n_identities,
                cfg.data.images_per_identity,
                cfg.data.resolution,
                cfg.seed,
            )?;
            let mut manifest = RunManifest::new("generate-data", &config_hash);
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::TrainBackbone { data, out } => {
            let out = resolve_out(&out);
            let dataset = load_dataset(&data, cfg.data.resolution)?;
            let mut store = ParamStore::new(env, RngStreams::new(cfg.seed).stream("init", 0));
            let backbone = FeatureBackbone::new(&mut store, &cfg.model.backbone)?;
            let bt = &cfg.backbone_train;
            let report = train_backbone(&store, &backbone, &dataset, bt.steps, bt.batch_size, bt.lr, cfg.seed)?;
            if report.train_accuracy < bt.min_accuracy {
                return Err(Error::contract(format!(
                    "backbone accuracy {:.3} below the configured floor {:.3}",
                    report.train_accuracy, bt.min_accuracy
                )));
            }
            save_checkpoint(&store, &out, &config_hash)?;
            std::fs::write(out.join("train_report.json"), serde_json::to_vec_pretty(&report)?)?;
            let mut manifest = RunManifest::new("train-backbone", &config_hash);
            manifest
                .input_hashes
                .insert("data".into(), file_sha256(&data.join("manifest.jsonl"))?);
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::Pretrain { data, backbone, out } => {
            let out = resolve_out(&out);
            let dataset = load_dataset(&data, cfg.data.resolution)?;
            let mut model = build_model(&cfg, &cfg.pretrain.flags, backbone.as_deref())?;
            let result = pretrain(&mut model, &dataset, &cfg.pretrain)?;
            save_checkpoint(&model.store, &out, &config_hash)?;
            write_loss_csv(&out.join("loss.csv"), &result.trace)?;
            let mut manifest = RunManifest::new("pretrain", &config_hash);
            manifest
                .input_hashes
                .insert("data".into(), file_sha256(&data.join("manifest.jsonl"))?);
            if let Some(b) = &backbone {
                manifest
                    .input_hashes
                    .insert("backbone".into(), file_sha256(&b.join("manifest.json"))?);
            }
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::Personalize { ckpt, image, mask, template, out } => {
            let out = resolve_out(&out);
            let template = template_by_id(template)?;
            let mut model = Model::new(&cfg.model, cfg.personalize.flags.variant(), env.clone(), cfg.seed)?;
            load_checkpoint(&mut model.store, &ckpt)?;
            let unit = load_image_unit(&image, &env)?;
            let signed = unit.affine(2.0, -1.0)?;
            let mask_t = mask.as_deref().map(|p| load_mask(p, &env)).transpose()?;
            let result = personalize(&mut model, &unit, &signed, &template, &cfg.personalize, mask_t.as_ref())?;
            save_checkpoint(&model.store, &out, &config_hash)?;
            write_loss_csv(&out.join("loss.csv"), &result.trace)?;
            std::fs::write(out.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
            let mut manifest = RunManifest::new("personalize", &config_hash);
            manifest
                .input_hashes
                .insert("ckpt".into(), file_sha256(&ckpt.join("manifest.json"))?);
            manifest.input_hashes.insert("image".into(), file_sha256(&image)?);
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::Sample { ckpt, image, prompt, seed, steps, out } => {
            let out = resolve_out(&out);
            let template = template_by_id(prompt)?;
            let steps = steps.unwrap_or(cfg.analysis.sample_steps);
            let mut model = Model::new(&cfg.model, cfg.personalize.flags.variant(), env.clone(), cfg.seed)?;
            load_checkpoint(&mut model.store, &ckpt)?;
            let unit = load_image_unit(&image, &env)?;
            let (x, _) = refinement_freeze_sample(&model, &unit, &template, 0, steps, seed)?;
            std::fs::create_dir_all(&out)?;
            let png = out.join("sample.png");
            save_image_png(&png, &signed_to_unit(&x)?)?;
            let mut manifest = RunManifest::new("sample", &config_hash);
            manifest
                .input_hashes
                .insert("ckpt".into(), file_sha256(&ckpt.join("manifest.json"))?);
            manifest.input_hashes.insert("image".into(), file_sha256(&image)?);
            manifest.outputs.push(png.display().to_string());
            finish(manifest, &out, started)
        }
        Command::AnalyzeImportance { base, tuned, out, csv } => {
            let out = resolve_out(&out);
            let (_, base_map) = read_checkpoint(&base)?;
            let mut tuned_set: Vec<(String, TensorMap)> = Vec::new();
            for dir in &tuned {
                let (_, map) = read_checkpoint(dir)?;
                tuned_set.push((dir.display().to_string(), map));
            }
            let report = aggregate(&base_map, &tuned_set)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            let mut manifest = RunManifest::new("analyze-importance", &config_hash);
            manifest
                .input_hashes
                .insert("base".into(), file_sha256(&base.join("manifest.json"))?);
            manifest.outputs.push(out.display().to_string());
            if let Some(csv_path) = csv {
                let csv_path = resolve_out(&csv_path);
                std::fs::write(&csv_path, scores_csv(&report))?;
                manifest.outputs.push(csv_path.display().to_string());
            }
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            finish(manifest, &dir, started)
        }
        Command::AnalyzeRefinement { ckpt, image, template, t_stop, out } => {
            let out = resolve_out(&out);
            let template = template_by_id(template)?;
            let t_stop = t_stop.unwrap_or(cfg.analysis.t_stop);
            let mut model = Model::new(&cfg.model, cfg.personalize.flags.variant(), env.clone(), cfg.seed)?;
            load_checkpoint(&mut model.store, &ckpt)?;
            let unit = load_image_unit(&image, &env)?;
            std::fs::create_dir_all(&out)?;
            let (ts, means) =
                embedding_distance_curve(&model, &unit, &template, &cfg.analysis.seeds, cfg.analysis.sample_steps)?;
            write_curve_csv(&out.join("embedding_distance.csv"), &ts, &means)?;
            plot_curve_png(&out.join("embedding_distance.png"), &means)?;
            let seed = cfg.analysis.seeds[0];
            let (full, _) = refinement_freeze_sample(&model, &unit, &template, 0, cfg.analysis.sample_steps, seed)?;
            let (frozen, trace) =
                refinement_freeze_sample(&model, &unit, &template, t_stop, cfg.analysis.sample_steps, seed)?;
            save_image_png(&out.join("sample_full.png"), &signed_to_unit(&full)?)?;
            save_image_png(&out.join(format!("sample_tstop_{t_stop}.png")), &signed_to_unit(&frozen)?)?;
            std::fs::write(out.join("freeze_trace.json"), serde_json::to_vec_pretty(&trace)?)?;
            let mut manifest = RunManifest::new("analyze-refinement", &config_hash);
            manifest
                .input_hashes
                .insert("ckpt".into(), file_sha256(&ckpt.join("manifest.json"))?);
            manifest.input_hashes.insert("image".into(), file_sha256(&image)?);
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::Evaluate { ckpt, image, template, out } => {
            let out = resolve_out(&out);
            let template = template_by_id(template)?;
            let mut model = Model::new(&cfg.model, cfg.personalize.flags.variant(), env.clone(), cfg.seed)?;
            load_checkpoint(&mut model.store, &ckpt)?;
            let unit = load_image_unit(&image, &env)?;
            std::fs::create_dir_all(&out)?;
            let mut generated = Vec::new();
            for (i, &seed) in cfg.analysis.seeds.iter().enumerate() {
                let (x, _) =
                    refinement_freeze_sample(&model, &unit, &template, 0, cfg.analysis.sample_steps, seed)?;
                let u = signed_to_unit(&x)?;
                save_image_png(&out.join(format!("generated_{i}.png")), &u)?;
                generated.push(u.get(0)?);
            }
            let generated = Tensor::stack(&generated, 0)?;
            let similarity = concept_similarity(&model.backbone, &generated, &unit)?;
            let adherence = match prompt_adherence(&generated, &template) {
                Ok(v) => Some(v),
                Err(Error::UnsupportedTemplate(_)) => None,
                Err(e) => return Err(e),
            };
            let metrics = serde_json::json!({
                "template": template.id,
                "concept_similarity": similarity,
                "prompt_adherence": adherence,
                "samples": cfg.analysis.seeds.len(),
            });
            std::fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
            let mut manifest = RunManifest::new("evaluate", &config_hash);
            manifest
                .input_hashes
                .insert("ckpt".into(), file_sha256(&ckpt.join("manifest.json"))?);
            manifest.input_hashes.insert("image".into(), file_sha256(&image)?);
            manifest.outputs.push(out.display().to_string());
            finish(manifest, &out, started)
        }
        Command::ReproduceAblation { data, backbone, out } => {
            let out = resolve_out(&out);
            let dataset = load_dataset(&data, cfg.data.resolution)?;
            std::fs::create_dir_all(&out)?;
            let rows = run_ablation(&cfg, &dataset, backbone.as_deref())?;
            let mut csv = String::from("flag,pretrain_final_loss,personalize_final_loss,personalize_steps\n");
            for (label, pre_loss, per_loss, steps) in &rows {
                csv.push_str(&format!("{label},{pre_loss},{per_loss},{steps}\n"));
            }
            std::fs::write(out.join("ablation.csv"), csv)?;
            let mut manifest = RunManifest::new("reproduce-ablation", &config_hash);
            manifest
                .input_hashes
                .insert("data".into(), file_sha256(&data.join("manifest.jsonl"))?);
            manifest.outputs.push(out.join("ablation.csv").display().to_string());
            finish(manifest, &out, started)
        }
    }
}

/// Every single-flag variant plus the full method, each pretrained from
/// scratch and personalized on the first dataset image.
fn run_ablation(
    cfg: &ExperimentConfig,
    dataset: &LoadedDataset,
    backbone: Option<&Path>,
) -> Result<Vec<(String, f64, f64, usize)>> {
    let env = TensorEnv::cpu_f32();
    let variants: Vec<(&str, AblationFlags)> = vec![
        ("full_method", AblationFlags::default()),
        ("no_tuning", AblationFlags { no_tuning: true, ..Default::default() }),
        ("tune_components_only", AblationFlags { tune_components_only: true, ..Default::default() }),
        ("tune_denoiser_only", AblationFlags { tune_denoiser_only: true, ..Default::default() }),
        ("no_iterative_refinement", AblationFlags { no_iterative_refinement: true, ..Default::default() }),
        ("no_embedding_reg", AblationFlags { no_embedding_reg: true, ..Default::default() }),
        ("direct_offsets", AblationFlags { direct_offsets: true, ..Default::default() }),
        ("encoder_only", AblationFlags { encoder_only: true, ..Default::default() }),
        ("hypernetwork", AblationFlags { hypernetwork: true, ..Default::default() }),
    ];
    let template = template_by_id(0)?;
    let unit = dataset.image_unit(0, &env)?.unsqueeze(0)?;
    let signed = unit.affine(2.0, -1.0)?;
    let mut rows = Vec::new();
    for (label, flags) in variants {
        let pre_cfg = TrainConfig { flags, ..cfg.pretrain.clone() };
        let per_cfg = TrainConfig { flags, ..cfg.personalize.clone() };
        let mut model = build_model(cfg, &flags, backbone)?;
        let pre = pretrain(&mut model, dataset, &pre_cfg)?;
        let per = personalize(&mut model, &unit, &signed, &template, &per_cfg, None)?;
        let pre_loss = pre.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
        let per_loss = per.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
        rows.push((label.to_string(), pre_loss, per_loss, per.steps));
    }
    Ok(rows)
}

fn finish(mut manifest: RunManifest, dir: &Path, started: Instant) -> Result<()> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(dir)?;
    println!(
        "{}",
        serde_json::json!({ "command": manifest.command, "outputs": manifest.outputs })
    );
    Ok(())
}
