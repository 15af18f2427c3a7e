use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use isbnet::eval::{coverage_metrics, evaluate};
use isbnet::pipeline::{infer, infer_timed, train, ModelConfig, ModelParams, PipelineConfig, TrainConfig};
use isbnet::sampling::{default_seed, fps, ia_fps_infer, instance_recall, OccupancyState, SampleBudget};
use isbnet::scenegen::{generate, read_predictions, read_scene, write_predictions, write_scene, GenConfig};
use isbnet::supervision::GroundTruth;
use isbnet::Scene;

const SCENE_EXT: &str = "isbs";
const PRED_EXT: &str = "isbp";

#[derive(Parser)]
#[command(name = "isbnet", version, about = "Synthetic-scene 3D instance segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sampler {
    Fps,
    Iafps,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metrics {
    Ap,
    Cov,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes from a JSON generator config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `<data>/train` (validating on `<data>/val` if present).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training settings; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict instances of one scene.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON pipeline config; the desk preset by default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score prediction files against ground-truth scenes with the same stem.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Metrics::All)]
        metrics: Metrics,
        /// Per-class CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mean instance recall of a sampler at several budgets, as CSV.
    RecallBench {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        budgets: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Sampler::Iafps)]
        sampler: Sampler,
    },
    /// Per-stage inference timings in milliseconds, as CSV.
    RuntimeBench {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Contents of the `train --config` file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    geo_cue: bool,
    pipeline: PipelineConfig,
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            geo_cue: true,
            pipeline: PipelineConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::desk()),
        Some(_) => read_json(path),
    }
}

/// Files with `ext` in `dir`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    files_with_ext(dir, SCENE_EXT)?
        .iter()
        .map(|p| read_scene(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn cmd_generate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: GenConfig = read_json(config)?;
    let scenes = generate(&cfg)?;
    fs::create_dir_all(out)?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(out.join(format!("scene_{i:05}.{SCENE_EXT}")), s)?;
    }
    log::info!("wrote {} scenes to {}", scenes.len(), out.display());
    println!("{}", scenes.len());
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let mut settings: TrainSettings = read_json(config)?;
    settings.train.seed = seed;
    let train_dir = data.join("train");
    let (train_set, val_set) = if train_dir.is_dir() {
        let val_dir = data.join("val");
        let val = if val_dir.is_dir() { load_scenes(&val_dir)? } else { Vec::new() };
        (load_scenes(&train_dir)?, val)
    } else {
        (load_scenes(data)?, Vec::new())
    };
    let num_classes = train_set
        .first()
        .map(|s| s.num_classes)
        .context("no training scenes found")?;
    let model = ModelConfig::new(num_classes, settings.geo_cue);
    let (params, log) = train(model, &train_set, &val_set, &settings.pipeline, &settings.train)?;
    fs::create_dir_all(out)?;
    params.save(out.join("model.isbm"))?;
    fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    fs::write(out.join("pipeline.json"), serde_json::to_string_pretty(&settings.pipeline)?)?;
    if let Some(ap50) = log.best_val_ap50 {
        println!("best val AP50 {ap50:.4}");
    }
    Ok(())
}

fn cmd_infer(model: &Path, scene: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let params = ModelParams::load(model).with_context(|| format!("loading {}", model.display()))?;
    let cfg = pipeline_config(config)?;
    let scene = read_scene(scene)?;
    let preds = infer(&scene, &params, &cfg)?;
    write_predictions(out, &preds, scene.len())?;
    println!("{}", preds.len());
    Ok(())
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, metrics: Metrics, csv: Option<&Path>) -> Result<()> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for gt_path in files_with_ext(gt_dir, SCENE_EXT)? {
        let stem = gt_path.file_stem().context("scene file without a name")?;
        let pred_path = pred_dir.join(stem).with_extension(PRED_EXT);
        let scene = read_scene(&gt_path)?;
        let scene_preds = if pred_path.exists() {
            let (n, p) = read_predictions(&pred_path)?;
            if n != scene.len() {
                bail!("{} covers {n} points, scene has {}", pred_path.display(), scene.len());
            }
            p
        } else {
            log::warn!("no predictions for {}", gt_path.display());
            Vec::new()
        };
        gts.push(GroundTruth::from_scene(&scene));
        preds.push(scene_preds);
    }
    if gts.is_empty() {
        bail!("no scenes in {}", gt_dir.display());
    }
    const COVERAGE_KEYS: [&str; 4] = ["mcov", "mwcov", "mprec50", "mrec50"];
    let full = evaluate(&preds, &gts)?;
    if let Some(path) = csv {
        fs::write(path, full.per_class_csv())?;
    }
    let value = match metrics {
        Metrics::All => serde_json::to_value(&full)?,
        Metrics::Cov => serde_json::to_value(coverage_metrics(&preds, &gts)?)?,
        Metrics::Ap => {
            let mut v: BTreeMap<String, serde_json::Value> = serde_json::from_value(serde_json::to_value(&full)?)?;
            v.retain(|k, _| !COVERAGE_KEYS.contains(&k.as_str()));
            serde_json::to_value(v)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

/// Candidates of one sampler at one budget. IA-FPS uses the ground-truth
/// background as its foreground estimate and claims the instance mask of
/// every sampled point right after it is drawn.
fn sample(scene: &Scene, budget: usize, sampler: Sampler) -> Result<Vec<usize>> {
    let n = scene.len();
    let budget = budget.min(n);
    match sampler {
        Sampler::Fps => {
            let seed = default_seed(&scene.positions, None).context("empty scene")?;
            Ok(fps(&scene.positions, budget, seed, None)?)
        }
        Sampler::Iafps => {
            let background = scene.semantic.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
            let mut state = OccupancyState::new(background, 0.5)?;
            let schedule = SampleBudget::new(vec![1; budget])?;
            let masks = |chunk: &[usize]| -> isbnet::Result<Vec<Vec<f64>>> {
                Ok(chunk
                    .iter()
                    .map(|&i| {
                        let inst = scene.instance[i];
                        scene
                            .instance
                            .iter()
                            .map(|&j| if inst >= 0 && j == inst { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect())
            };
            Ok(ia_fps_infer(&mut state, &scene.positions, &schedule, None, masks)?)
        }
    }
}

fn cmd_recall_bench(dir: &Path, budgets: &[usize], sampler: Sampler) -> Result<()> {
    let scenes = load_scenes(dir)?;
    if scenes.is_empty() {
        bail!("no scenes in {}", dir.display());
    }
    println!("budget,mean_recall,std_recall");
    for &b in budgets {
        let recalls = scenes
            .iter()
            .map(|s| Ok(instance_recall(&sample(s, b, sampler)?, s)?))
            .collect::<Result<Vec<f64>>>()?;
        let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let var = recalls.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / recalls.len() as f64;
        println!("{b},{mean:.6},{:.6}", var.sqrt());
    }
    Ok(())
}

fn cmd_runtime_bench(dir: &Path, model: &Path, config: Option<&Path>) -> Result<()> {
    let params = ModelParams::load(model)?;
    let cfg = pipeline_config(config)?;
    println!("scene,points,encoder_ms,instance_ms,decoder_ms,total_ms");
    for path in files_with_ext(dir, SCENE_EXT)? {
        let scene = read_scene(&path)?;
        let (_, t) = infer_timed(&scene, &params, &cfg)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!(
            "{name},{},{:.3},{:.3},{:.3},{:.3}",
            scene.len(),
            t.encoder_ms,
            t.instance_ms,
            t.decoder_ms,
            t.total_ms()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out } => cmd_generate(config.as_deref(), &out),
        Command::Train { data, config, seed, out } => cmd_train(&data, config.as_deref(), seed, &out),
        Command::Infer { model, scene, out, config } => cmd_infer(&model, &scene, &out, config.as_deref()),
        Command::Eval {
            pred_dir,
            gt_dir,
            metrics,
            csv,
        } => cmd_eval(&pred_dir, &gt_dir, metrics, csv.as_deref()),
        Command::RecallBench {
            scenes,
            budgets,
            sampler,
        } => cmd_recall_bench(&scenes, &budgets, sampler),
        Command::RuntimeBench { scenes, model, config } => cmd_runtime_bench(&scenes, &model, config.as_deref()),
    }
}
