use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::{ArrayD, IxDyn};

use geolink::features::ViewTag;
use geolink::instrument;
use geolink::retrieval::{embed_images, evaluate, write_aggregate_csv, write_records_json, Direction};
use geolink::synthetic::tensor::write_tensor;
use geolink::synthetic::{load_image, Dataset, DatasetConfig};
use geolink::trainer::{run_sweep, train_to_dir, validate_report, write_report, Checkpoint, GridSpec, TrainConfig};

#[derive(Parser)]
#[command(name = "geolink", version = geolink::trainer::version(), about = "Drone/satellite retrieval with 3D anchors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target dataset.
    GenerateData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source-domain (training) scenes.
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        /// Style-shifted scenes used as queries and gallery.
        #[arg(long, default_value_t = 32)]
        target_scenes: usize,
        /// Extra target scenes that only appear in the gallery.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 32)]
        image_side: usize,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a flat config file; writes checkpoint, loss log and run.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "d2s")]
        direction: Direction,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Directory for results.json and aggregate.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export image embeddings using only the 2D encoder.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        /// A directory of .png/.rt images, or a single image.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component ablation or hyperparameter sweep.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `components`, `sensitivity`, `cartesian`, or a grid file.
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "rt")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .png or .rt images in {}", path.display());
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { seed, scenes, target_scenes, distractors, views, image_side, points, out } => {
            let cfg = DatasetConfig {
                seed,
                source_scenes: scenes,
                target_scenes,
                distractors,
                drone_views: views,
                image_side,
                num_points: points,
            };
            let data = Dataset::generate(&cfg)?;
            data.write(&out)?;
            println!("wrote {} scenes to {}", data.scenes.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let summary = train_to_dir(&cfg, &dataset, &out)?;
            println!("trained {} steps, config {}", summary.steps, summary.config_hash);
            for r in &summary.metrics {
                let recalls: Vec<String> = r.recall_at.iter().map(|(k, v)| format!("R@{k} {:.2}", v * 100.0)).collect();
                println!("{} {} AP {:.2}", r.direction, recalls.join(" "), r.mean_ap * 100.0);
            }
        }
        Command::Eval { ckpt, data, direction, k, out } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let before = instrument::snapshot();
            let result = evaluate(&ck.model.image, &dataset, direction, &k)?;
            let used = instrument::snapshot().since(before);
            let hash = ck.config.config_hash();
            for (kk, v) in &result.recall_at {
                println!("{direction} R@{kk} {:.2}", v * 100.0);
            }
            println!("{direction} AP {:.2}", result.mean_ap * 100.0);
            println!("queries {} gallery {}", result.n_query, result.n_gallery);
            println!("pointcloud_encodes {} mme_forwards {}", used.pointcloud_encodes, used.mme_forwards);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_records_json(&dir.join("results.json"), &result.records(&hash))?;
                write_aggregate_csv(&dir.join("aggregate.csv"), &[(hash, result)])?;
            }
        }
        Command::Encode { ckpt, images, out } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?.stripped();
            let files = image_files(&images)?;
            let side = ck.config.image_side;
            let imgs = files.iter().map(|f| load_image(f, side)).collect::<geolink::Result<Vec<_>>>()?;
            let names: Vec<String> = files
                .iter()
                .map(|f| f.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect();
            let refs: Vec<_> = imgs.iter().collect();
            let feats = embed_images(&ck.model.image, &refs, ViewTag::Drone, &names)?;
            fs::create_dir_all(&out)?;
            let shape = IxDyn(&[feats.len(), feats.dim()]);
            let t = ArrayD::from_shape_vec(shape, feats.values.iter().map(|&v| v as f32).collect())?;
            write_tensor(&out.join("features.rt"), &t)?;
            fs::write(out.join("index.json"), serde_json::to_string_pretty(&names)?)?;
            println!("encoded {} images to {}", names.len(), out.display());
        }
        Command::Ablate { config, grid, data, out } => {
            let base = load_config(config.as_deref())?;
            let spec = GridSpec::parse(&grid)?;
            let variants = spec.variants(&base)?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            println!("running {} variants", variants.len());
            let report = run_sweep(&base, &variants, &dataset, Some(&out))?;
            write_report(&report, &out)?;
            validate_report(&serde_json::to_value(&report)?)?;
            for row in &report.rows {
                println!("{:>3}. {:<28} {:6.2}", row.rank, row.label, row.score);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
