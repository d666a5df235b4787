use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use simc3d::dataio::{write_feature_csv, FeatureTable, Manifest};
use simc3d::eval::{
    kmeans_labels, pca_feature_export, position_retrieval_probe, similarity_curves, EvalModel, ProbeMode,
};
use simc3d::loss::Objective;
use simc3d::nn::load_checkpoint;
use simc3d::synth::{write_dataset, DEFAULT_SYNTH_HEIGHT, DEFAULT_SYNTH_WIDTH, MANIFEST_FILE};
use simc3d::targets::TargetVariant;
use simc3d::train::{list_epoch_checkpoints, prepare_scenes, train, TrainConfig};
use simc3d::{par, Error};

#[derive(Parser)]
#[command(
    name = "simc3d",
    version,
    about = "Image-to-point-cloud contrastive pretraining at desk scale"
)]
struct Cli {
    /// Worker threads (falls back to SIMC3D_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic depth/color frames and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SYNTH_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_SYNTH_HEIGHT)]
        height: usize,
    },
    /// Contrastive pretraining on a manifest.
    Pretrain {
        /// Manifest file.
        #[arg(long)]
        data: PathBuf,
        /// key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        target: Option<TargetVariant>,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total optimizer steps (overrides epochs).
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a probe on a checkpoint (or, for similarity, a checkpoint directory).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        probe: Probe,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Retrieval: use sampled targets instead of online features.
        #[arg(long)]
        oracle: bool,
        /// pca/kmeans: manifest entry to export.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// kmeans: cluster count.
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    Retrieval,
    Similarity,
    Pca,
    Kmeans,
}

fn parse_variant(s: &str) -> Result<TargetVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("SIMC3D_THREADS").ok()?.parse().ok())
        .unwrap_or(1)
}

fn cmd_synth(out: &Path, scenes: usize, seed: u64, width: usize, height: usize) -> simc3d::Result<()> {
    let m = write_dataset(out, scenes, seed, width, height)?;
    println!("scenes={}", m.entries.len());
    println!("manifest={}", out.join(MANIFEST_FILE).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    target: Option<TargetVariant>,
    objective: Option<Objective>,
    seed: Option<u64>,
    steps: Option<usize>,
    resume: Option<&Path>,
    threads: usize,
) -> simc3d::Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(t) = target {
        cfg.target = t;
    }
    if let Some(o) = objective {
        cfg.objective = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if steps.is_some() {
        cfg.steps = steps;
    }
    cfg.threads = threads;
    cfg.validate()?;
    let manifest = Manifest::read(data)?;
    let outcome = train(&cfg, &manifest.entries, Some(out), resume)?;
    if let (Some(first), Some(last)) = (outcome.log.records.first(), outcome.log.records.last()) {
        println!("steps={}", outcome.optimizer.step);
        println!("initial_loss={}", first.loss);
        println!("final_loss={}", last.loss);
        println!("final_pos_sim={}", last.pos_sim);
        println!("final_neg_sim={}", last.neg_sim);
    }
    println!("out={}", out.display());
    Ok(())
}

fn write_table(out: Option<&Path>, table: &FeatureTable) -> simc3d::Result<()> {
    if let Some(p) = out {
        write_feature_csv(table, p)?;
        println!("out={}", p.display());
    }
    Ok(())
}

/// Positions followed by extra columns, one row per point.
fn with_positions(
    positions: &[[f64; 3]],
    labels: &[&str],
    cols: usize,
    value: impl Fn(usize, usize) -> f32,
) -> simc3d::Result<FeatureTable> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend(labels.iter().map(|s| s.to_string()));
    let mut values = Vec::with_capacity(positions.len() * (3 + cols));
    for (i, p) in positions.iter().enumerate() {
        values.extend(p.iter().map(|&v| v as f32));
        values.extend((0..cols).map(|c| value(i, c)));
    }
    FeatureTable::new(names, values)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    probe: Probe,
    out: Option<&Path>,
    seed: u64,
    oracle: bool,
    scene: usize,
    k: usize,
) -> simc3d::Result<()> {
    let manifest = Manifest::read(data)?;
    match probe {
        Probe::Similarity => {
            let ckpts = list_epoch_checkpoints(checkpoint)?
                .into_iter()
                .map(|(e, p)| Ok((e, load_checkpoint(&p)?)))
                .collect::<simc3d::Result<Vec<_>>>()?;
            let Some((_, first)) = ckpts.first() else {
                return Err(Error::InvalidArgument(format!(
                    "no ckpt_epoch_*.bin files in {}",
                    checkpoint.display()
                )));
            };
            let cfg = TrainConfig::from_checkpoint(first)?;
            let scenes = prepare_scenes(&manifest.entries, &cfg.provider()?)?;
            let rows = similarity_curves(&ckpts, &scenes, &cfg.augmentation(), seed)?;
            for r in &rows {
                println!("epoch={} pos_sim={} neg_sim={}", r.epoch, r.pos_sim, r.neg_sim);
            }
            println!("rows={}", rows.len());
            let table = FeatureTable::new(
                vec!["epoch".into(), "pos_sim".into(), "neg_sim".into()],
                rows.iter()
                    .flat_map(|r| [r.epoch as f32, r.pos_sim as f32, r.neg_sim as f32])
                    .collect(),
            )?;
            write_table(out, &table)
        }
        Probe::Retrieval => {
            let model = EvalModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
            let scenes = prepare_scenes(&manifest.entries, &model.provider)?;
            let mode = if oracle {
                ProbeMode::Oracle
            } else {
                ProbeMode::Online
            };
            let r = position_retrieval_probe(&model, &scenes, &model.cfg.augmentation(), seed, mode)?;
            println!("top1_accuracy={}", r.accuracy);
            println!("points={}", r.points);
            println!("chance={}", r.chance);
            let table = FeatureTable::new(
                vec!["top1_accuracy".into(), "points".into(), "chance".into()],
                vec![r.accuracy as f32, r.points as f32, r.chance as f32],
            )?;
            write_table(out, &table)
        }
        Probe::Pca | Probe::Kmeans => {
            let model = EvalModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
            let entry = manifest.entries.get(scene).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "scene {scene} out of range: manifest has {} entries",
                    manifest.entries.len()
                ))
            })?;
            let prepared = prepare_scenes(std::slice::from_ref(entry), &model.provider)?;
            let cloud = &prepared[0].cloud;
            let feats = model.encoder_features(cloud)?.mapv(|v| v as f64);
            let table = if let Probe::Pca = probe {
                let r = pca_feature_export(feats.view())?;
                for (i, e) in r.explained.iter().enumerate() {
                    println!("explained_pc{}={e}", i + 1);
                }
                with_positions(cloud.positions(), &["pc1", "pc2", "pc3"], 3, |i, c| {
                    r.table.row(i)[c]
                })?
            } else {
                let r = kmeans_labels(feats.view(), k, seed)?;
                println!("inertia={}", r.inertia.last().copied().unwrap_or(0.0));
                println!("iterations={}", r.inertia.len());
                with_positions(cloud.positions(), &["label"], 1, |i, _| r.labels[i] as f32)?
            };
            println!("points={}", cloud.len());
            write_table(out, &table)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = threads(cli.threads);
    let result = par::with_threads(threads, || match &cli.command {
        Command::Synth {
            out,
            scenes,
            seed,
            width,
            height,
        } => cmd_synth(out, *scenes, *seed, *width, *height),
        Command::Pretrain {
            data,
            config,
            out,
            target,
            objective,
            seed,
            steps,
            resume,
        } => cmd_pretrain(
            data,
            config.as_deref(),
            out,
            *target,
            *objective,
            *seed,
            *steps,
            resume.as_deref(),
            threads,
        ),
        Command::Eval {
            checkpoint,
            data,
            probe,
            out,
            seed,
            oracle,
            scene,
            k,
        } => cmd_eval(
            checkpoint,
            data,
            *probe,
            out.as_deref(),
            *seed,
            *oracle,
            *scene,
            *k,
        ),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
