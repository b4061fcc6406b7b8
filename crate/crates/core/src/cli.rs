//! Command-line interface: dataset generation, training, attention dumps,
//! segmentation, and report assembly. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};

use crate::analysis::{extract_features, segment, FeatureKind, FrameFeatures};
use crate::config::RunConfig;
use crate::policy::Policy;
use crate::report;
use crate::synthworld::{
    generate_dataset, primitive_code, read_dataset, write_dataset, Dataset, Split,
    PRIMITIVE_NAMES,
};
use crate::trainer::{self, validate, TrainConfig, TrainMode};
use crate::tsne::tsne;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "crossmod", version, about = "cross-modality attention diffusion policy pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic demonstration dataset.
    Gen {
        /// Run config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the trajectory count from the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a policy on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `whole` or `primitive:<Name>` (e.g. primitive:Screw).
        #[arg(long)]
        mode: Option<String>,
        /// Override total training steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-frame attention allocations and embeddings for one trajectory.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traj: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster CMA embeddings of a dataset split and score the segmentation.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        k: Option<usize>,
        /// `embedding` (default) or `allocation`.
        #[arg(long)]
        feature: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble plots, the budget table, and summary.json from run dirs.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    if s.eq_ignore_ascii_case("whole") {
        return Ok(TrainMode::Whole);
    }
    if let Some(name) = s.strip_prefix("primitive:") {
        return primitive_code(name).map(TrainMode::Primitive).ok_or_else(|| {
            Error::Config(format!(
                "unknown primitive {name:?}; expected one of {}",
                PRIMITIVE_NAMES.join(", ")
            ))
        });
    }
    Err(Error::Config(format!(
        "bad mode {s:?}; expected `whole` or `primitive:<Name>`"
    )))
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(Error::Config(format!(
            "bad split {other:?}; expected train or val"
        ))),
    }
}

fn parse_feature(s: &str) -> Result<FeatureKind> {
    match s.to_ascii_lowercase().as_str() {
        "embedding" => Ok(FeatureKind::Embedding),
        "allocation" => Ok(FeatureKind::Allocation),
        other => Err(Error::Config(format!(
            "bad feature {other:?}; expected embedding or allocation"
        ))),
    }
}

fn cmd_gen(config: &Option<PathBuf>, out: &Path, count: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(c) = count {
        cfg.gen.count = c;
        cfg.gen.train_count = cfg.gen.train_count.min(c);
    }
    cfg.validate()?;
    let ds = generate_dataset(cfg.seed, &cfg.gen)?;
    write_dataset(&ds, &cfg.gen, out)?;
    cfg.echo(out)?;
    println!(
        "wrote {} trajectories ({} train / {} val) to {}",
        ds.trajectories.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Val).len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Option<PathBuf>,
    data: &Path,
    mode: &Option<String>,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.train.mode = parse_mode(m)?;
    }
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let mut policy = Policy::init(cfg.model.clone(), cfg.seed, DType::F32)?;
    let prepared = trainer::prepare(&policy, &ds)?;
    let result = trainer::train(&mut policy, &prepared, &cfg.train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.echo(out)?;
    policy.save(&out.join("checkpoint"))?;
    trainer::write_metrics_csv(&out.join("metrics.csv"), &result.metrics)?;
    let per_primitive_val = match cfg.train.mode {
        TrainMode::Whole => {
            let mut per = BTreeMap::new();
            for (p, name) in PRIMITIVE_NAMES.iter().enumerate() {
                let vcfg = TrainConfig {
                    mode: TrainMode::Primitive(p as u8),
                    ..cfg.train.clone()
                };
                let (loss, _) = validate(&policy, &prepared, &vcfg)?;
                per.insert(name.to_string(), loss);
            }
            Some(per)
        }
        TrainMode::Primitive(_) => None,
    };
    let mode_name = match cfg.train.mode {
        TrainMode::Whole => "whole".to_string(),
        TrainMode::Primitive(p) => PRIMITIVE_NAMES[p as usize].to_string(),
    };
    report::write_train_info(
        &out.join("train_result.json"),
        &report::TrainRunInfo {
            mode: cfg.train.mode,
            mode_name,
            total_steps: cfg.train.total_steps,
            seed: cfg.train.seed,
            final_val_loss: result.final_val_loss,
            val_draw_hash: result.val_draw_hash,
            per_primitive_val,
        },
    )?;
    println!(
        "trained {} steps, final val loss {:.6}",
        cfg.train.total_steps, result.final_val_loss
    );
    Ok(())
}

fn cmd_attn(ckpt: &Path, data: &Path, traj: usize, out: &Path) -> Result<()> {
    let policy = Policy::load(ckpt, DType::F32)?;
    let ds = read_dataset(data)?;
    let t = ds.trajectories.get(traj).ok_or_else(|| {
        Error::Data(format!(
            "trajectory {traj} out of range; dataset has {}",
            ds.trajectories.len()
        ))
    })?;
    let feats = extract_features(&policy, t)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report::write_features_csv(&out.join("features.csv"), &feats)?;
    report::allocation_heatmap_svg(&feats).write(&out.join("allocation.svg"))?;
    println!("wrote {} frames to {}", feats.len(), out.display());
    Ok(())
}

/// Pool per-frame features across every trajectory of a split.
fn pooled_features(policy: &Policy, ds: &Dataset, split: Split) -> Result<Vec<FrameFeatures>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("dataset has no {split:?} trajectories")));
    }
    let mut all = Vec::new();
    for (offset, i) in idx.iter().enumerate() {
        let mut feats = extract_features(policy, &ds.trajectories[*i])?;
        for f in feats.iter_mut() {
            // keep frame ids unique across the pooled sequence
            f.frame += offset * 100_000;
        }
        all.append(&mut feats);
    }
    Ok(all)
}

fn cmd_segment(
    ckpt: &Path,
    data: &Path,
    split: &str,
    k: Option<usize>,
    feature: &Option<String>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut acfg = crate::config::AnalysisConfig::default();
    if let Some(k) = k {
        acfg.k = k;
    }
    if let Some(f) = feature {
        acfg.feature = parse_feature(f)?;
    }
    acfg.validate()?;
    let policy = Policy::load(ckpt, DType::F32)?;
    let ds = read_dataset(data)?;
    let feats = pooled_features(&policy, &ds, parse_split(split)?)?;
    let seg = segment(&feats, acfg.feature, acfg.k, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = serde_json::to_string_pretty(&seg)
        .map_err(|e| Error::Data(format!("serialize segmentation: {e}")))?;
    let seg_path = out.join("segmentation.json");
    std::fs::write(&seg_path, text + "\n").map_err(|e| Error::io(&seg_path, e))?;

    // subsample deterministically if the pooled split exceeds the exact
    // t-SNE budget
    let stride = feats.len().div_ceil(acfg.tsne_max_points).max(1);
    let sub_idx: Vec<usize> = (0..feats.len()).step_by(stride).collect();
    let points: Vec<Vec<f32>> = sub_idx
        .iter()
        .map(|&i| match acfg.feature {
            FeatureKind::Embedding => feats[i].embedding.clone(),
            FeatureKind::Allocation => feats[i].allocation.to_vec(),
        })
        .collect();
    let embedded = tsne(&points, acfg.tsne_perplexity, acfg.tsne_iters, seed)?;
    let gt: Vec<u8> = sub_idx.iter().map(|&i| feats[i].gt_label).collect();
    let clusters: Vec<usize> = sub_idx.iter().map(|&i| seg.cluster_ids[i]).collect();
    report::write_tsne_csv(&out.join("tsne.csv"), &embedded.points, &gt, &clusters)?;
    let gt_usize: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
    report::scatter_svg(&embedded.points, &gt_usize, "t-SNE by ground-truth label")
        .write(&out.join("scatter_label.svg"))?;
    report::scatter_svg(&embedded.points, &clusters, "t-SNE by cluster")
        .write(&out.join("scatter_cluster.svg"))?;
    println!(
        "segmented {} frames: nmi {:.4}, accuracy {:.4}, boundary F1 {:.4}",
        feats.len(),
        seg.metrics.nmi,
        seg.metrics.frame_accuracy,
        seg.metrics.boundary_f1
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let dirs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
    let summary = report::assemble(&dirs, out)?;
    println!(
        "report written to {} ({} summary rows)",
        out.display(),
        summary.len()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gen { config, out, count } => cmd_gen(config, out, *count),
        Cmd::Train {
            config,
            data,
            mode,
            steps,
            out,
        } => cmd_train(config, data, mode, *steps, out),
        Cmd::Attn {
            ckpt,
            data,
            traj,
            out,
        } => cmd_attn(ckpt, data, *traj, out),
        Cmd::Segment {
            ckpt,
            data,
            split,
            k,
            feature,
            seed,
            out,
        } => cmd_segment(ckpt, data, split, *k, feature, *seed, out),
        Cmd::Report { runs, out } => cmd_report(runs, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(parse_mode("whole").unwrap(), TrainMode::Whole);
        assert_eq!(parse_mode("primitive:Screw").unwrap(), TrainMode::Primitive(5));
        assert_eq!(parse_mode("primitive:insert").unwrap(), TrainMode::Primitive(4));
        assert!(parse_mode("primitive:Weld").is_err());
        assert!(parse_mode("both").is_err());
    }

    #[test]
    fn split_and_feature_parsing() {
        assert_eq!(parse_split("val").unwrap(), Split::Val);
        assert_eq!(parse_split("TRAIN").unwrap(), Split::Train);
        assert!(parse_split("test").is_err());
        assert_eq!(parse_feature("embedding").unwrap(), FeatureKind::Embedding);
        assert_eq!(parse_feature("allocation").unwrap(), FeatureKind::Allocation);
        assert!(parse_feature("raw").is_err());
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from([
            "crossmod", "train", "--data", "d", "--out", "o", "--mode", "primitive:Screw",
            "--steps", "10",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Train { steps, .. } => assert_eq!(steps, Some(10)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Cli::try_parse_from(["crossmod", "unknown"]).is_err());
    }
}
