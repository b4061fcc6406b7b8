//! Report assembly: CSV artifact formats shared with the CLI, the SVG plots
//! (loss curves, allocation heatmap, 2-d scatters), the per-primitive budget
//! table, and the pass/fail summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::FrameFeatures;
use crate::encoders::{MODALITIES, MODALITY_NAMES};
use crate::svg::{fmt_f, heat, palette, Svg};
use crate::synthworld::{NUM_PRIMITIVES, PRIMITIVE_NAMES};
use crate::trainer::{MetricRow, TrainMode};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// artifact formats

/// features.csv: frame, gt_label, one allocation column per modality, then
/// the 128 embedding columns.
pub fn write_features_csv(path: &Path, feats: &[FrameFeatures]) -> Result<()> {
    let mut out = String::from("frame,gt_label");
    for m in MODALITY_NAMES {
        out.push_str(&format!(",alloc_{m}"));
    }
    let d = feats.first().map(|f| f.embedding.len()).unwrap_or(0);
    for i in 0..d {
        out.push_str(&format!(",e{i:03}"));
    }
    out.push('\n');
    for f in feats {
        out.push_str(&format!("{},{}", f.frame, f.gt_label));
        for a in f.allocation {
            out.push_str(&format!(",{}", fmt_f(a as f64)));
        }
        for e in &f.embedding {
            out.push_str(&format!(",{}", fmt_f(*e as f64)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FrameFeatures>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 + MODALITIES || cols[0] != "frame" || cols[1] != "gt_label" {
        return Err(Error::Data(format!(
            "{}: unexpected features.csv header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != cols.len() {
            return Err(Error::Data(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                ln + 2,
                parts.len(),
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), ln + 2)))
        };
        let mut allocation = [0f32; MODALITIES];
        for (i, a) in allocation.iter_mut().enumerate() {
            *a = parse(parts[2 + i])? as f32;
        }
        let embedding: Vec<f32> = parts[2 + MODALITIES..]
            .iter()
            .map(|s| parse(s).map(|v| v as f32))
            .collect::<Result<_>>()?;
        out.push(FrameFeatures {
            frame: parse(parts[0])? as usize,
            gt_label: parse(parts[1])? as u8,
            allocation,
            embedding,
            attn: Vec::new(),
        });
    }
    Ok(out)
}

/// tsne.csv: x, y, gt_label, cluster.
pub fn write_tsne_csv(
    path: &Path,
    points: &[[f32; 2]],
    gt: &[u8],
    clusters: &[usize],
) -> Result<()> {
    let mut out = String::from("x,y,gt_label,cluster\n");
    for i in 0..points.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f(points[i][0] as f64),
            fmt_f(points[i][1] as f64),
            gt[i],
            clusters[i]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TsneRows {
    pub points: Vec<[f32; 2]>,
    pub gt: Vec<u8>,
    pub clusters: Vec<usize>,
}

pub fn read_tsne_csv(path: &Path) -> Result<TsneRows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = TsneRows {
        points: Vec::new(),
        gt: Vec::new(),
        clusters: Vec::new(),
    };
    for (ln, line) in text.lines().skip(1).enumerate() {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 4 {
            return Err(Error::Data(format!(
                "{} line {}: expected 4 fields",
                path.display(),
                ln + 2
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), ln + 2)))
        };
        rows.points.push([parse(p[0])? as f32, parse(p[1])? as f32]);
        rows.gt.push(parse(p[2])? as u8);
        rows.clusters.push(parse(p[3])? as usize);
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().skip(1).enumerate() {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 3 {
            return Err(Error::Data(format!(
                "{} line {}: expected step,split,loss",
                path.display(),
                ln + 2
            )));
        }
        out.push(MetricRow {
            step: p[0]
                .parse()
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), ln + 2)))?,
            split: p[1].to_string(),
            loss: p[2]
                .parse()
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), ln + 2)))?,
        });
    }
    Ok(out)
}

/// train_result.json, written by cmd_train next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunInfo {
    pub mode: TrainMode,
    pub mode_name: String,
    pub total_steps: usize,
    pub seed: u64,
    pub final_val_loss: f64,
    pub val_draw_hash: u64,
    /// For whole-policy runs: validation loss restricted to each primitive's
    /// frames, using the same fixed draws as a primitive run with the same
    /// base seed.
    pub per_primitive_val: Option<BTreeMap<String, f64>>,
}

pub fn write_train_info(path: &Path, info: &TrainRunInfo) -> Result<()> {
    let text = serde_json::to_string_pretty(info)
        .map_err(|e| Error::Data(format!("serialize train info: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_train_info(path: &Path) -> Result<TrainRunInfo> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// plots

const MARGIN: f64 = 46.0;

fn axes(svg: &mut Svg, w: f64, h: f64, title: &str) {
    svg.rect(0.0, 0.0, w, h, "#ffffff");
    svg.line(MARGIN, h - MARGIN, w - 10.0, h - MARGIN, "#000000", 1.0);
    svg.line(MARGIN, h - MARGIN, MARGIN, 10.0, "#000000", 1.0);
    svg.text(MARGIN, 22.0, 12.0, title);
}

/// Validation-loss curves, one polyline per run, log-x linear-y.
pub fn loss_curves_svg(runs: &[(String, Vec<(usize, f64)>)]) -> Svg {
    let (w, h) = (640.0, 400.0);
    let mut svg = Svg::new(w, h);
    axes(&mut svg, w, h, "validation loss");
    let max_step = runs
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|(s, _)| *s))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_loss = runs
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|(_, l)| *l))
        .fold(0f64, f64::max)
        .max(1e-9);
    for (i, (label, pts)) in runs.iter().enumerate() {
        let path: Vec<(f64, f64)> = pts
            .iter()
            .map(|(s, l)| {
                (
                    MARGIN + (*s as f64 / max_step) * (w - MARGIN - 10.0),
                    (h - MARGIN) - (l / max_loss) * (h - MARGIN - 10.0),
                )
            })
            .collect();
        svg.polyline(&path, palette(i), 1.5);
        svg.text(w - 180.0, 20.0 + 14.0 * i as f64, 10.0, label);
    }
    svg
}

/// Per-frame allocation heatmap (Fig. 2 analog): one row per modality plus a
/// ground-truth label strip underneath.
pub fn allocation_heatmap_svg(feats: &[FrameFeatures]) -> Svg {
    let n = feats.len().max(1);
    let (w, h) = (640.0, 220.0);
    let mut svg = Svg::new(w, h);
    axes(&mut svg, w, h, "attention allocation over time");
    let cell_w = (w - MARGIN - 10.0) / n as f64;
    let row_h = (h - MARGIN - 40.0) / (MODALITIES as f64 + 1.0);
    for (m, name) in MODALITY_NAMES.iter().enumerate() {
        svg.text(2.0, 40.0 + row_h * (m as f64 + 0.6), 9.0, name);
        for (i, f) in feats.iter().enumerate() {
            svg.rect(
                MARGIN + cell_w * i as f64,
                32.0 + row_h * m as f64,
                cell_w + 0.5,
                row_h,
                &heat(f.allocation[m] as f64 * MODALITIES as f64 / 2.0),
            );
        }
    }
    svg.text(2.0, 40.0 + row_h * (MODALITIES as f64 + 0.6), 9.0, "label");
    for (i, f) in feats.iter().enumerate() {
        svg.rect(
            MARGIN + cell_w * i as f64,
            32.0 + row_h * MODALITIES as f64,
            cell_w + 0.5,
            row_h,
            palette(f.gt_label as usize),
        );
    }
    svg
}

/// 2-d scatter colored by class (Fig. 4 analog).
pub fn scatter_svg(points: &[[f32; 2]], classes: &[usize], title: &str) -> Svg {
    let (w, h) = (480.0, 480.0);
    let mut svg = Svg::new(w, h);
    axes(&mut svg, w, h, title);
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c] as f64);
            hi[c] = hi[c].max(p[c] as f64);
        }
    }
    for c in 0..2 {
        if !(hi[c] - lo[c]).is_finite() || hi[c] - lo[c] < 1e-9 {
            lo[c] -= 0.5;
            hi[c] += 0.5;
        }
    }
    for (p, cls) in points.iter().zip(classes) {
        let x = MARGIN + (p[0] as f64 - lo[0]) / (hi[0] - lo[0]) * (w - MARGIN - 14.0);
        let y = (h - MARGIN) - (p[1] as f64 - lo[1]) / (hi[1] - lo[1]) * (h - MARGIN - 14.0);
        svg.circle(x, y, 2.0, palette(*cls));
    }
    svg
}

// ---------------------------------------------------------------------------
// summary / budget table

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Data(format!("serialize summary: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Mean allocation per primitive over a feature set; rows lie on the
/// 4-simplex.
pub fn mean_allocations(feats: &[FrameFeatures]) -> [[f64; MODALITIES]; NUM_PRIMITIVES] {
    let mut sums = [[0f64; MODALITIES]; NUM_PRIMITIVES];
    let mut counts = [0usize; NUM_PRIMITIVES];
    for f in feats {
        let p = f.gt_label as usize;
        if p < NUM_PRIMITIVES {
            counts[p] += 1;
            for m in 0..MODALITIES {
                sums[p][m] += f.allocation[m] as f64;
            }
        }
    }
    for p in 0..NUM_PRIMITIVES {
        if counts[p] > 0 {
            for m in 0..MODALITIES {
                sums[p][m] /= counts[p] as f64;
            }
        }
    }
    sums
}

/// Experiment C statistics: tactile allocation contrast between contact-rich
/// and reach primitives, and the number of primitive pairs whose mean
/// allocation vectors differ by more than 0.1 in L1.
pub struct AllocationStats {
    pub tactile_contact: f64,
    pub tactile_reach: f64,
    pub distinct_pairs: usize,
    pub means: [[f64; MODALITIES]; NUM_PRIMITIVES],
}

pub fn allocation_stats(feats: &[FrameFeatures]) -> AllocationStats {
    let means = mean_allocations(feats);
    const TACTILE: usize = 3;
    // Insert = 4, Screw = 5; ReachBase = 0, ReachLeg = 2
    let tactile_contact = (means[4][TACTILE] + means[5][TACTILE]) / 2.0;
    let tactile_reach = (means[0][TACTILE] + means[2][TACTILE]) / 2.0;
    let mut distinct_pairs = 0usize;
    for a in 0..NUM_PRIMITIVES {
        for b in (a + 1)..NUM_PRIMITIVES {
            let l1: f64 = (0..MODALITIES)
                .map(|m| (means[a][m] - means[b][m]).abs())
                .sum();
            if l1 > 0.1 {
                distinct_pairs += 1;
            }
        }
    }
    AllocationStats {
        tactile_contact,
        tactile_reach,
        distinct_pairs,
        means,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetTableRow {
    pub primitive: String,
    pub whole_val_loss: f64,
    pub primitive_val_loss: f64,
    pub winner: String,
}

/// Build the Fig. 3 analog table from one whole-policy run (with
/// per-primitive validation) and six primitive runs.
pub fn budget_table(
    whole: &TrainRunInfo,
    primitives: &[TrainRunInfo],
) -> Result<Vec<BudgetTableRow>> {
    let per = whole.per_primitive_val.as_ref().ok_or_else(|| {
        Error::Data("whole-policy run has no per-primitive validation losses".into())
    })?;
    if primitives.len() != NUM_PRIMITIVES {
        return Err(Error::Data(format!(
            "expected {NUM_PRIMITIVES} primitive runs, got {}",
            primitives.len()
        )));
    }
    let mut rows = Vec::with_capacity(NUM_PRIMITIVES);
    for name in PRIMITIVE_NAMES {
        let spec = primitives
            .iter()
            .find(|r| r.mode_name == name)
            .ok_or_else(|| Error::Data(format!("missing primitive run for {name}")))?;
        let whole_loss = *per
            .get(name)
            .ok_or_else(|| Error::Data(format!("whole run lacks validation for {name}")))?;
        if spec.val_draw_hash != 0 && whole.seed != spec.seed {
            return Err(Error::Data(format!(
                "run seeds differ ({} vs {}); validation draws are not comparable",
                whole.seed, spec.seed
            )));
        }
        rows.push(BudgetTableRow {
            primitive: name.to_string(),
            whole_val_loss: whole_loss,
            primitive_val_loss: spec.final_val_loss,
            winner: if spec.final_val_loss < whole_loss {
                "primitive".into()
            } else {
                "whole".into()
            },
        });
    }
    Ok(rows)
}

pub fn write_budget_csv(path: &Path, rows: &[BudgetTableRow]) -> Result<()> {
    let mut out = String::from("primitive,whole_val_loss,primitive_val_loss,winner\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.primitive,
            fmt_f(r.whole_val_loss),
            fmt_f(r.primitive_val_loss),
            r.winner
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Assemble every plot and table available across the given run directories.
pub fn assemble(run_dirs: &[&Path], out_dir: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut curves = Vec::new();
    let mut infos: Vec<TrainRunInfo> = Vec::new();
    let mut summary = Vec::new();
    for dir in run_dirs {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "run directory {} does not exist",
                dir.display()
            )));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let metrics_path = dir.join("metrics.csv");
        if metrics_path.is_file() {
            let rows = read_metrics_csv(&metrics_path)?;
            let vals: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.split == "val")
                .map(|r| (r.step, r.loss))
                .collect();
            if vals.len() >= 2 {
                let first = vals[0].1;
                let last = vals.last().unwrap().1;
                if vals[0].0 == 0 && last > 0.0 {
                    summary.push(SummaryRow {
                        experiment: format!("train:{name}"),
                        metric: "val_loss_reduction".into(),
                        value: first / last,
                        threshold: 2.0,
                        pass: first / last >= 2.0,
                    });
                }
            }
            if !vals.is_empty() {
                curves.push((name.clone(), vals));
            }
        }
        let info_path = dir.join("train_result.json");
        if info_path.is_file() {
            infos.push(read_train_info(&info_path)?);
        }
        let feats_path = dir.join("features.csv");
        if feats_path.is_file() {
            let feats = read_features_csv(&feats_path)?;
            allocation_heatmap_svg(&feats)
                .write(&out_dir.join(format!("allocation_{name}.svg")))?;
            let stats = allocation_stats(&feats);
            summary.push(SummaryRow {
                experiment: format!("attention:{name}"),
                metric: "tactile_contact_minus_reach".into(),
                value: stats.tactile_contact - stats.tactile_reach,
                threshold: 0.0,
                pass: stats.tactile_contact > stats.tactile_reach,
            });
            summary.push(SummaryRow {
                experiment: format!("attention:{name}"),
                metric: "distinct_allocation_pairs".into(),
                value: stats.distinct_pairs as f64,
                threshold: 3.0,
                pass: stats.distinct_pairs >= 3,
            });
        }
        let tsne_path = dir.join("tsne.csv");
        if tsne_path.is_file() {
            let rows = read_tsne_csv(&tsne_path)?;
            let gt: Vec<usize> = rows.gt.iter().map(|&g| g as usize).collect();
            scatter_svg(&rows.points, &gt, "t-SNE by ground-truth label")
                .write(&out_dir.join(format!("scatter_label_{name}.svg")))?;
            scatter_svg(&rows.points, &rows.clusters, "t-SNE by cluster")
                .write(&out_dir.join(format!("scatter_cluster_{name}.svg")))?;
        }
        let seg_path = dir.join("segmentation.json");
        if seg_path.is_file() {
            let text = fs::read_to_string(&seg_path).map_err(|e| Error::io(&seg_path, e))?;
            let seg: crate::analysis::SegmentationResult = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", seg_path.display())))?;
            summary.push(SummaryRow {
                experiment: format!("segment:{name}"),
                metric: "nmi".into(),
                value: seg.metrics.nmi,
                threshold: 0.5,
                pass: seg.metrics.nmi >= 0.5,
            });
            summary.push(SummaryRow {
                experiment: format!("segment:{name}"),
                metric: "frame_accuracy".into(),
                value: seg.metrics.frame_accuracy,
                threshold: 0.6,
                pass: seg.metrics.frame_accuracy >= 0.6,
            });
        }
    }
    if !curves.is_empty() {
        loss_curves_svg(&curves).write(&out_dir.join("loss_curves.svg"))?;
    }
    let whole = infos
        .iter()
        .find(|i| i.mode == TrainMode::Whole && i.per_primitive_val.is_some());
    let prims: Vec<TrainRunInfo> = infos
        .iter()
        .filter(|i| matches!(i.mode, TrainMode::Primitive(_)))
        .cloned()
        .collect();
    if let Some(whole) = whole {
        if prims.len() == NUM_PRIMITIVES {
            let table = budget_table(whole, &prims)?;
            write_budget_csv(&out_dir.join("budgets.csv"), &table)?;
            let wins = table.iter().filter(|r| r.winner == "primitive").count();
            summary.push(SummaryRow {
                experiment: "budget".into(),
                metric: "primitive_wins".into(),
                value: wins as f64,
                threshold: 4.0,
                pass: wins >= 4,
            });
        }
    }
    write_summary(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
