//! Unsupervised segmentation of trajectories from CMA embeddings: k-means
//! clustering, cluster-to-primitive label matching, NMI / accuracy / boundary
//! F1 scoring, and 2-d projections for plots.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::cma::allocation;
use crate::encoders::{FrameFeats, MODALITIES, NUM_TOKENS};
use crate::policy::Policy;
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthworld::{Trajectory, NUM_PRIMITIVES};
use crate::{Error, Result};

/// Per-frame CMA outputs: the 128-d embedding (mean of the 8 fused tokens)
/// and the per-modality attention allocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub frame: usize,
    pub gt_label: u8,
    pub embedding: Vec<f32>,
    pub allocation: [f32; MODALITIES],
    /// Head-averaged last-layer attention matrix, row-major 8x8.
    pub attn: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Embedding,
    Allocation,
}

/// Run the frozen encoders + CMA over every frame of a trajectory. Frame t is
/// paired with frame t-1 (frame 0 with itself).
pub fn extract_features(policy: &Policy, traj: &Trajectory) -> Result<Vec<FrameFeatures>> {
    let l = traj.len();
    if l == 0 {
        return Err(Error::Data("empty trajectory".into()));
    }
    let dev = policy.store.device();
    let dt = policy.store.dtype();
    let s3 = crate::synthworld::IMG3_SIZE;
    let sg = crate::synthworld::IMGG_SIZE;
    let mut img3 = Vec::with_capacity(l * s3 * s3);
    let mut imgg = Vec::with_capacity(l * sg * sg);
    let mut state = Vec::new();
    let mut tactile = Vec::new();
    for obs in &traj.observations {
        img3.extend_from_slice(&obs.img3);
        imgg.extend_from_slice(&obs.imgg);
        state.extend_from_slice(&obs.state);
        tactile.extend_from_slice(&obs.tactile);
    }
    let f3 = policy
        .enc
        .img3
        .frozen
        .features(&Tensor::from_vec(img3, (l, 1, s3, s3), dev)?.to_dtype(dt)?)?;
    let fg = policy
        .enc
        .imgg
        .frozen
        .features(&Tensor::from_vec(imgg, (l, 1, sg, sg), dev)?.to_dtype(dt)?)?;
    let state = Tensor::from_vec(state, (l, crate::synthworld::STATE_DIM), dev)?.to_dtype(dt)?;
    let tactile =
        Tensor::from_vec(tactile, (l, crate::synthworld::TACTILE_DIM), dev)?.to_dtype(dt)?;
    let prev_idx: Vec<u32> = (0..l).map(|t| t.saturating_sub(1) as u32).collect();
    let prev_idx = Tensor::from_vec(prev_idx, (l,), dev)?;
    let prev = FrameFeats {
        f3: f3.index_select(&prev_idx, 0)?,
        fg: fg.index_select(&prev_idx, 0)?,
        state: state.index_select(&prev_idx, 0)?,
        tactile: tactile.index_select(&prev_idx, 0)?,
    };
    let cur = FrameFeats {
        f3,
        fg,
        state,
        tactile,
    };
    let fused = policy.fuse(&prev, &cur)?;
    let emb = fused
        .tokens
        .mean(1)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let attn = fused
        .attn
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let d = emb.len() / l;
    let a = NUM_TOKENS * NUM_TOKENS;
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        let mat = attn[t * a..(t + 1) * a].to_vec();
        out.push(FrameFeatures {
            frame: t,
            gt_label: traj.labels[t],
            embedding: emb[t * d..(t + 1) * d].to_vec(),
            allocation: allocation(&mat)?,
            attn: mat,
        });
    }
    Ok(out)
}

pub fn feature_matrix(feats: &[FrameFeatures], kind: FeatureKind) -> Vec<Vec<f32>> {
    feats
        .iter()
        .map(|f| match kind {
            FeatureKind::Embedding => f.embedding.clone(),
            FeatureKind::Allocation => f.allocation.to_vec(),
        })
        .collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

pub struct KmeansResult {
    pub centers: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn assign(points: &[Vec<f32>], centers: &[Vec<f32>]) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(points.len());
    let mut inertia = 0f64;
    for p in points {
        let (mut best, mut best_d) = (0usize, f64::MAX);
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assignments.push(best);
        inertia += best_d;
    }
    (assignments, inertia)
}

/// Lloyd iterations from given initial centers; returns the inertia after
/// each assignment step (non-increasing by construction).
pub fn lloyd(points: &[Vec<f32>], mut centers: Vec<Vec<f32>>) -> (KmeansResult, Vec<f64>) {
    let d = points[0].len();
    let k = centers.len();
    let mut history = Vec::new();
    for _ in 0..300 {
        let (assignments, inertia) = assign(points, &centers);
        history.push(inertia);
        let mut sums = vec![vec![0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += *v as f64;
            }
        }
        let mut shift = 0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue; // keep an empty cluster's center where it is
            }
            for (ci, s) in centers[j].iter_mut().zip(&sums[j]) {
                let nv = (s / counts[j] as f64) as f32;
                shift += ((nv - *ci) as f64).abs();
                *ci = nv;
            }
        }
        if shift < 1e-6 {
            break;
        }
    }
    let (assignments, inertia) = assign(points, &centers);
    history.push(inertia);
    (
        KmeansResult {
            centers,
            assignments,
            inertia,
        },
        history,
    )
}

fn kmeans_pp_init(points: &[Vec<f32>], k: usize, seed: u64) -> Vec<Vec<f32>> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut r = rng.gen_range(0.0..1.0) * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// k-means++ with 50 restarts, keeping the lowest-inertia run.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::Data("kmeans on empty point set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k = {k} invalid for {} points",
            points.len()
        )));
    }
    let mut best: Option<KmeansResult> = None;
    for r in 0..50u64 {
        let init = kmeans_pp_init(points, k, derive_seed(seed, r));
        let (res, _) = lloyd(points, init);
        if best.as_ref().map(|b| res.inertia < b.inertia).unwrap_or(true) {
            best = Some(res);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMatch {
    /// cluster id -> primitive label
    pub permutation: Vec<u8>,
    pub mapped: Vec<u8>,
    pub accuracy: f64,
}

/// Map cluster ids to primitive labels. For k <= 6 the injective assignment
/// maximizing frame agreement is found exhaustively; for 6 < k <= 8 each
/// cluster takes its majority label (ties to the smaller label).
pub fn match_labels(pred: &[usize], gt: &[u8], k: usize) -> Result<LabelMatch> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if k > 8 {
        return Err(Error::Config(format!(
            "label matching supports at most 8 clusters, got {k}"
        )));
    }
    let mut cont = vec![[0u64; NUM_PRIMITIVES]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= k {
            return Err(Error::Data(format!("cluster id {p} out of range 0..{k}")));
        }
        if (g as usize) >= NUM_PRIMITIVES {
            return Err(Error::Data(format!("label {g} out of range")));
        }
        cont[p][g as usize] += 1;
    }
    let mapping: Vec<u8> = if k <= NUM_PRIMITIVES {
        let mut best_map = vec![0u8; k];
        let mut best_score = 0u64;
        let mut map = vec![0u8; k];
        let mut used = [false; NUM_PRIMITIVES];
        fn rec(
            c: usize,
            k: usize,
            cont: &[[u64; NUM_PRIMITIVES]],
            map: &mut [u8],
            used: &mut [bool; NUM_PRIMITIVES],
            score: u64,
            best_score: &mut u64,
            best_map: &mut [u8],
        ) {
            if c == k {
                if score >= *best_score {
                    *best_score = score;
                    best_map.copy_from_slice(map);
                }
                return;
            }
            for l in 0..NUM_PRIMITIVES {
                if used[l] {
                    continue;
                }
                used[l] = true;
                map[c] = l as u8;
                rec(c + 1, k, cont, map, used, score + cont[c][l], best_score, best_map);
                used[l] = false;
            }
        }
        rec(0, k, &cont, &mut map, &mut used, 0, &mut best_score, &mut best_map);
        best_map
    } else {
        cont.iter()
            .map(|row| {
                let mut best = 0usize;
                for l in 1..NUM_PRIMITIVES {
                    if row[l] > row[best] {
                        best = l;
                    }
                }
                best as u8
            })
            .collect()
    };
    let mapped: Vec<u8> = pred.iter().map(|&p| mapping[p]).collect();
    let accuracy =
        mapped.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64;
    Ok(LabelMatch {
        permutation: mapping,
        mapped,
        accuracy,
    })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information I(X;Y) / sqrt(H(X) H(Y)). If both labelings
/// are constant the partitions are identical and the value is 1; if exactly
/// one is constant it is 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "nmi needs equal nonempty labelings, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut ca = vec![0u64; ka];
    let mut cb = vec![0u64; kb];
    let mut joint = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        ca[x] += 1;
        cb[y] += 1;
        joint[x][y] += 1;
    }
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0f64;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x][y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Mode filter for categorical sequences; the window is truncated at the
/// edges. Ties go to the smallest label value.
pub fn mode_smooth(labels: &[u8], window: usize) -> Result<Vec<u8>> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!(
            "smoothing window must be odd, got {window}"
        )));
    }
    let half = window / 2;
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut counts = [0u32; 256];
        for &l in &labels[lo..hi] {
            counts[l as usize] += 1;
        }
        let mut best = 0usize;
        for l in 1..256 {
            if counts[l] > counts[best] {
                best = l;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

pub fn boundaries(labels: &[u8]) -> Vec<usize> {
    (1..labels.len())
        .filter(|&i| labels[i] != labels[i - 1])
        .collect()
}

/// Boundary F1 with a frame tolerance; matches are greedy one-to-one in
/// increasing frame order.
pub fn boundary_f1(pred: &[usize], gt: &[usize], tol: usize) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; gt.len()];
    let mut tp = 0usize;
    for &p in pred {
        let mut best: Option<(usize, usize)> = None; // (dist, index)
        for (j, &g) in gt.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = p.abs_diff(g);
            if d <= tol && best.map(|(bd, _)| d < bd).unwrap_or(true) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// First two principal components via power iteration with deflation.
pub fn pca2(points: &[Vec<f32>]) -> Result<Vec<[f32; 2]>> {
    if points.is_empty() {
        return Err(Error::Data("pca on empty point set".into()));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Data(format!("pca2 needs dimension >= 2, got {d}")));
    }
    let n = points.len();
    let mut mean = vec![0f64; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += *v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect())
        .collect();
    let matvec = |v: &[f64], deflate: Option<&[f64]>| -> Vec<f64> {
        // (X^T X / n) v, optionally with the first component projected out
        let mut out = vec![0f64; d];
        for row in &centered {
            let mut r = row.clone();
            if let Some(u) = deflate {
                let proj: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                for (ri, ui) in r.iter_mut().zip(u) {
                    *ri -= proj * ui;
                }
            }
            let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, ri) in out.iter_mut().zip(&r) {
                *o += dot * ri;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        out
    };
    let power = |deflate: Option<&[f64]>, seed: u64| -> Vec<f64> {
        let mut v: Vec<f64> = crate::rng::normal_vec(&mut rng_from_seed(seed), d)
            .into_iter()
            .map(|x| x as f64)
            .collect();
        for _ in 0..200 {
            let w = matvec(&v, deflate);
            let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return vec![0.0; d];
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        v
    };
    let u1 = power(None, derive_seed(pca_seed(), 1));
    let u2 = power(Some(&u1), derive_seed(pca_seed(), 2));
    Ok(centered
        .iter()
        .map(|row| {
            let a: f64 = row.iter().zip(&u1).map(|(x, y)| x * y).sum();
            let b: f64 = row.iter().zip(&u2).map(|(x, y)| x * y).sum();
            [a as f32, b as f32]
        })
        .collect())
}

const fn pca_seed() -> u64 {
    0x9e3779b97f4a7c15
}

/// Mean silhouette score over all points (O(M^2)).
pub fn silhouette(points: &[Vec<f32>], assignments: &[usize], k: usize) -> Result<f64> {
    let n = points.len();
    if n != assignments.len() || n == 0 || k < 2 {
        return Err(Error::Config("silhouette needs k >= 2 and matching lengths".into()));
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut total = 0f64;
    for i in 0..n {
        let mut dist_sum = vec![0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            dist_sum[assignments[j]] += sq_dist(&points[i], &points[j]).sqrt();
        }
        let ci = assignments[i];
        if counts[ci] <= 1 {
            continue; // silhouette of a singleton is 0 by convention
        }
        let a = dist_sum[ci] / (counts[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci && counts[c] > 0)
            .map(|c| dist_sum[c] / counts[c] as f64)
            .fold(f64::MAX, f64::min);
        if b == f64::MAX {
            continue;
        }
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegMetrics {
    pub frame_accuracy: f64,
    pub nmi: f64,
    pub boundary_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub k: usize,
    pub cluster_ids: Vec<usize>,
    pub smoothed_ids: Vec<usize>,
    pub boundaries: Vec<usize>,
    /// cluster id -> primitive label
    pub permutation: Vec<u8>,
    pub metrics: SegMetrics,
}

pub const SMOOTH_WINDOW: usize = 9;
pub const BOUNDARY_TOL: usize = 10;

/// Cluster per-frame features, smooth the cluster ids, then match clusters to
/// primitives and score against ground truth.
pub fn segment(
    feats: &[FrameFeatures],
    kind: FeatureKind,
    k: usize,
    seed: u64,
) -> Result<SegmentationResult> {
    let points = feature_matrix(feats, kind);
    let gt: Vec<u8> = feats.iter().map(|f| f.gt_label).collect();
    let km = kmeans(&points, k, seed)?;
    let as_u8: Vec<u8> = km.assignments.iter().map(|&a| a as u8).collect();
    let smoothed: Vec<usize> = mode_smooth(&as_u8, SMOOTH_WINDOW)?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let matched = match_labels(&smoothed, &gt, k)?;
    let gt_usize: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
    let nmi_v = nmi(&smoothed, &gt_usize)?;
    let smoothed_u8: Vec<u8> = smoothed.iter().map(|&v| v as u8).collect();
    let bounds = boundaries(&smoothed_u8);
    let f1 = boundary_f1(&bounds, &boundaries(&gt), BOUNDARY_TOL);
    Ok(SegmentationResult {
        k,
        cluster_ids: km.assignments,
        smoothed_ids: smoothed,
        boundaries: bounds,
        permutation: matched.permutation,
        metrics: SegMetrics {
            frame_accuracy: matched.accuracy,
            nmi: nmi_v,
            boundary_f1: f1,
        },
    })
}

/// Mapped (primitive-labeled) smoothed ids for a segmentation result.
pub fn mapped_ids(res: &SegmentationResult) -> Vec<u8> {
    res.smoothed_ids
        .iter()
        .map(|&c| res.permutation[c])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn kmeans_k1_is_the_mean() {
        let points = vec![
            vec![0.0f32, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 4.0],
            vec![2.0, 4.0],
        ];
        let r = kmeans(&points, 1, 0).unwrap();
        assert!((r.centers[0][0] - 1.0).abs() < 1e-6);
        assert!((r.centers[0][1] - 2.0).abs() < 1e-6);
        let expect: f64 = points.iter().map(|p| sq_dist(p, &r.centers[0])).sum();
        assert!((r.inertia - expect).abs() < 1e-9);
    }

    #[test]
    fn kmeans_separates_two_clouds() {
        let mut rng = rng_from_seed(3);
        let mut points = Vec::new();
        for i in 0..40 {
            let cx = if i < 20 { 0.0 } else { 10.0 };
            points.push(vec![
                cx + rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5f32),
            ]);
        }
        let r = kmeans(&points, 2, 1).unwrap();
        let first = r.assignments[0];
        assert!(r.assignments[..20].iter().all(|&a| a == first));
        assert!(r.assignments[20..].iter().all(|&a| a != first));
    }

    #[test]
    fn lloyd_inertia_is_non_increasing() {
        let mut rng = rng_from_seed(4);
        let points: Vec<Vec<f32>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let init = kmeans_pp_init(&points, 4, 9);
        let (_, history) = lloyd(&points, init);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia rose: {:?}", w);
        }
    }

    #[test]
    fn match_labels_recovers_cyclic_shift() {
        let gt: Vec<u8> = (0..300).map(|i| (i / 50) as u8).collect();
        let pred: Vec<usize> = gt.iter().map(|&g| ((g + 2) % 6) as usize).collect();
        let m = match_labels(&pred, &gt, 6).unwrap();
        assert_eq!(m.mapped, gt);
        assert_eq!(m.accuracy, 1.0);
        assert!(match_labels(&pred, &gt, 9).is_err());
        // identity case
        let idp: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
        let id = match_labels(&idp, &gt, 6).unwrap();
        assert_eq!(id.permutation, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(id.accuracy, 1.0);
        // constant prediction over balanced labels scores 1/6
        let constant = vec![0usize; 300];
        let c = match_labels(&constant, &gt, 1).unwrap();
        assert!((c.accuracy - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_conventions_and_invariances() {
        let gt: Vec<usize> = (0..300).map(|i| i / 50).collect();
        assert!((nmi(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        // relabeling leaves NMI unchanged
        let shifted: Vec<usize> = gt.iter().map(|&g| (g + 3) % 6).collect();
        assert!((nmi(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        // symmetry
        let other: Vec<usize> = (0..300).map(|i| (i / 30) % 4).collect();
        assert!((nmi(&gt, &other).unwrap() - nmi(&other, &gt).unwrap()).abs() < 1e-12);
        // one constant labeling carries no information
        assert_eq!(nmi(&vec![0; 300], &gt).unwrap(), 0.0);
        assert_eq!(nmi(&vec![2; 300], &vec![5; 300]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_of_independent_labelings_is_small() {
        let mut rng = rng_from_seed(8);
        let n = 3000;
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let v = nmi(&a, &b).unwrap();
        assert!(v < 0.02, "independent NMI {v}");
    }

    #[test]
    fn mode_smooth_removes_impulses() {
        let mut labels = vec![1u8; 40];
        labels[10] = 4;
        labels[25] = 0;
        let s = mode_smooth(&labels, 9).unwrap();
        assert_eq!(s, vec![1u8; 40]);
        assert!(mode_smooth(&labels, 8).is_err());
    }

    #[test]
    fn boundary_f1_cases() {
        assert_eq!(boundary_f1(&[50, 100], &[50, 100], 10), 1.0);
        assert_eq!(boundary_f1(&[45, 108], &[50, 100], 10), 1.0);
        assert_eq!(boundary_f1(&[], &[], 10), 1.0);
        assert_eq!(boundary_f1(&[50], &[], 10), 0.0);
        // one prediction cannot match two ground-truth boundaries
        let f1 = boundary_f1(&[50], &[50, 55], 10);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        // far-off prediction matches nothing
        assert_eq!(boundary_f1(&[200], &[50], 10), 0.0);
    }

    #[test]
    fn pca_first_axis_follows_largest_variance() {
        let mut rng = rng_from_seed(12);
        let points: Vec<Vec<f32>> = (0..500)
            .map(|_| {
                vec![
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1f32),
                ]
            })
            .collect();
        let proj = pca2(&points).unwrap();
        let var = |sel: fn(&[f32; 2]) -> f32| {
            let m: f32 = proj.iter().map(|p| sel(p)).sum::<f32>() / proj.len() as f32;
            proj.iter().map(|p| (sel(p) - m).powi(2)).sum::<f32>() / proj.len() as f32
        };
        let v1 = var(|p| p[0]);
        let v2 = var(|p| p[1]);
        assert!(v1 > 20.0 && v2 < 0.1, "v1 {v1} v2 {v2}");
        // first projection tracks the x coordinate up to sign
        let corr: f32 = points
            .iter()
            .zip(&proj)
            .map(|(p, q)| p[0] * q[0])
            .sum::<f32>();
        assert!(corr.abs() > 1.0);
    }

    #[test]
    fn silhouette_prefers_true_k() {
        let mut rng = rng_from_seed(21);
        let mut points = Vec::new();
        for c in 0..3 {
            for _ in 0..30 {
                points.push(vec![
                    c as f32 * 8.0 + rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5f32),
                ]);
            }
        }
        let mut best = (0usize, f64::MIN);
        for k in 2..=5 {
            let r = kmeans(&points, k, 2).unwrap();
            let s = silhouette(&points, &r.assignments, k).unwrap();
            if s > best.1 {
                best = (k, s);
            }
        }
        assert_eq!(best.0, 3);
    }

    #[test]
    fn segment_perfect_features_scores_one() {
        // one-hot-ish features that exactly encode the label
        let feats: Vec<FrameFeatures> = (0..300)
            .map(|i| {
                let label = (i / 50) as u8;
                let mut e = vec![0f32; 8];
                e[label as usize] = 1.0;
                FrameFeatures {
                    frame: i,
                    gt_label: label,
                    embedding: e,
                    allocation: [0.25; 4],
                    attn: vec![1.0 / 8.0; 64],
                }
            })
            .collect();
        let seg = segment(&feats, FeatureKind::Embedding, 6, 0).unwrap();
        assert!((seg.metrics.nmi - 1.0).abs() < 1e-9);
        assert!((seg.metrics.frame_accuracy - 1.0).abs() < 1e-9);
        assert!((seg.metrics.boundary_f1 - 1.0).abs() < 1e-9);
        assert_eq!(mapped_ids(&seg), (0..300).map(|i| (i / 50) as u8).collect::<Vec<_>>());
        for w in seg.boundaries.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
