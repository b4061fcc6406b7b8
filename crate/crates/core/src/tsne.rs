//! Exact O(M^2) t-SNE. Per-point bandwidths are binary-searched to match the
//! target perplexity within 1e-4; gradient descent uses momentum 0.8 with an
//! early-exaggeration factor of 12 for the first 100 iterations, initialized
//! from the PCA-2 projection rescaled to sigma = 1e-2. The KL divergence
//! against the un-exaggerated P is logged so callers can verify progress.

use crate::analysis::pca2;
use crate::rng::rng_from_seed;
use crate::{Error, Result};

pub const EXAGGERATION: f64 = 12.0;
pub const EXAGGERATION_ITERS: usize = 100;
pub const MOMENTUM: f64 = 0.8;
const P_FLOOR: f64 = 1e-12;

/// Size-dependent learning rate (max(M / exaggeration, 50)); a flat rate
/// overshoots badly on small point sets and crawls on large ones.
fn learning_rate(m: usize) -> f64 {
    (m as f64 / EXAGGERATION).max(50.0)
}

pub struct TsneResult {
    pub points: Vec<[f32; 2]>,
    /// (iteration, KL divergence) pairs, always including the first
    /// post-exaggeration iteration and the final one.
    pub kl_trace: Vec<(usize, f64)>,
}

/// Row-stochastic conditional probabilities p_{j|i} with per-point bandwidths
/// matching `perplexity` to within 1e-4 (in Shannon entropy).
pub fn conditional_probs(x: &[Vec<f32>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let m = x.len();
    let target_h = perplexity.ln();
    let mut d2 = vec![vec![0f64; m]; m];
    let mut max_d = 0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d: f64 = x[i]
                .iter()
                .zip(&x[j])
                .map(|(a, b)| ((*a - *b) as f64).powi(2))
                .sum();
            d2[i][j] = d;
            d2[j][i] = d;
            max_d = max_d.max(d);
        }
    }
    if max_d < 1e-18 {
        return Err(Error::Data(
            "t-SNE input is degenerate: all points identical".into(),
        ));
    }
    let mut p = vec![vec![0f64; m]; m];
    for i in 0..m {
        let mut beta = 1.0f64;
        let (mut lo, mut hi) = (0f64, f64::MAX);
        for _ in 0..200 {
            let mut sum = 0f64;
            let mut weighted = 0f64;
            for j in 0..m {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[i][j]).exp();
                sum += w;
                weighted += w * d2[i][j];
            }
            // H = ln(sum) + beta * E[d^2]
            let h = if sum > 0.0 {
                sum.ln() + beta * weighted / sum
            } else {
                0.0
            };
            let diff = h - target_h;
            if diff.abs() < 1e-4 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi == f64::MAX { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0f64;
        for j in 0..m {
            if j != i {
                p[i][j] = (-beta * d2[i][j]).exp();
                sum += p[i][j];
            }
        }
        if sum <= 0.0 {
            return Err(Error::Numeric(format!(
                "t-SNE bandwidth search collapsed for point {i}"
            )));
        }
        for j in 0..m {
            p[i][j] /= sum;
        }
    }
    Ok(p)
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv.max(P_FLOOR)).ln())
        .sum()
}

pub fn tsne(x: &[Vec<f32>], perplexity: f64, iters: usize, seed: u64) -> Result<TsneResult> {
    use rand::Rng;
    let m = x.len();
    if m < 10 {
        return Err(Error::Config(format!("t-SNE needs at least 10 points, got {m}")));
    }
    if perplexity < 2.0 || perplexity >= m as f64 {
        return Err(Error::Config(format!(
            "perplexity {perplexity} out of range for {m} points"
        )));
    }
    let cond = conditional_probs(x, perplexity)?;
    // symmetrize into joint probabilities
    let mut p = vec![0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            p[i * m + j] = ((cond[i][j] + cond[j][i]) / (2.0 * m as f64)).max(if i == j {
                0.0
            } else {
                P_FLOOR
            });
        }
    }

    // init from pca2 rescaled to sigma = 1e-2, with a seeded symmetry-breaking
    // jitter three orders of magnitude smaller
    let init = pca2(x)?;
    let mut mean = [0f64; 2];
    for q in &init {
        mean[0] += q[0] as f64;
        mean[1] += q[1] as f64;
    }
    mean[0] /= m as f64;
    mean[1] /= m as f64;
    let mut var = 0f64;
    for q in &init {
        var += (q[0] as f64 - mean[0]).powi(2) + (q[1] as f64 - mean[1]).powi(2);
    }
    let std = (var / (2.0 * m as f64)).sqrt();
    let scale = if std > 1e-12 { 1e-2 / std } else { 0.0 };
    let mut rng = rng_from_seed(seed);
    let mut y = vec![0f64; m * 2];
    for i in 0..m {
        for c in 0..2 {
            y[i * 2 + c] = (init[i][c] as f64 - mean[c]) * scale
                + rng.gen_range(-1e-5..1e-5);
        }
    }

    let lr = learning_rate(m);
    let mut vel = vec![0f64; m * 2];
    let mut gains = vec![1f64; m * 2];
    let mut kl_trace = Vec::new();
    let mut q = vec![0f64; m * m];
    let mut w = vec![0f64; m * m];
    for it in 0..iters {
        // student-t affinities in the embedding
        let mut wsum = 0f64;
        for i in 0..m {
            for j in (i + 1)..m {
                let dx = y[i * 2] - y[j * 2];
                let dy = y[i * 2 + 1] - y[j * 2 + 1];
                let wij = 1.0 / (1.0 + dx * dx + dy * dy);
                w[i * m + j] = wij;
                w[j * m + i] = wij;
                wsum += 2.0 * wij;
            }
            w[i * m + i] = 0.0;
        }
        for (qv, wv) in q.iter_mut().zip(&w) {
            *qv = (wv / wsum).max(P_FLOOR);
        }
        let exag = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        for i in 0..m {
            let mut g = [0f64; 2];
            for j in 0..m {
                if i == j {
                    continue;
                }
                let coef = 4.0 * (exag * p[i * m + j] - q[i * m + j]) * w[i * m + j];
                g[0] += coef * (y[i * 2] - y[j * 2]);
                g[1] += coef * (y[i * 2 + 1] - y[j * 2 + 1]);
            }
            for c in 0..2 {
                let k = i * 2 + c;
                // adaptive per-coordinate gains: grow when the gradient keeps
                // its direction relative to the velocity, shrink otherwise
                gains[k] = if (g[c] > 0.0) == (vel[k] > 0.0) {
                    (gains[k] * 0.8).max(0.01)
                } else {
                    gains[k] + 0.2
                };
                vel[k] = MOMENTUM * vel[k] - lr * gains[k] * g[c];
            }
        }
        let mut shift = [0f64; 2];
        for i in 0..m {
            for c in 0..2 {
                y[i * 2 + c] += vel[i * 2 + c];
                shift[c] += y[i * 2 + c];
            }
        }
        // keep the embedding centered so clouds drift apart symmetrically
        for i in 0..m {
            for c in 0..2 {
                y[i * 2 + c] -= shift[c] / m as f64;
            }
        }
        let last = it + 1 == iters;
        if it == EXAGGERATION_ITERS || last || it % 25 == 0 {
            kl_trace.push((it, kl_divergence(&p, &q)));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {it}")));
        }
    }
    let points = (0..m)
        .map(|i| [y[i * 2] as f32, y[i * 2 + 1] as f32])
        .collect();
    Ok(TsneResult { points, kl_trace })
}
