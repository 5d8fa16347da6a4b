//! Exact t-SNE.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// Largest perplexity accepted for `n` points.
pub fn max_perplexity(n: usize) -> f64 {
    (n as f64 - 1.0) / 3.0
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional affinities with a per-point Gaussian precision found by
/// bisection so that each row has the requested perplexity.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        // distances are shifted by the nearest neighbour for stability
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[[i, j]] - dmin) * beta).exp() };
                sum += row[j];
                dot += row[j] * (d[[i, j]] - dmin);
            }
            let entropy = sum.ln() + beta * dot / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    p
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: &Array2<f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 5 {
        return Err(Error::invalid(format!("t-SNE needs at least 5 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= n as f64 / 3.0 {
        return Err(Error::invalid(format!(
            "perplexity {} is infeasible for {n} points; use at most {:.3}",
            cfg.perplexity,
            max_perplexity(n)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    let cond = conditional_affinities(&squared_distances(x), cfg.perplexity);
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((cond[[i, j]] + cond[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).unwrap();
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));

    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = v;
                num[[j, i]] = v;
                z += 2.0 * v;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let k = 4.0 * (exag * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += k * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += k * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *u = momentum * *u - cfg.learning_rate * *gain * g;
        }
        y += &update;
        for c in 0..2 {
            let m = y.column(c).sum() / n as f64;
            y.column_mut(c).mapv_inplace(|v| v - m);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE coordinates".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::silhouette::silhouette;

    fn blobs(per: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centres = [[0.0, 0.0, 0.0, 0.0], [10.0, 0.0, 5.0, 0.0], [0.0, 12.0, 0.0, -4.0]];
        let n = per * 3;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| centres[i % 3][j] + noise.sample(&mut rng));
        (x, labels)
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (x, l) = blobs(20, 1);
        let cfg = TsneConfig {
            perplexity: 10.0,
            ..Default::default()
        };
        let y = tsne(&x, &cfg).unwrap();
        let s = silhouette(&y, &l).unwrap().score;
        assert!(s > 0.8, "{s}");
    }

    #[test]
    fn duplicates_land_together() {
        let (mut x, _) = blobs(10, 2);
        let r = x.row(4).to_owned();
        x.row_mut(5).assign(&r);
        let y = tsne(&x, &TsneConfig { perplexity: 5.0, ..Default::default() }).unwrap();
        let dist = |a: usize, b: usize| ((y[[a, 0]] - y[[b, 0]]).powi(2) + (y[[a, 1]] - y[[b, 1]]).powi(2)).sqrt();
        // the copy is the nearest neighbour, well inside the typical spacing
        let others: Vec<f64> = (0..y.nrows()).filter(|&j| j != 4 && j != 5).map(|j| dist(4, j)).collect();
        let nearest = others.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(dist(4, 5) < nearest, "{} vs {nearest}", dist(4, 5));
    }

    #[test]
    fn seeded_runs_repeat() {
        let (x, _) = blobs(6, 3);
        let cfg = TsneConfig { perplexity: 4.0, iterations: 300, seed: 9, ..Default::default() };
        assert_eq!(tsne(&x, &cfg).unwrap(), tsne(&x, &cfg).unwrap());
    }

    #[test]
    fn infeasible_perplexity_suggests_limit() {
        let (x, _) = blobs(3, 4);
        let err = tsne(&x, &TsneConfig::default()).unwrap_err().to_string();
        assert!(err.contains("2.667"), "{err}");
    }

    #[test]
    fn affinity_rows_hit_target_perplexity() {
        let (x, _) = blobs(10, 5);
        let p = conditional_affinities(&squared_distances(&x), 7.0);
        for i in 0..x.nrows() {
            let h: f64 = p.row(i).iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            assert!((h.exp() - 7.0).abs() < 1e-4, "row {i}: {}", h.exp());
        }
    }
}
