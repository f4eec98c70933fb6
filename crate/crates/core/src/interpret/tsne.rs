//! Exact t-SNE (O(N^2) per iteration), PCA-initialized by default.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Array2<f32>,
    pub labels: Vec<String>,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f32>, labels: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::invalid(format!("need at least 2 embeddings, got {}", vectors.nrows())));
        }
        if labels.len() != vectors.nrows() {
            return Err(Error::shape(vectors.nrows(), labels.len()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embeddings contain non-finite values"));
        }
        Ok(Self {
            vectors,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneInit {
    #[default]
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// `None` picks max(N / exaggeration / 4, 50).
    pub learning_rate: Option<f64>,
    pub init: TsneInit,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: None,
            init: TsneInit::Pca,
            seed: 0,
        }
    }
}

/// Conditional probabilities for one row, matching the target perplexity.
fn row_affinities(d: &[f64], i: usize, target_entropy: f64) -> Vec<f64> {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let mut p = vec![0.0; d.len()];
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut dot = 0.0;
        for (j, (pj, &dj)) in p.iter_mut().zip(d).enumerate() {
            if j == i {
                *pj = 0.0;
                continue;
            }
            *pj = (-(dj - dmin) * beta).exp();
            sum += *pj;
            dot += (dj - dmin) * *pj;
        }
        let h = sum.ln() + beta * dot / sum;
        for pj in p.iter_mut() {
            *pj /= sum;
        }
        let diff = h - target_entropy;
        if diff.abs() < 1e-5 {
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
    p
}

/// N x 2 embedding coordinates.
pub fn tsne_embed(set: &EmbeddingSet, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = set.len();
    if n < 4 {
        return Err(Error::invalid(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= n as f64 / 3.0 {
        return Err(Error::Config(format!(
            "perplexity must be in (0, N/3) = (0, {:.2}), got {}",
            n as f64 / 3.0,
            cfg.perplexity
        )));
    }
    let x: Vec<Vec<f64>> = set.vectors.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect();
    let target = cfg.perplexity.ln();
    let cond: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| row_affinities(&dist[i], i, target)).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    drop(cond);
    drop(dist);

    let mut y = init_coords(&x, cfg)?;
    let lr = cfg.learning_rate.unwrap_or((n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..cfg.n_iter {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let row_z: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)))
                    .sum()
            })
            .collect();
        let z: f64 = row_z.iter().sum();
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                    let num = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                    let m = (exag * p[i * n + j] - num / z) * num;
                    g[0] += 4.0 * m * dy[0];
                    g[1] += 4.0 * m * dy[1];
                }
                g
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                let g = grad[i][k];
                gains[i][k] = if (g > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * g;
                y[i][k] += update[i][k];
            }
        }
        if y.iter().any(|r| !r[0].is_finite() || !r[1].is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                step: it,
                diagnostics: "t-SNE coordinates became non-finite".into(),
            });
        }
    }
    Ok(Array2::from_shape_fn((n, 2), |(i, k)| y[i][k]))
}

fn init_coords(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    let d = x[0].len();
    let mut coords = match cfg.init {
        TsneInit::Pca => {
            let mut m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
            for j in 0..d {
                let mean = m.column(j).mean();
                m.column_mut(j).add_scalar_mut(-mean);
            }
            let (v, _) = super::pca::top_components(&m, 2.min(d));
            let proj = &m * v;
            (0..n)
                .map(|i| [proj[(i, 0)], if proj.ncols() > 1 { proj[(i, 1)] } else { 0.0 }])
                .collect::<Vec<_>>()
        }
        TsneInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let nd = Normal::new(0.0, 1e-4).map_err(|e| Error::invalid(e.to_string()))?;
            (0..n).map(|_| [nd.sample(&mut rng), nd.sample(&mut rng)]).collect()
        }
    };
    if cfg.init == TsneInit::Pca {
        // rescale so the first coordinate has std 1e-4
        let mean = coords.iter().map(|c| c[0]).sum::<f64>() / n as f64;
        let sd = (coords.iter().map(|c| (c[0] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let s = if sd > 0.0 { 1e-4 / sd } else { 1.0 };
        for c in coords.iter_mut() {
            c[0] *= s;
            c[1] *= s;
        }
        if sd == 0.0 {
            // degenerate input: fall back to a seeded jitter
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let nd = Normal::new(0.0, 1e-4).map_err(|e| Error::invalid(e.to_string()))?;
            for c in coords.iter_mut() {
                c[0] = nd.sample(&mut rng);
                c[1] = nd.sample(&mut rng);
            }
        }
    }
    Ok(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(n_per: usize, d: usize, sep: f32, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array2::zeros((2 * n_per, d));
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let off = if i < n_per { 0.0 } else { sep };
            for j in 0..d {
                let z: f32 = StandardNormal.sample(&mut rng);
                v[[i, j]] = z + off;
            }
            labels.push(if i < n_per { "a" } else { "b" }.to_string());
        }
        EmbeddingSet::new(v, labels, "blobs").unwrap()
    }

    /// Mean silhouette coefficient, straight from its definition.
    fn silhouette(y: &Array2<f64>, labels: &[String]) -> f64 {
        let n = y.nrows();
        let dist = |i: usize, j: usize| ((y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2)).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let (mut same, mut ns, mut other, mut no) = (0.0, 0, 0.0, 0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    same += dist(i, j);
                    ns += 1;
                } else {
                    other += dist(i, j);
                    no += 1;
                }
            }
            let a = same / ns as f64;
            let b = other / no as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    fn quick() -> TsneConfig {
        TsneConfig {
            perplexity: 10.0,
            n_iter: 500,
            ..Default::default()
        }
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let set = blobs(30, 50, 10.0, 1);
        let y = tsne_embed(&set, &quick()).unwrap();
        assert!(silhouette(&y, &set.labels) > 0.5);
    }

    #[test]
    fn duplicates_coincide() {
        let mut set = blobs(20, 10, 6.0, 2);
        let row = set.vectors.row(3).to_owned();
        set.vectors.row_mut(4).assign(&row);
        let y = tsne_embed(&set, &quick()).unwrap();
        let extent = {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for r in y.outer_iter() {
                for k in 0..2 {
                    lo[k] = lo[k].min(r[k]);
                    hi[k] = hi[k].max(r[k]);
                }
            }
            ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
        };
        let d = ((y[[3, 0]] - y[[4, 0]]).powi(2) + (y[[3, 1]] - y[[4, 1]]).powi(2)).sqrt();
        assert!(d < 0.01 * extent, "{d} vs {extent}");
    }

    #[test]
    fn repeatable() {
        let set = blobs(10, 8, 4.0, 3);
        let cfg = TsneConfig {
            perplexity: 5.0,
            n_iter: 200,
            init: TsneInit::Random,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(tsne_embed(&set, &cfg).unwrap(), tsne_embed(&set, &cfg).unwrap());
    }

    #[test]
    fn perplexity_bound() {
        let set = blobs(5, 4, 1.0, 4);
        assert!(tsne_embed(&set, &TsneConfig::default()).is_err());
        let tiny = EmbeddingSet::new(Array2::zeros((3, 2)), vec!["a".into(); 3], "t").unwrap();
        assert!(tsne_embed(&tiny, &TsneConfig { perplexity: 0.5, ..Default::default() }).is_err());
        assert!(EmbeddingSet::new(Array2::zeros((1, 2)), vec!["a".into()], "t").is_err());
    }
}
