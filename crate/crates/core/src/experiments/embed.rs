//! 2-D embeddings of feature-layer activations: PCA, or a UMAP-style
//! neighbour-graph layout initialised from PCA.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use super::{derive_seed, Sample};
use crate::drr::{standardize, AugmentationParams};
use crate::error::{Error, Result};
use crate::grading::GradingModel;
use crate::io_util::{write_atomic, write_json};
use crate::plot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Embedder {
    Umap { neighbors: usize, min_dist: f64, epochs: usize },
    Pca,
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::Umap { neighbors: 15, min_dist: 0.1, epochs: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub embedder: Embedder,
    pub image_ids: Vec<String>,
    pub classes: Vec<Option<u8>>,
    pub coords: Vec<[f64; 2]>,
}

impl Embedding {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("embedding.json"), self)?;
        let mut csv = String::from("image_id,class,x,y\n");
        for ((id, c), p) in self.image_ids.iter().zip(&self.classes).zip(&self.coords) {
            csv.push_str(&format!("{id},{},{},{}\n", c.map_or(String::new(), |c| c.to_string()), p[0], p[1]));
        }
        write_atomic(&dir.join("embedding.csv"), csv.as_bytes())?;
        let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        let mut keys: Vec<Option<u8>> = self.classes.clone();
        keys.sort();
        keys.dedup();
        for k in keys {
            let pts = self
                .classes
                .iter()
                .zip(&self.coords)
                .filter(|(c, _)| **c == k)
                .map(|(_, p)| (p[0], p[1]))
                .collect();
            let name = k.map_or("unlabelled".to_string(), |c| format!("class {c}"));
            groups.push((name, pts));
        }
        let svg = plot::scatter_plot(&groups, "Feature embedding", "dim 1", "dim 2");
        write_atomic(&dir.join("embedding.svg"), svg.as_bytes())
    }
}

/// Feature-layer activations of every sample (mean over `mc_samples`
/// dropout passes when above 1), embedded in 2-D.
pub fn embed_features(
    model: &GradingModel,
    samples: &[Sample],
    embedder: Embedder,
    mc_samples: usize,
    seed: u64,
) -> Result<Embedding> {
    if mc_samples < 1 {
        return Err(Error::Input("MC sample count must be at least 1".into()));
    }
    let plain = AugmentationParams::disabled();
    let features = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let x = standardize(&s.pixels, &plain);
            if mc_samples == 1 {
                return Ok(model.forward(&x)?.features.iter().map(|&v| v as f64).collect());
            }
            let mut acc = vec![0.0f64; model.feature_dim()];
            for t in 0..mc_samples {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4, i as u64]));
                rng.set_stream(t as u64);
                let f = model.forward_mc(&x, &mut rng)?.features;
                acc.iter_mut().zip(&f).for_each(|(a, &v)| *a += v as f64);
            }
            Ok(acc.into_iter().map(|v| v / mc_samples as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Embedding {
        embedder,
        image_ids: samples.iter().map(|s| s.image_id.clone()).collect(),
        classes: samples.iter().map(|s| s.label.combined.map(|c| c.get())).collect(),
        coords: embed_matrix(&features, embedder, seed)?,
    })
}

/// Embed the rows of `x` in 2-D. Identical rows map to identical points.
pub fn embed_matrix(x: &[Vec<f64>], embedder: Embedder, seed: u64) -> Result<Vec<[f64; 2]>> {
    let Some(first) = x.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Input("feature rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite feature value".into()));
    }
    // Deduplicate bitwise-identical rows.
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let map: Vec<usize> = x
        .iter()
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            *index.entry(key).or_insert_with(|| {
                unique.push(r.clone());
                unique.len() - 1
            })
        })
        .collect();

    let init = pca(&unique, seed);
    let coords = match embedder {
        Embedder::Pca => init,
        Embedder::Umap { neighbors, min_dist, epochs } => {
            if neighbors < 1 || !(min_dist >= 0.0) {
                return Err(Error::Input("UMAP needs neighbors >= 1 and min_dist >= 0".into()));
            }
            umap_layout(&unique, init, neighbors, min_dist, epochs, seed)
        }
    };
    Ok(map.into_iter().map(|u| coords[u]).collect())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Projection onto the top two principal axes (power iteration with
/// deflation on the centred data).
fn pca(x: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let c: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for _ in 0..200 {
            // w = C^T C v, deflated against previous axes.
            let proj: Vec<f64> = c.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let mut w = vec![0.0; d];
            for (r, p) in c.iter().zip(&proj) {
                w.iter_mut().zip(r).for_each(|(wi, ri)| *wi += p * ri);
            }
            for a in &axes {
                let dot: f64 = w.iter().zip(a).map(|(p, q)| p * q).sum();
                w.iter_mut().zip(a).for_each(|(wi, ai)| *wi -= dot * ai);
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|wi| *wi /= norm);
            v = w;
        }
        // Fix the sign so the largest-magnitude loading is positive.
        let big = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|vi| *vi = -*vi);
        }
        axes.push(v);
    }
    c.iter()
        .map(|r| {
            let p = |a: &Vec<f64>| r.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect()
}

/// Fit `1 / (1 + a d^{2b})` to the target membership curve of `min_dist`.
fn fit_ab(min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (1..=300).map(|i| i as f64 * 0.01).collect();
    let target: Vec<f64> = xs.iter().map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist)).exp() }).collect();
    let mut best = (f64::INFINITY, 1.0, 1.0);
    for ia in 0..120 {
        let a = 10f64.powf(-1.0 + 2.0 * ia as f64 / 119.0);
        for ib in 0..80 {
            let b = 0.3 + 1.7 * ib as f64 / 79.0;
            let err: f64 = xs
                .iter()
                .zip(&target)
                .map(|(&x, &t)| {
                    let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                    (f - t) * (f - t)
                })
                .sum();
            if err < best.0 {
                best = (err, a, b);
            }
        }
    }
    (best.1, best.2)
}

/// Symmetrised fuzzy k-nearest-neighbour graph.
fn fuzzy_graph(x: &[Vec<f64>], k: usize) -> Vec<(usize, usize, f64)> {
    let n = x.len();
    let target = (k as f64).log2().max(1e-3);
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> =
                (0..n).filter(|&j| j != i).map(|j| (j, dist2(&x[i], &x[j]).sqrt())).collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(k);
            let rho = d.first().map_or(0.0, |p| p.1);
            let membership = |sigma: f64| -> f64 { d.iter().map(|&(_, dj)| (-(dj - rho).max(0.0) / sigma).exp()).sum() };
            let (mut lo, mut hi) = (1e-12f64, 1e6f64);
            for _ in 0..64 {
                let mid = (lo * hi).sqrt();
                if membership(mid) > target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let sigma = (lo * hi).sqrt();
            d.into_iter().map(|(j, dj)| (j, (-(dj - rho).max(0.0) / sigma).exp())).collect()
        })
        .collect();
    let mut w: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            let key = (i.min(j), i.max(j));
            let e = w.entry(key).or_insert((0.0, 0.0));
            if i < j {
                e.0 = p;
            } else {
                e.1 = p;
            }
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = w.into_iter().map(|((i, j), (a, b))| (i, j, a + b - a * b)).collect();
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges
}

fn umap_layout(
    x: &[Vec<f64>],
    init: Vec<[f64; 2]>,
    neighbors: usize,
    min_dist: f64,
    epochs: usize,
    seed: u64,
) -> Vec<[f64; 2]> {
    let n = x.len();
    if n < 3 {
        return init;
    }
    // Scale the initial layout to [-10, 10].
    let span = init.iter().flat_map(|p| p.iter()).fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut y: Vec<[f64; 2]> = init.iter().map(|p| [p[0] / span * 10.0, p[1] / span * 10.0]).collect();
    let edges = fuzzy_graph(x, neighbors.min(n - 1));
    let (a, b) = fit_ab(min_dist);
    let wmax = edges.iter().map(|e| e.2).fold(0.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5]));
    const NEGATIVE: usize = 5;
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    for epoch in 0..epochs {
        let lr = 1.0 - epoch as f64 / epochs as f64;
        for &(i, j, w) in &edges {
            if rng.gen::<f64>() > w / wmax {
                continue;
            }
            let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let coeff = if d2 > 0.0 { -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b)) } else { 0.0 };
            for k in 0..2 {
                let g = clip(coeff * (y[i][k] - y[j][k])) * lr;
                y[i][k] += g;
                y[j][k] -= g;
            }
            for _ in 0..NEGATIVE {
                let m = rng.gen_range(0..n);
                if m == i {
                    continue;
                }
                let d2 = (y[i][0] - y[m][0]).powi(2) + (y[i][1] - y[m][1]).powi(2);
                let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                for k in 0..2 {
                    let g = if d2 > 0.0 { clip(coeff * (y[i][k] - y[m][k])) } else { 4.0 };
                    y[i][k] += g * lr;
                }
            }
        }
    }
    y
}
