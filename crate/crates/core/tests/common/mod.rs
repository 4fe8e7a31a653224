#![allow(dead_code)]

use unlearn_guard::models::TrainConfig;
use unlearn_guard::numkit::{euclidean, SeededRng};
use unlearn_guard::pipeline::PipelineConfig;
use unlearn_guard::simcond::AlphaMode;
use unlearn_guard::{Matrix, RawDataset};

pub const BLOB_CLASSES: usize = 5;
pub const BLOB_PER_CLASS: usize = 200;
pub const BLOB_DIMS: usize = 8;
pub const BLOB_SPREAD: f64 = 0.5;

pub fn blobs(seed: u64) -> RawDataset {
    unlearn_guard::data::synth_blobs(BLOB_CLASSES, BLOB_PER_CLASS, BLOB_DIMS, BLOB_SPREAD, seed).unwrap()
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 10, lr: 0.1, batch_size: 32, seed, shuffle: true }
}

pub fn pipeline_config(seed: u64) -> PipelineConfig {
    PipelineConfig { hidden_dim: 16, train: train_config(seed), init_seed: seed, alpha_mode: AlphaMode::PerSample }
}

/// Cosine recomputed from raw rows, sharing no code with the library.
pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return -1.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn random_rows(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    Matrix::from_vec(n, d, data).unwrap()
}

/// Rows clustered around `classes` random centers, so similar pairs exist.
pub fn clustered_rows(rng: &mut SeededRng, n: usize, d: usize, classes: usize) -> (Matrix, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        // Some rows are pulled toward another class's center.
        let other = rng.below(classes);
        let mix = if rng.unit() < 0.2 { 0.5 } else { 0.0 };
        for j in 0..d {
            data.push((1.0 - mix) * centers[c][j] + mix * centers[other][j] + 0.6 * rng.normal());
        }
        labels.push(c);
    }
    (Matrix::from_vec(n, d, data).unwrap(), labels)
}

/// Random disjoint split of `0..n` into (requests, remaining).
pub fn random_split(rng: &mut SeededRng, n: usize, requests: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ids);
    let mut d_u = ids[..requests].to_vec();
    let mut d_r = ids[requests..].to_vec();
    d_u.sort_unstable();
    d_r.sort_unstable();
    (d_u, d_r)
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    euclidean(a, b)
}
