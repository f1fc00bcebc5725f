//! In-memory datasets, the synthetic generator and the search split.

use msgdas_core::engine::{Batch, SearchData};
use msgdas_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HarnessError, Result};

/// Images `[N, C, H, W]` and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let (n, ..) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(HarnessError::Config(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(HarnessError::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            num_classes: self.num_classes,
            images: self.images.gather_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn to_batch(&self) -> Result<Batch<f32>> {
        Ok(Batch::new(self.images.clone(), self.labels.clone())?)
    }
}

/// Random halves of equal size for the weight and architecture updates.
/// Needs an even number of images.
pub fn split_equal(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(HarnessError::Config(format!("an equal split needs an even, non-zero size, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n / 2);
    Ok((ds.subset(a), ds.subset(b)))
}

pub fn search_data(ds: &Dataset, seed: u64) -> Result<SearchData<f32>> {
    let (train, val) = split_equal(ds, seed)?;
    Ok(SearchData {
        train: train.to_batch()?,
        val: val.to_batch()?,
    })
}

const SYNTH_CHANNELS: usize = 3;
const SYNTH_AMPLITUDE: f64 = 0.35;
const SYNTH_NOISE: f64 = 1.5;

/// Class-conditional textures: every class owns a fixed low-frequency
/// oriented cosine per channel, and each image adds box-smoothed Gaussian
/// noise and a random per-channel brightness shift. Classes are balanced
/// (the first `n % classes` classes get one extra image) and the order is
/// shuffled.
pub fn gen_synthetic(n: usize, classes: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes || hw == 0 {
        return Err(HarnessError::Config(format!(
            "synthetic data needs n >= classes > 0 and hw > 0 (n {n}, classes {classes}, hw {hw})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = hw * hw;
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut p = Vec::with_capacity(SYNTH_CHANNELS * plane);
            for _ in 0..SYNTH_CHANNELS {
                let (fx, fy) = loop {
                    let f = (rng.gen_range(0..3) as f64, rng.gen_range(0..3) as f64);
                    if f != (0.0, 0.0) {
                        break f;
                    }
                };
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for y in 0..hw {
                    for x in 0..hw {
                        let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / hw as f64;
                        p.push((t + phase).cos());
                    }
                }
            }
            p
        })
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * SYNTH_CHANNELS * plane);
    let mut white = vec![0.0f64; plane];
    for &y in &labels {
        for c in 0..SYNTH_CHANNELS {
            for v in white.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let shift: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
            let pattern = &patterns[y][c * plane..(c + 1) * plane];
            for i in 0..hw {
                for j in 0..hw {
                    let v = SYNTH_AMPLITUDE * pattern[i * hw + j] + SYNTH_NOISE * box3(&white, hw, i, j) + shift;
                    data.push(v as f32);
                }
            }
        }
    }
    let images = Tensor::new(vec![n, SYNTH_CHANNELS, hw, hw], data)?;
    Dataset::new("synthetic", classes, images, labels)
}

/// 3×3 mean with the window clipped at the border.
fn box3(x: &[f64], hw: usize, i: usize, j: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for a in i.saturating_sub(1)..(i + 2).min(hw) {
        for b in j.saturating_sub(1)..(j + 2).min(hw) {
            sum += x[a * hw + b];
            count += 1;
        }
    }
    sum / count as f64
}

/// Test accuracy of multinomial logistic regression on raw pixels, trained
/// by full-batch gradient descent.
pub fn linear_probe_accuracy(train: &Dataset, test: &Dataset, iters: usize, lr: f64) -> f64 {
    let d: usize = train.image_shape().iter().product();
    let c = train.num_classes;
    let mut w = vec![0.0f64; c * d];
    let mut b = vec![0.0f64; c];
    let rows = |ds: &Dataset| -> Vec<Vec<f64>> {
        ds.images.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    let xs = rows(train);
    let scores = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    };
    let n = xs.len() as f64;
    for _ in 0..iters {
        let mut gw = vec![0.0f64; c * d];
        let mut gb = vec![0.0f64; c];
        for (x, &y) in xs.iter().zip(&train.labels) {
            let s = scores(x, &w, &b);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / z - if k == y { 1.0 } else { 0.0 };
                gb[k] += g;
                for (gw, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gw += g * v;
                }
            }
        }
        for (w, g) in w.iter_mut().zip(&gw) {
            *w -= lr * g / n;
        }
        for (b, g) in b.iter_mut().zip(&gb) {
            *b -= lr * g / n;
        }
    }
    let hits = rows(test)
        .iter()
        .zip(&test.labels)
        .filter(|(x, &y)| {
            let s = scores(x, &w, &b);
            let best = (0..c).fold(0, |best, k| if s[k] > s[best] { k } else { best });
            best == y
        })
        .count();
    hits as f64 / test.len() as f64
}
