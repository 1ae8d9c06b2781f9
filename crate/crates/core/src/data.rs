//! Seeded synthetic image classification tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Two classes: one compact bright blob vs. a wide dim blob of equal mass.
    Blobs,
    /// Four classes: a bar at 0, 45, 90 or 135 degrees.
    Bars,
    /// Two classes: two dots three pixels apart, side by side or stacked.
    DotPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub samples: usize,
    pub image_size: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self.generator {
            Generator::Blobs => 2,
            Generator::Bars => 4,
            Generator::DotPairs => 2,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let k = self.num_classes();
        let min_size = if self.generator == Generator::DotPairs { 5 } else { 3 };
        if self.samples < k || self.image_size < min_size {
            return Err(Error::contract(format!(
                "dataset needs at least {k} samples and {min_size}x{min_size} images, got {} and {}",
                self.samples, self.image_size
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::contract(format!("noise must be nonnegative, got {}", self.noise)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.image_size;
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut images = Vec::with_capacity(self.samples * s * s);
        for &label in &labels {
            let mut img = match self.generator {
                Generator::Blobs => blob(&mut rng, s, label),
                Generator::Bars => bar(&mut rng, s, label),
                Generator::DotPairs => dot_pair(&mut rng, s, label),
            };
            if self.noise > 0.0 {
                img.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
            }
            images.extend(img);
        }
        Ok(Dataset { images, labels, channels: 1, size: s, num_classes: k })
    }
}

fn blob(rng: &mut ChaCha8Rng, s: usize, label: usize) -> Vec<f64> {
    let sigma = if label == 0 { 0.6 } else { 1.6 };
    let margin = (s as f64) * 0.25;
    let cy = rng.random_range(margin..s as f64 - margin);
    let cx = rng.random_range(margin..s as f64 - margin);
    let mut img: Vec<f64> = (0..s * s)
        .map(|p| {
            let (y, x) = ((p / s) as f64, (p % s) as f64);
            (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mass: f64 = img.iter().sum();
    img.iter_mut().for_each(|p| *p *= 4.0 / mass);
    img
}

fn bar(rng: &mut ChaCha8Rng, s: usize, label: usize) -> Vec<f64> {
    let (dy, dx): (f64, f64) = match label {
        0 => (0.0, 1.0),
        1 => (1.0, 1.0),
        2 => (1.0, 0.0),
        _ => (1.0, -1.0),
    };
    let norm = (dy * dy + dx * dx).sqrt();
    let (dy, dx) = (dy / norm, dx / norm);
    let half = (s as f64) * 0.3;
    let cy = rng.random_range(half * 0.8..s as f64 - 1.0 - half * 0.8);
    let cx = rng.random_range(half * 0.8..s as f64 - 1.0 - half * 0.8);
    let mut img = vec![0.0; s * s];
    for (p, v) in img.iter_mut().enumerate() {
        let (y, x) = ((p / s) as f64 - cy, (p % s) as f64 - cx);
        let along = y * dy + x * dx;
        let across = y * dx - x * dy;
        if along.abs() <= half {
            *v = (-across * across / 0.5).exp();
        }
    }
    img
}

const PAIR_OFFSET: usize = 3;

fn dot_pair(rng: &mut ChaCha8Rng, s: usize, label: usize) -> Vec<f64> {
    let (dy, dx) = if label == 0 { (0, PAIR_OFFSET) } else { (PAIR_OFFSET, 0) };
    let y = rng.random_range(0..s - dy);
    let x = rng.random_range(0..s - dx);
    let mut img = vec![0.0; s * s];
    img[y * s + x] = 1.0;
    img[(y + dy) * s + x + dx] = 1.0;
    img
}

/// Single-channel images with integer labels, stored NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, channels: usize, size: usize, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() * channels * size * size {
            return Err(Error::dim("dataset", format!("{} values for {} images", images.len(), labels.len())));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::contract("label out of range"));
        }
        Ok(Dataset { images, labels, channels, size, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn plane(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.plane()..(i + 1) * self.plane()]
    }

    /// The samples at `idx` as an `[n, C, H, W]` tensor plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let data = idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let t = Tensor::new(vec![idx.len(), self.channels, self.size, self.size], data).expect("consistent plane size");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (t, labels) = self.batch(idx);
        Dataset { images: t.into_data(), labels, ..*self }
    }

    /// Fraction of samples in the most common class.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    /// Consecutive batches of a seeded permutation; the last may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Seeded disjoint split, stratified by class: within each class the first
/// `fraction` of a permutation trains.
pub fn make_splits(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let (train, val) = split_indices(&data.labels, fraction, seed);
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!("split of {} samples at {fraction} leaves a side empty", data.len())));
    }
    Ok((data.subset(&train), data.subset(&val)))
}

pub fn split_indices(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let cut = ((members.len() as f64) * fraction).round() as usize;
        val.extend(members.split_off(cut.min(members.len())));
        train.extend(members);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: Generator, samples: usize) -> DatasetSpec {
        DatasetSpec { generator, samples, image_size: 8, noise: 0.05, seed: 4 }
    }

    #[test]
    fn balanced_and_deterministic() {
        for g in [Generator::Blobs, Generator::Bars, Generator::DotPairs] {
            let d = spec(g, 40).generate().unwrap();
            assert_eq!(d.len(), 40);
            assert_eq!(d.majority_rate(), 1.0 / d.num_classes as f64);
            assert_eq!(d, spec(g, 40).generate().unwrap());
        }
    }

    #[test]
    fn blob_classes_share_mass() {
        let d = DatasetSpec { noise: 0.0, ..spec(Generator::Blobs, 20) }.generate().unwrap();
        for i in 0..d.len() {
            assert!((d.image(i).iter().sum::<f64>() - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dot_pairs_are_three_apart() {
        let d = DatasetSpec { noise: 0.0, ..spec(Generator::DotPairs, 20) }.generate().unwrap();
        for i in 0..d.len() {
            let on: Vec<usize> = (0..64).filter(|&p| d.image(i)[p] == 1.0).collect();
            assert_eq!(on.len(), 2);
            let step = if d.labels[i] == 0 { 3 } else { 24 };
            assert_eq!(on[1] - on[0], step);
        }
    }

    #[test]
    fn splits() {
        let d = spec(Generator::Blobs, 100).generate().unwrap();
        let (a, b) = split_indices(&d.labels, 0.5, 9);
        assert_eq!((a.len(), b.len()), (50, 50));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(&d.labels, 0.5, 9), (a, b));
        let (tr, va) = make_splits(&d, 0.5, 9).unwrap();
        assert_eq!(tr.len() + va.len(), 100);
        assert_eq!(va.majority_rate(), 0.5);
        assert!(make_splits(&d, 1.0, 9).is_err());
        assert!(make_splits(&d, 0.001, 9).is_err());
    }
}
