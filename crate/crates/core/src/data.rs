//! Datasets and the one-sample-at-a-time stream: MNIST IDX files, seeded
//! per-epoch shuffling, and synthetic linear/logistic streams.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images stored as raw bytes; pixels are scaled by 1/255 on access.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>, classes: usize) -> Result<Self> {
        let images = if rows * cols == 0 {
            0
        } else {
            pixels.len() / (rows * cols)
        };
        if images * rows * cols != pixels.len() || images != labels.len() {
            return Err(Error::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format {
                what: "labels",
                detail: format!("label {bad} outside {classes} classes"),
            });
        }
        Ok(Dataset {
            rows,
            cols,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i).iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Samples whose label is in `keep`, original order preserved.
    pub fn filter_labels(&self, keep: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.label(i))).collect();
        self.select(&idx)
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.rows * self.cols);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            pixels.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels,
            classes: self.classes,
        }
    }
}

pub fn one_hot(class: usize, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[class] = 1.0;
    v
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

fn check_header(path: &Path, buf: &[u8], magic: u32, header: usize) -> Result<()> {
    if buf.len() < 4 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: header,
            found: buf.len(),
        });
    }
    let found = be_u32(buf, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if buf.len() < header {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: header,
            found: buf.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file and its label file into a 10-class dataset.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    check_header(images_path, &img, IMAGES_MAGIC, 16)?;
    let (count, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    let needed = 16 + count * rows * cols;
    if img.len() < needed {
        return Err(Error::TruncatedFile {
            path: images_path.to_path_buf(),
            needed,
            found: img.len(),
        });
    }
    let lab = read_file(labels_path)?;
    check_header(labels_path, &lab, LABELS_MAGIC, 8)?;
    let label_count = be_u32(&lab, 4) as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if lab.len() < 8 + count {
        return Err(Error::TruncatedFile {
            path: labels_path.to_path_buf(),
            needed: 8 + count,
            found: lab.len(),
        });
    }
    Dataset::new(rows, cols, img[16..needed].to_vec(), lab[8..8 + count].to_vec(), 10)
}

/// Loads `train-*` or `t10k-*` files from an MNIST directory.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IMAGES_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(&ds.pixels);
    buf
}

pub fn encode_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(&ds.labels);
    buf
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    std::fs::write(images_path, encode_idx_images(ds)).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, encode_idx_labels(ds)).map_err(|e| Error::io(labels_path, e))
}

/// Fisher–Yates permutation of `0..n` seeded from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub label: usize,
    /// Position in the dataset.
    pub index: usize,
    /// Global step, starting at 0 and increasing across epochs.
    pub step: u64,
}

/// Yields every sample once per epoch in a freshly shuffled order.
pub struct Stream<'a> {
    dataset: &'a Dataset,
    seed: u64,
    epochs: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    step: u64,
    shuffle: bool,
}

impl<'a> Stream<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64, epochs: u64) -> Self {
        Stream {
            dataset,
            seed,
            epochs,
            epoch: 0,
            order: epoch_order(dataset.len(), seed, 0),
            pos: 0,
            step: 0,
            shuffle: true,
        }
    }

    /// Dataset order, no shuffling (used for held-out evaluation).
    pub fn sequential(dataset: &'a Dataset) -> Self {
        let mut s = Stream::new(dataset, 0, 1);
        s.shuffle = false;
        s.order = (0..dataset.len()).collect();
        s
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.dataset.len() as u64
    }
}

impl Iterator for Stream<'_> {
    type Item = StreamSample;

    fn next(&mut self) -> Option<StreamSample> {
        if self.dataset.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.epoch += 1;
            if self.epoch >= self.epochs {
                return None;
            }
            if self.shuffle {
                self.order = epoch_order(self.dataset.len(), self.seed, self.epoch);
            }
            self.pos = 0;
        }
        if self.epoch >= self.epochs {
            return None;
        }
        let index = self.order[self.pos];
        self.pos += 1;
        let label = self.dataset.label(index);
        let sample = StreamSample {
            x: self.dataset.image(index),
            y: one_hot(label, self.dataset.classes()),
            label,
            index,
            step: self.step,
        };
        self.step += 1;
        Some(sample)
    }
}

/// `y = W*·x + N(0, σ²)` with `x ~ U(−1, 1)ⁿ` and `W*` drawn from `U(−1, 1)` per seed.
pub struct SyntheticLinear {
    n_features: usize,
    n_outputs: usize,
    weights: Vec<f64>,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl SyntheticLinear {
    pub fn new(n_features: usize, n_outputs: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if n_features == 0 || n_outputs == 0 {
            return Err(Error::InvalidConfig(
                "synthetic stream needs at least one feature and output".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n_features * n_outputs)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let noise = if noise_std > 0.0 {
            Some(Normal::new(0.0, noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?)
        } else {
            None
        };
        Ok(SyntheticLinear {
            n_features,
            n_outputs,
            weights,
            noise,
            rng,
        })
    }

    /// The true weights, `n_outputs × n_features` row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn draw_x(&mut self) -> Vec<f64> {
        (0..self.n_features).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    fn clean(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_outputs)
            .map(|o| crate::linalg::dot(&self.weights[o * self.n_features..(o + 1) * self.n_features], x))
            .collect()
    }
}

impl Iterator for SyntheticLinear {
    type Item = (Vec<f64>, Vec<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        let x = self.draw_x();
        let mut y = self.clean(&x);
        if let Some(n) = self.noise {
            y.iter_mut().for_each(|v| *v += n.sample(&mut self.rng));
        }
        Some((x, y))
    }
}

/// Classes drawn from `softmax(W*·x)`; yields `(x, one_hot(class))`.
pub struct SyntheticLogistic {
    inner: SyntheticLinear,
}

impl SyntheticLogistic {
    pub fn new(n_features: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(SyntheticLogistic {
            inner: SyntheticLinear::new(n_features, classes, 0.0, seed)?,
        })
    }
}

impl Iterator for SyntheticLogistic {
    type Item = (Vec<f64>, Vec<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        let x = self.inner.draw_x();
        let probs = crate::model::softmax(&self.inner.clean(&x));
        let u: f64 = self.inner.rng.random();
        let mut acc = 0.0;
        let mut class = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = i;
                break;
            }
        }
        Some((x, one_hot(class, probs.len())))
    }
}
