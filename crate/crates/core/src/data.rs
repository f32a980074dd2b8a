//! Labeled image datasets and the synthetic shape task used at desk scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of pixel `(row, col, channel)` in HWC order.
    pub const fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

/// Images in HWC order, stored contiguously, with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    shape: ImageShape,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn empty(shape: ImageShape, num_classes: usize) -> Self {
        Self {
            shape,
            num_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn new(
        shape: ImageShape,
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self, NnError> {
        if pixels.len() != labels.len() * shape.len() {
            return Err(NnError::Shape {
                expected: labels.len() * shape.len(),
                actual: pixels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(NnError::InvalidLabel {
                label: bad,
                num_classes,
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(NnError::PixelRange);
        }
        Ok(Self {
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image_mut(&mut self, index: usize) -> &mut [f32] {
        let n = self.shape.len();
        &mut self.pixels[index * n..(index + 1) * n]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn set_label(&mut self, index: usize, label: usize) {
        assert!(label < self.num_classes, "label out of range");
        self.labels[index] = label;
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        assert_eq!(image.len(), self.shape.len(), "image shape mismatch");
        assert!(label < self.num_classes, "label out of range");
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape, self.num_classes);
        out.pixels.reserve(indices.len() * self.shape.len());
        for &i in indices {
            out.push(self.image(i), self.label(i));
        }
        out
    }

    /// Samples whose label is `class`, in order.
    pub fn filter_class(&self, class: usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.label(i) == class).collect();
        self.subset(&idx)
    }

    /// Concatenation with the same shape; panics on shape mismatch.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape);
        assert_eq!(self.num_classes, other.num_classes);
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Uniform split into `parts` shards after a seeded shuffle. Shard sizes
    /// differ by at most one.
    pub fn iid_split(&self, parts: usize, seed: u64) -> Vec<Self> {
        assert!(parts >= 1);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        (0..parts)
            .map(|p| {
                let shard: Vec<usize> = idx.iter().copied().skip(p).step_by(parts).collect();
                self.subset(&shard)
            })
            .collect()
    }
}

pub const SHAPES_SIDE: usize = 16;
pub const SHAPES_CLASSES: usize = 10;

/// One of ten stroke templates on a 16x16 canvas. The top-left 5x5 corner
/// is left blank so a corner trigger is a distinct feature.
fn template(class: usize) -> Vec<(i32, i32)> {
    let mut px = Vec::new();
    match class {
        // horizontal bar
        0 => {
            for c in 3..13 {
                px.push((7, c));
                px.push((8, c));
            }
        }
        // vertical bar
        1 => {
            for r in 3..13 {
                px.push((r, 7));
                px.push((r, 8));
            }
        }
        // main diagonal
        2 => {
            for i in 6..15 {
                px.push((i, i));
                px.push((i, i - 1));
            }
        }
        // anti-diagonal
        3 => {
            for i in 2..12 {
                px.push((i, 14 - i));
                px.push((i, 13 - i));
            }
        }
        // square outline
        4 => {
            for i in 6..14 {
                px.push((6, i));
                px.push((13, i));
                px.push((i, 6));
                px.push((i, 13));
            }
        }
        // filled centre block
        5 => {
            for r in 6..11 {
                for c in 6..11 {
                    px.push((r, c));
                }
            }
        }
        // ring
        6 => {
            for r in 0..16 {
                for c in 0..16 {
                    let d2 = (r - 9) * (r - 9) + (c - 9) * (c - 9);
                    if (9..=20).contains(&d2) {
                        px.push((r, c));
                    }
                }
            }
        }
        // X
        7 => {
            for i in 6..14 {
                px.push((i, i));
                px.push((i, 19 - i));
            }
        }
        // T
        8 => {
            for c in 4..13 {
                px.push((6, c));
            }
            for r in 6..14 {
                px.push((r, 8));
            }
        }
        // L
        9 => {
            for r in 6..14 {
                px.push((r, 6));
            }
            for c in 6..14 {
                px.push((13, c));
            }
        }
        _ => unreachable!("class out of range"),
    }
    px
}

/// Generates `n` 16x16 grayscale samples, classes assigned round-robin and
/// then shuffled. Each sample is its class template, shifted by up to one
/// pixel, scaled in intensity, and overlaid with clipped Gaussian noise.
pub fn synthetic_shapes(n: usize, noise: f32, seed: u64) -> LabeledDataset {
    let shape = ImageShape::new(SHAPES_SIDE, SHAPES_SIDE, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, noise.max(0.0)).expect("non-negative noise");
    let templates: Vec<Vec<(i32, i32)>> = (0..SHAPES_CLASSES).map(template).collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % SHAPES_CLASSES).collect();
    labels.shuffle(&mut rng);

    let mut pixels = Vec::with_capacity(n * shape.len());
    let mut img = vec![0.0f32; shape.len()];
    for &label in &labels {
        img.iter_mut().for_each(|p| *p = 0.0);
        let dr = rng.random_range(-1..=1);
        let dc = rng.random_range(-1..=1);
        let intensity = rng.random_range(0.6f32..=1.0);
        for &(r, c) in &templates[label] {
            let (r, c) = (r + dr, c + dc);
            if (0..SHAPES_SIDE as i32).contains(&r) && (0..SHAPES_SIDE as i32).contains(&c) {
                img[shape.offset(r as usize, c as usize, 0)] = intensity;
            }
        }
        for p in img.iter_mut() {
            *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
        pixels.extend_from_slice(&img);
    }
    LabeledDataset::new(shape, SHAPES_CLASSES, pixels, labels).expect("generator invariants")
}
