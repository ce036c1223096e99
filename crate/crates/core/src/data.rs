//! Image datasets: CIFAR binary batches, procedurally generated shapes,
//! deterministic splits, normalization and batch assembly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square RGB images stored `[N, H, W, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub tag: String,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.size, self.size, 3], self.image(i).to_vec())
    }

    pub fn subset(&self, indices: &[usize], tag: &str) -> ImageDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageDataset {
            size: self.size,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            tag: tag.to_string(),
        }
    }

    /// Channel statistics of this dataset (compute on the training split).
    pub fn channel_stats(&self) -> Normalization {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for px in self.pixels.chunks(3) {
            for c in 0..3 {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
            }
        }
        let n = (self.pixels.len() / 3) as f64;
        let mut norm = Normalization::identity();
        for c in 0..3 {
            norm.mean[c] = sum[c] / n;
            let var = (sq[c] / n - norm.mean[c] * norm.mean[c]).max(0.0);
            norm.std[c] = var.sqrt().max(1e-6);
        }
        norm
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in self.labels.iter().flatten() {
            h[l] += 1;
        }
        h
    }

    /// Normalized `[B, H, W, 3]` batch, optionally augmented.
    pub fn batch(
        &self,
        indices: &[usize],
        norm: &Normalization,
        augment: Option<(&Augmentation, &mut ChaCha8Rng)>,
    ) -> Tensor {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut aug = augment;
        for &i in indices {
            let mut img: Vec<f64> = self
                .image(i)
                .chunks(3)
                .flat_map(|px| (0..3).map(move |c| (px[c] - norm.mean[c]) / norm.std[c]))
                .collect();
            if let Some((a, rng)) = aug.as_mut() {
                img = a.apply(&img, s, rng);
            }
            data.extend(img);
        }
        Tensor::from_parts(vec![indices.len(), s, s, 3], data)
    }

    pub fn labels_for(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Input(format!("dataset `{}` has no labels", self.tag)))?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    /// Copy with labels randomly permuted among the images.
    pub fn with_shuffled_labels(&self, seed: u64) -> ImageDataset {
        let mut out = self.clone();
        if let Some(l) = out.labels.as_mut() {
            l.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        out
    }
}

/// Random translation by zero-padded crop plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { pad: 4, flip: true }
    }
}

impl Augmentation {
    fn apply(&self, img: &[f64], s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.pad as isize;
        let (oy, ox) = if p > 0 {
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        let flip = self.flip && rng.gen_bool(0.5);
        let mut out = vec![0.0; img.len()];
        for y in 0..s {
            for x in 0..s {
                let sy = y as isize + oy;
                let mut sx = x as isize + ox;
                if flip {
                    sx = s as isize - 1 - sx;
                }
                if sy < 0 || sx < 0 || sy >= s as isize || sx >= s as isize {
                    continue;
                }
                let src = (sy as usize * s + sx as usize) * 3;
                let dst = (y * s + x) * 3;
                out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
            }
        }
        out
    }
}

pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIZE * CIFAR_SIZE;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;

/// Parse one CIFAR-10 binary batch: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes in row-major order.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, path)
}

/// Load standard batch files, each of which must hold exactly 10,000 records.
pub fn load_cifar_batches<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    let mut all: Option<ImageDataset> = None;
    for p in paths {
        let ds = load_cifar_binary(p)?;
        if ds.len() != CIFAR_BATCH_RECORDS {
            return Err(Error::Corrupt(format!(
                "{:?} holds {} records, expected {CIFAR_BATCH_RECORDS}",
                p.as_ref(),
                ds.len()
            )));
        }
        match all.as_mut() {
            None => all = Some(ds),
            Some(acc) => {
                acc.pixels.extend(ds.pixels);
                acc.labels.as_mut().unwrap().extend(ds.labels.unwrap());
            }
        }
    }
    all.ok_or_else(|| Error::Input("no CIFAR batch files given".into()))
}

fn parse_cifar(bytes: &[u8], path: &Path) -> Result<ImageDataset> {
    let plane = CIFAR_SIZE * CIFAR_SIZE;
    let n = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 || n == 0 {
        let offset = (n * CIFAR_RECORD) as u64;
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset,
            expected: CIFAR_RECORD,
        });
    }
    let mut pixels = Vec::with_capacity(n * plane * 3);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Corrupt(format!(
                "label {label} > 9 in record {r} (byte offset {})",
                r * CIFAR_RECORD
            )));
        }
        labels.push(label);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(rec[1 + c * plane + p] as f64 / 255.0);
            }
        }
    }
    Ok(ImageDataset {
        size: CIFAR_SIZE,
        pixels,
        labels: Some(labels),
        num_classes: 10,
        tag: path.display().to_string(),
    })
}

/// Serialize images back into the CIFAR binary layout (pixels are rounded
/// to bytes).
pub fn encode_cifar(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.size != CIFAR_SIZE {
        return Err(Error::Input(format!("CIFAR images are 32×32, got {}", ds.size)));
    }
    let plane = CIFAR_SIZE * CIFAR_SIZE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.label(i).unwrap_or(0) as u8);
        let img = ds.image(i);
        for c in 0..3 {
            for p in 0..plane {
                out.push((img[p * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Shape kinds rendered by [`synth_shapes`], indexed by class. The first
/// three (solid, outline, striped) differ in kind rather than in detail.
pub const SHAPE_KINDS: [&str; 10] = [
    "disc", "frame", "hbars", "rectangle", "cross", "ring", "triangle", "saltire", "diamond", "vbars",
];

fn inside(kind: usize, dx: f64, dy: f64, r: f64, aspect: f64, horizontal: bool) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let t = 0.3 * r;
    match SHAPE_KINDS[kind] {
        "disc" => dx * dx + dy * dy <= r * r,
        "frame" => {
            let m = ax.max(ay);
            m <= r && m >= 0.6 * r
        }
        "hbars" => ax <= r && ((dy - 0.5 * r).abs() <= 0.2 * r || (dy + 0.5 * r).abs() <= 0.2 * r),
        "rectangle" => {
            let (rx, ry) = if horizontal { (r, r * aspect) } else { (r * aspect, r) };
            ax <= rx && ay <= ry
        }
        "cross" => (ax <= t && ay <= r) || (ay <= t && ax <= r),
        "ring" => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        "triangle" => dy <= r && dy >= -r && ax <= (dy + r) / 2.0,
        "saltire" => (ax - ay).abs() <= t && ax.max(ay) <= r,
        "diamond" => ax + ay <= r,
        _ => ay <= r && ((dx - 0.5 * r).abs() <= 0.2 * r || (dx + 0.5 * r).abs() <= 0.2 * r),
    }
}

/// Procedurally rendered shapes: a bright shape of random color, size and
/// position on a dark, shaded, noisy background. Image `i` has class
/// `i % classes`; every shape spans more than half the image.
pub fn synth_shapes(seed: u64, n: usize, size: usize, classes: usize) -> Result<ImageDataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::Config(format!("classes must be in 2..=10, got {classes}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.03..0.32));
        let grad: [f64; 2] = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
        let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
        let r = rng.gen_range(0.28..0.45) * s;
        let cx = rng.gen_range(r * 0.8..s - r * 0.8);
        let cy = rng.gen_range(r * 0.8..s - r * 0.8);
        let aspect = rng.gen_range(0.45..0.75);
        let horizontal = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let noise = rng.gen_range(-0.08..0.08);
                let shade = grad[0] * (px / s - 0.5) + grad[1] * (py / s - 0.5);
                let on = inside(class, px - cx, py - cy, r, aspect, horizontal);
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] + shade };
                    pixels.push((base + noise).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(ImageDataset {
        size,
        pixels,
        labels: Some(labels),
        num_classes: classes,
        tag: format!("synth_shapes(seed={seed})"),
    })
}

/// Exact partition of `0..n` into two index sets: the first holds
/// `round(ratio · n)` items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratio: 0.5, seed: 0 }
    }
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = ((n as f64) * spec.ratio).round() as usize;
    let b = idx.split_off(cut.min(n));
    (idx, b)
}

pub fn split(ds: &ImageDataset, spec: &SplitSpec) -> (ImageDataset, ImageDataset) {
    let (a, b) = split_indices(ds.len(), spec);
    (
        ds.subset(&a, &format!("{}[a]", ds.tag)),
        ds.subset(&b, &format!("{}[b]", ds.tag)),
    )
}

/// Index batches over a shuffled order.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Batches in storage order.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_shapes(4, 100, 16, 3).unwrap();
        let b = synth_shapes(4, 100, 16, 3).unwrap();
        assert_eq!(a, b);
        let h = a.class_histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_shapes(0, 10, 16, 11).is_err());
    }

    #[test]
    fn split_partitions() {
        let (a, b) = split_indices(100, &SplitSpec { ratio: 0.5, seed: 9 });
        assert_eq!((a.len(), b.len()), (50, 50));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn cifar_labels_and_truncation() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 7;
        let ds = parse_cifar(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, Some(vec![0, 7]));
        assert!(ds.image(0).iter().all(|&v| v == 0.0));

        let err = parse_cifar(&bytes[..CIFAR_RECORD + 10], Path::new("mem")).unwrap_err();
        match err {
            Error::Truncated { offset, .. } => assert_eq!(offset, CIFAR_RECORD as u64),
            e => panic!("unexpected {e}"),
        }
        bytes[0] = 12;
        assert!(matches!(parse_cifar(&bytes, Path::new("mem")), Err(Error::Corrupt(_))));
    }

    #[test]
    fn no_augmentation_keeps_pixels() {
        let ds = synth_shapes(1, 2, 16, 2).unwrap();
        let norm = Normalization::identity();
        let aug = Augmentation { pad: 0, flip: false };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = ds.batch(&[1], &norm, Some((&aug, &mut rng)));
        assert_eq!(t.data(), ds.image(1));
    }
}

/// Independent generator for `(seed, stream, index)`, e.g. one per epoch.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream ^ splitmix(index))));
    rng.set_stream(stream);
    rng
}
