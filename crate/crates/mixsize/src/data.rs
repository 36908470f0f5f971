//! Dataset ingestion (CIFAR binary format plus a synthetic stand-in),
//! the padded-crop-flip augmentation generalized to arbitrary output sides,
//! and batch assembly with per-sample duplicates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::tensor::{resize_plane, Tensor};
use crate::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_LEN: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;

/// Independent RNG stream identifiers. Keeping size sampling, shuffling and
/// augmentation on separate streams means disabling one consumer (say, size
/// sampling) leaves the draws of the others untouched.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SIZE: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_ANALYSIS: u64 = 4;
pub const STREAM_CALIB: u64 = 5;

/// A generator keyed by (seed, stream, index): the triple is packed into the
/// ChaCha key, so every (epoch, step) pair gets its own reproducible stream.
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Per-channel affine normalization constants in the [0,1] pixel domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// The value a zero raw pixel maps to in channel `c`.
    pub fn zero_level(&self, c: usize) -> f64 {
        -self.mean[c] / self.std[c]
    }
}

/// Raw 32×32 RGB images with labels. Pixels stay as bytes; normalization to
/// float happens at batch-assembly time.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    pub classes: usize,
    pub norm: Normalization,
}

impl Dataset {
    fn from_parts(images: Vec<u8>, labels: Vec<u8>, classes: usize) -> Self {
        assert_eq!(images.len(), labels.len() * IMAGE_LEN);
        let norm = compute_normalization(&images);
        Self { images, labels, classes, norm }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Planar R,G,B bytes of image `i`.
    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Image `i` normalized, without augmentation: `(x/255 − mean)/std`.
    pub fn normalized_image<T: Elem>(&self, i: usize) -> Vec<T> {
        let raw = self.raw_image(i);
        let mut out = vec![T::zero(); IMAGE_LEN];
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        for c in 0..3 {
            let mean = self.norm.mean[c];
            let inv_std = 1.0 / self.norm.std[c];
            for p in 0..plane {
                let v = raw[c * plane + p] as f64 / 255.0;
                out[c * plane + p] = T::from_f64((v - mean) * inv_std);
            }
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Same records, different normalization constants (e.g. the train
    /// split's constants applied to the test split).
    pub fn with_norm(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }
}

fn compute_normalization(images: &[u8]) -> Normalization {
    let mut norm = Normalization { mean: [0.0; 3], std: [1.0; 3] };
    if images.is_empty() {
        return norm;
    }
    let n = images.len() / IMAGE_LEN;
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for c in 0..3 {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for img in 0..n {
            let base = img * IMAGE_LEN + c * plane;
            for p in 0..plane {
                let v = images[base + p] as f64 / 255.0;
                sum += v;
                sumsq += v * v;
            }
        }
        let count = (n * plane) as f64;
        let mean = sum / count;
        let var = (sumsq / count - mean * mean).max(0.0);
        norm.mean[c] = mean;
        norm.std[c] = var.sqrt().max(1e-8);
    }
    norm
}

const CIFAR10_RECORD: usize = 1 + IMAGE_LEN;
const CIFAR100_RECORD: usize = 2 + IMAGE_LEN;

fn read_cifar_file(
    path: &Path,
    record_len: usize,
    label_offset: usize,
    classes: usize,
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", path.display()))
    })?;
    if bytes.len() % record_len != 0 {
        return Err(Error::Data(format!(
            "{}: truncated record at byte {} ({} trailing bytes, record length {record_len})",
            path.display(),
            bytes.len() - bytes.len() % record_len,
            bytes.len() % record_len,
        )));
    }
    for (rec, chunk) in bytes.chunks_exact(record_len).enumerate() {
        let label = chunk[label_offset];
        if (label as usize) >= classes {
            return Err(Error::Data(format!(
                "{}: label {label} out of range at byte {}",
                path.display(),
                rec * record_len + label_offset,
            )));
        }
        labels.push(label);
        images.extend_from_slice(&chunk[record_len - IMAGE_LEN..]);
    }
    Ok(())
}

/// Load the standard CIFAR-10 binary batches from `dir`. The test split gets
/// the train split's normalization constants.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            CIFAR10_RECORD, 0, 10,
            &mut images, &mut labels,
        )?;
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no training records", dir.display())));
    }
    let train = Dataset::from_parts(images, labels, 10);

    let mut t_images = Vec::new();
    let mut t_labels = Vec::new();
    read_cifar_file(
        &dir.join("test_batch.bin"),
        CIFAR10_RECORD, 0, 10,
        &mut t_images, &mut t_labels,
    )?;
    let test = Dataset::from_parts(t_images, t_labels, 10).with_norm(train.norm);
    Ok((train, test))
}

/// CIFAR-100: same pixel layout, two label bytes per record (coarse then
/// fine); the fine label is used.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("train.bin"), CIFAR100_RECORD, 1, 100, &mut images, &mut labels)?;
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no training records", dir.display())));
    }
    let train = Dataset::from_parts(images, labels, 100);

    let mut t_images = Vec::new();
    let mut t_labels = Vec::new();
    read_cifar_file(&dir.join("test.bin"), CIFAR100_RECORD, 1, 100, &mut t_images, &mut t_labels)?;
    let test = Dataset::from_parts(t_images, t_labels, 100).with_norm(train.norm);
    Ok((train, test))
}

/// Seeded stratified sample of `n` records (n/classes per class, remainder
/// spread over the lowest class ids). Normalization constants are inherited.
pub fn stratified_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Config(format!(
            "subset size {n} out of range for dataset of {}",
            ds.len()
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for i in 0..ds.len() {
        per_class[ds.label(i)].push(i);
    }
    let base = n / ds.classes;
    let extra = n % ds.classes;
    let mut rng = substream(seed, STREAM_INIT, 0);
    let mut chosen = Vec::with_capacity(n);
    for (c, ids) in per_class.iter_mut().enumerate() {
        let want = base + usize::from(c < extra);
        if want > ids.len() {
            return Err(Error::Config(format!(
                "subset needs {want} of class {c}, dataset has {}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        chosen.extend_from_slice(&ids[..want]);
    }
    chosen.sort_unstable();
    let mut images = Vec::with_capacity(chosen.len() * IMAGE_LEN);
    let mut labels = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        images.extend_from_slice(ds.raw_image(i));
        labels.push(ds.labels[i]);
    }
    Ok(Dataset { images, labels, classes: ds.classes, norm: ds.norm })
}

const SYNTH_SHAPES: usize = 10;

/// Deterministic synthetic classification set: one geometric shape family
/// per class, drawn in a random bright color at a random position over a
/// noisy background. Classes 5-7 are fine textures (stripes, checkerboard)
/// that blur away under heavy downscaling, so accuracy genuinely depends on
/// the evaluation size.
pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > SYNTH_SHAPES {
        return Err(Error::Config(format!(
            "synthetic dataset supports 2..={SYNTH_SHAPES} classes, got {classes}"
        )));
    }
    if n < classes {
        return Err(Error::Config(format!("need n ≥ classes, got n={n} classes={classes}")));
    }
    let mut rng = substream(seed, STREAM_INIT, 1);
    let mut images = vec![0u8; n * IMAGE_LEN];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let class = i % classes;
        labels[i] = class as u8;
        draw_synth_image(&mut images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN], class, &mut rng);
    }
    Ok(Dataset::from_parts(images, labels, classes))
}

/// Train/test pair from disjoint seed streams; the test split inherits the
/// train normalization constants.
pub fn synth_pair(
    n_train: usize,
    n_test: usize,
    classes: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = synth_dataset(n_train, classes, seed)?;
    let test = synth_dataset(n_test, classes, seed.wrapping_add(0x9e37_79b9))?
        .with_norm(train.norm);
    Ok((train, test))
}

fn draw_synth_image(out: &mut [u8], class: usize, rng: &mut ChaCha8Rng) {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    // dim noisy background
    let base: [i32; 3] = [rng.gen_range(20..80), rng.gen_range(20..80), rng.gen_range(20..80)];
    for c in 0..3 {
        for p in 0..plane {
            let v = base[c] + rng.gen_range(-18..=18);
            out[c * plane + p] = v.clamp(0, 255) as u8;
        }
    }
    // bright foreground color, at least one strong channel
    let mut color = [
        rng.gen_range(60..=255) as u8,
        rng.gen_range(60..=255) as u8,
        rng.gen_range(60..=255) as u8,
    ];
    color[rng.gen_range(0..3)] = rng.gen_range(190..=255);

    let mut mask = vec![false; plane];
    let m = |mask: &mut Vec<bool>, x: i32, y: i32| {
        if (0..IMAGE_SIDE as i32).contains(&x) && (0..IMAGE_SIDE as i32).contains(&y) {
            mask[y as usize * IMAGE_SIDE + x as usize] = true;
        }
    };
    match class {
        // filled circle
        0 => {
            let (cx, cy, r) = (rng.gen_range(10..22), rng.gen_range(10..22), rng.gen_range(6..10));
            for y in 0..IMAGE_SIDE as i32 {
                for x in 0..IMAGE_SIDE as i32 {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // ring
        1 => {
            let (cx, cy, r) = (rng.gen_range(10..22), rng.gen_range(10..22), rng.gen_range(7..11));
            let inner = r - 3;
            for y in 0..IMAGE_SIDE as i32 {
                for x in 0..IMAGE_SIDE as i32 {
                    let d2 = (x - cx).pow(2) + (y - cy).pow(2);
                    if d2 <= r * r && d2 > inner * inner {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // filled square
        2 => {
            let (x0, y0, side) = (rng.gen_range(4..16), rng.gen_range(4..16), rng.gen_range(9..15));
            for y in y0..(y0 + side).min(IMAGE_SIDE as i32) {
                for x in x0..(x0 + side).min(IMAGE_SIDE as i32) {
                    m(&mut mask, x, y);
                }
            }
        }
        // square frame
        3 => {
            let (x0, y0, side) = (rng.gen_range(4..14), rng.gen_range(4..14), rng.gen_range(11..17));
            for y in y0..(y0 + side).min(IMAGE_SIDE as i32) {
                for x in x0..(x0 + side).min(IMAGE_SIDE as i32) {
                    let on_border =
                        y - y0 < 2 || x - x0 < 2 || y0 + side - 1 - y < 2 || x0 + side - 1 - x < 2;
                    if on_border {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // filled triangle, apex up
        4 => {
            let (cx, y0, h) = (rng.gen_range(10..22), rng.gen_range(3..12), rng.gen_range(13..19));
            for dy in 0..h {
                let half = dy * 3 / 4 + 1;
                for x in (cx - half)..=(cx + half) {
                    m(&mut mask, x, y0 + dy);
                }
            }
        }
        // horizontal stripes, period 2
        5 => {
            let (x0, y0, side) = (rng.gen_range(3..12), rng.gen_range(3..12), rng.gen_range(14..20));
            for y in y0..(y0 + side).min(IMAGE_SIDE as i32) {
                if (y - y0) % 2 == 0 {
                    for x in x0..(x0 + side).min(IMAGE_SIDE as i32) {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // vertical stripes, period 2
        6 => {
            let (x0, y0, side) = (rng.gen_range(3..12), rng.gen_range(3..12), rng.gen_range(14..20));
            for y in y0..(y0 + side).min(IMAGE_SIDE as i32) {
                for x in x0..(x0 + side).min(IMAGE_SIDE as i32) {
                    if (x - x0) % 2 == 0 {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // checkerboard, period 2
        7 => {
            let (x0, y0, side) = (rng.gen_range(3..12), rng.gen_range(3..12), rng.gen_range(14..20));
            for y in y0..(y0 + side).min(IMAGE_SIDE as i32) {
                for x in x0..(x0 + side).min(IMAGE_SIDE as i32) {
                    if (x + y) % 2 == 0 {
                        m(&mut mask, x, y);
                    }
                }
            }
        }
        // diagonal cross
        8 => {
            let (x0, y0, side) = (rng.gen_range(4..12), rng.gen_range(4..12), rng.gen_range(14..20));
            for d in 0..side {
                for t in -1..=1 {
                    m(&mut mask, x0 + d + t, y0 + d);
                    m(&mut mask, x0 + side - 1 - d + t, y0 + d);
                }
            }
        }
        // plus sign
        _ => {
            let (cx, cy, arm) = (rng.gen_range(10..22), rng.gen_range(10..22), rng.gen_range(7..12));
            for d in -arm..=arm {
                for t in -1..=1 {
                    m(&mut mask, cx + d, cy + t);
                    m(&mut mask, cx + t, cy + d);
                }
            }
        }
    }
    for c in 0..3 {
        for (p, &hit) in mask.iter().enumerate() {
            if hit {
                out[c * plane + p] = color[c];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, flip_prob: 0.5, enabled: true }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Augment image `index` to side `s`, drawing crop offsets then the flip from
/// `rng` (in that fixed order).
pub fn augment<T: Elem>(
    ds: &Dataset,
    index: usize,
    s: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Vec<T> {
    if !cfg.enabled {
        return plain_resized(ds, index, s);
    }
    let cy = rng.gen_range(0..=2 * cfg.pad);
    let cx = rng.gen_range(0..=2 * cfg.pad);
    let flip = rng.gen_bool(cfg.flip_prob);
    augment_forced(ds, index, s, cfg, cy, cx, flip)
}

/// The augmentation pipeline with every random choice pinned: pad with raw
/// zeros, crop 32×32 at (cy, cx), optionally mirror, normalize, resize to s.
/// With pad-centered crop (cy = cx = pad), no flip and s = 32 this is exactly
/// the normalized original.
pub fn augment_forced<T: Elem>(
    ds: &Dataset,
    index: usize,
    s: usize,
    cfg: &AugmentConfig,
    cy: usize,
    cx: usize,
    flip: bool,
) -> Vec<T> {
    let raw = ds.raw_image(index);
    let side = IMAGE_SIDE;
    let padded = side + 2 * cfg.pad;
    let plane = side * side;
    let mut cropped = vec![T::zero(); IMAGE_LEN];
    for c in 0..3 {
        let mean = ds.norm.mean[c];
        let inv_std = 1.0 / ds.norm.std[c];
        for y in 0..side {
            for x in 0..side {
                // coordinates in the zero-padded frame
                let py = cy + y;
                let px = cx + if flip { side - 1 - x } else { x };
                let raw_v = if py >= cfg.pad
                    && py < cfg.pad + side
                    && px >= cfg.pad
                    && px < cfg.pad + side
                {
                    raw[c * plane + (py - cfg.pad) * side + (px - cfg.pad)] as f64 / 255.0
                } else {
                    debug_assert!(py < padded && px < padded);
                    0.0
                };
                cropped[c * plane + y * side + x] = T::from_f64((raw_v - mean) * inv_std);
            }
        }
    }
    if s == side {
        return cropped;
    }
    let mut out = vec![T::zero(); 3 * s * s];
    for c in 0..3 {
        resize_plane(&cropped[c * plane..(c + 1) * plane], side, side, s, s,
            &mut out[c * s * s..(c + 1) * s * s]);
    }
    out
}

/// Normalize and resize without any augmentation.
pub fn plain_resized<T: Elem>(ds: &Dataset, index: usize, s: usize) -> Vec<T> {
    let img = ds.normalized_image::<T>(index);
    if s == IMAGE_SIDE {
        return img;
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = vec![T::zero(); 3 * s * s];
    for c in 0..3 {
        resize_plane(&img[c * plane..(c + 1) * plane], IMAGE_SIDE, IMAGE_SIDE, s, s,
            &mut out[c * s * s..(c + 1) * s * s]);
    }
    out
}

/// Assemble `[B·D, 3, s, s]` from `indices`, each sample duplicated `d` times
/// consecutively with independent augmentation draws.
pub fn make_batch<T: Elem>(
    ds: &Dataset,
    indices: &[usize],
    s: usize,
    d: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if d == 0 {
        return Err(Error::Config("duplicates must be ≥ 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let img_len = 3 * s * s;
    let total = indices.len() * d;
    let mut data = vec![T::zero(); total * img_len];
    let mut labels = Vec::with_capacity(total);
    let mut slot = 0;
    for &idx in indices {
        if idx >= ds.len() {
            return Err(Error::Data(format!(
                "batch index {idx} out of range for dataset of {}",
                ds.len()
            )));
        }
        for _ in 0..d {
            let img = augment::<T>(ds, idx, s, cfg, rng);
            data[slot * img_len..(slot + 1) * img_len].copy_from_slice(&img);
            labels.push(ds.label(idx));
            slot += 1;
        }
    }
    Ok((Tensor::new(&[total, 3, s, s], data)?, labels))
}

/// Batch without augmentation (normalize + direct resize), for calibration
/// oracles and quick evaluation at a size.
pub fn plain_batch<T: Elem>(
    ds: &Dataset,
    indices: &[usize],
    s: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let img_len = 3 * s * s;
    let mut data = vec![T::zero(); indices.len() * img_len];
    let mut labels = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        if idx >= ds.len() {
            return Err(Error::Data(format!(
                "batch index {idx} out of range for dataset of {}",
                ds.len()
            )));
        }
        let img = plain_resized::<T>(ds, idx, s);
        data[slot * img_len..(slot + 1) * img_len].copy_from_slice(&img);
        labels.push(ds.label(idx));
    }
    Ok((Tensor::new(&[indices.len(), 3, s, s], data)?, labels))
}

/// A seeded shuffle of 0..n.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
