//! Datasets: a procedural shape/color set, the 3073-byte tiny-image binary
//! format, stratified subsampling and a deterministic batch stream.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_SIDE: usize = 16;
const TINY_SIDE: usize = 32;
const TINY_RECORD: usize = 1 + 3 * TINY_SIDE * TINY_SIDE;

/// Labeled `N x H x W x 3` images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    fn per_image(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let k = self.per_image();
        &self.images.data()[i * k..(i + 1) * k]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let data = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Dataset {
            images: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        indices.iter().for_each(|&i| c[self.labels[i]] += 1);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    /// Random crop after zero padding by this many pixels.
    pub crop_padding: Option<usize>,
    pub flip: bool,
}

/// Train/test split plus the sampled training subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub test: Dataset,
    pub sample_rate: f64,
    /// Indices into `train` used for training.
    pub train_indices: Vec<usize>,
    pub augment: Augment,
}

impl DatasetHandle {
    pub fn new(train: Dataset, test: Dataset, sample_rate: f64, seed: u64, augment: Augment) -> Result<Self> {
        let train_indices = stratified_sample(&train.labels, train.classes, sample_rate, seed)?;
        Ok(Self {
            train,
            test,
            sample_rate,
            train_indices,
            augment,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }

    /// Builds the dataset a config describes.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let augment = Augment {
            crop_padding: cfg.augment_crop.then_some(cfg.crop_padding),
            flip: cfg.augment_flip,
        };
        let (train, test) = match cfg.data_source {
            DataSource::Synthetic => split_synthetic(cfg.data_count, cfg.data_classes, cfg.data_seed)?,
            DataSource::TinyImage => {
                let path = cfg.data_train_path.as_ref().expect("validated");
                let all = load_tiny_image(path, cfg.data_classes)?;
                match &cfg.data_test_path {
                    Some(t) => (all, load_tiny_image(t, cfg.data_classes)?),
                    None => split_80_20(&all),
                }
            }
        };
        Self::new(train, test, cfg.sample_rate, cfg.seed, augment)
    }
}

const SHAPES: usize = 6;

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => dist <= r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        3 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        4 => dist <= r && dist >= 0.55 * r,
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Foreground color of color group `g`: warm (red dominant) or cool (blue dominant).
fn palette(g: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let j = |rng: &mut ChaCha8Rng, c: f64, w: f64| (c + rng.gen_range(-w..w)).clamp(0.0, 1.0);
    if g == 0 {
        [j(rng, 0.85, 0.1), j(rng, 0.35, 0.15), j(rng, 0.1, 0.1)]
    } else {
        [j(rng, 0.1, 0.1), j(rng, 0.4, 0.15), j(rng, 0.85, 0.1)]
    }
}

/// Shape and color group of a synthetic class.
pub fn synthetic_groups(class: usize) -> (usize, usize) {
    (class / 2, class % 2)
}

/// `n` procedurally rendered 16x16 images. Class `c` draws shape `c / 2`
/// in color group `c % 2`, so color is low-level and shape high-level
/// structure. Image `i` has class `i % k`.
pub fn render_synthetic(n: usize, k: usize, seed: u64) -> Result<Dataset> {
    if k < 2 || k > 2 * SHAPES {
        return Err(Error::Config(format!("synthetic data supports 2..={} classes, got {k}", 2 * SHAPES)));
    }
    let side = SYNTHETIC_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * side * side * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let (shape, group) = synthetic_groups(c);
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.55));
        let fg = palette(group, &mut rng);
        let (cx, cy) = (7.5 + rng.gen_range(-2.5..2.5), 7.5 + rng.gen_range(-2.5..2.5));
        let r = rng.gen_range(3.0..5.0);
        for y in 0..side {
            for x in 0..side {
                let on = inside(shape, x as f64 - cx, y as f64 - cy, r);
                for ch in 0..3 {
                    let base = if on { fg[ch] } else { bg[ch] };
                    data.push((base + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(c);
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, side, side, 3], data),
        labels,
        classes: k,
    })
}

/// Per class: the first 80% (by index) train, the rest test.
pub fn split_80_20(all: &Dataset) -> (Dataset, Dataset) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..all.classes {
        let members: Vec<usize> = (0..all.len()).filter(|&i| all.labels[i] == c).collect();
        let cut = (members.len() as f64 * 0.8).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (all.subset(&train), all.subset(&test))
}

fn split_synthetic(n: usize, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok(split_80_20(&render_synthetic(n, k, seed)?))
}

/// Balanced synthetic set with the fixed 80/20 split and no subsampling.
pub fn gen_synthetic(n: usize, k: usize, seed: u64) -> Result<DatasetHandle> {
    let (train, test) = split_synthetic(n, k, seed)?;
    DatasetHandle::new(train, test, 1.0, seed, Augment::default())
}

/// Deterministic class-stratified subset of `round(rate · N)` indices.
/// Per-class quotas use largest remainders, so balanced classes stay
/// within one of each other.
pub fn stratified_sample(labels: &[usize], classes: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("sample rate must be in (0, 1], got {rate}")));
    }
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
        }
        members[y].push(i);
    }
    let total = (rate * labels.len() as f64).round() as usize;
    let mut quota: Vec<usize> = members.iter().map(|m| (rate * m.len() as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    let frac = |c: usize| rate * members[c].len() as f64 - quota[c] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut missing = total.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(classes * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(total);
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut stream_rng(seed, 1, c as u64));
        out.extend_from_slice(&m[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Independent generator for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Reads `label byte + 3072 channel-planar bytes` records of 32x32 images.
pub fn load_tiny_image(path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % TINY_RECORD != 0 {
        return Err(Error::Shape(format!(
            "{}: {} bytes is not a whole number of {TINY_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / TINY_RECORD;
    let plane = TINY_SIDE * TINY_SIDE;
    let mut data = Vec::with_capacity(n * plane * 3);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(TINY_RECORD) {
        let y = rec[0] as usize;
        if y >= classes {
            return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
        }
        labels.push(y);
        for p in 0..plane {
            for ch in 0..3 {
                data.push(rec[1 + ch * plane + p] as f64 / 255.0);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, TINY_SIDE, TINY_SIDE, 3], data),
        labels,
        classes,
    })
}

/// Zero-pad, crop back to size at `(oy, ox)` and optionally mirror.
fn augment_into(src: &[f64], h: usize, w: usize, pad: usize, oy: usize, ox: usize, flip: bool, out: &mut Vec<f64>) {
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            let (py, px) = ((y + oy) as isize - pad as isize, (sx + ox) as isize - pad as isize);
            if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                out.extend_from_slice(&[0.0; 3]);
            } else {
                let at = (py as usize * w + px as usize) * 3;
                out.extend_from_slice(&src[at..at + 3]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Which images (and augmentations) step `s` sees is a pure function of
/// `(seed, s)`, so a resumed run replays exactly the same batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Augment,
}

impl BatchPlan {
    pub fn from_handle(h: &DatasetHandle, batch_size: usize, seed: u64) -> Self {
        Self {
            indices: h.train_indices.clone(),
            batch_size,
            seed,
            augment: h.augment,
        }
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.indices.clone();
        order.shuffle(&mut stream_rng(self.seed, 2, epoch));
        order
    }

    /// Walks consecutive shuffled epochs of the subset.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.indices.len() as u64;
        let start = step * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + self.batch_size as u64 {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            out.push(cached.as_ref().expect("filled").1[(pos % n) as usize]);
        }
        out
    }

    pub fn batch(&self, data: &Dataset, step: u64) -> Batch {
        let idx = self.batch_indices(step);
        let (h, w) = data.side();
        let mut rng = stream_rng(self.seed, 3, step);
        let mut images = Vec::with_capacity(idx.len() * h * w * 3);
        for &i in &idx {
            let pad = self.augment.crop_padding.unwrap_or(0);
            let (oy, ox) = if pad > 0 {
                (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
            } else {
                (pad, pad)
            };
            let flip = self.augment.flip && rng.gen_bool(0.5);
            augment_into(data.image(i), h, w, pad, oy, ox, flip, &mut images);
        }
        Batch {
            step,
            images: Tensor::from_parts(vec![idx.len(), h, w, 3], images),
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
        }
    }
}

/// Batches for steps `start..end` prepared on a worker thread and handed
/// over through a bounded queue.
pub struct BatchStream {
    rx: Receiver<Batch>,
    worker: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn spawn(plan: BatchPlan, data: Arc<Dataset>, start: u64, end: u64) -> Self {
        let (tx, rx) = sync_channel(4);
        let worker = std::thread::spawn(move || {
            for step in start..end {
                if tx.send(plan.batch(&data, step)).is_err() {
                    break;
                }
            }
        });
        Self { rx, worker: Some(worker) }
    }
}

impl Iterator for BatchStream {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // unblock the worker before joining it
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
