//! Dataset loading, preprocessing and deterministic batching.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageSlice, LabelMask, NUM_LABELS};
use crate::imageio::{self, Raster};
use crate::manifest::{resolve, DatasetManifest, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static MASK_READS: Cell<[u64; 2]> = const { Cell::new([0, 0]) };
}

fn domain_slot(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Number of mask accesses made on this thread for samples of `domain`.
pub fn mask_reads(domain: Domain) -> u64 {
    MASK_READS.with(|c| c.get()[domain_slot(domain)])
}

/// Snapshot of the mask-read counters; `since` reports reads made after it.
#[derive(Clone, Copy, Debug)]
pub struct MaskReadProbe {
    start: [u64; 2],
}

impl MaskReadProbe {
    pub fn start() -> Self {
        Self { start: MASK_READS.with(Cell::get) }
    }

    pub fn since(&self, domain: Domain) -> u64 {
        mask_reads(domain) - self.start[domain_slot(domain)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageSlice,
    mask: Option<LabelMask>,
    pub patient_id: u32,
    pub slice_index: u32,
    pub domain: Domain,
}

impl Sample {
    pub fn new(image: ImageSlice, mask: Option<LabelMask>, patient_id: u32, slice_index: u32) -> Result<Self> {
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::Shape(format!(
                    "mask {}x{} vs image {}x{}",
                    m.height, m.width, image.height, image.width
                )));
            }
        }
        let domain = image.domain;
        Ok(Self { image, mask, patient_id, slice_index, domain })
    }

    /// Label mask, if any. Every call is recorded against the sample's domain.
    pub fn mask(&self) -> Option<&LabelMask> {
        MASK_READS.with(|c| {
            let mut v = c.get();
            v[domain_slot(self.domain)] += 1;
            c.set(v);
        });
        self.mask.as_ref()
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest_path: PathBuf,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, manifest_path: PathBuf) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = (first.image.height, first.image.width);
            if let Some(bad) = samples.iter().find(|s| (s.image.height, s.image.width) != shape) {
                return Err(Error::Shape(format!(
                    "sample p{} s{} is {}x{}, expected {}x{}",
                    bad.patient_id, bad.slice_index, bad.image.height, bad.image.width, shape.0, shape.1
                )));
            }
        }
        Ok(Self { samples, manifest_path })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Side length shared by all samples.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.height)
    }

    pub fn require_masks(&self) -> Result<()> {
        match self.samples.iter().find(|s| !s.has_mask()) {
            Some(s) => Err(Error::validation(
                "dataset",
                format!("{}: sample p{} s{} has no mask", self.manifest_path.display(), s.patient_id, s.slice_index),
            )),
            None => Ok(()),
        }
    }
}

/// Loads and preprocesses every entry of a manifest to `image_size` pixels.
pub fn load_dataset(manifest_path: &Path, require_masks: bool, image_size: usize) -> Result<Dataset> {
    load(manifest_path, require_masks, true, image_size)
}

/// Like [`load_dataset`] but never opens mask files.
pub fn load_unlabeled(manifest_path: &Path, image_size: usize) -> Result<Dataset> {
    load(manifest_path, false, false, image_size)
}

fn load(manifest_path: &Path, require_masks: bool, read_masks: bool, image_size: usize) -> Result<Dataset> {
    let path = DatasetManifest::locate(manifest_path);
    let manifest = DatasetManifest::load(&path)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let raw = imageio::read_gray(&resolve(&path, &e.image_path))?;
        let image = preprocess(&raw, image_size, e.domain)?;
        let mask = match &e.mask_path {
            Some(_) if !read_masks => None,
            Some(mp) => {
                let full = resolve(&path, mp);
                let raw = imageio::read_mask(&full)?;
                let m = preprocess_mask(&raw, image_size).map_err(|err| match err {
                    Error::Validation { reason, .. } => Error::validation(full.display().to_string(), reason),
                    other => other,
                })?;
                Some(m)
            }
            None if require_masks => {
                return Err(Error::validation(
                    "mask_path",
                    format!("{}: entry p{} s{} has no mask", path.display(), e.patient_id, e.slice_index),
                ))
            }
            None => None,
        };
        samples.push(Sample::new(image, mask, e.patient_id, e.slice_index)?);
    }
    Dataset::from_samples(samples, path)
}

/// Output size after scaling the short side to `target`, and the crop offsets.
fn resize_plan(h: usize, w: usize, target: usize) -> ((usize, usize), (usize, usize)) {
    let short = h.min(w) as f64;
    let scaled = |n: usize| ((n as f64 * target as f64 / short).round() as usize).max(target);
    let (sh, sw) = (scaled(h), scaled(w));
    ((sh, sw), ((sh - target) / 2, (sw - target) / 2))
}

/// Source coordinate and blend weight for output index `i` (half-pixel centers).
fn bilinear_tap(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Min-max rescale to `[-1, 1]`, bilinear resize of the short side to
/// `target_size`, then center crop.
pub fn preprocess(raw: &Raster<f32>, target_size: usize, domain: Domain) -> Result<ImageSlice> {
    let (h, w) = (raw.height, raw.width);
    if h == 0 || w == 0 || raw.pixels.len() != h * w {
        return Err(Error::validation("image", format!("{}x{} raster with {} pixels", h, w, raw.pixels.len())));
    }
    if target_size == 0 {
        return Err(Error::validation("image_size", "must be positive"));
    }
    if raw.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("image", "non-finite pixel values"));
    }
    let (lo, hi) = raw
        .pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if lo == hi {
        return ImageSlice::new(target_size, target_size, vec![0.0; target_size * target_size], domain);
    }
    let norm: Vec<f64> = raw.pixels.iter().map(|&v| 2.0 * (v as f64 - lo) / (hi - lo) - 1.0).collect();

    let ((sh, sw), (oy, ox)) = resize_plan(h, w, target_size);
    // rows first: (h, w) -> (h, target) over cropped columns
    let cols: Vec<(usize, usize, f64)> = (ox..ox + target_size).map(|x| bilinear_tap(x, w, sw)).collect();
    let mut tmp = vec![0.0; h * target_size];
    for y in 0..h {
        let row = &norm[y * w..(y + 1) * w];
        for (j, &(x0, x1, t)) in cols.iter().enumerate() {
            tmp[y * target_size + j] = row[x0] * (1.0 - t) + row[x1] * t;
        }
    }
    let mut out = vec![0.0f32; target_size * target_size];
    for (i, y) in (oy..oy + target_size).enumerate() {
        let (y0, y1, t) = bilinear_tap(y, h, sh);
        for j in 0..target_size {
            let v = tmp[y0 * target_size + j] * (1.0 - t) + tmp[y1 * target_size + j] * t;
            out[i * target_size + j] = v.clamp(-1.0, 1.0) as f32;
        }
    }
    ImageSlice::new(target_size, target_size, out, domain)
}

/// Nearest-neighbor counterpart of [`preprocess`] for label masks.
pub fn preprocess_mask(raw: &Raster<u8>, target_size: usize) -> Result<LabelMask> {
    let (h, w) = (raw.height, raw.width);
    if h == 0 || w == 0 || raw.pixels.len() != h * w {
        return Err(Error::validation("mask", format!("{}x{} raster with {} pixels", h, w, raw.pixels.len())));
    }
    if let Some(&bad) = raw.pixels.iter().find(|&&l| l >= NUM_LABELS) {
        return Err(Error::validation("mask", format!("label {bad} outside {{0,1,2,3}}")));
    }
    let ((sh, sw), (oy, ox)) = resize_plan(h, w, target_size);
    let nearest = |i: usize, n_in: usize, n_out: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let xs: Vec<usize> = (ox..ox + target_size).map(|x| nearest(x, w, sw)).collect();
    let mut out = Vec::with_capacity(target_size * target_size);
    for y in oy..oy + target_size {
        let row = &raw.pixels[nearest(y, h, sh) * w..];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    LabelMask::new(target_size, target_size, out)
}

/// One mini-batch: images as a `(B, 1, S, S)` tensor and, when requested,
/// the matching labels flattened in the same order.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Option<Vec<u8>>,
    pub domain: Domain,
    pub indices: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic permutation of `0..n` for `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub struct BatchIter<'a, T> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    with_masks: bool,
    _scalar: std::marker::PhantomData<T>,
}

/// Iterates over one shuffled epoch; the final batch may be short.
pub fn batch_iterator<T: Scalar>(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<BatchIter<'_, T>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(BatchIter {
        dataset,
        order: epoch_permutation(dataset.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
        with_masks: false,
        _scalar: std::marker::PhantomData,
    })
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    /// Also emit labels; fails on the first sample without a mask.
    pub fn with_masks(mut self) -> Result<Self> {
        self.dataset.require_masks()?;
        self.with_masks = true;
        Ok(self)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<'a, T: Scalar> Iterator for BatchIter<'a, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(make_batch(self.dataset, &indices, self.with_masks))
    }
}

/// Stacks the given samples; masks are read only when `with_masks` is set.
pub fn make_batch<T: Scalar>(dataset: &Dataset, indices: &[usize], with_masks: bool) -> Batch<T> {
    let first = &dataset.samples[indices[0]];
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(indices.len() * h * w);
    let mut labels = with_masks.then(|| Vec::with_capacity(indices.len() * h * w));
    for &i in indices {
        let s = &dataset.samples[i];
        data.extend(s.image.pixels.iter().map(|&p| T::c(p as f64)));
        if let Some(l) = labels.as_mut() {
            l.extend_from_slice(&s.mask().expect("masks checked").labels);
        }
    }
    Batch {
        images: Tensor::from_vec(&[indices.len(), 1, h, w], data).expect("consistent sample shapes"),
        masks: labels,
        domain: first.domain,
        indices: indices.to_vec(),
    }
}
