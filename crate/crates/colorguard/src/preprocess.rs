//! Resize, min-max normalize, shuffle: the preprocessing contract applied to
//! every image before it reaches the model, plus the batching pipeline with
//! cache and prefetch knobs.
//!
//! The knobs never change semantics: for a fixed shuffle seed the emitted
//! batches are byte-identical whatever the cache, prefetch, or worker
//! configuration.

use std::sync::mpsc;
use std::sync::{Arc, OnceLock};
use std::thread;

use image::RgbImage;
use ndarray::{Array4, ArrayViewMut3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DatasetManifest, SampleRecord};
use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("failed to decode '{path}': {message}")]
    Decode { path: String, message: String },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch size: {0}")]
    InvalidBatchSize(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Normalization scale that maps 8-bit pixels onto [0, 1].
pub const DEFAULT_SCALE: f32 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    /// Min-max normalization factor applied to raw 8-bit values.
    pub scale: f32,
    pub shuffle_seed: u64,
    /// 0 means a full-epoch permutation; otherwise a windowed shuffle over a
    /// buffer of this many records.
    pub shuffle_buffer: usize,
    /// Keep decoded+resized images in memory across epochs.
    pub cache_enabled: bool,
    /// Number of batches decoded ahead of the consumer (0 = synchronous).
    pub prefetch_depth: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_height: 224,
            target_width: 224,
            scale: DEFAULT_SCALE,
            shuffle_seed: 0,
            shuffle_buffer: 0,
            cache_enabled: true,
            prefetch_depth: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(PipelineError::InvalidConfig(
                "target dimensions must be positive".into(),
            ));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(PipelineError::InvalidConfig("scale must be positive".into()));
        }
        // Keep normalized pixels inside [0, 1].
        if self.scale * 255.0 > 1.0 + 1e-6 {
            return Err(PipelineError::InvalidConfig(format!(
                "scale {} maps 8-bit pixels outside [0, 1]",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Plain bilinear resize to the configured target size; aspect ratio is not
/// preserved. Resizing to the source size is an exact identity, and a 1x1
/// source extends to a constant image.
pub fn resize(image: &RgbImage, cfg: &PreprocessConfig) -> RgbImage {
    resize_to(image, cfg.target_width as u32, cfg.target_height as u32)
}

fn resize_to(image: &RgbImage, dst_w: u32, dst_h: u32) -> RgbImage {
    let (src_w, src_h) = image.dimensions();
    if (src_w, src_h) == (dst_w, dst_h) {
        return image.clone();
    }
    let scale_x = src_w as f32 / dst_w as f32;
    let scale_y = src_h as f32 / dst_h as f32;
    let src = image.as_raw();
    let row = (src_w * 3) as usize;

    let mut out = vec![0u8; (dst_w * dst_h * 3) as usize];
    for y in 0..dst_h {
        let sy = ((y as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h as usize - 1);
        let fy = sy - y0 as f32;
        for x in 0..dst_w {
            let sx = ((x as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w as usize - 1);
            let fx = sx - x0 as f32;
            let idx = ((y * dst_w + x) * 3) as usize;
            for c in 0..3 {
                let p00 = src[y0 * row + x0 * 3 + c] as f32;
                let p10 = src[y0 * row + x1 * 3 + c] as f32;
                let p01 = src[y1 * row + x0 * 3 + c] as f32;
                let p11 = src[y1 * row + x1 * 3 + c] as f32;
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                let v = top + (bottom - top) * fy;
                out[idx + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(dst_w, dst_h, out).expect("sized buffer")
}

/// Min-max normalization: `out = in * scale`, total on 8-bit input.
pub fn normalize(image: &RgbImage, cfg: &PreprocessConfig) -> ndarray::Array3<f32> {
    let (w, h) = image.dimensions();
    let mut out = ndarray::Array3::zeros((h as usize, w as usize, 3));
    normalize_into(image.as_raw(), cfg.scale, out.view_mut());
    out
}

fn normalize_into(raw: &[u8], scale: f32, mut dst: ArrayViewMut3<'_, f32>) {
    let flat = dst.as_slice_mut().expect("contiguous batch slot");
    debug_assert_eq!(flat.len(), raw.len());
    for (d, &s) in flat.iter_mut().zip(raw) {
        *d = s as f32 * scale;
    }
}

/// One preprocessed batch: pixels in `[batch, height, width, 3]` scaled to
/// [0, 1], labels encoded natural=0 / colorized=1.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pixels: Array4<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

type CachedImage = Arc<Vec<u8>>;

/// A deterministic batch stream over a manifest.
///
/// Each epoch visits every record exactly once in a permutation fixed by
/// `(shuffle_seed, epoch)`. Decoding may fan out over worker threads and
/// prefetch ahead of the consumer; batch content and order never depend on
/// either. Cloning the pipeline (or asking for the same epoch again) yields an
/// identical stream.
pub struct Pipeline {
    manifest: Arc<DatasetManifest>,
    cfg: PreprocessConfig,
    batch_size: usize,
    cache: Option<Arc<Vec<OnceLock<CachedImage>>>>,
}

impl Pipeline {
    pub fn new(
        manifest: DatasetManifest,
        cfg: PreprocessConfig,
        batch_size: usize,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if batch_size == 0 {
            return Err(PipelineError::InvalidBatchSize(batch_size));
        }
        manifest.validate()?;
        let cache = cfg
            .cache_enabled
            .then(|| Arc::new((0..manifest.len()).map(|_| OnceLock::new()).collect::<Vec<_>>()));
        Ok(Pipeline {
            manifest: Arc::new(manifest),
            cfg,
            batch_size,
            cache,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_records(&self) -> usize {
        self.manifest.len()
    }

    pub fn num_batches(&self) -> usize {
        self.num_records().div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// The record visit order for an epoch. Full Fisher-Yates permutation when
    /// the manifest fits the shuffle buffer (or the buffer is 0), otherwise a
    /// windowed shuffle over `shuffle_buffer` records.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<usize> {
        let n = self.manifest.len();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(self.cfg.shuffle_seed, epoch as u64));
        let buffer = self.cfg.shuffle_buffer;
        if buffer == 0 || buffer >= n {
            let mut indices: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                indices.swap(i, j);
            }
            indices
        } else {
            // Windowed shuffle: keep a buffer of `buffer` records, emit a
            // random occupant as each new record arrives, then drain.
            let mut out = Vec::with_capacity(n);
            let mut window: Vec<usize> = Vec::with_capacity(buffer + 1);
            for idx in 0..n {
                window.push(idx);
                if window.len() > buffer {
                    let j = rng.gen_range(0..window.len());
                    out.push(window.swap_remove(j));
                }
            }
            while !window.is_empty() {
                let j = rng.gen_range(0..window.len());
                out.push(window.swap_remove(j));
            }
            out
        }
    }

    /// Decodes, resizes, and normalizes one epoch into batches. With
    /// `prefetch_depth > 0` decoding runs on a background thread, overlapping
    /// with consumption.
    pub fn iter_epoch(&self, epoch: usize) -> BatchIter {
        let order = self.epoch_indices(epoch);
        let worker = EpochWorker {
            manifest: Arc::clone(&self.manifest),
            cfg: self.cfg.clone(),
            cache: self.cache.clone(),
            batch_size: self.batch_size,
            order,
        };

        if self.cfg.prefetch_depth == 0 {
            return BatchIter::Sync { worker, cursor: 0 };
        }

        let (tx, rx) = mpsc::sync_channel(self.cfg.prefetch_depth);
        let handle = thread::spawn(move || {
            let mut cursor = 0;
            while let Some(batch) = worker.next_batch(&mut cursor) {
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        BatchIter::Prefetched {
            rx,
            _handle: handle,
        }
    }
}

pub struct EpochWorker {
    manifest: Arc<DatasetManifest>,
    cfg: PreprocessConfig,
    cache: Option<Arc<Vec<OnceLock<CachedImage>>>>,
    batch_size: usize,
    order: Vec<usize>,
}

impl EpochWorker {
    fn decode_record(&self, idx: usize) -> Result<CachedImage, PipelineError> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache[idx].get() {
                return Ok(Arc::clone(hit));
            }
        }
        let record: &SampleRecord = &self.manifest.records[idx];
        let path = self.manifest.resolve_path(record);
        let decoded = image::open(&path).map_err(|e| PipelineError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = match decoded {
            image::DynamicImage::ImageRgb8(img) => img,
            image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageLumaA8(_) => {
                return Err(PipelineError::Decode {
                    path: path.display().to_string(),
                    message: "expected a 3-channel image".into(),
                })
            }
            other => other.to_rgb8(),
        };
        let resized = Arc::new(resize(&rgb, &self.cfg).into_raw());
        if let Some(cache) = &self.cache {
            // A racing worker may have filled the slot; both computed the same
            // bytes, so whichever lands first wins.
            let _ = cache[idx].set(Arc::clone(&resized));
        }
        Ok(resized)
    }

    fn next_batch(&self, cursor: &mut usize) -> Option<Result<Batch, PipelineError>> {
        if *cursor >= self.order.len() {
            return None;
        }
        let end = (*cursor + self.batch_size).min(self.order.len());
        let chunk = &self.order[*cursor..end];
        *cursor = end;

        let decoded: Result<Vec<CachedImage>, PipelineError> = chunk
            .par_iter()
            .map(|&idx| self.decode_record(idx))
            .collect();
        let decoded = match decoded {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };

        let (h, w) = (self.cfg.target_height, self.cfg.target_width);
        let mut pixels = Array4::zeros((chunk.len(), h, w, 3));
        for (slot, raw) in decoded.iter().enumerate() {
            normalize_into(raw, self.cfg.scale, pixels.index_axis_mut(ndarray::Axis(0), slot));
        }
        let labels = chunk
            .iter()
            .map(|&idx| self.manifest.records[idx].label.class_index())
            .collect();
        Some(Ok(Batch { pixels, labels }))
    }
}

pub enum BatchIter {
    Sync {
        worker: EpochWorker,
        cursor: usize,
    },
    Prefetched {
        rx: mpsc::Receiver<Result<Batch, PipelineError>>,
        _handle: thread::JoinHandle<()>,
    },
}

impl Iterator for BatchIter {
    type Item = Result<Batch, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            BatchIter::Sync { worker, cursor } => worker.next_batch(cursor),
            BatchIter::Prefetched { rx, .. } => rx.recv().ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, Label, Split};
    use std::path::PathBuf;

    fn small_corpus(groups: usize, seed: u64) -> (tempfile::TempDir, DatasetManifest) {
        let tmp = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(groups, tmp.path(), seed).unwrap();
        (tmp, m)
    }

    fn tiny_cfg(shuffle_seed: u64) -> PreprocessConfig {
        PreprocessConfig {
            target_height: 32,
            target_width: 32,
            shuffle_seed,
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn resize_hits_target_dimensions() {
        let img = RgbImage::from_fn(512, 384, |x, y| image::Rgb([(x % 251) as u8, (y % 241) as u8, 7]));
        let out = resize(&img, &PreprocessConfig::default());
        assert_eq!(out.dimensions(), (224, 224));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = RgbImage::from_fn(224, 224, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8])
        });
        let out = resize(&img, &PreprocessConfig::default());
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn resize_extends_single_pixel_to_constant() {
        let img = RgbImage::from_pixel(1, 1, image::Rgb([143, 12, 200]));
        let out = resize(&img, &PreprocessConfig::default());
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.pixels().all(|p| *p == image::Rgb([143, 12, 200])));
    }

    #[test]
    fn normalize_maps_endpoints_and_midpoint() {
        let img = RgbImage::from_raw(3, 1, vec![255, 0, 128, 255, 255, 255, 0, 0, 0]).unwrap();
        let out = normalize(&img, &PreprocessConfig::default());
        assert_eq!(out[[0, 0, 0]], 1.0);
        assert_eq!(out[[0, 0, 1]], 0.0);
        // Direct evaluation of the scaling formula: 128 / 255.
        assert!((out[[0, 0, 2]] - 0.501_960_8).abs() < 1e-6);
        assert_eq!(out[[0, 1, 0]], 1.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let cfg = PreprocessConfig {
            target_height: 0,
            ..PreprocessConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            scale: 0.0,
            ..PreprocessConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            scale: 1.0 / 64.0,
            ..PreprocessConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn epoch_covers_manifest_exactly_once() {
        let (_tmp, m) = small_corpus(10, 3); // 40 records
        let mut manifest_labels: Vec<u8> = m.records.iter().map(|r| r.label.class_index()).collect();
        let pipe = Pipeline::new(m, tiny_cfg(5), 8).unwrap();

        let batches: Vec<Batch> = pipe.iter_epoch(0).map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<u8> = batches.iter().flat_map(|b| b.labels.clone()).collect();
        manifest_labels.sort_unstable();
        seen.sort_unstable();
        assert_eq!(manifest_labels, seen);

        for b in &batches {
            assert_eq!(b.pixels.shape()[0], b.labels.len());
            let min = b.pixels.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = b.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(min >= 0.0 && max <= 1.0, "pixels outside [0,1]: {min}..{max}");
            assert!(b.pixels.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn same_seed_reproduces_label_sequence() {
        let (_tmp, m) = small_corpus(6, 1);
        let pipe_a = Pipeline::new(m.clone(), tiny_cfg(9), 4).unwrap();
        let pipe_b = Pipeline::new(m, tiny_cfg(9), 4).unwrap();
        let labels_a: Vec<Vec<u8>> = pipe_a.iter_epoch(0).map(|b| b.unwrap().labels).collect();
        let labels_b: Vec<Vec<u8>> = pipe_b.iter_epoch(0).map(|b| b.unwrap().labels).collect();
        assert_eq!(labels_a, labels_b);

        // Different epochs reshuffle.
        let e0 = pipe_a.epoch_indices(0);
        let e1 = pipe_a.epoch_indices(1);
        assert_ne!(e0, e1);
    }

    #[test]
    fn knobs_do_not_change_batch_bytes() {
        let (_tmp, m) = small_corpus(5, 2);
        let base = tiny_cfg(11);
        let variants = [
            PreprocessConfig { cache_enabled: false, prefetch_depth: 0, ..base.clone() },
            PreprocessConfig { cache_enabled: true, prefetch_depth: 0, ..base.clone() },
            PreprocessConfig { cache_enabled: true, prefetch_depth: 3, ..base.clone() },
            PreprocessConfig { cache_enabled: false, prefetch_depth: 1, ..base.clone() },
        ];
        let reference: Vec<Batch> = Pipeline::new(m.clone(), variants[0].clone(), 4)
            .unwrap()
            .iter_epoch(0)
            .map(|b| b.unwrap())
            .collect();
        for cfg in &variants[1..] {
            let got: Vec<Batch> = Pipeline::new(m.clone(), cfg.clone(), 4)
                .unwrap()
                .iter_epoch(0)
                .map(|b| b.unwrap())
                .collect();
            assert_eq!(reference, got, "cfg {cfg:?} changed pipeline output");
        }

        // A warm cache serves later epochs identically to a cold pipeline.
        let cached = Pipeline::new(m.clone(), variants[2].clone(), 4).unwrap();
        let _warm: Vec<_> = cached.iter_epoch(0).collect();
        let warm_epoch1: Vec<Batch> = cached.iter_epoch(1).map(|b| b.unwrap()).collect();
        let cold_epoch1: Vec<Batch> = Pipeline::new(m, variants[0].clone(), 4)
            .unwrap()
            .iter_epoch(1)
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(warm_epoch1, cold_epoch1);
    }

    #[test]
    fn decode_failure_names_the_offending_path() {
        let (tmp, m) = small_corpus(2, 8);
        let victim = m.resolve_path(&m.records[3]);
        std::fs::write(&victim, b"not an image").unwrap();
        let _keep = &tmp;

        let pipe = Pipeline::new(m, tiny_cfg(0), 4).unwrap();
        let err = pipe
            .iter_epoch(0)
            .find_map(|b| b.err())
            .expect("pipeline must surface the decode failure");
        match err {
            PipelineError::Decode { path, .. } => {
                assert!(path.contains(victim.file_name().unwrap().to_str().unwrap()))
            }
            other => panic!("expected Decode, got {other:?}"),
        }
    }

    #[test]
    fn windowed_shuffle_still_permutes() {
        let records: Vec<_> = (0..37)
            .map(|i| SampleRecord {
                image_path: PathBuf::from(format!("r{i}.png")),
                label: Label::Natural,
                colorizer_id: "none".into(),
                group_id: format!("g{i}"),
                split: Split::Train,
            })
            .collect();
        let m = DatasetManifest::new("w", 0, true, records);
        let cfg = PreprocessConfig {
            shuffle_buffer: 8,
            ..tiny_cfg(4)
        };
        let pipe = Pipeline::new(m, cfg, 5).unwrap();
        let mut order = pipe.epoch_indices(0);
        assert_ne!(order, (0..37).collect::<Vec<_>>());
        order.sort_unstable();
        assert_eq!(order, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_mixes_classes_into_first_batch() {
        // Manifest laid out as all-natural-then-all-colorized; 25 + 75 with
        // batch 32. Exact hypergeometric chance of a single-class first batch
        // is C(75,32)/C(100,32) ~= 5e-6, so both classes should show up for
        // every one of 100 seeds.
        let mut records: Vec<SampleRecord> = (0..25)
            .map(|i| SampleRecord {
                image_path: PathBuf::from(format!("n{i}.png")),
                label: Label::Natural,
                colorizer_id: "none".into(),
                group_id: format!("n{i}"),
                split: Split::Train,
            })
            .collect();
        records.extend((0..75).map(|i| SampleRecord {
            image_path: PathBuf::from(format!("c{i}.png")),
            label: Label::Colorized,
            colorizer_id: "a".into(),
            group_id: format!("c{i}"),
            split: Split::Train,
        }));
        let m = DatasetManifest::new("mix", 0, true, records);

        // Exact single-class probability via the hypergeometric product.
        let p_all_colorized: f64 = (0..32).map(|i| (75.0 - i as f64) / (100.0 - i as f64)).product();
        let p_both = 1.0 - p_all_colorized;
        assert!(p_both >= 0.99);

        let mut mixed = 0usize;
        for seed in 0..100 {
            let pipe = Pipeline::new(m.clone(), tiny_cfg(seed), 32).unwrap();
            let first: Vec<usize> = pipe.epoch_indices(0).into_iter().take(32).collect();
            let naturals = first.iter().filter(|&&i| i < 25).count();
            if naturals > 0 && naturals < 32 {
                mixed += 1;
            }
        }
        let empirical = mixed as f64 / 100.0;
        assert!(
            empirical >= 0.99,
            "only {empirical} of seeds mixed classes (exact expectation {p_both})"
        );
    }
}
