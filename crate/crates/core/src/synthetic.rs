//! Synthetic two-class blob images with a known signal location, used as a
//! stand-in dataset when real rated faces are unavailable.
//!
//! Class 1 carries a bright Gaussian blob in the upper-left quadrant, class
//! 0 in the lower-right, both on Gaussian pixel noise.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg32;

use crate::augment::mix_seed;
use crate::error::Result;
use crate::imageio::save_png;
use crate::manifest::{split_train_val, write_manifest, ManifestEntry, Split};
use crate::ratings::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub count: usize,
    pub size: usize,
    pub background: f32,
    pub noise_std: f32,
    pub amplitude: f32,
    pub blob_sigma: f32,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 128,
            background: 0.3,
            noise_std: 0.1,
            amplitude: 0.5,
            blob_sigma: 8.0,
            seed: 2024,
        }
    }
}

/// Row and column ranges of the quadrant holding the signal for `label`.
pub fn signal_quadrant(label: usize, size: usize) -> (Range<usize>, Range<usize>) {
    let half = size / 2;
    if label == 1 {
        (0..half, 0..half)
    } else {
        (half..size, half..size)
    }
}

#[derive(Debug, Clone)]
pub struct BlobImage {
    pub image_id: String,
    pub label: usize,
    pub image: Tensor<f32>,
}

/// Draws one `[3,S,S]` image; the blob centre is uniform over the middle
/// half of the signal quadrant.
pub fn blob_image(cfg: &BlobConfig, label: usize, rng: &mut Pcg32) -> Tensor<f32> {
    let s = cfg.size;
    let (rows, cols) = signal_quadrant(label, s);
    let q = s as f32 / 2.0;
    let jitter = |rng: &mut Pcg32, start: usize| start as f32 + q * 0.25 + rng.random::<f32>() * q * 0.5;
    let cy = jitter(rng, rows.start);
    let cx = jitter(rng, cols.start);
    let noise = Normal::new(0.0f32, cfg.noise_std).expect("non-negative std");
    let two_var = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let mut data = vec![0.0f32; 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let v = cfg.background + cfg.amplitude * (-d2 / two_var).exp() + noise.sample(rng);
                data[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("consistent shape")
}

/// Alternating labels, each image from its own seeded stream.
pub fn blob_dataset(cfg: &BlobConfig) -> Vec<BlobImage> {
    (0..cfg.count)
        .map(|i| {
            let label = i % 2;
            let mut rng = Pcg32::seed_from_u64(mix_seed(&[cfg.seed, i as u64]));
            BlobImage {
                image_id: format!("blob{i:04}"),
                label,
                image: blob_image(cfg, label, &mut rng),
            }
        })
        .collect()
}

/// Writes every image as PNG into `dir` plus `manifest.csv` with a 50/50
/// train/val split, and returns the manifest path.
pub fn write_blob_dataset(dir: &Path, cfg: &BlobConfig, split_seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cfg.count);
    for img in blob_dataset(cfg) {
        let file = format!("{}.png", img.image_id);
        save_png(&dir.join(&file), &img.image)?;
        entries.push(ManifestEntry {
            image_id: img.image_id,
            path: PathBuf::from(file),
            task: Task::Warmth,
            mean_rating: if img.label == 1 { 1.0 } else { 9.0 },
            label: img.label,
            split: Split::Train,
        });
    }
    let entries = split_train_val(entries, split_seed)?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
