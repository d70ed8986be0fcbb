//! Whole-dataset generation, writing and loading.

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use super::forge::{generate_sample, generate_sample_from_pool};
use super::io::{read_image, read_mask, write_image, write_mask};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::resize::{resize_image, resize_mask};
use super::{ForgeryKind, ForgerySample, Image};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    /// Kinds are assigned round-robin over the sample index.
    pub kinds: Vec<ForgeryKind>,
    pub seed: u64,
    /// Base photographs to forge instead of procedural scenes; all must have
    /// `height` x `width`.
    pub pool: Option<Vec<Image>>,
}

impl DatasetSpec {
    pub fn new(height: usize, width: usize, train: usize, test: usize, seed: u64) -> Self {
        DatasetSpec {
            height,
            width,
            train,
            test,
            kinds: ForgeryKind::ALL.to_vec(),
            seed,
            pool: None,
        }
    }

    pub fn with_kinds(mut self, kinds: &[ForgeryKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    pub fn with_pool(mut self, pool: Vec<Image>) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn len(&self) -> usize {
        self.train + self.test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seed, kind and split of sample `index`. Train samples come first.
    pub fn entry(&self, index: usize) -> (u64, ForgeryKind, Split) {
        let seed = derive_seed(self.seed, &format!("sample/{index}"));
        let kind = self.kinds[index % self.kinds.len()];
        let split = if index < self.train { Split::Train } else { Split::Test };
        (seed, kind, split)
    }
}

/// Generates every sample of `spec` in memory, in index order.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<(ForgerySample, u64, Split)>> {
    if spec.kinds.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one forgery kind".into()));
    }
    if let Some(pool) = &spec.pool {
        if let Some(img) = pool.iter().find(|p| (p.height, p.width) != (spec.height, spec.width)) {
            return Err(Error::InvalidArgument(format!(
                "pool image is {}x{}, dataset is {}x{}",
                img.height, img.width, spec.height, spec.width
            )));
        }
    }
    (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let (seed, kind, split) = spec.entry(i);
            let sample = match &spec.pool {
                Some(pool) => generate_sample_from_pool(kind, pool, seed),
                None => generate_sample(kind, spec.height, spec.width, seed),
            };
            sample.map(|s| (s, seed, split))
        })
        .collect()
}

/// Splits generated samples by their tag.
pub fn partition(samples: Vec<(ForgerySample, u64, Split)>) -> (Vec<ForgerySample>, Vec<ForgerySample>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, _, split) in samples {
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    (train, test)
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and `manifest.tsv` under `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    let samples = generate(spec)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = DatasetManifest {
        entries: Vec::with_capacity(samples.len()),
        root: dir.to_path_buf(),
    };
    for (i, (sample, seed, split)) in samples.iter().enumerate() {
        let image_path = format!("images/{i:05}.png");
        let mask_path = format!("masks/{i:05}.png");
        write_image(&sample.image, &dir.join(&image_path))?;
        write_mask(&sample.mask, &dir.join(&mask_path))?;
        manifest.entries.push(ManifestEntry {
            image_path,
            mask_path,
            kind: sample.kind,
            seed: *seed,
            split: *split,
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one split, resizing to `size` (area for images, nearest for masks).
/// Entries whose files are missing or unreadable are skipped with a warning;
/// the second value counts them.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    size: (usize, usize),
) -> Result<(Vec<ForgerySample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for e in manifest.split(split) {
        let ip = manifest.resolve(&e.image_path);
        let mp = manifest.resolve(&e.mask_path);
        let loaded = read_image(&ip).and_then(|img| read_mask(&mp).map(|m| (img, m)));
        match loaded {
            Ok((image, mask)) => {
                let image = resize_image(&image, size.0, size.1)?;
                let mask = resize_mask(&mask, size.0, size.1)?;
                out.push(ForgerySample {
                    image,
                    mask,
                    kind: e.kind,
                });
            }
            Err(err) => {
                warn!("skipping {}: {err}", ip.display());
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}
