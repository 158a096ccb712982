//! Training images and seeded random crops.
//!
//! A batch is a pure function of `(seed, iteration)`, so a resumed run sees
//! exactly the batches an uninterrupted one would.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{load_image, RgbImage};
use crate::network::{INPUT_OFFSET, INPUT_SCALE};
use crate::numerics::{concat_batch, Tensor};

#[derive(Clone, Debug)]
enum Source {
    File(PathBuf),
    Memory(RgbImage),
}

#[derive(Clone, Debug)]
struct Item {
    source: Source,
    width: usize,
    height: usize,
}

/// A set of images at least `crop` pixels on each side. File-backed images
/// are decoded when a batch needs them.
#[derive(Clone, Debug)]
pub struct Dataset {
    items: Vec<Item>,
    crop: usize,
    seed: u64,
    /// Model units are `pixel / scale - INPUT_OFFSET`.
    pub scale: f64,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Seed derived from several integers; used for every per-epoch and
/// per-iteration stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    mix(parts)
}

/// Expands directories into their `.png`, `.ppm` and `.pnm` files, sorted.
pub fn expand_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_image_path(f))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

impl Dataset {
    fn new(items: Vec<Item>, crop: usize, seed: u64, skipped: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid(format!(
                "no usable training images ({skipped} skipped)"
            )));
        }
        if skipped > 0 {
            log::warn!("{skipped} image(s) skipped; {} usable", items.len());
        }
        Ok(Dataset {
            items,
            crop,
            seed,
            scale: INPUT_SCALE,
        })
    }

    /// Image files (or directories of them). Unreadable and undersized
    /// images are skipped with a warning; an error is returned only if none
    /// remain.
    pub fn from_paths(paths: &[PathBuf], crop: usize, seed: u64) -> Result<Self> {
        check_crop(crop)?;
        let mut items = Vec::new();
        let mut skipped = 0;
        for p in expand_paths(paths)? {
            match load_image(&p) {
                Ok(img) if img.width >= crop && img.height >= crop => items.push(Item {
                    source: Source::File(p),
                    width: img.width,
                    height: img.height,
                }),
                Ok(img) => {
                    log::warn!(
                        "skipping {}: {}x{} is smaller than the {crop}x{crop} crop",
                        p.display(),
                        img.width,
                        img.height
                    );
                    skipped += 1;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    skipped += 1;
                }
            }
        }
        Dataset::new(items, crop, seed, skipped)
    }

    /// In-memory images, with the same skipping rule as [`Dataset::from_paths`].
    pub fn from_images(images: Vec<RgbImage>, crop: usize, seed: u64) -> Result<Self> {
        check_crop(crop)?;
        let total = images.len();
        let items: Vec<Item> = images
            .into_iter()
            .filter(|img| img.width >= crop && img.height >= crop)
            .map(|img| Item {
                width: img.width,
                height: img.height,
                source: Source::Memory(img),
            })
            .collect();
        let skipped = total - items.len();
        Dataset::new(items, crop, seed, skipped)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// Iterations in one pass over the images.
    pub fn batches_per_epoch(&self, batch_size: usize) -> u64 {
        self.len().div_ceil(batch_size.max(1)) as u64
    }

    /// Image order for `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.seed, 1, epoch])));
        order
    }

    /// Top-left corner `(x, y)` of the crop taken from image `index` during
    /// `epoch`, uniform over all valid positions.
    pub fn crop_position(&self, epoch: u64, index: usize) -> (usize, usize) {
        let it = &self.items[index];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 2, epoch, index as u64]));
        let x = rng.gen_range(0..=it.width - self.crop);
        let y = rng.gen_range(0..=it.height - self.crop);
        (x, y)
    }

    fn image(&self, index: usize) -> Result<std::borrow::Cow<'_, RgbImage>> {
        match &self.items[index].source {
            Source::Memory(img) => Ok(std::borrow::Cow::Borrowed(img)),
            Source::File(p) => Ok(std::borrow::Cow::Owned(load_image(p)?)),
        }
    }

    fn crop_tensor(&self, index: usize, x0: usize, y0: usize) -> Result<Tensor> {
        let img = self.image(index)?;
        let full = img.to_tensor(self.scale).map(|v| v - INPUT_OFFSET);
        full.crop(y0, x0, self.crop, self.crop)
    }

    /// Image indices and crop corners of batch `iteration`. Batches walk
    /// the epoch order and wrap around at its end, so every batch is full.
    pub fn batch_plan(&self, iteration: u64, batch_size: usize) -> Vec<(usize, usize, usize)> {
        let per_epoch = self.batches_per_epoch(batch_size);
        let epoch = iteration / per_epoch;
        let j = (iteration % per_epoch) as usize;
        let order = self.epoch_order(epoch);
        (0..batch_size)
            .map(|t| {
                let idx = order[(j * batch_size + t) % order.len()];
                let (x, y) = self.crop_position(epoch, idx);
                (idx, x, y)
            })
            .collect()
    }

    /// `batch_size x 3 x crop x crop` tensor for `iteration`, in model units.
    pub fn batch(&self, iteration: u64, batch_size: usize) -> Result<Tensor> {
        let crops = self
            .batch_plan(iteration, batch_size)
            .into_iter()
            .map(|(i, x, y)| self.crop_tensor(i, x, y))
            .collect::<Result<Vec<_>>>()?;
        concat_batch(&crops)
    }

    /// Endless batch iterator starting at iteration 0.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Tensor>> + '_ {
        (0u64..).map(move |it| self.batch(it, batch_size))
    }

    /// Centre crop of every image, in model units; used for validation.
    pub fn centre_crops(&self) -> Result<Vec<Tensor>> {
        (0..self.len())
            .map(|i| {
                let it = &self.items[i];
                self.crop_tensor(i, (it.width - self.crop) / 2, (it.height - self.crop) / 2)
            })
            .collect()
    }
}

fn check_crop(crop: usize) -> Result<()> {
    if crop == 0 {
        return Err(Error::invalid("crop must be positive"));
    }
    Ok(())
}

/// Dataset over `paths` with crops of `crop` pixels and crop positions
/// drawn from `seed`. Iterate with [`Dataset::batches`].
pub fn ingest_dataset(paths: &[PathBuf], crop: usize, seed: u64) -> Result<Dataset> {
    Dataset::from_paths(paths, crop, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::save_image;

    fn img(w: usize, h: usize, tag: u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y, c| (x as u8).wrapping_mul(3) ^ (y as u8) ^ c as u8 ^ tag)
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let images: Vec<_> = (0..5).map(|i| img(40 + i * 3, 36, i as u8)).collect();
        let a = Dataset::from_images(images.clone(), 32, 9).unwrap();
        let b = Dataset::from_images(images.clone(), 32, 9).unwrap();
        let c = Dataset::from_images(images, 32, 10).unwrap();
        for it in 0..6 {
            assert_eq!(a.batch(it, 4).unwrap(), b.batch(it, 4).unwrap());
        }
        assert!((0..6).any(|it| a.batch_plan(it, 4) != c.batch_plan(it, 4)));
    }

    #[test]
    fn batch_content_matches_the_crop() {
        let d = Dataset::from_images(vec![img(50, 40, 1)], 16, 3).unwrap();
        let (_, x0, y0) = d.batch_plan(0, 1)[0];
        let b = d.batch(0, 1).unwrap();
        let src = img(50, 40, 1);
        assert_eq!(b.at(0, 2, 5, 7), src.get(x0 + 7, y0 + 5, 2) as f64 / 255.0 - 0.5);
    }

    #[test]
    fn every_image_is_visited_each_epoch() {
        let d = Dataset::from_images((0..7).map(|i| img(32, 32, i)).collect(), 32, 1).unwrap();
        let per = d.batches_per_epoch(3);
        assert_eq!(per, 3);
        let mut seen: Vec<usize> = (0..per).flat_map(|it| d.batch_plan(it, 3)).map(|p| p.0).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn skipping_and_failure() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        let small = dir.path().join("small.png");
        let bad = dir.path().join("bad.png");
        save_image(&img(40, 40, 0), &good).unwrap();
        save_image(&img(20, 40, 0), &small).unwrap();
        std::fs::write(&bad, b"not a png").unwrap();
        let d = Dataset::from_paths(&[dir.path().to_path_buf()], 32, 0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.batch(0, 2).unwrap().shape().batch, 2);
        assert!(matches!(
            Dataset::from_paths(&[small, bad], 32, 0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
