//! Image folders for training and evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;
use walkdir::WalkDir;

use crate::error::{CodecError, Result};
use crate::image::ImageTensor;

const EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pam"];

/// Image files under `dir`, recursively, in sorted path order.
pub fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CodecError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut paths = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CodecError::io(dir, e.into()))?;
        let ext = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if entry.file_type().is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads every image with both sides `>= min_side`; smaller ones are
/// skipped with a warning.
pub fn load_images(dir: &Path, min_side: usize) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let mut out = Vec::new();
    for path in image_paths(dir)? {
        let img = ImageTensor::load(&path)?;
        if img.height() < min_side || img.width() < min_side {
            log::warn!(
                "skipping {}: {}x{} is smaller than {min_side}x{min_side}",
                path.display(),
                img.height(),
                img.width()
            );
            continue;
        }
        out.push((path, img));
    }
    if out.is_empty() {
        return Err(CodecError::EmptyDataset(dir.to_path_buf()));
    }
    Ok(out)
}

/// In-memory training set sampled as random square crops with random
/// horizontal flips.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    crop: usize,
    flip: bool,
}

impl Dataset {
    pub fn from_images(images: Vec<ImageTensor>, crop: usize, flip: bool) -> Result<Self> {
        if images.is_empty() {
            return Err(CodecError::EmptyDataset(PathBuf::new()));
        }
        if let Some(small) = images.iter().find(|i| i.height() < crop || i.width() < crop) {
            return Err(CodecError::InvalidInput(format!(
                "{}x{} image cannot yield {crop}x{crop} crops",
                small.height(),
                small.width()
            )));
        }
        Ok(Self { images, crop, flip })
    }

    pub fn open(dir: &Path, crop: usize, flip: bool) -> Result<Self> {
        let images = load_images(dir, crop)?.into_iter().map(|(_, i)| i).collect();
        Self::from_images(images, crop, flip)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ImageTensor {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let top = rng.random_range(0..=img.height() - self.crop);
        let left = rng.random_range(0..=img.width() - self.crop);
        let crop = img.crop(top, left, self.crop, self.crop).expect("bounds checked");
        if self.flip && rng.random::<bool>() {
            crop.flip_horizontal()
        } else {
            crop
        }
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Vec<ImageTensor> {
        (0..size).map(|_| self.sample(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::smooth_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn walks_sorted_and_skips_small_images() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        smooth_image(40, 40, 1).save(dir.path().join("sub/b.png")).unwrap();
        smooth_image(40, 48, 2).save(dir.path().join("a.ppm")).unwrap();
        smooth_image(20, 48, 3).save(dir.path().join("c.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let paths = image_paths(dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].ends_with("a.ppm"));
        let loaded = load_images(dir.path(), 32).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_images(dir.path(), 16), Err(CodecError::EmptyDataset(_))));
    }

    #[test]
    fn crops_are_deterministic_and_sized() {
        let ds = Dataset::from_images(vec![smooth_image(40, 50, 1), smooth_image(32, 32, 2)], 32, true).unwrap();
        let a = ds.batch(6, &mut ChaCha8Rng::seed_from_u64(3));
        let b = ds.batch(6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.height() == 32 && i.width() == 32));
        assert!(Dataset::from_images(vec![smooth_image(20, 50, 1)], 32, true).is_err());
    }
}
