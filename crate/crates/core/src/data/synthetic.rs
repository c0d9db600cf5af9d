//! Procedural satellite/map pairs for tests and smoke runs.
//!
//! A scene is a handful of water bodies and a road grid over land. The
//! "satellite" rendering is textured and noisy; the "map" rendering uses
//! flat cartographic colors, so the two halves share geometry but differ in
//! appearance, like the real corpus.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, PairedSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Terrain {
    Land,
    Water,
    Road,
}

struct Scene {
    size: u32,
    cells: Vec<Terrain>,
}

impl Scene {
    fn generate(size: u32, rng: &mut impl Rng) -> Scene {
        let s = size as f32;
        let lakes: Vec<(f32, f32, f32)> = (0..rng.gen_range(1..=3))
            .map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.08..0.25) * s))
            .collect();
        let road_width = (size / 32).max(1);
        let roads_x: Vec<u32> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..size)).collect();
        let roads_y: Vec<u32> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..size)).collect();
        let on_road = |v: u32, lines: &[u32]| lines.iter().any(|&l| v.abs_diff(l) < road_width);

        let mut cells = Vec::with_capacity((size * size) as usize);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let wet = lakes.iter().any(|&(cx, cy, r)| (fx - cx).powi(2) + (fy - cy).powi(2) < r * r);
                cells.push(if on_road(x, &roads_x) || on_road(y, &roads_y) {
                    Terrain::Road
                } else if wet {
                    Terrain::Water
                } else {
                    Terrain::Land
                });
            }
        }
        Scene { size, cells }
    }

    fn at(&self, x: u32, y: u32) -> Terrain {
        self.cells[(y * self.size + x) as usize]
    }

    fn satellite(&self, rng: &mut impl Rng) -> RgbImage {
        RgbImage::from_fn(self.size, self.size, |x, y| {
            let base: [f32; 3] = match self.at(x, y) {
                Terrain::Land => [86.0, 104.0, 62.0],
                Terrain::Water => [28.0, 54.0, 72.0],
                Terrain::Road => [150.0, 148.0, 140.0],
            };
            let n: f32 = rng.gen_range(-18.0..18.0);
            Rgb(base.map(|c| (c + n + rng.gen_range(-6.0..6.0)).clamp(0.0, 255.0) as u8))
        })
    }

    fn map(&self) -> RgbImage {
        RgbImage::from_fn(self.size, self.size, |x, y| match self.at(x, y) {
            Terrain::Land => Rgb([242, 239, 233]),
            Terrain::Water => Rgb([170, 211, 223]),
            Terrain::Road => Rgb([255, 255, 255]),
        })
    }
}

/// Satellite and map renderings of one random scene.
pub fn synthetic_images(size: u32, seed: u64) -> (RgbImage, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::generate(size, &mut rng);
    (scene.satellite(&mut rng), scene.map())
}

/// The two renderings side by side, satellite on the left.
pub fn synthetic_concatenated(size: u32, seed: u64) -> RgbImage {
    let (sat, map) = synthetic_images(size, seed);
    let mut out = RgbImage::new(2 * size, size);
    image::imageops::replace(&mut out, &sat, 0, 0);
    image::imageops::replace(&mut out, &map, size as i64, 0);
    out
}

pub fn synthetic_pair(size: u32, seed: u64) -> PairedSample {
    let (sat, map) = synthetic_images(size, seed);
    PairedSample {
        satellite: normalize(&sat),
        map_img: normalize(&map),
        source_path: format!("synthetic/{seed:05}"),
    }
}

/// Writes `count` concatenated PNGs named `00000.png`, `00001.png`, ...
/// into `dir` (created if missing). Scene `i` uses seed `seed + i`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{i:05}.png"));
            synthetic_concatenated(size, seed + i as u64)
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_paired_image, Dataset};

    #[test]
    fn concatenated_image_splits_into_its_halves() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic_corpus(dir.path(), 2, 32, 40).unwrap();
        let (sat, map) = synthetic_images(32, 40);
        let sample = load_paired_image(&paths[0], 32, false).unwrap();
        assert_eq!(sample.satellite, normalize(&sat));
        assert_eq!(sample.map_img, normalize(&map));
        let swapped = load_paired_image(&paths[0], 32, true).unwrap();
        assert_eq!(swapped.satellite, normalize(&map));
    }

    #[test]
    fn scenes_are_seeded() {
        assert_eq!(synthetic_concatenated(16, 3), synthetic_concatenated(16, 3));
        assert_ne!(synthetic_concatenated(16, 3), synthetic_concatenated(16, 4));
        let p = synthetic_pair(16, 5);
        assert!(p.satellite.data().iter().chain(p.map_img.data()).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn corpus_lists_in_written_order() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic_corpus(dir.path(), 12, 8, 0).unwrap();
        let ds = Dataset::from_dir(dir.path(), 8, false).unwrap();
        let listed: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
        assert_eq!(ds.paths(), listed);
    }
}
