//! Paired-image ingestion: decode horizontally concatenated
//! satellite|map images, split, resize, normalize, and batch them.

pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RESIZE: usize = 256;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Maps a byte onto `[-1, 1]`: `v / 127.5 - 1`.
pub fn normalize_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`]: clamps to `[-1, 1]`, then rounds
/// `(v + 1) * 127.5` half away from zero.
pub fn denormalize_value(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Channel-first `[3, H, W]` tensor in `[-1, 1]`.
pub fn normalize(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = normalize_byte(px[c]);
        }
    }
    Tensor::new(&[3, h, w], data).expect("image dims are non-zero")
}

/// Converts a `[3, H, W]` (or `[1, 3, H, W]`) tensor back to 8-bit RGB.
pub fn denormalize(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected a [3, H, W] image tensor, got {other:?}"))),
    };
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            denormalize_value(d[i]),
            denormalize_value(d[plane + i]),
            denormalize_value(d[2 * plane + i]),
        ])
    }))
}

/// Bilinear resampling of a `[C, H, W]` tensor with half-pixel centers.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = match t.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::shape(format!("expected [C, H, W], got {other:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.detached());
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let d = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// One (satellite, map) pair; both `[3, H, W]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub satellite: Tensor,
    pub map_img: Tensor,
    pub source_path: String,
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Cuts a concatenated image into its left and right halves.
pub fn split_halves(img: &RgbImage, path: &Path) -> Result<(RgbImage, RgbImage)> {
    let (w, h) = img.dimensions();
    if w % 2 != 0 {
        return Err(Error::UnsplittablePair {
            path: path.to_path_buf(),
            width: w,
        });
    }
    let half = w / 2;
    let left = image::imageops::crop_imm(img, 0, 0, half, h).to_image();
    let right = image::imageops::crop_imm(img, half, 0, half, h).to_image();
    Ok((left, right))
}

/// Builds a sample from an already decoded concatenated image. The left
/// half is the satellite view unless `swap_halves` is set.
pub fn pair_from_image(img: &RgbImage, path: &Path, resize_to: usize, swap_halves: bool) -> Result<PairedSample> {
    let (left, right) = split_halves(img, path)?;
    let (sat, map) = if swap_halves { (right, left) } else { (left, right) };
    Ok(PairedSample {
        satellite: resize_bilinear(&normalize(&sat), resize_to, resize_to)?,
        map_img: resize_bilinear(&normalize(&map), resize_to, resize_to)?,
        source_path: path.display().to_string(),
    })
}

pub fn load_paired_image(path: impl AsRef<Path>, resize_to: usize, swap_halves: bool) -> Result<PairedSample> {
    let path = path.as_ref();
    let img = decode_rgb(path)?;
    pair_from_image(&img, path, resize_to, swap_halves)
}

/// Loads a bare satellite image for inference; no resizing is applied.
pub fn load_satellite_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(normalize(&decode_rgb(path.as_ref())?))
}

/// Image files directly inside `dir`, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
enum Record {
    File(PathBuf),
    Memory(PairedSample),
}

/// An ordered list of samples, decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<Record>,
    resize_to: usize,
    swap_halves: bool,
}

/// A stacked batch: `[B, 3, H, W]` satellite and map tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub satellite: Tensor,
    pub map_img: Tensor,
    pub paths: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

impl Dataset {
    /// `<root>/train` or `<root>/val`.
    pub fn open(root: impl AsRef<Path>, split: Split, resize_to: usize, swap_halves: bool) -> Result<Self> {
        Self::from_dir(root.as_ref().join(split.dir_name()), resize_to, swap_halves)
    }

    pub fn from_dir(dir: impl AsRef<Path>, resize_to: usize, swap_halves: bool) -> Result<Self> {
        if resize_to == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        let records = list_images(dir.as_ref())?.into_iter().map(Record::File).collect();
        Ok(Dataset {
            records,
            resize_to,
            swap_halves,
        })
    }

    /// A dataset over decoded samples, which must all share one shape.
    pub fn from_samples(samples: Vec<PairedSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::EmptyDataset("no samples given".into()))?;
        let shape = first.satellite.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::shape(format!("samples must be square [3, S, S], got {shape:?}")));
        }
        for s in &samples {
            if s.satellite.shape() != shape.as_slice() || s.map_img.shape() != shape.as_slice() {
                return Err(Error::shape(format!("sample {} does not match shape {shape:?}", s.source_path)));
            }
        }
        Ok(Dataset {
            resize_to: shape[1],
            records: samples.into_iter().map(Record::Memory).collect(),
            swap_halves: false,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resize_to(&self) -> usize {
        self.resize_to
    }

    pub fn paths(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| match r {
                Record::File(p) => p.display().to_string(),
                Record::Memory(s) => s.source_path.clone(),
            })
            .collect()
    }

    pub fn get(&self, index: usize) -> Result<PairedSample> {
        match self.records.get(index) {
            Some(Record::File(p)) => load_paired_image(p, self.resize_to, self.swap_halves),
            Some(Record::Memory(s)) => Ok(s.clone()),
            None => Err(Error::invalid(format!("sample {index} out of range ({} samples)", self.len()))),
        }
    }

    /// Index batches for one epoch: full batches of `batch_size` and a
    /// trailing short batch. With `shuffle` the order is a seeded
    /// Fisher-Yates permutation.
    pub fn batch_plan(&self, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::EmptyDataset("dataset has no samples".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    pub fn load_batch(&self, indices: &[usize]) -> Result<Batch> {
        let samples = indices.iter().map(|&i| self.get(i)).collect::<Result<Vec<_>>>()?;
        let sat: Vec<Tensor> = samples.iter().map(|s| s.satellite.clone()).collect();
        let map: Vec<Tensor> = samples.iter().map(|s| s.map_img.clone()).collect();
        Ok(Batch {
            satellite: Tensor::stack(&sat)?,
            map_img: Tensor::stack(&map)?,
            paths: samples.into_iter().map(|s| s.source_path).collect(),
        })
    }
}

/// Lazily decoded batches covering `ds` exactly once.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    let plan = ds.batch_plan(batch_size, shuffle, seed)?;
    Ok(plan.into_iter().map(move |idx| ds.load_batch(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoints() {
        assert_eq!(normalize_byte(0), -1.0);
        assert!((normalize_byte(255) - 1.0).abs() <= f32::EPSILON);
        assert!((normalize_byte(127) + 0.00392).abs() < 1e-5);
        assert!((normalize_byte(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn denormalize_rules() {
        assert_eq!(denormalize_value(-1.0), 0);
        assert_eq!(denormalize_value(1.0), 255);
        assert_eq!(denormalize_value(0.0), 128);
        assert_eq!(denormalize_value(1.5), 255);
        assert_eq!(denormalize_value(-7.0), 0);
    }

    #[test]
    fn exhaustive_byte_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_byte(v)), v);
        }
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 50) as u8, (y * 80) as u8, 17]));
        let t = normalize(&img);
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert_eq!(denormalize(&t).unwrap(), img);
    }

    #[test]
    fn resize_halving_averages_pixel_pairs() {
        // 1-pixel checkerboard of 0/255: every 2x2 box averages to mid-gray
        let img = RgbImage::from_fn(8, 8, |x, y| {
            let v = if (x + y) % 2 == 0 { 255 } else { 0 };
            image::Rgb([v, v, v])
        });
        let t = resize_bilinear(&normalize(&img), 4, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!(t.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn split_rejects_odd_width() {
        let img = RgbImage::new(601, 300);
        let err = split_halves(&img, Path::new("odd.png")).unwrap_err();
        assert!(matches!(err, Error::UnsplittablePair { width: 601, .. }));
        assert!(err.to_string().contains("odd.png"));
    }

    #[test]
    fn batch_plan_counts_and_coverage() {
        let samples: Vec<PairedSample> = (0..23)
            .map(|i| PairedSample {
                satellite: Tensor::zeros(&[3, 2, 2]).unwrap(),
                map_img: Tensor::zeros(&[3, 2, 2]).unwrap(),
                source_path: format!("s{i:02}"),
            })
            .collect();
        let ds = Dataset::from_samples(samples).unwrap();
        let plan = ds.batch_plan(5, false, 0).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), [5, 5, 5, 5, 3]);
        assert_eq!(plan.concat(), (0..23).collect::<Vec<_>>());
        let shuffled = ds.batch_plan(5, true, 3).unwrap();
        assert_eq!(shuffled, ds.batch_plan(5, true, 3).unwrap());
        assert_ne!(shuffled.concat(), plan.concat());
        assert!(ds.batch_plan(0, false, 0).is_err());

        let batches: Vec<Batch> = make_batches(&ds, 10, true, 1).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(batches[0].satellite.shape(), &[10, 3, 2, 2]);
        assert_eq!(batches[2].len(), 3);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(Dataset::from_samples(vec![]), Err(Error::EmptyDataset(_))));
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_dir(dir.path(), 4, false).unwrap();
        assert!(matches!(ds.batch_plan(2, false, 0), Err(Error::EmptyDataset(_))));
        assert!(matches!(Dataset::from_dir(dir.path().join("missing"), 4, false), Err(Error::Io { .. })));
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| PairedSample {
                satellite: Tensor::zeros(&[3, 1, 1]).unwrap(),
                map_img: Tensor::zeros(&[3, 1, 1]).unwrap(),
                source_path: i.to_string(),
            })
            .collect();
        Dataset::from_samples(samples).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn every_epoch_covers_each_sample_once(n in 1usize..200, batch in 1usize..40, seed: u64, shuffle: bool) {
            let plan = tiny_dataset(n).batch_plan(batch, shuffle, seed).unwrap();
            proptest::prop_assert_eq!(plan.len(), n.div_ceil(batch));
            proptest::prop_assert!(plan[..plan.len() - 1].iter().all(|b| b.len() == batch));
            let mut all = plan.concat();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn resize_stays_in_range(
            pixels in proptest::collection::vec(proptest::num::u8::ANY, 3 * 7 * 5),
            out_h in 1usize..20,
            out_w in 1usize..20,
        ) {
            let img = RgbImage::from_raw(5, 7, pixels).unwrap();
            let t = resize_bilinear(&normalize(&img), out_h, out_w).unwrap();
            proptest::prop_assert_eq!(t.shape(), &[3, out_h, out_w]);
            proptest::prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
