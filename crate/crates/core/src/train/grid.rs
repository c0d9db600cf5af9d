use std::path::Path;

use image::RgbImage;

use crate::data::denormalize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `[B, C, H, W]` batch into `B` tensors of shape `[C, H, W]`.
pub fn unstack(batch: &Tensor) -> Result<Vec<Tensor>> {
    let [b, ..] = batch.dims4()?;
    (0..b).map(|i| batch.index_first(i)).collect()
}

/// Lays samples out one per row, with satellite, generated and real map
/// columns. All tiles must share one size.
pub fn sample_grid(satellites: &[Tensor], generated: &[Tensor], reals: &[Tensor]) -> Result<RgbImage> {
    if satellites.len() != generated.len() || satellites.len() != reals.len() {
        return Err(Error::invalid(format!(
            "sample grid columns differ in length: {}, {}, {}",
            satellites.len(),
            generated.len(),
            reals.len()
        )));
    }
    if satellites.is_empty() {
        return Err(Error::invalid("sample grid needs at least one row"));
    }
    let first = denormalize(&satellites[0])?;
    let (w, h) = first.dimensions();
    let mut grid = RgbImage::new(3 * w, h * satellites.len() as u32);
    for (row, tiles) in satellites.iter().zip(generated).zip(reals).enumerate() {
        let ((s, g), r) = tiles;
        for (col, t) in [s, g, r].into_iter().enumerate() {
            let tile = denormalize(t)?;
            if tile.dimensions() != (w, h) {
                return Err(Error::shape(format!(
                    "tile {row}/{col} is {:?}, expected {:?}",
                    tile.dimensions(),
                    (w, h)
                )));
            }
            image::imageops::replace(&mut grid, &tile, (col as u32 * w) as i64, (row as u32 * h) as i64);
        }
    }
    Ok(grid)
}

pub fn emit_sample_grid(
    satellites: &[Tensor],
    generated: &[Tensor],
    reals: &[Tensor],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    sample_grid(satellites, generated, reals)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_pair;

    #[test]
    fn grid_dimensions_and_tile_order() {
        let pairs: Vec<_> = (0..3).map(|i| synthetic_pair(16, i)).collect();
        let sat: Vec<Tensor> = pairs.iter().map(|p| p.satellite.clone()).collect();
        let real: Vec<Tensor> = pairs.iter().map(|p| p.map_img.clone()).collect();
        let gen: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[3, 16, 16], i as f32 * 0.5 - 0.5).unwrap()).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        emit_sample_grid(&sat, &gen, &real, &path).unwrap();
        let grid = image::open(&path).unwrap().to_rgb8();
        assert_eq!(grid.dimensions(), (48, 48));
        for row in 0..3u32 {
            for (col, t) in [&sat[row as usize], &gen[row as usize], &real[row as usize]].into_iter().enumerate() {
                let tile = image::imageops::crop_imm(&grid, col as u32 * 16, row * 16, 16, 16).to_image();
                assert_eq!(tile, denormalize(t).unwrap(), "row {row} col {col}");
            }
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let t = vec![Tensor::zeros(&[3, 4, 4]).unwrap()];
        assert!(sample_grid(&t, &t, &[]).is_err());
        assert!(sample_grid(&[], &[], &[]).is_err());
    }

    #[test]
    fn unstack_splits_batch() {
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32).unwrap();
        let parts = unstack(&b).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].shape(), &[3, 2, 2]);
        assert_eq!(parts[1].data()[0], 12.0);
    }
}
