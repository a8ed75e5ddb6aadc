//! PNG slices with the predicted contour in red and the reference contour in
//! green, for eyeballing results.

use std::path::{Path, PathBuf};

use anyhow::Result;
use image::{Rgb, RgbImage};
use volseg_core::volume::Volume;

fn on_edge(mask: &Volume, x: usize, y: usize, z: usize) -> bool {
    if mask.get(x, y, z) != 1.0 {
        return false;
    }
    let (nx, ny) = (mask.nx(), mask.ny());
    x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || {
        [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|&(a, b)| mask.get(a, b, z) != 1.0)
    }
}

/// Write one PNG per slice in `zs` to `dir`; returns the written paths.
pub fn write_overlays(
    image: &Volume,
    predicted: &Volume,
    truth: Option<&Volume>,
    zs: impl Iterator<Item = usize>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (lo, hi) = image
        .voxels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(1e-9);
    let mut written = Vec::new();
    for z in zs {
        let mut png = RgbImage::new(image.nx() as u32, image.ny() as u32);
        for y in 0..image.ny() {
            for x in 0..image.nx() {
                let g = ((image.get(x, y, z) - lo) / range * 255.0).round() as u8;
                let mut px = Rgb([g, g, g]);
                if truth.is_some_and(|t| on_edge(t, x, y, z)) {
                    px = Rgb([0, 220, 0]);
                }
                if on_edge(predicted, x, y, z) {
                    px = Rgb([230, 0, 0]);
                }
                png.put_pixel(x as u32, y as u32, px);
            }
        }
        let path = dir.join(format!("slice_{z:03}.png"));
        png.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
