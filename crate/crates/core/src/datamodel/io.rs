//! PNG and JSON persistence for rasters and score maps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

use super::raster::{AnomalyMask, Grid, ImageRgb, RoiMask, ScoreMap};

/// Range sidecar stored next to a quantized score map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

const LEVELS: f64 = 65535.0;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_buffer<P, C>(buf: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    ensure_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Write an 8-bit RGB PNG (values rounded from `[0, 1]`).
pub fn save_image(img: &ImageRgb, path: &Path) -> Result<()> {
    let (w, h) = img.dims();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = img.get(x as usize, y as usize);
        Rgb(p.map(|v| (v * 255.0).round() as u8))
    });
    save_buffer(&buf, path)
}

/// Read any PNG as RGB with 8-bit channel values divided by 255.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let rgb = open_image(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageRgb::from_fn(w as usize, h as usize, |x, y| {
        let p = rgb.get_pixel(x as u32, y as u32).0;
        p.map(|v| v as f64 / 255.0)
    }))
}

pub fn save_label_raster(grid: &Grid<u8>, path: &Path) -> Result<()> {
    let (w, h) = grid.dims();
    let buf = GrayImage::from_raw(w as u32, h as u32, grid.as_slice().to_vec()).expect("sized");
    save_buffer(&buf, path)
}

pub fn load_label_raster(path: &Path) -> Result<Grid<u8>> {
    let g = open_image(path)?.into_luma8();
    let (w, h) = g.dimensions();
    Grid::from_vec(w as usize, h as usize, g.into_raw())
}

/// Instance ids as 16-bit grayscale.
pub fn save_instance_raster(grid: &Grid<u32>, path: &Path) -> Result<()> {
    let (w, h) = grid.dims();
    let mut data = Vec::with_capacity(w * h);
    for &v in grid.as_slice() {
        data.push(u16::try_from(v).map_err(|_| Error::invalid(format!("instance id {v} exceeds 16 bits")))?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized");
    save_buffer(&buf, path)
}

pub fn load_instance_raster(path: &Path) -> Result<Grid<u32>> {
    let g = open_image(path)?.into_luma16();
    let (w, h) = g.dimensions();
    Grid::from_vec(
        w as usize,
        h as usize,
        g.into_raw().into_iter().map(u32::from).collect(),
    )
}

pub fn save_mask(mask: &AnomalyMask, path: &Path) -> Result<()> {
    save_label_raster(mask.grid(), path)
}

pub fn load_mask(path: &Path) -> Result<AnomalyMask> {
    AnomalyMask::new(load_label_raster(path)?)
}

/// ROI as 8-bit: 255 inside, 0 outside.
pub fn save_roi(roi: &RoiMask, path: &Path) -> Result<()> {
    save_label_raster(&roi.grid().map(|&v| if v { 255 } else { 0 }), path)
}

pub fn load_roi(path: &Path) -> Result<RoiMask> {
    Ok(RoiMask::new(load_label_raster(path)?.map(|&v| v != 0)))
}

/// Sidecar path for a score map PNG: same stem, `.json` extension.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Persist a score map as a 16-bit PNG, linearly quantized over its own
/// `[min, max]`, plus a `{min, max}` JSON sidecar.
pub fn save_score_map(scores: &ScoreMap, path: &Path) -> Result<()> {
    let (lo, hi) = scores.min_max();
    let span = hi - lo;
    let (w, h) = scores.dims();
    let data: Vec<u16> = scores
        .scores()
        .iter()
        .map(|&s| {
            if span > 0.0 {
                ((s - lo) / span * LEVELS).round().clamp(0.0, LEVELS) as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized");
    save_buffer(&buf, path)?;
    write_json(&ScoreRange { min: lo, max: hi }, &sidecar_path(path))
}

pub fn load_score_map(path: &Path) -> Result<ScoreMap> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::data(format!("score map sidecar {} is missing", side.display())));
    }
    let range: ScoreRange = read_json(&side)?;
    let g = open_image(path)?.into_luma16();
    let (w, h) = g.dimensions();
    let span = range.max - range.min;
    let values = g
        .into_raw()
        .into_iter()
        .map(|q| {
            if q == 0 {
                range.min
            } else if q as f64 == LEVELS {
                range.max
            } else {
                range.min + q as f64 / LEVELS * span
            }
        })
        .collect();
    ScoreMap::new(Grid::from_vec(w as usize, h as usize, values)?)
}
