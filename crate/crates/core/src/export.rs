//! Grayscale PGM/PNG rendering of pairs and contact sheets.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::data::SamplePair;
use crate::error::{Error, Result};

fn to_byte(v: f64, signed: bool) -> u8 {
    let u = if signed { 0.5 * (v + 1.0) } else { v };
    (u.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image next to its mask, separated by a 2-pixel gap.
pub fn render_pair(pair: &SamplePair) -> GrayImage {
    let (h, w) = (pair.height(), pair.width());
    let mut img = GrayImage::from_pixel((2 * w + 2) as u32, h as u32, Luma([128]));
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            img.put_pixel(j as u32, i as u32, Luma([to_byte(pair.image.data()[k], true)]));
            img.put_pixel((w + 2 + j) as u32, i as u32, Luma([to_byte(pair.mask.data()[k], false)]));
        }
    }
    img
}

/// Rendered pairs in a grid `columns` wide.
pub fn contact_sheet(pairs: &[SamplePair], columns: usize) -> Result<GrayImage> {
    let first = pairs.first().ok_or(Error::Empty("contact sheet"))?;
    let tiles: Vec<GrayImage> = pairs.iter().map(render_pair).collect();
    let (tw, th) = (tiles[0].width() + 4, tiles[0].height() + 4);
    let cols = columns.clamp(1, pairs.len()) as u32;
    let rows = pairs.len().div_ceil(cols as usize) as u32;
    let mut sheet = GrayImage::from_pixel(cols * tw, rows * th, Luma([0]));
    for (k, tile) in tiles.iter().enumerate() {
        if tile.dimensions() != tiles[0].dimensions() {
            return Err(Error::invalid(format!(
                "pair {k} is {}x{}, expected {}x{}",
                tile.height(),
                tile.width(),
                first.height(),
                first.width()
            )));
        }
        let (x0, y0) = ((k as u32 % cols) * tw + 2, (k as u32 / cols) * th + 2);
        for (x, y, p) in tile.enumerate_pixels() {
            sheet.put_pixel(x0 + x, y0 + y, *p);
        }
    }
    Ok(sheet)
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    img.save(path.as_ref()).map_err(|e| Error::Image(e.to_string()))
}

/// Binary (P5) PGM.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    fs::write(path, out)?;
    Ok(())
}
