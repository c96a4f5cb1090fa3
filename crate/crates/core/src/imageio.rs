//! 8-bit PNG output and image grids.

use std::path::Path;

use crate::data::Image;
use crate::error::{Error, Result};

/// Round to the nearest 8-bit level.
pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let raw = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer")
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidState(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Separator width between grid cells, in pixels.
pub const GRID_GAP: usize = 2;

/// Tile same-sized images `⌈√n⌉` per side, row-major, with white
/// separators; unused cells stay black.
pub fn grid(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::invalid("grid of zero images"))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::invalid("grid images must share one size"));
    }
    let side = (images.len() as f64).sqrt().ceil() as usize;
    strip_layout(images, side, side)
}

/// One row of images with separators.
pub fn strip(images: &[Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::invalid("strip of zero images"));
    }
    strip_layout(images, 1, images.len())
}

fn strip_layout(images: &[Image], rows: usize, cols: usize) -> Result<Image> {
    let (h, w) = (images[0].height, images[0].width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::invalid("images must share one size"));
    }
    let gh = rows * h + (rows - 1) * GRID_GAP;
    let gw = cols * w + (cols - 1) * GRID_GAP;
    let mut out = Image::filled(gh, gw, [1.0; 3]);
    for r in 0..rows {
        for c in 0..cols {
            let (oy, ox) = (r * (h + GRID_GAP), c * (w + GRID_GAP));
            let src = images.get(r * cols + c);
            for y in 0..h {
                for x in 0..w {
                    let p = src.map_or([0.0; 3], |i| i.pixel(y, x));
                    let d = ((oy + y) * gw + ox + x) * 3;
                    out.data[d..d + 3].copy_from_slice(&p);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry() {
        let imgs: Vec<Image> = (0..5).map(|i| Image::filled(4, 4, [i as f32 / 5.0; 3])).collect();
        let g = grid(&imgs).unwrap();
        assert_eq!((g.height, g.width), (3 * 4 + 2 * 2, 3 * 4 + 2 * 2));
        assert_eq!(g.pixel(0, 4), [1.0; 3]);
        assert_eq!(g.pixel(0, 6), [0.2; 3]);
        assert_eq!(g.pixel(6, 0), [0.6; 3]);
        assert_eq!(g.pixel(12, 12), [0.0; 3]);
        let one = grid(&imgs[..1]).unwrap();
        assert_eq!(one, imgs[0]);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let img = Image::new(1, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = encode_png(&img).unwrap();
        assert_eq!(bytes, encode_png(&img).unwrap());
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back.as_raw(), &[0, 128, 255, 64, 191, 26]);
    }
}
