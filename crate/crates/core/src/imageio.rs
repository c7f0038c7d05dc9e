//! PNG encoding helpers.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

fn encode(width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(bytes, width as u32, height as u32, color)?;
    Ok(out)
}

pub fn encode_gray_png(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: width * height,
            got: gray.len(),
        });
    }
    encode(width, height, gray, ExtendedColorType::L8)
}

/// Encodes interleaved (HWC) RGB bytes.
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::DimensionMismatch {
            expected: 3 * width * height,
            got: rgb.len(),
        });
    }
    encode(width, height, rgb, ExtendedColorType::Rgb8)
}

/// Decodes a PNG into `(width, height, interleaved RGB bytes)`.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}
