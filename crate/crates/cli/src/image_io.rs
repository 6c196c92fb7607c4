//! RGB PNG in and out. Inputs may be 8 or 16 bits per channel, grey or
//! colour, with or without alpha (alpha is dropped); outputs are 8-bit RGB.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ImageEncoder, ImageFormat};
use mtair::Tensor;

use crate::CliError;

fn is_16_bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    )
}

/// Decodes a PNG into a `1×H×W×3` tensor with values in [0, 1].
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>, CliError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| CliError::Format(format!("PNG: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = if is_16_bit(&img) {
        img.into_rgb16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect()
    } else {
        img.into_rgb8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
    };
    Ok(Tensor::from_vec([1, h, w, 3], values)?)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    decode_png(&bytes).map_err(|e| match e {
        CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes the first image of a `N×H×W×3` tensor, clamped to [0, 1] and
/// rounded to 8 bits.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>, CliError> {
    let s = image.shape();
    if s.c() != 3 {
        return Err(CliError::Shape(format!("expected 3 channels, got {}", s.c())));
    }
    let n = s.h() * s.w() * 3;
    let raw: Vec<u8> = image.data()[..n].iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&raw, s.w() as u32, s.h() as u32, image::ColorType::Rgb8)
        .map_err(|e| CliError::Other(format!("PNG encoding: {e}")))?;
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<(), CliError> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb};

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let t = Tensor::from_fn([1, 5, 7, 3], |[_, y, x, c]| ((y * 31 + x * 7 + c * 90) % 256) as f32 / 255.0);
        let back = decode_png(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn sixteen_bit_input_is_scaled() {
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(2, 1, |x, _| Rgb([0, 65535, 32768 * x as u16]));
        let mut bytes = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageRgb16(img).write_to(&mut bytes, ImageFormat::Png).unwrap();
        let t = decode_png(bytes.get_ref()).unwrap();
        assert_eq!(t.shape().0, [1, 1, 2, 3]);
        assert_eq!(&t.data()[..3], &[0.0, 1.0, 0.0]);
        assert!((t.data()[5] - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(decode_png(b"not a png"), Err(CliError::Format(_))));
    }
}
