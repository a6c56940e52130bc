//! 8-bit PNG encoding and decoding for frames (RGB) and overlays (RGBA).
//!
//! Stored values are `round(255 * v)` after clamping to `[0, 1]`; decoded
//! values are `byte / 255`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes to `(1, C, H, W)` with C = 3, or 4 when `keep_alpha` and the file
/// has an alpha channel (opaque alpha is synthesized for RGB files).
pub fn decode_png(bytes: &[u8], keep_alpha: bool) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Image("unexpanded palette image".into())),
    };
    let out_c = if keep_alpha { 4 } else { 3 };
    let line = info.line_size;
    let px = |y: usize, x: usize, c: usize| -> f32 {
        let row = &buf[y * line..];
        let s = match (src_channels, c) {
            (1 | 2, 0..=2) => row[x * src_channels],
            (1, 3) | (3, 3) => 255,
            (2, 3) => row[x * 2 + 1],
            (_, c) => row[x * src_channels + c],
        };
        s as f32 / 255.0
    };
    Ok(Tensor::from_fn([1, out_c, h, w], |[_, c, y, x]| px(y, x, c)))
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, false).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn read_png_rgba(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, true).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the first batch item of a 3- or 4-channel tensor.
pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape();
    let color = match c {
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        _ => return Err(Error::Image(format!("cannot encode {c}-channel image"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(t.at([0, ch, y, x])));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&bytes).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode_png(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Resizes a `(B, C, H, W)` image to `(B, C, size, size)` by corner-aligned
/// bilinear sampling.
pub fn resize_square(t: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let [b, c, h, w] = t.shape();
    if h == size && w == size {
        return t.clone();
    }
    let src = |n: usize, ch: usize, y: usize, x: usize| t.at([n, ch, y, x]);
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out <= 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    Tensor::from_fn([b, c, size, size], |[n, ch, y, x]| {
        let py = coord(y, size, h);
        let px = coord(x, size, w);
        let (y0, x0) = (py.floor() as usize, px.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((py - y0 as f64) as f32, (px - x0 as f64) as f32);
        let top = src(n, ch, y0, x0) * (1.0 - fx) + src(n, ch, y0, x1) * fx;
        let bot = src(n, ch, y1, x0) * (1.0 - fx) + src(n, ch, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_quantized_values() {
        let t = Tensor::from_fn([1, 3, 5, 7], |[_, c, y, x]| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let back = decode_png(&encode_png(&t).unwrap(), false).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rgba_round_trip_and_opaque_default() {
        let t = Tensor::from_fn([1, 4, 3, 3], |[_, c, y, x]| ((c + y * 3 + x) * 17 % 256) as f32 / 255.0);
        let bytes = encode_png(&t).unwrap();
        assert_eq!(decode_png(&bytes, true).unwrap(), t);
        let rgb = decode_png(&bytes, false).unwrap();
        assert_eq!(rgb.shape(), [1, 3, 3, 3]);

        let opaque = decode_png(&encode_png(&rgb).unwrap(), true).unwrap();
        assert!((0..9).all(|i| opaque.data()[27 + i] == 1.0));
    }

    #[test]
    fn garbage_is_an_image_error() {
        assert!(matches!(decode_png(b"not a png", false), Err(Error::Image(_))));
    }

    #[test]
    fn resize_keeps_corners_and_constants() {
        let t = Tensor::from_fn([1, 1, 2, 2], |[_, _, y, x]| (y * 2 + x) as f32);
        let r = resize_square(&t, 5);
        assert_eq!(r.at([0, 0, 0, 0]), 0.0);
        assert_eq!(r.at([0, 0, 4, 4]), 3.0);
        assert!((r.at([0, 0, 2, 2]) - 1.5).abs() < 1e-6);
        let c = resize_square(&Tensor::full([1, 3, 7, 9], 0.25), 4);
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
