//! Minimal grayscale image codecs and resampling.
//!
//! Decodes binary PGM (P5), binary PPM (P6) and 8-bit grayscale or RGB PNG
//! into `[1,H,W]` tensors scaled into `[0,1]`. Color is reduced with the
//! luma weights 0.299 / 0.587 / 0.114.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    match bytes {
        [b'P', b'5', ..] => decode_pnm(bytes, 1),
        [b'P', b'6', ..] => decode_pnm(bytes, 3),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        [b'P', d, ..] if d.is_ascii_digit() => Err(Error::Decode {
            format: "PNM",
            reason: format!("unsupported variant P{}", *d as char),
        }),
        _ => Err(Error::Decode {
            format: "image",
            reason: "unrecognised signature (expected P5, P6 or PNG)".into(),
        }),
    }
}

fn pnm_err(reason: impl Into<String>) -> Error {
    Error::Decode {
        format: "PNM",
        reason: reason.into(),
    }
}

/// Reads one ASCII header integer, skipping whitespace and `#` comments.
fn header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(pnm_err(format!("truncated header before {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(pnm_err(format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| pnm_err(format!("{what} out of range")))
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let mut pos = 2;
    let width = header_int(bytes, &mut pos, "width")?;
    let height = header_int(bytes, &mut pos, "height")?;
    let maxval = header_int(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(pnm_err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(pnm_err(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(pnm_err("missing whitespace after maxval")),
    }
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let needed = width * height * channels * sample_bytes;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| pnm_err(format!("truncated raster: need {needed} bytes, have {}", bytes.len() - pos)))?;
    let samples: Vec<u16> = if sample_bytes == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(to_gray(&samples, channels, height, width, maxval as f64))
}

fn to_gray(samples: &[u16], channels: usize, height: usize, width: usize, maxval: f64) -> Tensor {
    let data = samples
        .chunks_exact(channels)
        .map(|px| {
            let v = if channels == 1 {
                px[0] as f64 / maxval
            } else {
                (LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64) / maxval
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_parts(vec![1, height, width], data)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let png_err = |reason: String| Error::Decode { format: "PNG", reason };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(png_err("interlaced images are not supported".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    let stride = frame.line_size;
    let mut samples = Vec::with_capacity(width * height * channels);
    for row in buf[..frame.buffer_size()].chunks(stride).take(height) {
        samples.extend(row[..width * channels].iter().map(|&b| b as u16));
    }
    Ok(to_gray(&samples, channels, height, width, 255.0))
}

/// Writes a `[1,H,W]` tensor as an 8-bit binary PGM, rounding `v * 255`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::dim(format!("PGM needs 1 channel, got {c}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Bilinear resampling with corner-aligned sampling: output corners map
/// exactly onto input corners.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target has a zero dimension"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let scale = |src: usize, dst: usize| if dst > 1 { (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let taps = |n_out: usize, s: f64, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let pos = i as f64 * s;
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, sy, h);
    let xs = taps(out_w, sx, w);
    let x = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Copies the integer rectangle `(x, y, w, h)` out of a `[C,H,W]` tensor.
pub fn crop(image: &Tensor, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor> {
    let (c, ih, iw) = image.chw()?;
    if w == 0 || h == 0 || x + w > iw || y + h > ih {
        return Err(Error::dim(format!(
            "crop ({x},{y},{w},{h}) outside {iw}x{ih} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for row in y..y + h {
            let start = ch * ih * iw + row * iw + x;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, maxval: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn p5_scaling() {
        let t = decode_image(&pgm(2, 2, 255, &[0, 255, 128, 64])).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let expected = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn p5_with_comment_and_16_bit() {
        let mut bytes = b"P5\n# made by hand\n1 1\n1000\n".to_vec();
        bytes.extend_from_slice(&500u16.to_be_bytes());
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.data(), &[0.5]);
    }

    #[test]
    fn p6_white_is_one() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 255, 255]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[1.0]);
    }

    #[test]
    fn truncated_raster() {
        let err = decode_image(&pgm(4, 4, 255, &[1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::Decode { format: "PNM", .. }));
    }

    #[test]
    fn unsupported_formats() {
        assert!(matches!(decode_image(b"P2 1 1 255 0"), Err(Error::Decode { format: "PNM", .. })));
        assert!(matches!(decode_image(b"\xff\xd8\xff"), Err(Error::Decode { format: "image", .. })));
    }

    fn encode_png(w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut writer = enc.write_header().unwrap();
            writer.write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn png_gray_and_rgb() {
        let g = encode_png(2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[0, 255]);
        assert_eq!(decode_image(&g).unwrap().data(), &[0.0, 1.0]);
        let c = encode_png(1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &[255, 0, 0]);
        let v = decode_image(&c).unwrap().data()[0];
        assert!((v - 0.299).abs() < 1e-12);
    }

    #[test]
    fn png_sixteen_bit_rejected() {
        let g = encode_png(1, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0, 1]);
        assert!(matches!(decode_image(&g), Err(Error::Decode { format: "PNG", .. })));
    }

    #[test]
    fn png_truncated() {
        let g = encode_png(8, 8, png::ColorType::Grayscale, png::BitDepth::Eight, &[7; 64]);
        assert!(matches!(decode_image(&g[..g.len() - 20]), Err(Error::Decode { format: "PNG", .. })));
    }

    #[test]
    fn resize_corners_and_identity() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let up = resize_bilinear(&img, 3, 3).unwrap();
        let d = up.data();
        assert_eq!([d[0], d[2], d[6], d[8]], [0.0, 1.0, 0.5, 0.25]);
        assert_eq!(d[1], 0.5);
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
    }

    #[test]
    fn crop_contents() {
        let img = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(crop(&img, 1, 1, 2, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(crop(&img, 2, 2, 2, 2).is_err());
    }
}
