//! Grayscale image codecs: binary PGM (read/write) and PNG (read).

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes a `1×H×W` (or `H×W`) image in `[0, 1]` as 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(image)
        .ok_or_else(|| image_err(path, format!("not a single plane: {:?}", image.shape())))?;
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&quantize(image.data()))?;
    f.flush()?;
    Ok(())
}

/// `[0, 1]` floats to bytes, rounding to nearest.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn plane_dims(image: &Tensor) -> Option<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Some((h, w)),
        _ => None,
    }
}

/// Reads P5 (8 or 16 bit) or P2 PGM to a `1×H×W` tensor in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_pgm(&bytes).map_err(|m| image_err(path, m))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field `{s}`"))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad PGM header {w}×{h} max {maxval}"));
    }
    let scale = 1.0 / maxval as f32;
    let n = w * h;
    let data: Vec<f32> = match magic.as_str() {
        "P5" => {
            let body = &bytes[pos + 1..];
            if maxval < 256 {
                if body.len() < n {
                    return Err("truncated pixel data".into());
                }
                body[..n].iter().map(|&b| b as f32 * scale).collect()
            } else {
                if body.len() < 2 * n {
                    return Err("truncated pixel data".into());
                }
                body[..2 * n]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * scale)
                    .collect()
            }
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Vec<f32> = text
                .split_ascii_whitespace()
                .take(n)
                .map(|t| {
                    t.parse::<f32>()
                        .map(|v| v * scale)
                        .map_err(|_| format!("bad pixel `{t}`"))
                })
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() < n {
                return Err("truncated pixel data".into());
            }
            vals
        }
        other => return Err(format!("unsupported magic `{other}`")),
    };
    Tensor::new(&[1, h, w], data).map_err(|e| e.to_string())
}

/// Reads a PNG and converts it to luma in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| image_err(path, e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| image_err(path, "image too large"))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let luma =
        |r: u8, g: u8, b: u8| (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0;
    let data: Vec<f32> = match info.color_type {
        png::ColorType::Grayscale => px.iter().map(|&v| v as f32 / 255.0).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).map(|c| c[0] as f32 / 255.0).collect(),
        png::ColorType::Rgb => px.chunks_exact(3).map(|c| luma(c[0], c[1], c[2])).collect(),
        png::ColorType::Rgba => px.chunks_exact(4).map(|c| luma(c[0], c[1], c[2])).collect(),
        png::ColorType::Indexed => return Err(image_err(path, "unexpanded palette")),
    };
    Tensor::new(&[1, h, w], data)
}

/// Dispatches on extension: `.png` or PGM otherwise.
pub fn read_image(path: &Path) -> Result<Tensor> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => read_png(path),
        _ => read_pgm(path),
    }
}

/// Bilinear resize of a `1×H×W` plane, sampling at pixel centers.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(image).ok_or_else(|| {
        Error::InvalidArgument(format!("not a single plane: {:?}", image.shape()))
    })?;
    if (h, w) == (out_h, out_w) {
        return image.clone().reshape(&[1, h, w]);
    }
    let src = image.data();
    let (sy, sx) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    Ok(Tensor::from_fn(&[1, out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
        let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
        top * (1.0 - ty) + bot * ty
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_exact_on_quantized_values() {
        let img = Tensor::from_fn(&[1, 5, 7], |i| (i * 7 % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.shape(), &[1, 5, 7]);
        assert_eq!(quantize(back.data()), quantize(img.data()));
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let t = decode_pgm(b"P2\n# c\n2 1\n4\n0 4\n").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn png_grayscale_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        {
            let f = std::fs::File::create(&p).unwrap();
            let mut enc = png::Encoder::new(std::io::BufWriter::new(f), 3, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header()
                .unwrap()
                .write_image_data(&[0, 51, 255])
                .unwrap();
        }
        let t = read_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert!((t.data()[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = Tensor::full(&[1, 6, 6], 0.3);
        let r = resize_bilinear(&c, 4, 9).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let img = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        assert_eq!(resize_bilinear(&img, 3, 3).unwrap(), img);
    }
}
