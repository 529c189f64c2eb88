//! 8-bit PNG exchange: pixel `p` maps to `p / 255 * 2 - 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads an RGB or RGBA PNG into a `[3, H, W]` tensor in `[-1, 1]`; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let px = &buf[i * stride..(i + 1) * stride];
        for k in 0..3 {
            let v = if stride >= 3 { px[k] } else { px[0] };
            data[k * h * w + i] = v as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes `[3, H, W]` (clamped to `[-1, 1]`) to 8-bit RGB bytes.
pub fn to_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected a [3, H, W] image, got {s:?}")));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("image to encode".into()));
    }
    let hw = s[1] * s[2];
    let d = image.data();
    let mut out = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for k in 0..3 {
            let v = (d[k * hw + i].clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb8(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(bytes)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// Places images side by side for quick inspection.
pub fn tile(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Parameter("nothing to tile".into()))?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let n = images.len();
    let mut data = vec![0.0; c * h * w * n];
    for (j, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Contract("tiled images must share a shape".into()));
        }
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[k * h * w * n + y * w * n + j * w + x] = img.data()[k * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(&[c, h, w * n], data)
}
