use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Supported on-disk encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// 8-bit grayscale PNG (16-bit grayscale PNGs are accepted on load).
    Png,
    /// Binary PGM (`P5`), up to 16 bits per sample.
    Pgm,
    /// Little-endian `f32` payload with a `<file>.json` sidecar.
    Raw,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        Self::from_name(&ext).ok_or_else(|| {
            Error::Format(format!("cannot infer image format of {}", path.display()))
        })
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "png" => Some(ImageFormat::Png),
            "pgm" => Some(ImageFormat::Pgm),
            "raw" | "f32" => Some(ImageFormat::Raw),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Pgm => "pgm",
            ImageFormat::Raw => "raw",
        }
    }
}

/// Sidecar describing a raw `f32` payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
}

impl RawSidecar {
    pub fn f32(width: usize, height: usize) -> Self {
        RawSidecar {
            width,
            height,
            dtype: "f32".into(),
        }
    }

    pub fn path_for(raw: &Path) -> PathBuf {
        let mut s = raw.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

pub fn load_image(path: &Path, format: Option<ImageFormat>) -> Result<Image> {
    let format = match format {
        Some(f) => f,
        None => ImageFormat::from_path(path)?,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Png => decode_png(&bytes),
        ImageFormat::Pgm => decode_pgm(&bytes),
        ImageFormat::Raw => {
            let side_path = RawSidecar::path_for(path);
            let side = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
            let sidecar: RawSidecar = serde_json::from_slice(&side)
                .map_err(|e| Error::Format(format!("bad raw sidecar: {e}")))?;
            decode_raw(&bytes, &sidecar)
        }
    }
}

/// Writes `image` as-is (physical values). PNG and PGM quantize by rounding
/// and clamping to the 8- or 16-bit sample range.
pub fn save_image(image: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Png => encode_png8(
            image.width(),
            image.height(),
            &quantize(image.pixels(), 255.0),
        )?,
        ImageFormat::Pgm => encode_pgm16(image),
        ImageFormat::Raw => {
            let side = RawSidecar::f32(image.width(), image.height());
            let side_path = RawSidecar::path_for(path);
            std::fs::write(&side_path, serde_json::to_vec(&side)?)
                .map_err(|e| Error::io(&side_path, e))?;
            encode_raw(image)
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit PNG of `values` mapped linearly from `[lo, hi]` onto `[0, 255]`,
/// enlarged by an integer nearest-neighbour `scale`.
pub fn save_preview_png(
    values: &[f64],
    width: usize,
    height: usize,
    (lo, hi): (f64, f64),
    scale: usize,
) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Format("preview size mismatch".into()));
    }
    let scale = scale.max(1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (ow, oh) = (width * scale, height * scale);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let v = (values[(y / scale) * width + x / scale] - lo) / span;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode_png8(ow, oh, &out)
}

fn quantize(values: &[f64], max: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| v.round().clamp(0.0, max) as u8)
        .collect()
}

fn encode_png8(width: usize, height: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        writer
            .write_image_data(samples)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    }
    Ok(buf)
}

pub(crate) fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "only grayscale PNGs are supported, got {:?}",
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let pixels: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => data.iter().map(|&b| b as f64).collect(),
        png::BitDepth::Sixteen => data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG bit depth {other:?}"
            )));
        }
    };
    Image::new(w, h, pixels)
}

fn encode_pgm16(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    for &v in image.pixels() {
        out.extend_from_slice(&(v.round().clamp(0.0, 65535.0) as u16).to_be_bytes());
    }
    out
}

pub(crate) fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("non-ascii PGM header".into()))?,
        );
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!(
            "not a binary PGM (magic {:?})",
            fields[0]
        )));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM {what} {s:?}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if !(1..=65535).contains(&maxval) || width == 0 || height == 0 {
        return Err(Error::Format("PGM header out of range".into()));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = width * height * sample;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated PGM payload: need {need} bytes, have {}",
            payload.len()
        )));
    }
    let pixels = if sample == 2 {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as f64).collect()
    };
    Image::new(width, height, pixels)
}

fn encode_raw(image: &Image) -> Vec<u8> {
    image
        .pixels()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn decode_raw(bytes: &[u8], sidecar: &RawSidecar) -> Result<Image> {
    if sidecar.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported raw dtype {:?}",
            sidecar.dtype
        )));
    }
    let need = sidecar.width * sidecar.height * 4;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "raw payload is {} bytes, sidecar {}x{} needs {need}",
            bytes.len(),
            sidecar.width,
            sidecar.height
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::new(sidecar.width, sidecar.height, pixels)
}

/// Decodes an in-memory upload; raw payloads need their sidecar fields.
pub fn decode_bytes(
    bytes: &[u8],
    format: ImageFormat,
    sidecar: Option<&RawSidecar>,
) -> Result<Image> {
    match format {
        ImageFormat::Png => decode_png(bytes),
        ImageFormat::Pgm => decode_pgm(bytes),
        ImageFormat::Raw => {
            let side =
                sidecar.ok_or_else(|| Error::Format("raw upload needs width and height".into()))?;
            decode_raw(bytes, side)
        }
    }
}
