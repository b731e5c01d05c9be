//! PNG codecs.
//!
//! * color: 8-bit RGB, `v = round(255·x)`;
//! * depth: 16-bit gray, `depth_m = raw / 256`, raw 0 = missing;
//! * flow: 16-bit RGB, `(u·64 + 2¹⁵, v·64 + 2¹⁵, valid)`;
//! * labels: 16-bit gray superpixel ids.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Vector2;

use super::{ColorImage, DenseDepthMap, FlowField, SparseDepthMap};
use crate::error::{Error, Result};

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub const DEPTH_SCALE: f64 = 256.0;
pub const FLOW_SCALE: f64 = 64.0;
pub const FLOW_OFFSET: f64 = 32768.0;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 8 || bytes[..8] != PNG_MAGIC {
        return Err(malformed(path, "missing PNG signature"));
    }
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| malformed(path, e.to_string()))
}

fn save<P, C>(path: &Path, buf: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => malformed(path, other.to_string()),
    })
}

fn check_dims(got: (usize, usize), expected: Option<(usize, usize)>) -> Result<()> {
    match expected {
        Some(e) if e != got => Err(Error::DimensionMismatch { expected: e, got }),
        _ => Ok(()),
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_color_png(path: &Path, img: &ColorImage) -> Result<()> {
    let mut raw = Vec::with_capacity(img.data.len() * 3);
    for p in &img.data {
        raw.extend(p.iter().map(|&v| quantize_u8(v)));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size");
    save(path, &buf)
}

pub fn read_color_png(path: &Path, expected: Option<(usize, usize)>) -> Result<ColorImage> {
    let img = match read_png(path)? {
        DynamicImage::ImageRgb8(b) => b,
        DynamicImage::ImageRgba8(b) => DynamicImage::ImageRgba8(b).to_rgb8(),
        DynamicImage::ImageLuma8(b) => DynamicImage::ImageLuma8(b).to_rgb8(),
        _ => return Err(malformed(path, "expected an 8-bit color PNG")),
    };
    let dims = (img.width() as usize, img.height() as usize);
    check_dims(dims, expected)?;
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok(ColorImage {
        width: dims.0,
        height: dims.1,
        data,
    })
}

pub fn encode_depth(d: Option<f64>) -> u16 {
    match d {
        Some(v) => (v * DEPTH_SCALE).round().clamp(1.0, 65535.0) as u16,
        None => 0,
    }
}

pub fn write_depth_png(path: &Path, depth: &DenseDepthMap) -> Result<()> {
    let raw: Vec<u16> = (0..depth.depth.len()).map(|i| encode_depth(depth.at(i))).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("buffer size");
    save(path, &buf)
}

pub fn write_sparse_depth_png(path: &Path, depth: &SparseDepthMap) -> Result<()> {
    write_depth_png(path, &depth.to_dense())
}

/// Reads a depth PNG; raw 0 becomes an unmeasured pixel.
pub fn read_depth_png(path: &Path, expected: Option<(usize, usize)>) -> Result<SparseDepthMap> {
    let img = match read_png(path)? {
        DynamicImage::ImageLuma16(b) => b,
        _ => return Err(malformed(path, "expected a 16-bit grayscale depth PNG")),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_dims((w, h), expected)?;
    let mut depth = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for p in img.pixels() {
        let raw = p[0];
        mask.push(raw != 0);
        depth.push(raw as f64 / DEPTH_SCALE);
    }
    Ok(SparseDepthMap {
        width: w,
        height: h,
        depth: depth.iter().zip(&mask).map(|(&d, &m)| if m { d } else { 0.0 }).collect(),
        mask,
    })
}

pub fn encode_flow_component(u: f64) -> u16 {
    (u * FLOW_SCALE + FLOW_OFFSET).round().clamp(0.0, 65535.0) as u16
}

pub fn decode_flow_component(raw: u16) -> f64 {
    (raw as f64 - FLOW_OFFSET) / FLOW_SCALE
}

pub fn write_flow_png(path: &Path, flow: &FlowField) -> Result<()> {
    let mut raw = Vec::with_capacity(flow.flow.len() * 3);
    for (u, &v) in flow.flow.iter().zip(&flow.valid) {
        raw.push(encode_flow_component(u.x));
        raw.push(encode_flow_component(u.y));
        raw.push(v as u16);
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(flow.width as u32, flow.height as u32, raw).expect("buffer size");
    save(path, &buf)
}

pub fn read_flow_png(path: &Path, expected: Option<(usize, usize)>) -> Result<FlowField> {
    let img = match read_png(path)? {
        DynamicImage::ImageRgb16(b) => b,
        _ => return Err(malformed(path, "expected a 16-bit RGB flow PNG")),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_dims((w, h), expected)?;
    let mut flow = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for p in img.pixels() {
        if p[2] > 1 {
            return Err(malformed(path, format!("validity channel must be 0 or 1, found {}", p[2])));
        }
        flow.push(Vector2::new(decode_flow_component(p[0]), decode_flow_component(p[1])));
        valid.push(p[2] == 1);
    }
    Ok(FlowField {
        width: w,
        height: h,
        flow,
        valid,
    })
}

pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    if labels.iter().any(|&l| l > u16::MAX as usize) {
        return Err(Error::InvalidParameter("label id exceeds 16 bits".into()));
    }
    let raw: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer size");
    save(path, &buf)
}

pub fn read_label_png(path: &Path, expected: Option<(usize, usize)>) -> Result<(usize, usize, Vec<usize>)> {
    let img = match read_png(path)? {
        DynamicImage::ImageLuma16(b) => b,
        _ => return Err(malformed(path, "expected a 16-bit grayscale label PNG")),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_dims((w, h), expected)?;
    Ok((w, h, img.pixels().map(|p| p[0] as usize).collect()))
}
