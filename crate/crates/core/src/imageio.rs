//! PNG/JPEG reading and writing. Images live in `[-1, 1]`, masks in `{0, 1}`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::params::flat_f32;

/// Converts 8-bit RGB pixels (row-major, interleaved) to a `[3, H, W]` tensor.
pub fn rgb_to_tensor(pixels: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if pixels.len() != width * height * 3 {
        return Err(Error::Argument(format!(
            "{} bytes for a {width}x{height} RGB image",
            pixels.len()
        )));
    }
    let mut planar = vec![0f32; pixels.len()];
    let plane = width * height;
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(planar, (3, height, width), &Device::Cpu)?)
}

/// Quantizes a `[3, H, W]` tensor in `[-1, 1]` back to interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Argument(format!("expected 3 channels, got {c}")));
    }
    let v = flat_f32(t)?;
    let plane = h * w;
    let mut out = vec![0u8; plane * 3];
    for i in 0..plane {
        for ch in 0..3 {
            out[i * 3 + ch] = to_byte(v[ch * plane + i]);
        }
    }
    Ok((out, w, h))
}

fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Loads an image as `[3, H, W]` in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    rgb_to_tensor(img.as_raw(), w as usize, h as usize)
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (bytes, w, h) = tensor_to_rgb(t)?;
    let img = RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Argument("image buffer size mismatch".into()))?;
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Loads an 8-bit mask as `[1, H, W]`; pixels above 127 become 1.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let v: Vec<f32> = img
        .as_raw()
        .iter()
        .map(|&p| if p > 127 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(
        v,
        (1, h as usize, w as usize),
        &Device::Cpu,
    )?)
}

/// Writes a binary raster (row-major, 1 = hole) as a 0/255 PNG.
pub fn save_mask_raster(path: &Path, data: &[u8], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Argument("mask buffer size mismatch".into()))?;
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes a `[1, H, W]` or `[H, W]` mask tensor.
pub fn save_mask(path: &Path, t: &Tensor) -> Result<()> {
    let dims = t.dims().to_vec();
    let (h, w) = match dims.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        d => {
            return Err(Error::Argument(format!(
                "mask must be [1, H, W], got {d:?}"
            )))
        }
    };
    let data: Vec<u8> = flat_f32(&t.to_dtype(DType::F32)?)?
        .iter()
        .map(|&v| u8::from(v > 0.5))
        .collect();
    save_mask_raster(path, &data, w, h)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Bilinear resize of a `[C, H, W]` tensor (align-corners off).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let v = flat_f32(t)?;
    let mut out = vec![0f32; c * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| v[ch * h * w + y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[ch * out_h * out_w + oy * out_w + ox] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(out, (c, out_h, out_w), &Device::Cpu)?)
}
