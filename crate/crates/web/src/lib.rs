//! Browser demo: scale schedules, palette quantisation and SIFID on canvas pixels.

use analogy_core::eval::{sifid, ConvExtractor};
use analogy_core::pyramid::build_schedule;
use analogy_core::video::quantize;
use analogy_core::Image;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes (as in `ImageData`) to an image, dropping alpha.
pub fn from_rgba(data: &[u8], width: usize, height: usize) -> Result<Image, String> {
    if width == 0 || height == 0 || data.len() != width * height * 4 {
        return Err(format!("expected {}x{} RGBA bytes, got {}", width, height, data.len()));
    }
    let rgb = image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 4;
        image::Rgb([data[i], data[i + 1], data[i + 2]])
    });
    Ok(Image::from_rgb8(&rgb))
}

pub fn to_rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Per-scale sizes as JSON: `{"r":..,"n_max":..,"k":..,"sizes":[[h,w],..]}`.
#[wasm_bindgen]
pub fn schedule_json(height: usize, width: usize, r: f64, min_size: usize, max_size: usize, k_offset: i32) -> Result<String, JsError> {
    let s = build_schedule((height, width), r, min_size, max_size, k_offset as i64).map_err(js_err)?;
    serde_json::to_string(&s).map_err(js_err)
}

/// k-means palette quantisation; returns RGBA bytes of the same size.
#[wasm_bindgen]
pub fn quantize_rgba(data: &[u8], width: usize, height: usize, palette: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    let img = from_rgba(data, width, height).map_err(js_err)?;
    Ok(to_rgba(&quantize(&img, palette, seed as u64).map_err(js_err)?))
}

/// SIFID between two RGBA images with the seeded random extractor.
#[wasm_bindgen]
pub fn sifid_rgba(a: &[u8], aw: usize, ah: usize, b: &[u8], bw: usize, bh: usize, seed: u32) -> Result<f64, JsError> {
    let x = from_rgba(a, aw, ah).map_err(js_err)?;
    let y = from_rgba(b, bw, bh).map_err(js_err)?;
    sifid(&x, &y, &ConvExtractor::random(seed as u64, 5, 32)).map_err(js_err)
}
