//! 8-bit PNG/PPM decoding into [0, 1] pixel grids.

use std::path::Path;

use anyhow::{Context, Result};
use tinyvlm_core::data::parse_toy_ref;
use tinyvlm_core::image::PixelGrid;

pub fn decode_image(path: &Path) -> Result<PixelGrid> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(PixelGrid::new(h as usize, w as usize, data)?)
}

/// Resolves either a `toy:<seed>:<index>` reference or a file path.
pub fn resolve_image(reference: &str, toy_side: usize) -> Result<PixelGrid> {
    if let Some((seed, index)) = parse_toy_ref(reference) {
        return Ok(tinyvlm_core::data::gen_toy_image(seed, index, toy_side));
    }
    decode_image(Path::new(reference))
}
