//! wasm-bindgen bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use drupi_core::coreset::{covering_radius, select_herding, select_kcenter, select_random};
use drupi_core::data::{decode, encode, header_json, make_blobs, BlobSpec, ReducedDataset};
use drupi_core::Tensor;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// One noisy sample per class, `classes * size * size` grey pixels in `[0, 1]`.
#[wasm_bindgen]
pub fn blob_samples(classes: usize, size: usize, contrast: f32, sigma: f32, seed: u64) -> Result<Vec<f32>, JsError> {
    let spec = BlobSpec { classes, per_class: 1, size, contrast, sigma, ..BlobSpec::default() };
    Ok(make_blobs(&spec, seed).map_err(js_err)?.images.data().to_vec())
}

/// Selection result on a single class of 2-D points.
#[wasm_bindgen(getter_with_clone)]
pub struct Selection {
    /// Indices in selection order.
    pub indices: Vec<u32>,
    /// Largest distance from any point to its nearest selected point.
    pub radius: f64,
}

/// Picks `k` of the points (`xy` interleaved) with `random`, `herding` or `kcenter`.
#[wasm_bindgen]
pub fn select_points(xy: Vec<f32>, method: &str, k: usize, seed: u64) -> Result<Selection, JsError> {
    if xy.len() % 2 != 0 {
        return Err(JsError::new("coordinates must come in pairs"));
    }
    let n = xy.len() / 2;
    let k = k.min(n);
    let labels = vec![0usize; n];
    let pts = Tensor::new(vec![n, 2], xy).map_err(js_err)?;
    let idx = match method {
        "random" => select_random(&labels, &[k], seed),
        "herding" => select_herding(&pts, &labels, &[k]),
        "kcenter" => select_kcenter(&pts, &labels, &[k]),
        other => return Err(JsError::new(&format!("unknown method `{other}`"))),
    }
    .map_err(js_err)?;
    let radius = if idx.is_empty() { 0.0 } else { covering_radius(&pts, &labels, &idx).map_err(js_err)? };
    Ok(Selection { indices: idx.into_iter().map(|i| i as u32).collect(), radius })
}

/// Encodes a small blob-based reduced dataset, optionally flips one byte
/// counted from the end, and decodes it again. Returns the header JSON on
/// success; decoding errors (such as a CRC mismatch) are returned as errors.
pub fn container_check_impl(flip_from_end: Option<usize>) -> Result<String, String> {
    let spec = BlobSpec { classes: 3, per_class: 2, size: 8, ..BlobSpec::default() };
    let ds = ReducedDataset::from_labeled(&make_blobs(&spec, 0).map_err(|e| e.to_string())?);
    let mut bytes = encode(&ds).map_err(|e| e.to_string())?;
    if let Some(off) = flip_from_end {
        let len = bytes.len();
        if off == 0 || off > len {
            return Err(format!("offset must be in 1..={len}"));
        }
        bytes[len - off] ^= 0x01;
    }
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    if back != ds {
        return Err("decoded dataset differs from the original".into());
    }
    let header = header_json(&bytes).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&header).map_err(|e| e.to_string())
}

/// `flip_from_end = 0` leaves the bytes intact.
#[wasm_bindgen]
pub fn container_check(flip_from_end: usize) -> Result<String, JsError> {
    container_check_impl((flip_from_end > 0).then_some(flip_from_end)).map_err(|e| JsError::new(&e))
}
