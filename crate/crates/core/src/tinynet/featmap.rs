use std::path::Path;

use super::network::Record;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Channel-wise maximum of a layer output, min-max normalized to 8 bits.
/// A constant map becomes uniform mid-gray.
pub fn feature_projection(record: &Record, layer: &str) -> Result<GrayImage> {
    let t = record
        .layer_output(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let (c, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        &[n] => (1, 1, n),
        other => {
            return Err(Error::ShapeMismatch {
                context: format!("feature dump of `{layer}`"),
                expected: vec![0, 0, 0],
                got: other.to_vec(),
            })
        }
    };
    let data = t.data();
    let plane: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| data[ch * h * w + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        plane
            .iter()
            .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; plane.len()]
    };
    GrayImage::new(w, h, pixels)
}

/// Write [`feature_projection`] as a binary graymap and return it.
pub fn dump_feature_map(record: &Record, layer: &str, path: &Path) -> Result<GrayImage> {
    let img = feature_projection(record, layer)?;
    img.write_pgm(path)?;
    Ok(img)
}
