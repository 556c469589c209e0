//! Small geometric helpers: cosine similarity and cell-size measurement.

use crate::error::{Error, Result};
use crate::grid::LabelMask;

/// Cosine similarity `u·v / (|u||v|)` of two 2-vectors.
pub fn cosine_similarity(u: (f64, f64), v: (f64, f64)) -> Result<f64> {
    let nu = u.0.hypot(u.1);
    let nv = v.0.hypot(v.1);
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Domain("cosine similarity of a zero or non-finite vector".into()));
    }
    Ok(((u.0 * v.0 + u.1 * v.1) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cell size of one instance: square root of its bounding-rectangle area.
pub fn bbox_cell_size(mask: &LabelMask, id: u32) -> Result<f64> {
    let bb = mask.bbox(id)?;
    Ok(((bb.width() * bb.height()) as f64).sqrt())
}

/// Median bounding-box cell size over every instance of every mask.
pub fn estimate_dataset_cell_size(masks: &[LabelMask]) -> Result<f64> {
    let mut sizes = Vec::new();
    for mask in masks {
        let pixels = mask.instance_pixels();
        for (id, px) in pixels.iter().enumerate().skip(1) {
            if !px.is_empty() {
                sizes.push(bbox_cell_size(mask, id as u32)?);
            }
        }
    }
    median(&mut sizes).ok_or_else(|| Error::EmptyInput("no cell instances in masks".into()))
}

/// Median with the mean-of-middle-two convention for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}
