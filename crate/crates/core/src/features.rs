//! Texture descriptor for candidate bounding boxes: a 59-bin uniform
//! LBP(8,1) histogram plus 10 auxiliary scalars, 69 values total.
//!
//! The LBP code of an interior pixel compares its 8 neighbors against the
//! center, bit k set when the neighbor is strictly brighter. Neighbor order
//! (bit 0 first) runs clockwise from the top-left:
//!
//! ```text
//! 0 1 2
//! 7 c 3
//! 6 5 4
//! ```
//!
//! Codes with at most two circular 0/1 transitions are "uniform"; the 58
//! uniform codes get their own histogram bins (in ascending code order) and
//! everything else shares bin 58. A constant patch therefore lands entirely
//! in the all-zeros-code bin.

use std::sync::OnceLock;

use thiserror::Error;

use crate::layers::LayerBoundaries;
use crate::mser::CandidateRegion;
use crate::volume::{Slice, STANDARD_HEIGHT, STANDARD_WIDTH};

/// Total feature vector length: 59 histogram bins + 10 auxiliary scalars.
pub const FEATURE_LEN: usize = 69;
/// Number of LBP histogram bins.
pub const LBP_BINS: usize = 59;
/// Bounding boxes are expanded by this many pixels before extraction.
pub const PATCH_PADDING: usize = 4;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("degenerate region: area {0} is below 4 pixels")]
    DegenerateRegion(usize),
    #[error("feature vector has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Fixed-length descriptor of one candidate region.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self, FeatureError> {
        if values.len() != FEATURE_LEN {
            return Err(FeatureError::LengthMismatch {
                got: values.len(),
                expected: FEATURE_LEN,
            });
        }
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Ok(FeatureVector { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

const NEIGHBOR_OFFSETS: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

/// LBP(8,1) code of an interior pixel: bit k set iff neighbor k > center.
pub fn lbp_code(s: &Slice, x: usize, y: usize) -> u8 {
    debug_assert!(x >= 1 && y >= 1 && x + 1 < s.width() && y + 1 < s.height());
    let center = s.get(x, y);
    let mut code = 0u8;
    for (k, &(dx, dy)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let v = s.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
        if v > center {
            code |= 1 << k;
        }
    }
    code
}

fn circular_transitions(code: u8) -> u32 {
    let rotated = code.rotate_left(1);
    (code ^ rotated).count_ones()
}

/// Maps each of the 256 LBP codes to its histogram bin (0..58).
pub fn lbp_bin_table() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [LBP_BINS as u8 - 1; 256];
        let mut next = 0u8;
        for (code, bin) in table.iter_mut().enumerate() {
            if circular_transitions(code as u8) <= 2 {
                *bin = next;
                next += 1;
            }
        }
        assert_eq!(
            next as usize,
            LBP_BINS - 1,
            "there are 58 uniform LBP(8,1) codes"
        );
        table
    })
}

fn clamped_patch(s: &Slice, bbox: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
    let x0 = bbox.0.saturating_sub(PATCH_PADDING);
    let y0 = bbox.1.saturating_sub(PATCH_PADDING);
    let x1 = (bbox.2 + PATCH_PADDING).min(s.width() - 1);
    let y1 = (bbox.3 + PATCH_PADDING).min(s.height() - 1);
    (x0, y0, x1, y1)
}

/// Extracts the 69-value descriptor for one candidate.
///
/// `boundaries` feed the ROI-relative centroid feature; when layer
/// segmentation failed for the slice, the centroid is normalized by the
/// slice height instead.
pub fn extract_features(
    s: &Slice,
    saliency: &Slice,
    boundaries: Option<&LayerBoundaries>,
    region: &CandidateRegion,
) -> Result<FeatureVector, FeatureError> {
    let _ = saliency; // the region's saliency score is precomputed on it
    if region.area < 4 {
        return Err(FeatureError::DegenerateRegion(region.area));
    }
    let (px0, py0, px1, py1) = clamped_patch(s, region.bbox);
    let patch_w = px1 - px0 + 1;
    let patch_h = py1 - py0 + 1;

    // LBP histogram over patch-interior pixels that are also slice-interior.
    let table = lbp_bin_table();
    let mut hist = [0f64; LBP_BINS];
    let mut counted = 0u64;
    let ix0 = px0.max(1);
    let iy0 = py0.max(1);
    let ix1 = px1.min(s.width().saturating_sub(2));
    let iy1 = py1.min(s.height().saturating_sub(2));
    for y in iy0..=iy1 {
        for x in ix0..=ix1 {
            hist[table[lbp_code(s, x, y) as usize] as usize] += 1.0;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(FeatureError::DegenerateRegion(region.area));
    }
    for bin in hist.iter_mut() {
        *bin /= counted as f64;
    }

    // Intensity statistics over the full patch.
    let mut sum = 0f64;
    let mut sum_sq = 0f64;
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    let mut grad_sum = 0f64;
    let n_patch = (patch_w * patch_h) as f64;
    for y in py0..=py1 {
        for x in px0..=px1 {
            let v = s.get(x, y);
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
            min = min.min(v);
            max = max.max(v);
            let dx = if x + 1 < s.width() {
                s.get(x + 1, y) - v
            } else {
                0.0
            };
            let dy = if y + 1 < s.height() {
                s.get(x, y + 1) - v
            } else {
                0.0
            };
            grad_sum += ((dx * dx + dy * dy) as f64).sqrt();
        }
    }
    let mean = sum / n_patch;
    let var = (sum_sq / n_patch - mean * mean).max(0.0);

    // Region centroid, normalized within the ILM-RPE band of its column.
    let (mut cx, mut cy) = (0f64, 0f64);
    for &(x, y) in &region.pixels {
        cx += x as f64;
        cy += y as f64;
    }
    cx /= region.area as f64;
    cy /= region.area as f64;
    let centroid_y_norm = match boundaries {
        Some(b) => {
            let col = (cx.round() as usize).min(b.width() - 1);
            let (ilm, rpe) = (b.ilm()[col] as f64, b.rpe()[col] as f64);
            ((cy - ilm) / (rpe - ilm).max(1.0)).clamp(0.0, 1.0)
        }
        None => cy / s.height() as f64,
    };

    let bbox_w = (region.bbox.2 - region.bbox.0 + 1) as f64;
    let bbox_h = (region.bbox.3 - region.bbox.1 + 1) as f64;

    let mut values = Vec::with_capacity(FEATURE_LEN);
    values.extend(hist.iter().map(|&v| v as f32));
    values.push(mean as f32);
    values.push(var.sqrt() as f32);
    values.push(min);
    values.push(max);
    values.push((region.area as f64 / (STANDARD_WIDTH * STANDARD_HEIGHT) as f64) as f32);
    values.push((bbox_w / bbox_h) as f32);
    values.push((region.area as f64 / (bbox_w * bbox_h)) as f32);
    values.push(region.saliency_score as f32);
    values.push(centroid_y_norm as f32);
    values.push((grad_sum / n_patch) as f32);
    FeatureVector::new(values)
}
