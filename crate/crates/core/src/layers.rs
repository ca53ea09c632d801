//! ILM and RPE boundary segmentation via shortest paths in a column-advancing
//! pixel graph, plus the retinal ROI mask that restricts the cyst search.
//!
//! Nodes are pixels; edges connect 8-neighbors restricted to moves with
//! `dx = +1, dy in {-1, 0, +1}`. The edge weight favors strong vertical
//! intensity transitions of the requested polarity:
//!
//! ```text
//! weight(a, b) = 2 - (g(a) + g(b)) + w_min
//! ```
//!
//! where `g` is the polarity-rectified vertical gradient normalized to
//! `[0, 1]` and `w_min = 1e-5`. Virtual nodes on both sides connect to every
//! first/last-column pixel with weight `w_min`, so no endpoint seeding is
//! needed. The graph is a DAG, so a forward sweep with deterministic
//! lowest-row tie-breaking finds the optimal path.

use thiserror::Error;

use crate::volume::{BinaryMask, MaskSource, Slice};

/// Additive weight floor keeping all edge weights strictly positive.
pub const EDGE_WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LayersError {
    #[error("layer ordering unsatisfiable (ILM does not stay above RPE)")]
    LayersCrossed,
    #[error("invalid boundaries: {0}")]
    InvalidBoundaries(String),
}

/// Tunables for layer segmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    /// Rows below the ILM where the RPE search starts.
    pub rpe_offset: usize,
    /// Largest allowed column-to-column row change in a valid boundary.
    pub max_jump: usize,
}

impl Default for LayerParams {
    fn default() -> Self {
        LayerParams {
            rpe_offset: 10,
            max_jump: 15,
        }
    }
}

/// Per-column ILM and RPE row coordinates for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBoundaries {
    ilm_row: Vec<usize>,
    rpe_row: Vec<usize>,
}

impl LayerBoundaries {
    /// Validates ordering (`ilm < rpe < height` per column) and smoothness
    /// (jumps bounded by `max_jump`).
    pub fn new(
        ilm_row: Vec<usize>,
        rpe_row: Vec<usize>,
        height: usize,
        max_jump: usize,
    ) -> Result<Self, LayersError> {
        if ilm_row.len() != rpe_row.len() || ilm_row.is_empty() {
            return Err(LayersError::InvalidBoundaries(
                "boundary arrays must be non-empty and equal length".into(),
            ));
        }
        for x in 0..ilm_row.len() {
            if ilm_row[x] >= rpe_row[x] || rpe_row[x] >= height {
                return Err(LayersError::InvalidBoundaries(format!(
                    "column {x}: need ilm < rpe < height, got {} / {} / {height}",
                    ilm_row[x], rpe_row[x]
                )));
            }
            if x > 0 {
                let jump_i = ilm_row[x].abs_diff(ilm_row[x - 1]);
                let jump_r = rpe_row[x].abs_diff(rpe_row[x - 1]);
                if jump_i > max_jump || jump_r > max_jump {
                    return Err(LayersError::InvalidBoundaries(format!(
                        "column {x}: jump exceeds {max_jump}"
                    )));
                }
            }
        }
        Ok(LayerBoundaries { ilm_row, rpe_row })
    }

    pub fn width(&self) -> usize {
        self.ilm_row.len()
    }

    pub fn ilm(&self) -> &[usize] {
        &self.ilm_row
    }

    pub fn rpe(&self) -> &[usize] {
        &self.rpe_row
    }
}

/// Which vertical transition a boundary search looks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Dark above, bright below (`I(y+1) - I(y) > 0`).
    DarkToLight,
    /// Bright above, dark below.
    LightToDark,
}

/// Edge-weight field for the boundary graph: the rectified, `[0,1]`-normalized
/// vertical gradient of a slice.
#[derive(Debug, Clone)]
pub struct GradientWeights {
    width: usize,
    height: usize,
    g: Vec<f64>,
}

impl GradientWeights {
    /// Builds weights from a slice (`build_gradient_weights`).
    pub fn from_slice(s: &Slice, polarity: Polarity) -> Self {
        let raw = rectified_gradient(s, polarity);
        Self::from_raw(s.width(), s.height(), raw)
    }

    /// Like [`GradientWeights::from_slice`] but with all gradient responses
    /// at rows `y <= floor[x]` forced to zero before normalization. Used for
    /// the RPE pass, which searches strictly below the ILM.
    pub fn from_slice_below(s: &Slice, polarity: Polarity, floor: &[usize]) -> Self {
        assert_eq!(floor.len(), s.width(), "one floor row per column");
        let mut raw = rectified_gradient(s, polarity);
        for y in 0..s.height() {
            for x in 0..s.width() {
                if y <= floor[x] {
                    raw[y * s.width() + x] = 0.0;
                }
            }
        }
        Self::from_raw(s.width(), s.height(), raw)
    }

    fn from_raw(width: usize, height: usize, mut raw: Vec<f64>) -> Self {
        let max = raw.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in &mut raw {
                *v /= max;
            }
        }
        GradientWeights {
            width,
            height,
            g: raw,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Normalized rectified gradient at a pixel.
    pub fn gradient(&self, x: usize, y: usize) -> f64 {
        self.g[y * self.width + x]
    }

    /// Weight of the edge between two pixels (callers are expected to pass
    /// column-advancing pairs; the formula itself is position-agnostic).
    pub fn edge_weight(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        2.0 - (self.gradient(a.0, a.1) + self.gradient(b.0, b.1)) + EDGE_WEIGHT_FLOOR
    }
}

fn rectified_gradient(s: &Slice, polarity: Polarity) -> Vec<f64> {
    let (w, h) = (s.width(), s.height());
    let mut raw = vec![0.0f64; w * h];
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let d = s.get(x, y + 1) as f64 - s.get(x, y) as f64;
            let v = match polarity {
                Polarity::DarkToLight => d.max(0.0),
                Polarity::LightToDark => (-d).max(0.0),
            };
            raw[y * w + x] = v;
        }
    }
    raw
}

/// Minimum-weight left-to-right path through a weight field, one row per
/// column. Ties prefer the smaller row index, so results are deterministic.
/// Returns the per-column rows and the total path weight (including both
/// virtual endpoint edges).
pub fn shortest_path_rows(gw: &GradientWeights) -> (Vec<usize>, f64) {
    let (w, h) = (gw.width, gw.height);
    assert!(w >= 1 && h >= 1);
    // dist[y] = best cost from the virtual source to (x, y).
    let mut dist = vec![EDGE_WEIGHT_FLOOR; h];
    let mut pred = vec![0usize; w * h];
    let mut next = vec![f64::INFINITY; h];
    for x in 1..w {
        for item in next.iter_mut() {
            *item = f64::INFINITY;
        }
        for y_to in 0..h {
            let lo = y_to.saturating_sub(1);
            let hi = (y_to + 1).min(h - 1);
            // Predecessors visited in ascending row order with a strict
            // comparison: ties keep the smallest row.
            for (y_from, &d) in dist.iter().enumerate().take(hi + 1).skip(lo) {
                let cost = d + gw.edge_weight((x - 1, y_from), (x, y_to));
                if cost < next[y_to] {
                    next[y_to] = cost;
                    pred[x * h + y_to] = y_from;
                }
            }
        }
        std::mem::swap(&mut dist, &mut next);
    }

    let mut best_y = 0;
    let mut best = f64::INFINITY;
    for (y, &d) in dist.iter().enumerate() {
        let total = d + EDGE_WEIGHT_FLOOR;
        if total < best {
            best = total;
            best_y = y;
        }
    }
    let mut rows = vec![0usize; w];
    rows[w - 1] = best_y;
    for x in (1..w).rev() {
        rows[x - 1] = pred[x * h + rows[x]];
    }
    (rows, best)
}

/// Finds the strongest boundary of the given polarity across the whole
/// slice. The returned row per column is the upper pixel of the transition
/// pair (the path itself).
pub fn shortest_boundary(s: &Slice, polarity: Polarity) -> Vec<usize> {
    let gw = GradientWeights::from_slice(s, polarity);
    shortest_path_rows(&gw).0
}

/// Segments ILM and RPE on a (denoised) slice.
///
/// The ILM is the strongest dark-to-light boundary over the full slice.
/// The RPE is the strongest dark-to-light boundary found after masking all
/// gradient response at rows `<= ilm + rpe_offset` to zero. Both are
/// reported as the first row *below* the transition (the bright side), so a
/// two-band image with its first bright row at `r` yields boundary `r`.
pub fn segment_layers(s: &Slice, params: &LayerParams) -> Result<LayerBoundaries, LayersError> {
    let h = s.height();
    let gw = GradientWeights::from_slice(s, Polarity::DarkToLight);
    let (path1, _) = shortest_path_rows(&gw);
    let ilm: Vec<usize> = path1.iter().map(|&y| (y + 1).min(h - 1)).collect();

    let floor: Vec<usize> = ilm.iter().map(|&y| y + params.rpe_offset).collect();
    let gw2 = GradientWeights::from_slice_below(s, Polarity::DarkToLight, &floor);
    let (path2, _) = shortest_path_rows(&gw2);
    let rpe: Vec<usize> = path2.iter().map(|&y| (y + 1).min(h - 1)).collect();

    if ilm.iter().zip(&rpe).any(|(&i, &r)| i >= r) {
        return Err(LayersError::LayersCrossed);
    }
    LayerBoundaries::new(ilm, rpe, h, params.max_jump.max(1))
}

/// Mask of the retinal band: true exactly where `ilm[x] < y < rpe[x]`.
pub fn roi_mask(b: &LayerBoundaries, width: usize, height: usize) -> BinaryMask {
    assert_eq!(b.width(), width, "boundaries must match the slice width");
    let mut m = BinaryMask::all_false(width, height, MaskSource::Prediction);
    for x in 0..width {
        let lo = b.ilm()[x] + 1;
        let hi = b.rpe()[x].min(height);
        for y in lo..hi {
            m.set(x, y, true);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::PixelRange;

    /// Two horizontal bands: rows `0..edge` at `low`, rows `edge..` at `high`.
    fn two_band(w: usize, h: usize, edge: usize, low: f32, high: f32) -> Slice {
        let mut s = Slice::constant(w, h, low, PixelRange::Unit);
        for y in edge..h {
            for x in 0..w {
                s.set(x, y, high);
            }
        }
        s
    }

    #[test]
    fn edge_weight_extremes() {
        // Both pixels at maximal rectified gradient 1 -> weight = w_min.
        let s = two_band(4, 4, 2, 0.0, 1.0);
        let gw = GradientWeights::from_slice(&s, Polarity::DarkToLight);
        assert!((gw.gradient(0, 1) - 1.0).abs() < 1e-12);
        let w = gw.edge_weight((0, 1), (1, 1));
        assert!((w - EDGE_WEIGHT_FLOOR).abs() < 1e-12);
        // Zero gradient at both pixels -> weight = 2 + w_min.
        let w0 = gw.edge_weight((0, 3), (1, 3));
        assert!((w0 - (2.0 + EDGE_WEIGHT_FLOOR)).abs() < 1e-12);
    }

    #[test]
    fn min_weight_edges_sit_at_the_transition_rows() {
        // Dark above, bright below, first bright row r = 9 on a 16x16 image.
        let r = 9;
        let s = two_band(16, 16, r, 0.1, 0.9);
        let gw = GradientWeights::from_slice(&s, Polarity::DarkToLight);
        let mut best = f64::INFINITY;
        let mut best_rows = (0, 0);
        for y in 0..15 {
            let w = gw.edge_weight((3, y), (4, y));
            if w < best {
                best = w;
                best_rows = (y, y);
            }
        }
        // Grad peaks at row r-1 (pair r-1 -> r), so minimal edges touch {r-1, r}.
        assert_eq!(best_rows.0, r - 1);
        assert!((best - EDGE_WEIGHT_FLOOR).abs() < 1e-9);
    }

    #[test]
    fn boundary_follows_two_band_edge() {
        let r = 11;
        let s = two_band(32, 24, r, 0.2, 0.8);
        let rows = shortest_boundary(&s, Polarity::DarkToLight);
        for (x, &y) in rows.iter().enumerate() {
            assert!(
                y + 1 >= r && y <= r,
                "column {x} row {y} not within r±1 of {r}"
            );
        }
    }

    #[test]
    fn tie_breaking_picks_the_upper_edge_and_is_deterministic() {
        // Two identical dark-to-light edges at rows r1 < r2.
        let (r1, r2) = (6, 16);
        let mut s = Slice::constant(20, 24, 0.2, PixelRange::Unit);
        for y in r1..10 {
            for x in 0..20 {
                s.set(x, y, 0.8);
            }
        }
        for y in r2..24 {
            for x in 0..20 {
                s.set(x, y, 0.8);
            }
        }
        let a = shortest_boundary(&s, Polarity::DarkToLight);
        let b = shortest_boundary(&s, Polarity::DarkToLight);
        assert_eq!(a, b);
        assert!(
            a.iter().all(|&y| y == r1 - 1),
            "expected the upper edge, got {a:?}"
        );
    }

    #[test]
    fn flat_weights_yield_feasible_monotone_path() {
        let s = Slice::constant(16, 12, 0.5, PixelRange::Unit);
        let rows = shortest_boundary(&s, Polarity::DarkToLight);
        for x in 1..rows.len() {
            assert!(rows[x].abs_diff(rows[x - 1]) <= 1);
        }
    }

    #[test]
    fn constant_slice_reports_layers_crossed() {
        let s = Slice::constant(32, 32, 0.3, PixelRange::Unit);
        assert!(matches!(
            segment_layers(&s, &LayerParams::default()),
            Err(LayersError::LayersCrossed)
        ));
    }

    #[test]
    fn flat_layer_phantom_yields_flat_boundaries() {
        use crate::denoise::{tv_denoise, TvParams};
        use crate::phantom::{generate_phantom, LayerProfile, PhantomSpec};
        let spec = PhantomSpec {
            n_slices: 1,
            cysts_per_slice: 2..=2,
            cyst_area_range: 200.0..=800.0,
            speckle_sigma: 0.3,
            layer_profile: LayerProfile {
                amplitude: 0.0,
                ..LayerProfile::default()
            },
            seed: 61,
            ..PhantomSpec::default()
        };
        let (volume, truth) = generate_phantom(&spec).unwrap();
        let den = tv_denoise(&volume.slices[0].to_unit(), &TvParams::default()).unwrap();
        let b = segment_layers(&den, &LayerParams::default()).unwrap();
        let t = &truth.boundaries[0];
        for x in 0..b.width() {
            assert!(
                b.ilm()[x].abs_diff(t.ilm()[x]) <= 1,
                "ILM off at column {x}"
            );
            assert!(
                b.rpe()[x].abs_diff(t.rpe()[x]) <= 1,
                "RPE off at column {x}"
            );
        }
    }

    #[test]
    fn roi_mask_counts_and_empty_interval() {
        let b = LayerBoundaries::new(vec![10; 512], vec![20; 512], 256, 15).unwrap();
        let m = roi_mask(&b, 512, 256);
        assert_eq!(m.count_true(), 512 * 9);

        let b2 = LayerBoundaries::new(vec![10; 64], vec![11; 64], 256, 15).unwrap();
        let m2 = roi_mask(&b2, 64, 256);
        assert_eq!(m2.count_true(), 0);
    }

    #[test]
    fn roi_dilation_is_strict_superset() {
        let ilm = vec![12; 64];
        let rpe = vec![30; 64];
        let b = LayerBoundaries::new(ilm.clone(), rpe.clone(), 64, 15).unwrap();
        let wider = LayerBoundaries::new(
            ilm.iter().map(|&v| v - 1).collect(),
            rpe.iter().map(|&v| v + 1).collect(),
            64,
            15,
        )
        .unwrap();
        let m = roi_mask(&b, 64, 64);
        let mw = roi_mask(&wider, 64, 64);
        let mut strictly_more = false;
        for (a, b) in m.bits().iter().zip(mw.bits()) {
            assert!(!a || *b, "dilated ROI must contain the original");
            if *b && !a {
                strictly_more = true;
            }
        }
        assert!(strictly_more);
    }

    #[test]
    fn boundary_validation_rejects_crossings_and_jumps() {
        assert!(LayerBoundaries::new(vec![10, 10], vec![10, 12], 32, 15).is_err());
        assert!(LayerBoundaries::new(vec![10, 10], vec![12, 31], 32, 15).is_err());
        assert!(LayerBoundaries::new(vec![10, 10], vec![12, 32], 32, 15).is_err());
    }

    /// Exhaustive path enumeration for small widths; compares weight and
    /// tie-broken rows against the sweep.
    fn enumerate_best(gw: &GradientWeights) -> (Vec<usize>, f64) {
        let (w, _h) = (gw.width(), gw.height());
        assert!(w <= 10, "enumeration is exponential in width");
        let mut best_rows = Vec::new();
        let mut best = f64::INFINITY;
        let mut rows = vec![0usize; w];
        fn recurse(
            gw: &GradientWeights,
            rows: &mut Vec<usize>,
            x: usize,
            cost: f64,
            best: &mut f64,
            best_rows: &mut Vec<usize>,
        ) {
            let (w, h) = (gw.width(), gw.height());
            if x == w {
                let total = cost + EDGE_WEIGHT_FLOOR;
                if total < *best {
                    *best = total;
                    *best_rows = rows.clone();
                }
                return;
            }
            let candidates: Vec<usize> = if x == 0 {
                (0..h).collect()
            } else {
                let y = rows[x - 1];
                (y.saturating_sub(1)..=(y + 1).min(h - 1)).collect()
            };
            for y in candidates {
                let step = if x == 0 {
                    EDGE_WEIGHT_FLOOR
                } else {
                    gw.edge_weight((x - 1, rows[x - 1]), (x, y))
                };
                rows[x] = y;
                recurse(gw, rows, x + 1, cost + step, best, best_rows);
            }
        }
        recurse(gw, &mut rows, 0, 0.0, &mut best, &mut best_rows);
        (best_rows, best)
    }

    #[test]
    fn sweep_matches_exhaustive_enumeration_on_small_grids() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (w, h) = (7, 9);
            let data: Vec<f32> = (0..w * h).map(|_| rng.gen::<f32>()).collect();
            let s = Slice::new(w, h, data, PixelRange::Unit);
            let gw = GradientWeights::from_slice(&s, Polarity::DarkToLight);
            let (rows_dp, cost_dp) = shortest_path_rows(&gw);
            let (rows_bf, cost_bf) = enumerate_best(&gw);
            assert_eq!(cost_dp, cost_bf, "weights must match exactly");
            assert_eq!(rows_dp, rows_bf, "tie-broken paths must match");
        }
    }
}
