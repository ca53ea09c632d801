//! Dice computation, per-volume and per-scanner statistics, the zero-Dice
//! exclusion variant, and size-stratified detection rates.
//!
//! Dice of two masks is `2|A ∩ B| / (|A| + |B|)`. Two empty masks agree
//! perfectly on absence and score 1.0; such slices are reported separately
//! as true-negative slices so they are distinguishable from real matches.
//! Exactly one empty mask scores 0.0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mser::CandidateRegion;
use crate::volume::{BinaryMask, Scanner};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no slices remain after zero-Dice exclusion")]
    EmptyAfterExclusion,
    #[error("need at least 2 volumes with ground truth for cross-validation, got {0}")]
    InsufficientVolumes(usize),
    #[error("ground truth required: volume '{0}' has none")]
    MissingGroundTruth(String),
}

/// Dice coefficient of prediction vs ground truth.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EvalError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    Ok(match (a, b) {
        (0, 0) => 1.0,
        _ => 2.0 * inter as f64 / (a + b) as f64,
    })
}

/// Mean / max / population standard deviation of a Dice list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceStats {
    pub mean: f64,
    pub max: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregates a Dice list; `exclude_zero` drops exact-zero entries first.
pub fn volume_stats(dices: &[f64], exclude_zero: bool) -> Result<DiceStats, EvalError> {
    let kept: Vec<f64> = if exclude_zero {
        dices.iter().copied().filter(|&d| d != 0.0).collect()
    } else {
        dices.to_vec()
    };
    if kept.is_empty() {
        return Err(EvalError::EmptyAfterExclusion);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let max = kept.iter().cloned().fold(f64::MIN, f64::max);
    let var = kept.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(DiceStats {
        mean,
        max,
        std: var.sqrt(),
        n: kept.len(),
    })
}

/// Cyst size classes by pixel area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Small < 200, Medium in [200, 2000], Large > 2000.
    pub fn of_area(area: usize) -> SizeClass {
        if area < 200 {
            SizeClass::Small
        } else if area <= 2000 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn all() -> [SizeClass; 3] {
        [SizeClass::Small, SizeClass::Medium, SizeClass::Large]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

/// One ground-truth connected component.
#[derive(Debug, Clone)]
pub struct GtRegion {
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    pub class: SizeClass,
}

/// 4-connected components of a ground-truth mask, in scan order.
pub fn gt_regions(mask: &BinaryMask) -> Vec<GtRegion> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push((i % w, i / w));
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if !seen[j] && mask.bits()[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let area = pixels.len();
        out.push(GtRegion {
            pixels,
            area,
            class: SizeClass::of_area(area),
        });
    }
    out
}

/// Per-class detection tally for one pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SizeDetection {
    pub n_present: usize,
    pub detected: usize,
}

impl SizeDetection {
    pub fn percent(&self) -> Option<f64> {
        (self.n_present > 0).then(|| 100.0 * self.detected as f64 / self.n_present as f64)
    }
}

/// Counts, per size class, how many ground-truth regions are covered by at
/// least one candidate with `overlap / gt_area >= 0.5`. Ground-truth regions
/// are per-slice 2-D connected components; slices are zipped positionally
/// with their candidate lists.
pub fn size_stratified_detection(
    gt_masks: &[BinaryMask],
    candidates_per_slice: &[Vec<&CandidateRegion>],
) -> [SizeDetection; 3] {
    assert_eq!(
        gt_masks.len(),
        candidates_per_slice.len(),
        "one candidate list per slice"
    );
    let mut tally = [SizeDetection::default(); 3];
    for (mask, candidates) in gt_masks.iter().zip(candidates_per_slice) {
        let (w, h) = (mask.width(), mask.height());
        let regions = gt_regions(mask);
        if regions.is_empty() {
            continue;
        }
        // Map each GT pixel to its region index.
        let mut region_of = vec![usize::MAX; w * h];
        for (ri, r) in regions.iter().enumerate() {
            for &(x, y) in &r.pixels {
                region_of[y * w + x] = ri;
            }
        }
        let mut covered = vec![0usize; regions.len()];
        let mut detected = vec![false; regions.len()];
        for cand in candidates {
            for c in covered.iter_mut() {
                *c = 0;
            }
            for &(x, y) in &cand.pixels {
                let ri = region_of[y * w + x];
                if ri != usize::MAX {
                    covered[ri] += 1;
                }
            }
            for (ri, r) in regions.iter().enumerate() {
                if 2 * covered[ri] >= r.area {
                    detected[ri] = true;
                }
            }
        }
        for (ri, r) in regions.iter().enumerate() {
            let slot = &mut tally[r.class as usize];
            slot.n_present += 1;
            slot.detected += detected[ri] as usize;
        }
    }
    tally
}

/// Per-volume evaluation results.
#[derive(Debug, Clone)]
pub struct VolumeEval {
    pub volume_id: String,
    pub scanner: Scanner,
    pub per_slice_dice: Vec<f64>,
    pub stats: DiceStats,
    /// Stats excluding zero-Dice slices; absent when every slice is zero.
    pub stats_nonzero: Option<DiceStats>,
    /// Slices with Dice exactly 0.
    pub zero_dice_slices: usize,
    /// Slices where prediction and ground truth are both empty (Dice 1.0 by
    /// the perfect-agreement-on-absence convention).
    pub true_negative_slices: usize,
}

impl VolumeEval {
    pub fn from_dices(
        volume_id: String,
        scanner: Scanner,
        per_slice_dice: Vec<f64>,
        true_negative_slices: usize,
    ) -> Self {
        let stats = volume_stats(&per_slice_dice, false).expect("volumes have >= 1 slice");
        let stats_nonzero = volume_stats(&per_slice_dice, true).ok();
        let zero_dice_slices = per_slice_dice.iter().filter(|&&d| d == 0.0).count();
        VolumeEval {
            volume_id,
            scanner,
            per_slice_dice,
            stats,
            stats_nonzero,
            zero_dice_slices,
            true_negative_slices,
        }
    }
}

/// Per-scanner rollup: the mean is the unweighted average of per-volume
/// means; max and std are taken over the scanner's pooled slice list.
#[derive(Debug, Clone)]
pub struct ScannerEval {
    pub scanner: Scanner,
    pub n_volumes: usize,
    pub mean_of_volume_means: f64,
    pub max: f64,
    pub std: f64,
    pub mean_of_volume_means_nonzero: Option<f64>,
}

/// Full evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_volume: Vec<VolumeEval>,
    pub per_scanner: Vec<ScannerEval>,
    pub overall: DiceStats,
    pub overall_nonzero: Option<DiceStats>,
    pub detection_post_mser: [SizeDetection; 3],
    pub detection_post_forest: [SizeDetection; 3],
    /// Whether the nonzero-slice blocks were requested.
    pub include_nonzero_block: bool,
    pub seed: u64,
}

impl EvalReport {
    pub fn assemble(
        mut per_volume: Vec<VolumeEval>,
        detection_post_mser: [SizeDetection; 3],
        detection_post_forest: [SizeDetection; 3],
        include_nonzero_block: bool,
        seed: u64,
    ) -> EvalReport {
        per_volume.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));

        let mut by_scanner: BTreeMap<Scanner, Vec<&VolumeEval>> = BTreeMap::new();
        for ve in &per_volume {
            by_scanner.entry(ve.scanner).or_default().push(ve);
        }
        let per_scanner = by_scanner
            .into_iter()
            .map(|(scanner, vols)| {
                let mean_of_volume_means =
                    vols.iter().map(|v| v.stats.mean).sum::<f64>() / vols.len() as f64;
                let pooled: Vec<f64> = vols
                    .iter()
                    .flat_map(|v| v.per_slice_dice.iter().copied())
                    .collect();
                let pooled_stats = volume_stats(&pooled, false).expect("non-empty");
                let nonzero_means: Vec<f64> = vols
                    .iter()
                    .filter_map(|v| v.stats_nonzero.map(|s| s.mean))
                    .collect();
                ScannerEval {
                    scanner,
                    n_volumes: vols.len(),
                    mean_of_volume_means,
                    max: pooled_stats.max,
                    std: pooled_stats.std,
                    mean_of_volume_means_nonzero: (!nonzero_means.is_empty())
                        .then(|| nonzero_means.iter().sum::<f64>() / nonzero_means.len() as f64),
                }
            })
            .collect();

        let all: Vec<f64> = per_volume
            .iter()
            .flat_map(|v| v.per_slice_dice.iter().copied())
            .collect();
        let overall = volume_stats(&all, false).expect("non-empty report");
        let overall_nonzero = volume_stats(&all, true).ok();

        EvalReport {
            per_volume,
            per_scanner,
            overall,
            overall_nonzero,
            detection_post_mser,
            detection_post_forest,
            include_nonzero_block,
            seed,
        }
    }

    /// Human-readable table rendering. Deterministic byte-for-byte.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluation report (seed {})", self.seed);
        let _ = writeln!(
            out,
            "ground truth: union of graders; detection rule: overlap/gt_area >= 0.5 per slice-level 4-connected component"
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "per-volume dice (all slices)");
        let _ = writeln!(
            out,
            "{:<20} {:>10} {:>8} {:>8} {:>8} {:>6} {:>8} {:>8}",
            "volume", "scanner", "mean", "max", "std", "n", "zero-dc", "true-neg"
        );
        for v in &self.per_volume {
            let _ = writeln!(
                out,
                "{:<20} {:>10} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>8} {:>8}",
                v.volume_id,
                v.scanner.to_string(),
                v.stats.mean,
                v.stats.max,
                v.stats.std,
                v.stats.n,
                v.zero_dice_slices,
                v.true_negative_slices,
            );
        }
        if self.include_nonzero_block {
            let _ = writeln!(out);
            let _ = writeln!(out, "per-volume dice (excluding zero-DC slices)");
            let _ = writeln!(
                out,
                "{:<20} {:>10} {:>8} {:>8} {:>8} {:>6}",
                "volume", "scanner", "mean", "max", "std", "n"
            );
            for v in &self.per_volume {
                match &v.stats_nonzero {
                    Some(s) => {
                        let _ = writeln!(
                            out,
                            "{:<20} {:>10} {:>8.4} {:>8.4} {:>8.4} {:>6}",
                            v.volume_id,
                            v.scanner.to_string(),
                            s.mean,
                            s.max,
                            s.std,
                            s.n
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            "{:<20} {:>10} {:>8} {:>8} {:>8} {:>6}",
                            v.volume_id,
                            v.scanner.to_string(),
                            "-",
                            "-",
                            "-",
                            0
                        );
                    }
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "per-scanner rollup (mean = unweighted average of volume means)"
        );
        for s in &self.per_scanner {
            let _ = write!(
                out,
                "{:<12} volumes {:>2}  mean {:.4}  max {:.4}  std {:.4}",
                s.scanner.to_string(),
                s.n_volumes,
                s.mean_of_volume_means,
                s.max,
                s.std
            );
            if self.include_nonzero_block {
                match s.mean_of_volume_means_nonzero {
                    Some(m) => {
                        let _ = writeln!(out, "  mean-nonzero {m:.4}");
                    }
                    None => {
                        let _ = writeln!(out, "  mean-nonzero -");
                    }
                }
            } else {
                let _ = writeln!(out);
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "overall: mean {:.4}  max {:.4}  std {:.4}  (n = {})",
            self.overall.mean, self.overall.max, self.overall.std, self.overall.n
        );
        if self.include_nonzero_block {
            match &self.overall_nonzero {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "overall excluding zero-DC: mean {:.4}  max {:.4}  std {:.4}  (n = {})",
                        s.mean, s.max, s.std, s.n
                    );
                }
                None => {
                    let _ = writeln!(out, "overall excluding zero-DC: no slices remain");
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "size-stratified detection (percent of GT regions detected)"
        );
        let _ = writeln!(
            out,
            "{:<8} {:>10} {:>12} {:>12}",
            "class", "present", "post-mser", "post-forest"
        );
        for class in SizeClass::all() {
            let m = self.detection_post_mser[class as usize];
            let f = self.detection_post_forest[class as usize];
            let pct = |d: SizeDetection| match d.percent() {
                Some(p) => format!("{p:.2}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>12} {:>12}",
                class.name(),
                m.n_present,
                pct(m),
                pct(f)
            );
        }
        out
    }

    /// Machine-readable line-oriented `key = value` rendering.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: String, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed".into(), self.seed.to_string());
        kv("n_volumes".into(), self.per_volume.len().to_string());
        kv("overall_mean".into(), format!("{:.6}", self.overall.mean));
        kv("overall_max".into(), format!("{:.6}", self.overall.max));
        kv("overall_std".into(), format!("{:.6}", self.overall.std));
        kv("overall_n".into(), self.overall.n.to_string());
        if let Some(s) = &self.overall_nonzero {
            kv("overall_nonzero_mean".into(), format!("{:.6}", s.mean));
            kv("overall_nonzero_max".into(), format!("{:.6}", s.max));
            kv("overall_nonzero_std".into(), format!("{:.6}", s.std));
            kv("overall_nonzero_n".into(), s.n.to_string());
        }
        for v in &self.per_volume {
            let id = &v.volume_id;
            kv(format!("volume.{id}.scanner"), v.scanner.to_string());
            kv(format!("volume.{id}.mean"), format!("{:.6}", v.stats.mean));
            kv(format!("volume.{id}.max"), format!("{:.6}", v.stats.max));
            kv(format!("volume.{id}.std"), format!("{:.6}", v.stats.std));
            kv(format!("volume.{id}.n_slices"), v.stats.n.to_string());
            kv(
                format!("volume.{id}.zero_dc_slices"),
                v.zero_dice_slices.to_string(),
            );
            kv(
                format!("volume.{id}.true_negative_slices"),
                v.true_negative_slices.to_string(),
            );
            if let Some(s) = &v.stats_nonzero {
                kv(
                    format!("volume.{id}.nonzero_mean"),
                    format!("{:.6}", s.mean),
                );
                kv(format!("volume.{id}.nonzero_max"), format!("{:.6}", s.max));
                kv(format!("volume.{id}.nonzero_std"), format!("{:.6}", s.std));
                kv(format!("volume.{id}.nonzero_n"), s.n.to_string());
            }
        }
        for s in &self.per_scanner {
            let name = s.scanner.to_string();
            kv(format!("scanner.{name}.n_volumes"), s.n_volumes.to_string());
            kv(
                format!("scanner.{name}.mean"),
                format!("{:.6}", s.mean_of_volume_means),
            );
            kv(format!("scanner.{name}.max"), format!("{:.6}", s.max));
            kv(format!("scanner.{name}.std"), format!("{:.6}", s.std));
        }
        for (stage, tally) in [
            ("post_mser", &self.detection_post_mser),
            ("post_forest", &self.detection_post_forest),
        ] {
            for class in SizeClass::all() {
                let d = tally[class as usize];
                kv(
                    format!("detection.{stage}.{}.present", class.name()),
                    d.n_present.to_string(),
                );
                kv(
                    format!("detection.{stage}.{}.detected", class.name()),
                    d.detected.to_string(),
                );
                if let Some(p) = d.percent() {
                    kv(
                        format!("detection.{stage}.{}.percent", class.name()),
                        format!("{p:.4}"),
                    );
                }
            }
        }
        out
    }
}
