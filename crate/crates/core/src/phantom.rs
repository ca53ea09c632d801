//! Synthetic OCT-like volumes with known layer boundaries, planted
//! elliptical cysts, and multiplicative Rayleigh speckle.
//!
//! The scene per slice, top to bottom:
//!
//! ```text
//! vitreous          0.10      rows y < ilm(x)
//! retinal band      0.70      ilm(x) <= y < rpe(x) - 4
//! dark strip        0.35      rpe(x) - 4 <= y < rpe(x)
//! bright RPE line   0.85      rpe(x) <= y < rpe(x) + 3
//! choroid           0.40      y >= rpe(x) + 3
//! cysts             0.15      ellipses strictly inside the band
//! ```
//!
//! Both boundaries are sinusoids; the dark strip above the bright RPE line
//! gives the RPE a dark-to-light transition that boundary search can find,
//! while the ILM transition (0.10 -> 0.70) stays the strongest in the slice.
//! Cyst/band contrast is 0.55.
//!
//! All randomness comes from ChaCha8 streams derived from the spec seed via
//! SplitMix64, one stream per slice, so generation is deterministic and
//! slice-order independent.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layers::LayerBoundaries;
use crate::volume::{
    save_volume, BinaryMask, MaskSource, OctVolume, PixelRange, Scanner, Slice, VolumeError,
};

pub const VITREOUS_INTENSITY: f32 = 0.10;
pub const BAND_INTENSITY: f32 = 0.70;
pub const STRIP_INTENSITY: f32 = 0.35;
pub const RPE_LINE_INTENSITY: f32 = 0.85;
pub const CHOROID_INTENSITY: f32 = 0.40;
pub const CYST_INTENSITY: f32 = 0.15;

/// Rows of dark strip directly above the RPE line.
const STRIP_ROWS: usize = 4;
/// Rows of bright RPE line.
const RPE_LINE_ROWS: usize = 3;
/// Margin between a cyst's top and the ILM.
const CYST_TOP_MARGIN: usize = 3;
/// Margin between a cyst's bottom and the RPE (keeps cysts off the strip).
const CYST_BOTTOM_MARGIN: usize = 10;
/// Placement attempts per cyst before giving up.
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place requested cysts without overlap after {MAX_PLACEMENT_ATTEMPTS} attempts (slice {slice})")]
    InfeasibleSpec { slice: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Sinusoidal ILM/RPE profile: `base + amplitude * sin(2*pi*x/period + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub ilm_base: f64,
    pub rpe_base: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl Default for LayerProfile {
    fn default() -> Self {
        LayerProfile {
            ilm_base: 64.0,
            rpe_base: 176.0,
            amplitude: 8.0,
            period: 170.0,
        }
    }
}

/// Everything needed to generate one reproducible phantom volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub n_slices: usize,
    /// Regular cysts planted per slice (inclusive range).
    pub cysts_per_slice: RangeInclusive<usize>,
    /// Target rasterized area per cyst, in pixels. Areas are sampled
    /// class-balanced: one of the size classes intersecting this range is
    /// picked uniformly, then the area uniformly within the intersection,
    /// so suites cover small/medium/large cysts evenly.
    pub cyst_area_range: RangeInclusive<f64>,
    /// Speckle strength. 0 disables noise; 1 applies the full unit-mean
    /// Rayleigh field; values between scale the field's fluctuation around
    /// its unit mean.
    pub speckle_sigma: f64,
    pub layer_profile: LayerProfile,
    /// The first `micro_cyst_slices` slices receive exactly one tiny cyst
    /// (12-18 px, below any practical detector's area floor) and no regular
    /// cysts. Useful for provoking zero-Dice slices in evaluation suites.
    pub micro_cyst_slices: usize,
    pub seed: u64,
    pub volume_id: String,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            width: 512,
            height: 256,
            n_slices: 8,
            cysts_per_slice: 2..=4,
            cyst_area_range: 60.0..=2800.0,
            speckle_sigma: 0.3,
            layer_profile: LayerProfile::default(),
            micro_cyst_slices: 0,
            seed: 0,
            volume_id: "phantom".to_string(),
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<(), PhantomError> {
        let err = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.width < 32 || self.height < 64 {
            return err(format!("grid {}x{} too small", self.width, self.height));
        }
        if self.n_slices == 0 {
            return err("n_slices must be >= 1".into());
        }
        if *self.cyst_area_range.start() < 10.0 || *self.cyst_area_range.end() > 20000.0 {
            return err("cyst_area_range must lie within [10, 20000]".into());
        }
        if self.speckle_sigma < 0.0 {
            return err("speckle_sigma must be >= 0".into());
        }
        if self.micro_cyst_slices > self.n_slices {
            return err("micro_cyst_slices exceeds n_slices".into());
        }
        let p = &self.layer_profile;
        let min_gap = (p.rpe_base - p.ilm_base) - 2.0 * p.amplitude.abs();
        if min_gap < 40.0 {
            return err(format!(
                "ILM-RPE gap may fall to {min_gap:.1} rows; need >= 40"
            ));
        }
        if p.ilm_base - p.amplitude.abs() < 2.0
            || p.rpe_base + p.amplitude.abs() + (STRIP_ROWS + RPE_LINE_ROWS) as f64
                > (self.height - 2) as f64
        {
            return err("layer profile leaves the image".into());
        }
        Ok(())
    }
}

/// One planted cyst: continuous center/axes plus its rasterized pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCyst {
    pub slice: usize,
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub area_px: usize,
}

/// Ground truth accompanying a generated phantom.
#[derive(Debug)]
pub struct PhantomTruth {
    pub boundaries: Vec<LayerBoundaries>,
    pub masks: Vec<BinaryMask>,
    pub cysts: Vec<PlantedCyst>,
}

/// SplitMix64 step, used to derive independent per-slice RNG streams.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// I.i.d. unit-mean Rayleigh field.
///
/// Samples `R = sigma * sqrt(-2 ln(1 - u))` (inverse CDF, `u` uniform in
/// `[0,1)`) scaled by `1 / (sigma * sqrt(pi/2))` so the mean is 1. The scale
/// cancels, so every `sigma > 0` yields the same distribution (relative
/// standard deviation `sqrt((4-pi)/pi) ~ 0.52`); `sigma = 0` yields the
/// all-ones field.
pub fn rayleigh_field(width: usize, height: usize, sigma: f64, seed: u64) -> Slice {
    assert!(sigma >= 0.0, "sigma must be >= 0");
    if sigma == 0.0 {
        return Slice::constant(width, height, 1.0, PixelRange::Unit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_mean = 1.0 / (std::f64::consts::PI / 2.0).sqrt();
    let data = (0..width * height)
        .map(|_| {
            let u: f64 = rng.gen::<f64>();
            ((-2.0 * (1.0 - u).ln()).sqrt() * inv_mean) as f32
        })
        .collect();
    Slice::new(width, height, data, PixelRange::Unit)
}

fn round_row(v: f64, height: usize) -> usize {
    (v.round().max(0.0) as usize).min(height - 1)
}

fn layer_rows(spec: &PhantomSpec) -> (Vec<usize>, Vec<usize>) {
    let p = &spec.layer_profile;
    let tau = 2.0 * std::f64::consts::PI;
    let mut ilm = Vec::with_capacity(spec.width);
    let mut rpe = Vec::with_capacity(spec.width);
    for x in 0..spec.width {
        let phase = tau * x as f64 / p.period;
        ilm.push(round_row(
            p.ilm_base + p.amplitude * phase.sin(),
            spec.height,
        ));
        rpe.push(round_row(
            p.rpe_base + p.amplitude * (phase + 1.3).sin(),
            spec.height,
        ));
    }
    (ilm, rpe)
}

/// Size-class bounds shared with evaluation: small < 200, large > 2000.
const CLASS_BOUNDS: [(f64, f64); 3] = [(10.0, 199.0), (200.0, 2000.0), (2001.0, 20000.0)];

fn sample_area(rng: &mut ChaCha8Rng, range: &RangeInclusive<f64>) -> f64 {
    let (lo, hi) = (*range.start(), *range.end());
    let classes: Vec<(f64, f64)> = CLASS_BOUNDS
        .iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|&(a, b)| a <= b)
        .collect();
    let (a, b) = classes[rng.gen_range(0..classes.len())];
    rng.gen_range(a..=b)
}

struct SliceScene {
    clean: Vec<f32>,
    mask: BinaryMask,
    cysts: Vec<PlantedCyst>,
}

fn build_slice_scene(
    spec: &PhantomSpec,
    slice_idx: usize,
    ilm: &[usize],
    rpe: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<SliceScene, PhantomError> {
    let (w, h) = (spec.width, spec.height);
    let mut clean = vec![0f32; w * h];
    for x in 0..w {
        let strip_top = rpe[x].saturating_sub(STRIP_ROWS);
        let line_end = (rpe[x] + RPE_LINE_ROWS).min(h);
        for y in 0..h {
            let v = if y < ilm[x] {
                VITREOUS_INTENSITY
            } else if y < strip_top {
                BAND_INTENSITY
            } else if y < rpe[x] {
                STRIP_INTENSITY
            } else if y < line_end {
                RPE_LINE_INTENSITY
            } else {
                CHOROID_INTENSITY
            };
            clean[y * w + x] = v;
        }
    }

    let micro = slice_idx < spec.micro_cyst_slices;
    let n_cysts = if micro {
        1
    } else {
        rng.gen_range(spec.cysts_per_slice.clone())
    };

    let mut mask = BinaryMask::all_false(w, h, MaskSource::Grader1);
    let mut cysts = Vec::new();
    // Dilated bounding boxes of already-placed cysts, for overlap rejection.
    let mut occupied: Vec<(f64, f64, f64, f64)> = Vec::new();

    for _ in 0..n_cysts {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let area = if micro {
                rng.gen_range(12.0..=18.0)
            } else {
                sample_area(rng, &spec.cyst_area_range)
            };
            let aspect: f64 = rng.gen_range(1.2..=2.2);
            let b = (area / (std::f64::consts::PI * aspect)).sqrt();
            let a = aspect * b;
            if 2.0 * a + 4.0 >= w as f64 {
                continue;
            }
            let cx: f64 = rng.gen_range(a + 2.0..w as f64 - a - 2.0);
            let x_lo = (cx - a).floor().max(0.0) as usize;
            let x_hi = ((cx + a).ceil() as usize).min(w - 1);
            let top = ilm[x_lo..=x_hi].iter().max().unwrap() + CYST_TOP_MARGIN;
            let bottom = rpe[x_lo..=x_hi]
                .iter()
                .min()
                .unwrap()
                .saturating_sub(CYST_BOTTOM_MARGIN);
            let cy_lo = top as f64 + b + 1.0;
            let cy_hi = bottom as f64 - b - 1.0;
            if cy_lo >= cy_hi {
                continue;
            }
            let cy: f64 = rng.gen_range(cy_lo..cy_hi);
            // Keep a 3 px moat between cysts so ground-truth components and
            // extremal regions stay separate.
            let bbox = (cx - a - 3.0, cy - b - 3.0, cx + a + 3.0, cy + b + 3.0);
            if occupied
                .iter()
                .any(|o| bbox.0 <= o.2 && o.0 <= bbox.2 && bbox.1 <= o.3 && o.1 <= bbox.3)
            {
                continue;
            }

            let mut area_px = 0usize;
            let y_lo = (cy - b).floor().max(0.0) as usize;
            let y_hi = ((cy + b).ceil() as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let dx = (x as f64 - cx) / a;
                    let dy = (y as f64 - cy) / b;
                    if dx * dx + dy * dy <= 1.0 {
                        clean[y * w + x] = CYST_INTENSITY;
                        mask.set(x, y, true);
                        area_px += 1;
                    }
                }
            }
            occupied.push(bbox);
            cysts.push(PlantedCyst {
                slice: slice_idx,
                center: (cx, cy),
                semi_axes: (a, b),
                area_px,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(PhantomError::InfeasibleSpec { slice: slice_idx });
        }
    }
    Ok(SliceScene { clean, mask, cysts })
}

/// Generates a phantom volume plus its ground truth. Deterministic in the
/// spec: identical specs yield bit-identical volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(OctVolume, PhantomTruth), PhantomError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let (ilm, rpe) = layer_rows(spec);

    let mut slices = Vec::with_capacity(spec.n_slices);
    let mut boundaries = Vec::with_capacity(spec.n_slices);
    let mut masks = Vec::with_capacity(spec.n_slices);
    let mut cysts = Vec::new();

    for i in 0..spec.n_slices {
        let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * i as u64));
        let scene = build_slice_scene(spec, i, &ilm, &rpe, &mut scene_rng)?;

        let data = if spec.speckle_sigma > 0.0 {
            let field = rayleigh_field(w, h, 1.0, derive_seed(spec.seed, 2 * i as u64 + 1));
            scene
                .clean
                .iter()
                .zip(field.data())
                .map(|(&c, &r)| {
                    let factor = (1.0 + spec.speckle_sigma * (r as f64 - 1.0)).max(0.0);
                    ((c as f64 * factor) as f32).clamp(0.0, 1.0)
                })
                .collect()
        } else {
            scene.clean
        };
        slices.push(Slice::new(w, h, data, PixelRange::Unit));
        boundaries.push(
            LayerBoundaries::new(ilm.clone(), rpe.clone(), h, h)
                .expect("phantom layer profile is validated"),
        );
        masks.push(scene.mask);
        cysts.extend(scene.cysts);
    }

    let volume = OctVolume {
        volume_id: spec.volume_id.clone(),
        scanner: Scanner::Synthetic,
        slices,
    };
    Ok((
        volume,
        PhantomTruth {
            boundaries,
            masks,
            cysts,
        },
    ))
}

/// Generates a phantom and writes it under `dir` in the manifest + PGM
/// layout, with the truth masks referenced as both grader lists. Sidecar
/// files record the true boundaries and cyst parameters.
pub fn write_phantom(dir: &Path, spec: &PhantomSpec) -> Result<PathBuf, PhantomError> {
    let (volume, truth) = generate_phantom(spec)?;
    let manifest = save_volume(dir, &volume, Some(&truth.masks), Some(&truth.masks))?;

    let mut layers_text = String::new();
    for (i, b) in truth.boundaries.iter().enumerate() {
        let fmt = |rows: &[usize]| {
            rows.iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        layers_text.push_str(&format!("slice {i} ilm = {}\n", fmt(b.ilm())));
        layers_text.push_str(&format!("slice {i} rpe = {}\n", fmt(b.rpe())));
    }
    let layers_path = dir.join("truth_layers.txt");
    std::fs::write(&layers_path, layers_text).map_err(|source| VolumeError::Io {
        path: layers_path,
        source,
    })?;

    let mut cysts_text = String::from("# slice, cx, cy, semi_a, semi_b, area_px\n");
    for c in &truth.cysts {
        cysts_text.push_str(&format!(
            "{}, {:.3}, {:.3}, {:.3}, {:.3}, {}\n",
            c.slice, c.center.0, c.center.1, c.semi_axes.0, c.semi_axes.1, c.area_px
        ));
    }
    let cysts_path = dir.join("truth_cysts.txt");
    std::fs::write(&cysts_path, cysts_text).map_err(|source| VolumeError::Io {
        path: cysts_path,
        source,
    })?;

    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::load_bundle;

    #[test]
    fn sigma_zero_field_is_all_ones() {
        let f = rayleigh_field(64, 32, 0.0, 9);
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_mean_field_statistics() {
        // 512x256 = 131072 samples: the sample mean concentrates well
        // within [0.99, 1.01] and the variance near (4-pi)/pi.
        let f = rayleigh_field(512, 256, 1.0, 1234);
        let n = f.data().len() as f64;
        let mean = f.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(mean > 0.99 && mean < 1.01, "mean {mean}");
        let var = f
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = (4.0 - std::f64::consts::PI) / std::f64::consts::PI;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn noise_free_cyst_area_is_close_to_requested() {
        let spec = PhantomSpec {
            n_slices: 1,
            cysts_per_slice: 1..=1,
            cyst_area_range: 500.0..=500.0,
            speckle_sigma: 0.0,
            seed: 21,
            ..PhantomSpec::default()
        };
        let (_, truth) = generate_phantom(&spec).unwrap();
        let count = truth.masks[0].count_true();
        assert!(
            (count as f64 - 500.0).abs() <= 25.0,
            "rasterized area {count} not within ±5% of 500"
        );
        assert_eq!(count, truth.cysts[0].area_px);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            seed: 77,
            ..PhantomSpec::default()
        };
        let (v1, t1) = generate_phantom(&spec).unwrap();
        let (v2, t2) = generate_phantom(&spec).unwrap();
        for (a, b) in v1.slices.iter().zip(&v2.slices) {
            assert_eq!(a, b);
        }
        for (a, b) in t1.masks.iter().zip(&t2.masks) {
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn speckle_preserves_slice_mean_within_3_percent() {
        for sigma in [0.2, 0.3, 0.5] {
            let noisy = PhantomSpec {
                n_slices: 10,
                speckle_sigma: sigma,
                seed: 5,
                ..PhantomSpec::default()
            };
            let clean = PhantomSpec {
                speckle_sigma: 0.0,
                ..noisy.clone()
            };
            let (vn, _) = generate_phantom(&noisy).unwrap();
            let (vc, _) = generate_phantom(&clean).unwrap();
            for (sn, sc) in vn.slices.iter().zip(&vc.slices) {
                let (mn, mc) = (sn.mean(), sc.mean());
                assert!(
                    (mn - mc).abs() <= 0.03 * mc,
                    "sigma {sigma}: noisy mean {mn} vs clean {mc}"
                );
            }
        }
    }

    #[test]
    fn cysts_stay_strictly_between_layers() {
        let spec = PhantomSpec {
            n_slices: 4,
            seed: 3,
            ..PhantomSpec::default()
        };
        let (_, truth) = generate_phantom(&spec).unwrap();
        for (mask, b) in truth.masks.iter().zip(&truth.boundaries) {
            // Exact boundaries imply the ROI mask contains every cyst pixel.
            let roi = crate::layers::roi_mask(b, mask.width(), mask.height());
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    if mask.get(x, y) {
                        assert!(
                            y > b.ilm()[x] && y < b.rpe()[x],
                            "cyst pixel ({x},{y}) outside (ilm, rpe) = ({}, {})",
                            b.ilm()[x],
                            b.rpe()[x]
                        );
                        assert!(roi.get(x, y), "cyst pixel ({x},{y}) outside the ROI mask");
                    }
                }
            }
        }
    }

    #[test]
    fn small_area_range_yields_only_small_cysts() {
        let spec = PhantomSpec {
            n_slices: 4,
            cyst_area_range: 50.0..=150.0,
            seed: 11,
            ..PhantomSpec::default()
        };
        let (_, truth) = generate_phantom(&spec).unwrap();
        assert!(!truth.cysts.is_empty());
        for c in &truth.cysts {
            assert!(c.area_px < 200, "area {} is not small-class", c.area_px);
        }
    }

    #[test]
    fn infeasible_spec_is_reported() {
        // 40 cysts of area ~2800 cannot fit without overlap.
        let spec = PhantomSpec {
            n_slices: 1,
            cysts_per_slice: 40..=40,
            cyst_area_range: 2700.0..=2800.0,
            speckle_sigma: 0.0,
            seed: 1,
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::InfeasibleSpec { .. })
        ));
    }

    #[test]
    fn written_phantom_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            n_slices: 2,
            seed: 99,
            ..PhantomSpec::default()
        };
        let manifest = write_phantom(dir.path(), &spec).unwrap();
        let bundle = load_bundle(&manifest).unwrap();
        let (volume, truth) = generate_phantom(&spec).unwrap();

        assert_eq!(bundle.volume.slices.len(), 2);
        for (loaded, generated) in bundle.volume.slices.iter().zip(&volume.slices) {
            assert_eq!(loaded.quantize_u8(), generated.quantize_u8());
        }
        let gt = bundle.gt_union().unwrap().unwrap();
        for (loaded, generated) in gt.iter().zip(&truth.masks) {
            assert_eq!(loaded.bits(), generated.bits());
        }

        // Writing again yields byte-identical files.
        let dir2 = tempfile::tempdir().unwrap();
        write_phantom(dir2.path(), &spec).unwrap();
        for name in [
            "slice_000.pgm",
            "gt1_000.pgm",
            "manifest.txt",
            "truth_layers.txt",
        ] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }
}
