//! End-to-end pipeline orchestration: preprocessing, candidate selection,
//! classification, training-set assembly, and leave-one-out cross
//! validation, all driven by one reproducible configuration.

use rayon::prelude::*;
use thiserror::Error;

use crate::denoise::{tv_denoise, DenoiseError, TvParams};
use crate::eval::{size_stratified_detection, EvalError, EvalReport, SizeDetection, VolumeEval};
use crate::features::{extract_features, FeatureError, FeatureVector};
use crate::forest::{
    predict, train_forest, ForestError, ForestModel, ForestParams, Label, TrainingSet,
    TrainingSummary,
};
use crate::layers::{roi_mask, segment_layers, LayerBoundaries, LayerParams};
use crate::mser::{detect_mser, CandidateRegion, MserError, MserParams};
use crate::phantom::derive_seed;
use crate::saliency::{center_surround_dark, SaliencyError, SaliencyScales};
use crate::volume::{
    normalize_size, resize_mask, BinaryMask, MaskSource, OctVolume, Scanner, Slice, VolumeBundle,
    VolumeError, STANDARD_HEIGHT, STANDARD_WIDTH,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Mser(#[from] MserError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Candidate-labeling rule constants: a candidate is a cyst example when at
/// least half its pixels lie on ground truth, a background example when it
/// misses the 2-px-dilated ground truth entirely, and excluded otherwise.
pub const LABEL_POSITIVE_OVERLAP: f64 = 0.5;
pub const LABEL_NEGATIVE_DILATION: usize = 2;

/// Every tunable of the pipeline. All fields have working defaults; the
/// CLI dumps the effective config next to every run's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tv: TvParams,
    /// Non-standard extension: denoise in log-intensity space.
    pub tv_log_transform: bool,
    pub saliency_scales: SaliencyScales,
    pub layers: LayerParams,
    pub mser: MserParams,
    pub forest: ForestParams,
    /// Cyst probability at or above which a candidate enters the output mask.
    pub threshold: f64,
    pub seed: u64,
    /// Worker threads for slice-level parallelism; 0 = all cores.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tv: TvParams::default(),
            tv_log_transform: false,
            saliency_scales: SaliencyScales::default(),
            layers: LayerParams::default(),
            mser: MserParams::default(),
            forest: ForestParams::default(),
            threshold: 0.5,
            seed: 42,
            jobs: 0,
        }
    }
}

/// Everything the pipeline derives from one slice.
#[derive(Debug)]
pub struct SliceArtifacts {
    pub denoised: Slice,
    pub saliency: Slice,
    /// None when layer segmentation failed; the ROI is then the full slice.
    pub boundaries: Option<LayerBoundaries>,
    pub roi: BinaryMask,
    pub candidates: Vec<CandidateRegion>,
    pub features: Vec<FeatureVector>,
    pub warnings: Vec<String>,
}

/// Per-volume artifacts on the standard 512x256 grid.
#[derive(Debug)]
pub struct VolumeArtifacts {
    pub volume_id: String,
    pub scanner: Scanner,
    pub slices: Vec<SliceArtifacts>,
}

fn log_forward(s: &Slice) -> Slice {
    let data = s
        .data()
        .iter()
        .map(|&v| (1.0 + v.max(0.0)).ln() / std::f32::consts::LN_2)
        .collect();
    Slice::new(s.width(), s.height(), data, crate::volume::PixelRange::Unit)
}

fn log_inverse(s: &Slice) -> Slice {
    let data = s
        .data()
        .iter()
        .map(|&v| ((v * std::f32::consts::LN_2).exp() - 1.0).clamp(0.0, 1.0))
        .collect();
    Slice::new(s.width(), s.height(), data, crate::volume::PixelRange::Unit)
}

/// Runs preprocessing and candidate selection on one (already normalized)
/// slice.
pub fn process_slice(raw: &Slice, cfg: &PipelineConfig) -> Result<SliceArtifacts, PipelineError> {
    let unit = raw.to_unit();
    let denoised = if cfg.tv_log_transform {
        log_inverse(&tv_denoise(&log_forward(&unit), &cfg.tv)?)
    } else {
        tv_denoise(&unit, &cfg.tv)?
    };
    let saliency = center_surround_dark(&denoised, &cfg.saliency_scales)?;

    let mut warnings = Vec::new();
    let (boundaries, roi) = match segment_layers(&denoised, &cfg.layers) {
        Ok(b) => {
            let roi = roi_mask(&b, denoised.width(), denoised.height());
            (Some(b), roi)
        }
        Err(e) => {
            warnings.push(format!(
                "layer segmentation failed ({e}); using full-slice ROI"
            ));
            let full = BinaryMask::new(
                denoised.width(),
                denoised.height(),
                vec![true; denoised.width() * denoised.height()],
                MaskSource::Prediction,
            );
            (None, full)
        }
    };

    let candidates = detect_mser(&denoised, &roi, Some(&saliency), &cfg.mser)?;
    let features = candidates
        .iter()
        .map(|c| extract_features(&denoised, &saliency, boundaries.as_ref(), c))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(SliceArtifacts {
        denoised,
        saliency,
        boundaries,
        roi,
        candidates,
        features,
        warnings,
    })
}

/// Normalizes a volume to 512x256 and processes every slice (in parallel
/// when a rayon pool with more than one thread is active; outputs are
/// order-preserving and independent of the thread count).
pub fn process_volume(
    v: &OctVolume,
    cfg: &PipelineConfig,
) -> Result<VolumeArtifacts, PipelineError> {
    let normalized = normalize_size(v)?;
    let slices = normalized
        .slices
        .par_iter()
        .map(|s| process_slice(s, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VolumeArtifacts {
        volume_id: v.volume_id.clone(),
        scanner: v.scanner,
        slices,
    })
}

/// Ground-truth union masks resized to the standard grid.
pub fn normalized_gt(bundle: &VolumeBundle) -> Result<Option<Vec<BinaryMask>>, PipelineError> {
    match bundle.gt_union()? {
        None => Ok(None),
        Some(masks) => {
            let resized = masks
                .iter()
                .map(|m| resize_mask(m, STANDARD_WIDTH, STANDARD_HEIGHT))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Some(resized))
        }
    }
}

/// Labels one slice's candidates against ground truth. `None` marks
/// ambiguous candidates that must not be used for training.
pub fn label_candidates(arts: &SliceArtifacts, gt: &BinaryMask) -> Vec<Option<Label>> {
    let dilated = gt.dilate(LABEL_NEGATIVE_DILATION);
    arts.candidates
        .iter()
        .map(|c| {
            let overlap = c.overlap_with_mask(gt);
            if overlap as f64 >= LABEL_POSITIVE_OVERLAP * c.area as f64 {
                Some(Label::Cyst)
            } else if c.overlap_with_mask(&dilated) == 0 {
                Some(Label::NonCyst)
            } else {
                None
            }
        })
        .collect()
}

/// Collects labeled training rows from processed volumes and their
/// normalized ground truth.
pub fn build_training_set(volumes: &[(&VolumeArtifacts, &[BinaryMask])]) -> TrainingSet {
    let mut set = TrainingSet::default();
    for (arts, gt_masks) in volumes {
        assert_eq!(arts.slices.len(), gt_masks.len(), "one GT mask per slice");
        set.provenance.push(arts.volume_id.clone());
        for (slice_arts, gt) in arts.slices.iter().zip(*gt_masks) {
            for (label, feature) in label_candidates(slice_arts, gt)
                .into_iter()
                .zip(&slice_arts.features)
            {
                if let Some(label) = label {
                    set.rows.push((feature.clone(), label));
                }
            }
        }
    }
    set
}

/// Trains the forest on a list of volumes (the `train` subcommand path).
pub fn train_on_volumes(
    volumes: &[(&VolumeArtifacts, &[BinaryMask])],
    cfg: &PipelineConfig,
) -> Result<(ForestModel, TrainingSummary), PipelineError> {
    let set = build_training_set(volumes);
    Ok(train_forest(&set, cfg.seed, &cfg.forest)?)
}

/// One slice's classification outcome.
#[derive(Debug)]
pub struct ClassifiedSlice {
    /// Cyst probability per candidate, aligned with the artifact list.
    pub probs: Vec<f64>,
    /// Union of the pixels of all candidates at or above the threshold.
    pub mask: BinaryMask,
}

/// Applies a trained model to processed slices.
pub fn classify_volume(
    arts: &VolumeArtifacts,
    model: &ForestModel,
    threshold: f64,
) -> Result<Vec<ClassifiedSlice>, PipelineError> {
    arts.slices
        .iter()
        .map(|sa| {
            let probs = sa
                .features
                .iter()
                .map(|f| predict(model, f))
                .collect::<Result<Vec<_>, _>>()?;
            let mut mask = BinaryMask::all_false(
                sa.denoised.width(),
                sa.denoised.height(),
                MaskSource::Prediction,
            );
            for (cand, &p) in sa.candidates.iter().zip(&probs) {
                if p >= threshold {
                    for &(x, y) in &cand.pixels {
                        mask.set(x, y, true);
                    }
                }
            }
            Ok(ClassifiedSlice { probs, mask })
        })
        .collect()
}

/// Inputs shared by LOOCV and fixed-model evaluation: processed artifacts
/// plus normalized ground truth for each volume.
pub struct EvalVolume {
    pub artifacts: VolumeArtifacts,
    pub gt: Vec<BinaryMask>,
}

/// Processes bundles into evaluation inputs, requiring ground truth.
pub fn prepare_eval_volumes(
    bundles: &[VolumeBundle],
    cfg: &PipelineConfig,
) -> Result<Vec<EvalVolume>, PipelineError> {
    bundles
        .iter()
        .map(|b| {
            let gt = normalized_gt(b)?
                .ok_or_else(|| EvalError::MissingGroundTruth(b.volume.volume_id.clone()))?;
            let artifacts = process_volume(&b.volume, cfg)?;
            Ok(EvalVolume { artifacts, gt })
        })
        .collect()
}

fn evaluate_prepared(
    volumes: &[EvalVolume],
    models: &[ForestModel],
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    assert_eq!(volumes.len(), models.len());
    let mut per_volume = Vec::new();
    let mut tally_mser = [SizeDetection::default(); 3];
    let mut tally_forest = [SizeDetection::default(); 3];

    for (ev, model) in volumes.iter().zip(models) {
        let classified = classify_volume(&ev.artifacts, model, cfg.threshold)?;
        let mut dices = Vec::with_capacity(ev.gt.len());
        let mut true_negatives = 0usize;
        for (cs, gt) in classified.iter().zip(&ev.gt) {
            let d = crate::eval::dice(&cs.mask, gt)?;
            if gt.is_empty() && cs.mask.is_empty() {
                true_negatives += 1;
            }
            dices.push(d);
        }

        let post_mser: Vec<Vec<&CandidateRegion>> = ev
            .artifacts
            .slices
            .iter()
            .map(|sa| sa.candidates.iter().collect())
            .collect();
        let post_forest: Vec<Vec<&CandidateRegion>> = ev
            .artifacts
            .slices
            .iter()
            .zip(&classified)
            .map(|(sa, cs)| {
                sa.candidates
                    .iter()
                    .zip(&cs.probs)
                    .filter(|&(_, &p)| p >= cfg.threshold)
                    .map(|(c, _)| c)
                    .collect()
            })
            .collect();
        let m = size_stratified_detection(&ev.gt, &post_mser);
        let f = size_stratified_detection(&ev.gt, &post_forest);
        for i in 0..3 {
            tally_mser[i].n_present += m[i].n_present;
            tally_mser[i].detected += m[i].detected;
            tally_forest[i].n_present += f[i].n_present;
            tally_forest[i].detected += f[i].detected;
        }

        per_volume.push(VolumeEval::from_dices(
            ev.artifacts.volume_id.clone(),
            ev.artifacts.scanner,
            dices,
            true_negatives,
        ));
    }

    Ok(EvalReport::assemble(
        per_volume,
        tally_mser,
        tally_forest,
        true,
        cfg.seed,
    ))
}

/// Leave-one-out cross validation: each volume is segmented by a forest
/// trained on all the others. Deterministic given the config seed.
pub fn run_loocv(
    bundles: &[VolumeBundle],
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    if bundles.len() < 2 {
        return Err(EvalError::InsufficientVolumes(bundles.len()).into());
    }
    let volumes = prepare_eval_volumes(bundles, cfg)?;

    let mut models = Vec::with_capacity(volumes.len());
    for held_out in 0..volumes.len() {
        let train_inputs: Vec<(&VolumeArtifacts, &[BinaryMask])> = volumes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held_out)
            .map(|(_, ev)| (&ev.artifacts, ev.gt.as_slice()))
            .collect();
        let set = build_training_set(&train_inputs);
        let (model, _) = train_forest(&set, derive_seed(cfg.seed, held_out as u64), &cfg.forest)?;
        models.push(model);
    }
    evaluate_prepared(&volumes, &models, cfg)
}

/// Evaluates a fixed model over all volumes (no cross validation).
pub fn evaluate_fixed_model(
    bundles: &[VolumeBundle],
    model: &ForestModel,
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    if bundles.is_empty() {
        return Err(EvalError::InsufficientVolumes(0).into());
    }
    let volumes = prepare_eval_volumes(bundles, cfg)?;
    let models = vec![model.clone(); volumes.len()];
    evaluate_prepared(&volumes, &models, cfg)
}
