//! Volume and mask data model, manifest/PGM loading, size normalization,
//! and grader-union ground truth.
//!
//! Every loaded volume is an ordered stack of grayscale slices. The pipeline
//! standardizes slices to 512 columns x 256 rows (B-scans are wider than
//! deep, so 512 is the lateral axis and 256 the depth axis). Intensity
//! slices are resampled bilinearly; binary masks use nearest-neighbor so
//! they stay binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::pgm::{self, PgmError};

/// Standard width (columns, lateral axis) after size normalization.
pub const STANDARD_WIDTH: usize = 512;
/// Standard height (rows, depth axis) after size normalization.
pub const STANDARD_HEIGHT: usize = 256;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedImageFormat(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate slice: width or height below 2 ({width}x{height})")]
    DegenerateSlice { width: usize, height: usize },
    #[error("degenerate resize target {width}x{height}")]
    DegenerateTarget { width: usize, height: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<PgmError> for VolumeError {
    fn from(e: PgmError) -> Self {
        match e {
            PgmError::Io { path, source } => {
                if source.kind() == std::io::ErrorKind::NotFound {
                    VolumeError::MissingFile(PathBuf::from(path))
                } else {
                    VolumeError::Io {
                        path: PathBuf::from(path),
                        source,
                    }
                }
            }
            other => VolumeError::UnsupportedImageFormat(other.to_string()),
        }
    }
}

/// Which numeric convention a slice's intensities follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// Values in `[0, 255]`, as loaded from 8-bit PGM.
    EightBit,
    /// Values in `[0.0, 1.0]`.
    Unit,
}

/// One grayscale B-scan, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    width: usize,
    height: usize,
    data: Vec<f32>,
    range: PixelRange,
}

impl Slice {
    pub fn new(width: usize, height: usize, data: Vec<f32>, range: PixelRange) -> Self {
        assert_eq!(
            data.len(),
            width * height,
            "data length must be width*height"
        );
        Slice {
            width,
            height,
            data,
            range,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32, range: PixelRange) -> Self {
        Slice::new(width, height, vec![value; width * height], range)
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let data = bytes.iter().map(|&b| b as f32).collect();
        Slice::new(width, height, data, PixelRange::EightBit)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    /// Converts to the `[0,1]` convention (no-op if already there).
    pub fn to_unit(&self) -> Slice {
        match self.range {
            PixelRange::Unit => self.clone(),
            PixelRange::EightBit => Slice {
                width: self.width,
                height: self.height,
                data: self.data.iter().map(|v| v / 255.0).collect(),
                range: PixelRange::Unit,
            },
        }
    }

    /// Quantizes to 8-bit values: unit-range slices map through
    /// `round(v * 255)`, 8-bit slices through `round(v)`, both clamped.
    pub fn quantize_u8(&self) -> Vec<u8> {
        let scale = match self.range {
            PixelRange::Unit => 255.0,
            PixelRange::EightBit => 1.0,
        };
        self.data
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Bilinear resampling with center-aligned pixel coordinates:
/// `src = (dst + 0.5) * src_dim / dst_dim - 0.5`, clamped to the image.
/// When the target equals the source size the output is bit-identical.
pub fn resize_bilinear(s: &Slice, width: usize, height: usize) -> Result<Slice, VolumeError> {
    if width == 0 || height == 0 {
        return Err(VolumeError::DegenerateTarget { width, height });
    }
    if s.width < 2 || s.height < 2 {
        return Err(VolumeError::DegenerateSlice {
            width: s.width,
            height: s.height,
        });
    }
    if width == s.width && height == s.height {
        return Ok(s.clone());
    }
    let mut out = vec![0f32; width * height];
    let sx_scale = s.width as f32 / width as f32;
    let sy_scale = s.height as f32 / height as f32;
    for dy in 0..height {
        let sy = ((dy as f32 + 0.5) * sy_scale - 0.5).max(0.0);
        let y0 = (sy as usize).min(s.height - 1);
        let y1 = (y0 + 1).min(s.height - 1);
        let fy = sy - y0 as f32;
        for dx in 0..width {
            let sx = ((dx as f32 + 0.5) * sx_scale - 0.5).max(0.0);
            let x0 = (sx as usize).min(s.width - 1);
            let x1 = (x0 + 1).min(s.width - 1);
            let fx = sx - x0 as f32;
            let v00 = s.get(x0, y0);
            let v10 = s.get(x1, y0);
            let v01 = s.get(x0, y1);
            let v11 = s.get(x1, y1);
            let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
            out[dy * width + dx] = v;
        }
    }
    Ok(Slice::new(width, height, out, s.range))
}

/// Who produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Grader1,
    Grader2,
    Union,
    Prediction,
}

/// Per-slice binary cyst mask on the same grid as its slice.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    source: MaskSource,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>, source: MaskSource) -> Self {
        assert_eq!(
            bits.len(),
            width * height,
            "bits length must be width*height"
        );
        BinaryMask {
            width,
            height,
            bits,
            source,
        }
    }

    pub fn all_false(width: usize, height: usize, source: MaskSource) -> Self {
        BinaryMask::new(width, height, vec![false; width * height], source)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Loads a mask from PGM: any nonzero pixel is true.
    pub fn from_pgm(path: &Path, source: MaskSource) -> Result<Self, VolumeError> {
        let (w, h, bytes) = pgm::read_pgm(path)?;
        Ok(BinaryMask::new(
            w,
            h,
            bytes.iter().map(|&b| b != 0).collect(),
            source,
        ))
    }

    /// Writes the mask as PGM with 0 = background, 255 = cyst.
    pub fn to_pgm(&self, path: &Path) -> Result<(), VolumeError> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pgm::write_pgm(path, self.width, self.height, &bytes)?;
        Ok(())
    }

    /// Dilates by `radius` pixels in the Chebyshev metric (3x3 structuring
    /// element applied `radius` times).
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let mut cur = self.bits.clone();
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur[y * self.width + x] {
                        continue;
                    }
                    'probe: for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < self.width
                                && (ny as usize) < self.height
                                && cur[ny as usize * self.width + nx as usize]
                            {
                                next[y * self.width + x] = true;
                                break 'probe;
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        BinaryMask::new(self.width, self.height, cur, self.source)
    }
}

/// Nearest-neighbor mask resampling: `src = floor((dst + 0.5) * src/dst)`.
pub fn resize_mask(m: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask, VolumeError> {
    if width == 0 || height == 0 {
        return Err(VolumeError::DegenerateTarget { width, height });
    }
    if width == m.width && height == m.height {
        return Ok(m.clone());
    }
    let mut bits = vec![false; width * height];
    for dy in 0..height {
        let sy = (((dy as f32 + 0.5) * m.height as f32 / height as f32) as usize).min(m.height - 1);
        for dx in 0..width {
            let sx =
                (((dx as f32 + 0.5) * m.width as f32 / width as f32) as usize).min(m.width - 1);
            bits[dy * width + dx] = m.bits[sy * m.width + sx];
        }
    }
    Ok(BinaryMask::new(width, height, bits, m.source))
}

/// Pixelwise OR of two grader masks.
pub fn union_graders(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, VolumeError> {
    if a.width != b.width || a.height != b.height {
        return Err(VolumeError::DimensionMismatch(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let bits = a.bits.iter().zip(&b.bits).map(|(&x, &y)| x || y).collect();
    Ok(BinaryMask::new(a.width, a.height, bits, MaskSource::Union))
}

/// Scanner that acquired a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scanner {
    Spectralis,
    Cirrus,
    Topcon,
    Nidek,
    Synthetic,
}

impl fmt::Display for Scanner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Scanner::Spectralis => "spectralis",
            Scanner::Cirrus => "cirrus",
            Scanner::Topcon => "topcon",
            Scanner::Nidek => "nidek",
            Scanner::Synthetic => "synthetic",
        };
        f.write_str(name)
    }
}

impl FromStr for Scanner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spectralis" => Ok(Scanner::Spectralis),
            "cirrus" => Ok(Scanner::Cirrus),
            "topcon" => Ok(Scanner::Topcon),
            "nidek" => Ok(Scanner::Nidek),
            "synthetic" => Ok(Scanner::Synthetic),
            other => Err(format!("unknown scanner '{other}'")),
        }
    }
}

/// Plain-text manifest describing a volume on disk.
///
/// Format: UTF-8, one `key = value` pair per line, `#` comments allowed.
/// Keys: `volume_id`, `scanner`, `slices`, `gt_grader1`, `gt_grader2`.
/// List values are comma-separated paths relative to the manifest location.
/// Unknown keys are ignored with a warning.
#[derive(Debug, Clone)]
pub struct VolumeManifest {
    pub volume_id: String,
    pub scanner: Scanner,
    pub slice_files: Vec<PathBuf>,
    pub gt_files_g1: Option<Vec<PathBuf>>,
    pub gt_files_g2: Option<Vec<PathBuf>>,
}

impl VolumeManifest {
    /// Parses a manifest file. Relative paths are resolved against the
    /// manifest's directory. Returns the manifest plus any warnings.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>), VolumeError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                VolumeError::MissingFile(path.to_path_buf())
            } else {
                VolumeError::Io {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let malformed = |reason: &str| VolumeError::MalformedManifest {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };

        let mut warnings = Vec::new();
        let mut volume_id = None;
        let mut scanner = None;
        let mut slices = None;
        let mut g1 = None;
        let mut g2 = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                malformed(&format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let path_list =
                |v: &str| -> Vec<PathBuf> { v.split(',').map(|p| base.join(p.trim())).collect() };
            match key {
                "volume_id" => volume_id = Some(value.to_string()),
                "scanner" => scanner = Some(Scanner::from_str(value).map_err(|e| malformed(&e))?),
                "slices" => slices = Some(path_list(value)),
                "gt_grader1" => g1 = Some(path_list(value)),
                "gt_grader2" => g2 = Some(path_list(value)),
                other => warnings.push(format!(
                    "{}: ignoring unknown key '{other}'",
                    path.display()
                )),
            }
        }

        let manifest = VolumeManifest {
            volume_id: volume_id.ok_or_else(|| malformed("missing key 'volume_id'"))?,
            scanner: scanner.ok_or_else(|| malformed("missing key 'scanner'"))?,
            slice_files: slices.ok_or_else(|| malformed("missing key 'slices'"))?,
            gt_files_g1: g1,
            gt_files_g2: g2,
        };
        if manifest.slice_files.is_empty() {
            return Err(malformed("'slices' list is empty"));
        }
        for (name, list) in [
            ("gt_grader1", &manifest.gt_files_g1),
            ("gt_grader2", &manifest.gt_files_g2),
        ] {
            if let Some(list) = list {
                if list.len() != manifest.slice_files.len() {
                    return Err(VolumeError::DimensionMismatch(format!(
                        "{name} lists {} files but there are {} slices",
                        list.len(),
                        manifest.slice_files.len()
                    )));
                }
            }
        }
        Ok((manifest, warnings))
    }
}

/// Ordered stack of slices with scanner metadata.
#[derive(Debug, Clone)]
pub struct OctVolume {
    pub volume_id: String,
    pub scanner: Scanner,
    pub slices: Vec<Slice>,
}

/// A volume together with whatever ground truth its manifest provided.
#[derive(Debug)]
pub struct VolumeBundle {
    pub volume: OctVolume,
    pub gt_grader1: Option<Vec<BinaryMask>>,
    pub gt_grader2: Option<Vec<BinaryMask>>,
    pub warnings: Vec<String>,
}

impl VolumeBundle {
    pub fn has_ground_truth(&self) -> bool {
        self.gt_grader1.is_some() || self.gt_grader2.is_some()
    }

    /// Union-of-graders ground truth per slice. With a single grader
    /// present the union degrades to that grader OR an all-false mask,
    /// and a warning is recorded on the bundle at load time.
    pub fn gt_union(&self) -> Result<Option<Vec<BinaryMask>>, VolumeError> {
        let masks = match (&self.gt_grader1, &self.gt_grader2) {
            (None, None) => return Ok(None),
            (Some(a), Some(b)) => a
                .iter()
                .zip(b)
                .map(|(m1, m2)| union_graders(m1, m2))
                .collect::<Result<Vec<_>, _>>()?,
            (Some(a), None) | (None, Some(a)) => a
                .iter()
                .map(|m| {
                    let empty = BinaryMask::all_false(m.width(), m.height(), m.source());
                    union_graders(m, &empty)
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(Some(masks))
    }
}

/// Loads a volume (slices only) from a manifest. No resizing is applied.
pub fn load_volume(manifest_path: &Path) -> Result<OctVolume, VolumeError> {
    Ok(load_bundle(manifest_path)?.volume)
}

/// Loads a volume plus its grader masks. Ground-truth dimensions must match
/// the slice they annotate.
pub fn load_bundle(manifest_path: &Path) -> Result<VolumeBundle, VolumeError> {
    let (manifest, mut warnings) = VolumeManifest::load(manifest_path)?;

    let mut slices = Vec::with_capacity(manifest.slice_files.len());
    for file in &manifest.slice_files {
        let (w, h, bytes) = pgm::read_pgm(file)?;
        slices.push(Slice::from_u8(w, h, &bytes));
    }

    let load_masks = |files: &Option<Vec<PathBuf>>,
                      source: MaskSource|
     -> Result<Option<Vec<BinaryMask>>, VolumeError> {
        match files {
            None => Ok(None),
            Some(files) => {
                let mut masks = Vec::with_capacity(files.len());
                for (i, file) in files.iter().enumerate() {
                    let m = BinaryMask::from_pgm(file, source)?;
                    let s = &slices[i];
                    if m.width() != s.width() || m.height() != s.height() {
                        return Err(VolumeError::DimensionMismatch(format!(
                            "mask {} is {}x{} but slice {} is {}x{}",
                            file.display(),
                            m.width(),
                            m.height(),
                            i,
                            s.width(),
                            s.height()
                        )));
                    }
                    masks.push(m);
                }
                Ok(Some(masks))
            }
        }
    };
    let gt_grader1 = load_masks(&manifest.gt_files_g1, MaskSource::Grader1)?;
    let gt_grader2 = load_masks(&manifest.gt_files_g2, MaskSource::Grader2)?;
    if gt_grader1.is_some() != gt_grader2.is_some() {
        warnings.push(format!(
            "{}: only one grader present; union ground truth falls back to that grader",
            manifest_path.display()
        ));
    }

    Ok(VolumeBundle {
        volume: OctVolume {
            volume_id: manifest.volume_id,
            scanner: manifest.scanner,
            slices,
        },
        gt_grader1,
        gt_grader2,
        warnings,
    })
}

/// Writes a volume (and optional per-grader masks) into `dir` as PGM files
/// plus a manifest, producing a layout that `load_bundle` reads back.
pub fn save_volume(
    dir: &Path,
    volume: &OctVolume,
    gt_grader1: Option<&[BinaryMask]>,
    gt_grader2: Option<&[BinaryMask]>,
) -> Result<PathBuf, VolumeError> {
    std::fs::create_dir_all(dir).map_err(|source| VolumeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut slice_names = Vec::new();
    for (i, s) in volume.slices.iter().enumerate() {
        let name = format!("slice_{i:03}.pgm");
        pgm::write_pgm(&dir.join(&name), s.width(), s.height(), &s.quantize_u8())?;
        slice_names.push(name);
    }
    let write_masks =
        |masks: Option<&[BinaryMask]>, prefix: &str| -> Result<Option<Vec<String>>, VolumeError> {
            match masks {
                None => Ok(None),
                Some(masks) => {
                    assert_eq!(masks.len(), volume.slices.len(), "one mask per slice");
                    let mut names = Vec::new();
                    for (i, m) in masks.iter().enumerate() {
                        let name = format!("{prefix}_{i:03}.pgm");
                        m.to_pgm(&dir.join(&name))?;
                        names.push(name);
                    }
                    Ok(Some(names))
                }
            }
        };
    let g1_names = write_masks(gt_grader1, "gt1")?;
    let g2_names = write_masks(gt_grader2, "gt2")?;

    let mut text = String::new();
    text.push_str(&format!("volume_id = {}\n", volume.volume_id));
    text.push_str(&format!("scanner = {}\n", volume.scanner));
    text.push_str(&format!("slices = {}\n", slice_names.join(",")));
    if let Some(names) = g1_names {
        text.push_str(&format!("gt_grader1 = {}\n", names.join(",")));
    }
    if let Some(names) = g2_names {
        text.push_str(&format!("gt_grader2 = {}\n", names.join(",")));
    }
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, text).map_err(|source| VolumeError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}

/// Resizes every slice to the standard 512x256 grid (bilinear). Slice count
/// and intensity convention are unchanged; a no-op on already-standard input.
pub fn normalize_size(v: &OctVolume) -> Result<OctVolume, VolumeError> {
    let slices = v
        .slices
        .iter()
        .map(|s| resize_bilinear(s, STANDARD_WIDTH, STANDARD_HEIGHT))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OctVolume {
        volume_id: v.volume_id.clone(),
        scanner: v.scanner,
        slices,
    })
}
