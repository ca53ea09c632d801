//! Multi-scale center-surround difference highlighting locally dark
//! blob-like regions.
//!
//! A Gaussian pyramid (5-tap binomial kernel, decimation by 2) provides the
//! scales. For each (center, center+delta) pair the coarse level is
//! upsampled back to full resolution and the fine level subtracted from it;
//! positive responses mark pixels darker than their surround. The per-pair
//! maps are averaged and max-normalized to [0,1].

use std::str::FromStr;

use thiserror::Error;

use crate::volume::{resize_bilinear, PixelRange, Slice};

/// Smallest pyramid level dimension.
const MIN_LEVEL_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("too many pyramid levels: {levels} levels need min dimension {needed}, image is {width}x{height}")]
    TooManyLevels {
        levels: usize,
        needed: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid scale pair set: {0}")]
    InvalidScalePair(String),
}

/// One level of a Gaussian pyramid; level 0 is the input.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub level: usize,
    pub slice: Slice,
}

/// Center/surround level pairs used by [`center_surround_dark`].
///
/// Pairs are the cross product `centers x deltas`, compared as level `c`
/// against level `c + d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyScales {
    pub centers: Vec<usize>,
    pub deltas: Vec<usize>,
}

impl Default for SaliencyScales {
    fn default() -> Self {
        SaliencyScales {
            centers: vec![1, 2],
            deltas: vec![2, 3],
        }
    }
}

impl SaliencyScales {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if self.centers.is_empty() || self.deltas.is_empty() {
            return Err(SaliencyError::InvalidScalePair(
                "centers and deltas must be non-empty".into(),
            ));
        }
        if self.deltas.contains(&0) {
            return Err(SaliencyError::InvalidScalePair(
                "deltas must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Deepest pyramid level any pair touches.
    pub fn max_level(&self) -> usize {
        let c = self.centers.iter().max().copied().unwrap_or(0);
        let d = self.deltas.iter().max().copied().unwrap_or(0);
        c + d
    }
}

impl std::fmt::Display for SaliencyScales {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "{}:{}", join(&self.centers), join(&self.deltas))
    }
}

impl FromStr for SaliencyScales {
    type Err = String;

    /// Parses `c1,c2:d1,d2`, e.g. `1,2:2,3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (c, d) = s
            .split_once(':')
            .ok_or_else(|| format!("expected 'c1,c2:d1,d2', got '{s}'"))?;
        let parse_list = |part: &str| -> Result<Vec<usize>, String> {
            part.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|e| format!("bad level '{t}': {e}"))
                })
                .collect()
        };
        let scales = SaliencyScales {
            centers: parse_list(c)?,
            deltas: parse_list(d)?,
        };
        scales.validate().map_err(|e| e.to_string())?;
        Ok(scales)
    }
}

/// 5-tap binomial blur [1,4,6,4,1]/16 applied separably with edge
/// replication, then decimation by 2 (keeping even indices, floor halving).
fn blur_decimate(s: &Slice) -> Slice {
    let (w, h) = (s.width(), s.height());
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

    // Horizontal pass.
    let mut hbuf = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in K.iter().enumerate() {
                let sx = (x as i64 + k as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += kv * s.get(sx, y);
            }
            hbuf[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut vbuf = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in K.iter().enumerate() {
                let sy = (y as i64 + k as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += kv * hbuf[sy * w + x];
            }
            vbuf[y * w + x] = acc;
        }
    }

    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0f32; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = vbuf[(2 * y) * w + 2 * x];
        }
    }
    Slice::new(ow, oh, out, s.range())
}

/// Builds `levels` pyramid levels (level 0 = the input).
pub fn gaussian_pyramid(s: &Slice, levels: usize) -> Result<Vec<PyramidLevel>, SaliencyError> {
    let needed = MIN_LEVEL_DIM << levels.saturating_sub(1);
    if levels < 1 || s.width() < needed || s.height() < needed {
        return Err(SaliencyError::TooManyLevels {
            levels,
            needed,
            width: s.width(),
            height: s.height(),
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(PyramidLevel {
        level: 0,
        slice: s.clone(),
    });
    for level in 1..levels {
        let next = blur_decimate(&out[level - 1].slice);
        out.push(PyramidLevel { level, slice: next });
    }
    Ok(out)
}

/// Dark-center multi-scale saliency.
///
/// For each pair `(c, c+d)` computes `upsample(level c+d) - upsample(level
/// c)` at full resolution (surround minus center), clamps negatives to zero,
/// averages across pairs, and normalizes by the maximum. An all-zero map
/// stays all-zero, so the output is in [0,1] and vanishes wherever the
/// center is at least as bright as its surround at every scale pair.
pub fn center_surround_dark(s: &Slice, scales: &SaliencyScales) -> Result<Slice, SaliencyError> {
    let mut acc = center_surround_raw(s, scales)?;
    let max = acc.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut acc {
            *v /= max;
        }
    }
    Ok(Slice::new(
        s.width(),
        s.height(),
        acc.iter().map(|&v| v as f32).collect(),
        PixelRange::Unit,
    ))
}

/// The mean clamped surround-minus-center response before normalization.
/// Useful when absolute response strengths must be compared across images.
pub fn center_surround_raw(s: &Slice, scales: &SaliencyScales) -> Result<Vec<f64>, SaliencyError> {
    scales.validate()?;
    let levels = scales.max_level() + 1;
    let pyramid = gaussian_pyramid(s, levels)?;
    let (w, h) = (s.width(), s.height());

    let upsampled: Vec<Option<Slice>> = {
        let mut used = vec![false; levels];
        for &c in &scales.centers {
            used[c] = true;
            for &d in &scales.deltas {
                used[c + d] = true;
            }
        }
        pyramid
            .iter()
            .map(|lv| {
                if used[lv.level] {
                    Some(resize_bilinear(&lv.slice, w, h).expect("pyramid levels are >= 8x8"))
                } else {
                    None
                }
            })
            .collect()
    };

    let mut acc = vec![0f64; w * h];
    let mut pairs = 0usize;
    for &c in &scales.centers {
        let center = upsampled[c].as_ref().expect("center level upsampled");
        for &d in &scales.deltas {
            let surround = upsampled[c + d].as_ref().expect("surround level upsampled");
            for ((a, &s_v), &c_v) in acc.iter_mut().zip(surround.data()).zip(center.data()) {
                *a += (s_v - c_v).max(0.0) as f64;
            }
            pairs += 1;
        }
    }
    let inv = 1.0 / pairs as f64;
    for v in &mut acc {
        *v *= inv;
    }
    Ok(acc)
}
