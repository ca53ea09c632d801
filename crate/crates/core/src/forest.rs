//! Random-forest false-positive rejection: 50 Gini-split trees over the
//! 69-value texture descriptor, with bootstrap sampling, feature
//! subsampling, out-of-bag accuracy, and a versioned binary model format.
//!
//! Training is deterministic given the seed: tree `i` draws from a ChaCha8
//! stream derived from `(seed, i)`, so trees may be grown in parallel
//! without affecting the result.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_LEN};
use crate::phantom::derive_seed;

/// Tree count, fixed by the method.
pub const FOREST_TREES: usize = 50;
/// Current model file format version.
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OCSF";

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("too few samples: {0} rows (need at least 20)")]
    TooFewSamples(usize),
    #[error("feature vector has length {got}, expected {expected}")]
    FeatureLengthMismatch { got: usize, expected: usize },
    #[error("corrupt model file: {0}")]
    CorruptModelFile(String),
    #[error("model format version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Candidate label used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    NonCyst,
    Cyst,
}

impl Label {
    fn index(self) -> usize {
        match self {
            Label::NonCyst => 0,
            Label::Cyst => 1,
        }
    }
}

/// Labeled feature rows plus the volumes they came from.
#[derive(Debug, Default)]
pub struct TrainingSet {
    pub rows: Vec<(FeatureVector, Label)>,
    pub provenance: Vec<String>,
}

/// Tree growth controls (tree count is fixed at [`FOREST_TREES`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features drawn per node; the classic default is floor(sqrt(69)) = 8.
    pub feature_subset_size: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            max_depth: 16,
            min_samples_split: 3,
            feature_subset_size: (FEATURE_LEN as f64).sqrt().floor() as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Split {
        feature: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        counts: [u32; 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Probability of the cyst class from the reached leaf's proportions.
    fn predict(&self, values: &[f32]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if values[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                TreeNode::Leaf { counts } => {
                    let total = counts[0] + counts[1];
                    return counts[1] as f64 / total as f64;
                }
            }
        }
    }
}

/// A trained forest.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<DecisionTree>,
    pub feature_subset_size: usize,
    pub train_seed: u64,
    pub format_version: u32,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

/// Row counts and out-of-bag accuracy reported after training.
#[derive(Debug, Clone)]
pub struct TrainingSummary {
    pub n_rows: usize,
    pub n_cyst: usize,
    pub n_non_cyst: usize,
    /// Fraction of rows predicted correctly by the trees that did not see
    /// them; None only if every row landed in every bootstrap.
    pub oob_accuracy: Option<f64>,
}

struct TreeBuilder<'a> {
    data: &'a [(FeatureVector, Label)],
    params: ForestParams,
}

impl TreeBuilder<'_> {
    fn gini(counts: [usize; 2]) -> f64 {
        let total = (counts[0] + counts[1]) as f64;
        if total == 0.0 {
            return 0.0;
        }
        let p0 = counts[0] as f64 / total;
        let p1 = counts[1] as f64 / total;
        1.0 - p0 * p0 - p1 * p1
    }

    fn grow(
        &self,
        indices: &[usize],
        depth: usize,
        rng: &mut ChaCha8Rng,
        nodes: &mut Vec<TreeNode>,
    ) -> u32 {
        let mut counts = [0usize; 2];
        for &i in indices {
            counts[self.data[i].1.index()] += 1;
        }
        let make_leaf = |nodes: &mut Vec<TreeNode>| {
            nodes.push(TreeNode::Leaf {
                counts: [counts[0] as u32, counts[1] as u32],
            });
            (nodes.len() - 1) as u32
        };
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.params.max_depth || indices.len() < self.params.min_samples_split {
            return make_leaf(nodes);
        }

        // Draw the feature subset for this node (sorted so the search order
        // and therefore tie-breaking is well defined).
        let mut subset = rand::seq::index::sample(
            rng,
            FEATURE_LEN,
            self.params.feature_subset_size.min(FEATURE_LEN),
        )
        .into_vec();
        subset.sort_unstable();

        let parent_gini = Self::gini(counts);
        let mut best: Option<(f64, usize, f32)> = None; // (weighted gini, feature, threshold)
        let mut sorted: Vec<(f32, usize)> = Vec::with_capacity(indices.len());
        for &feature in &subset {
            sorted.clear();
            sorted.extend(
                indices
                    .iter()
                    .map(|&i| (self.data[i].0.values()[feature], i)),
            );
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

            let mut left = [0usize; 2];
            let total = counts;
            for cut in 1..sorted.len() {
                left[self.data[sorted[cut - 1].1].1.index()] += 1;
                let (a, b) = (sorted[cut - 1].0, sorted[cut].0);
                if a == b {
                    continue;
                }
                let right = [total[0] - left[0], total[1] - left[1]];
                let nl = (left[0] + left[1]) as f64;
                let nr = (right[0] + right[1]) as f64;
                let weighted = (nl * Self::gini(left) + nr * Self::gini(right)) / (nl + nr);
                if best.is_none_or(|(bw, _, _)| weighted < bw) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some((weighted, feature, threshold));
                }
            }
        }

        let Some((weighted, feature, threshold)) = best else {
            return make_leaf(nodes);
        };
        if weighted >= parent_gini {
            return make_leaf(nodes);
        }

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.data[i].0.values()[feature] <= threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            return make_leaf(nodes);
        }

        let node_at = nodes.len();
        nodes.push(TreeNode::Leaf { counts: [0, 0] }); // placeholder
        let left = self.grow(&left_idx, depth + 1, rng, nodes);
        let right = self.grow(&right_idx, depth + 1, rng, nodes);
        nodes[node_at] = TreeNode::Split {
            feature: feature as u16,
            threshold,
            left,
            right,
        };
        node_at as u32
    }
}

/// Trains the 50-tree forest. Deterministic given `seed` and the training
/// set; must see both classes and at least 20 rows.
pub fn train_forest(
    set: &TrainingSet,
    seed: u64,
    params: &ForestParams,
) -> Result<(ForestModel, TrainingSummary), ForestError> {
    let n = set.rows.len();
    if n < 20 {
        return Err(ForestError::TooFewSamples(n));
    }
    let n_cyst = set.rows.iter().filter(|(_, l)| *l == Label::Cyst).count();
    if n_cyst == 0 || n_cyst == n {
        return Err(ForestError::SingleClassTrainingSet);
    }

    let builder = TreeBuilder {
        data: &set.rows,
        params: *params,
    };
    let results: Vec<(DecisionTree, Vec<bool>)> = (0..FOREST_TREES)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let mut in_bag = vec![false; n];
            let bootstrap: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut nodes = Vec::new();
            let root = builder.grow(&bootstrap, 0, &mut rng, &mut nodes);
            debug_assert_eq!(root, 0);
            (DecisionTree { nodes }, in_bag)
        })
        .collect();

    let trees: Vec<DecisionTree> = results.iter().map(|(t, _)| t.clone()).collect();

    // Out-of-bag accuracy: average the cyst probability over the trees that
    // did not train on a row, threshold at 0.5.
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    for (i, (fv, label)) in set.rows.iter().enumerate() {
        let mut prob_sum = 0.0;
        let mut n_oob = 0usize;
        for (tree, in_bag) in &results {
            if !in_bag[i] {
                prob_sum += tree.predict(fv.values());
                n_oob += 1;
            }
        }
        if n_oob > 0 {
            evaluated += 1;
            let predicted = if prob_sum / n_oob as f64 >= 0.5 {
                Label::Cyst
            } else {
                Label::NonCyst
            };
            if predicted == *label {
                correct += 1;
            }
        }
    }
    let oob_accuracy = (evaluated > 0).then(|| correct as f64 / evaluated as f64);

    let model = ForestModel {
        trees,
        feature_subset_size: params.feature_subset_size,
        train_seed: seed,
        format_version: FORMAT_VERSION,
    };
    let summary = TrainingSummary {
        n_rows: n,
        n_cyst,
        n_non_cyst: n - n_cyst,
        oob_accuracy,
    };
    Ok((model, summary))
}

/// Cyst probability in [0,1]: mean over trees of the reached leaf's cyst
/// proportion. Callers apply their own decision threshold.
pub fn predict(model: &ForestModel, features: &FeatureVector) -> Result<f64, ForestError> {
    let values = features.values();
    if values.len() != FEATURE_LEN {
        return Err(ForestError::FeatureLengthMismatch {
            got: values.len(),
            expected: FEATURE_LEN,
        });
    }
    let sum: f64 = model.trees.iter().map(|t| t.predict(values)).sum();
    Ok(sum / model.trees.len() as f64)
}

// Model file layout (all integers little-endian):
//   magic "OCSF", version u32, train_seed u64, n_trees u32,
//   feature_subset u32, feature_len u32, then per tree: n_nodes u32 and
//   n_nodes fixed 20-byte records:
//     split: kind u32 = 0, feature u32, threshold f32-bits u32, left u32, right u32
//     leaf:  kind u32 = 1, count0 u32, count1 u32, 0 u32, 0 u32

/// Serializes a model; the round trip is bit-exact.
pub fn save_model(model: &ForestModel, path: &Path) -> Result<(), ForestError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&model.format_version.to_le_bytes());
    buf.extend_from_slice(&model.train_seed.to_le_bytes());
    buf.extend_from_slice(&(model.trees.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.feature_subset_size as u32).to_le_bytes());
    buf.extend_from_slice(&(FEATURE_LEN as u32).to_le_bytes());
    for tree in &model.trees {
        buf.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
        for node in &tree.nodes {
            match node {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    buf.extend_from_slice(&0u32.to_le_bytes());
                    buf.extend_from_slice(&(*feature as u32).to_le_bytes());
                    buf.extend_from_slice(&threshold.to_bits().to_le_bytes());
                    buf.extend_from_slice(&left.to_le_bytes());
                    buf.extend_from_slice(&right.to_le_bytes());
                }
                TreeNode::Leaf { counts } => {
                    buf.extend_from_slice(&1u32.to_le_bytes());
                    buf.extend_from_slice(&counts[0].to_le_bytes());
                    buf.extend_from_slice(&counts[1].to_le_bytes());
                    buf.extend_from_slice(&0u32.to_le_bytes());
                    buf.extend_from_slice(&0u32.to_le_bytes());
                }
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ForestError> {
        if self.pos + n > self.bytes.len() {
            return Err(ForestError::CorruptModelFile(
                "unexpected end of file".into(),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ForestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a model saved by [`save_model`]; predictions are bit-identical.
pub fn load_model(path: &Path) -> Result<ForestModel, ForestError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    if r.take(4)? != MAGIC {
        return Err(ForestError::CorruptModelFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version > FORMAT_VERSION {
        return Err(ForestError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let train_seed = r.u64()?;
    let n_trees = r.u32()? as usize;
    let feature_subset_size = r.u32()? as usize;
    let feature_len = r.u32()? as usize;
    if feature_len != FEATURE_LEN {
        return Err(ForestError::CorruptModelFile(format!(
            "model expects {feature_len} features, this build uses {FEATURE_LEN}"
        )));
    }

    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        if n_nodes == 0 {
            return Err(ForestError::CorruptModelFile("tree with zero nodes".into()));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for at in 0..n_nodes {
            let kind = r.u32()?;
            let a = r.u32()?;
            let b = r.u32()?;
            let c = r.u32()?;
            let d = r.u32()?;
            let node = match kind {
                0 => {
                    // Children always come after their parent, which also
                    // rules out cycles.
                    if a as usize >= FEATURE_LEN
                        || c as usize >= n_nodes
                        || d as usize >= n_nodes
                        || c as usize <= at
                        || d as usize <= at
                    {
                        return Err(ForestError::CorruptModelFile(
                            "split node out of range".into(),
                        ));
                    }
                    TreeNode::Split {
                        feature: a as u16,
                        threshold: f32::from_bits(b),
                        left: c,
                        right: d,
                    }
                }
                1 => {
                    if a == 0 && b == 0 {
                        return Err(ForestError::CorruptModelFile("empty leaf".into()));
                    }
                    TreeNode::Leaf { counts: [a, b] }
                }
                other => {
                    return Err(ForestError::CorruptModelFile(format!(
                        "unknown node kind {other}"
                    )))
                }
            };
            nodes.push(node);
        }
        trees.push(DecisionTree { nodes });
    }
    if r.pos != bytes.len() {
        return Err(ForestError::CorruptModelFile("trailing bytes".into()));
    }
    Ok(ForestModel {
        trees,
        feature_subset_size,
        train_seed,
        format_version: version,
    })
}


#[cfg(test)]
mod tests {
    use super::test_support::separable_set;
    use super::*;

    #[test]
    fn separable_set_reaches_high_oob_accuracy() {
        let set = separable_set(200, 8);
        let (model, summary) = train_forest(&set, 42, &ForestParams::default()).unwrap();
        assert_eq!(model.n_trees(), FOREST_TREES);
        let oob = summary
            .oob_accuracy
            .expect("OOB must be computable on 200 rows");
        assert!(oob >= 0.95, "OOB accuracy {oob}");
        assert!(!oob.is_nan());

        // Resubstitution: at least 95% of training rows match their label.
        let correct = set
            .rows
            .iter()
            .filter(|(fv, label)| {
                let p = predict(&model, fv).unwrap();
                (p >= 0.5) == (*label == Label::Cyst)
            })
            .count();
        assert!(correct as f64 / set.rows.len() as f64 >= 0.95);
    }

    #[test]
    fn training_is_deterministic_and_files_are_byte_identical() {
        let set = separable_set(60, 3);
        let (m1, _) = train_forest(&set, 7, &ForestParams::default()).unwrap();
        let (m2, _) = train_forest(&set, 7, &ForestParams::default()).unwrap();
        assert_eq!(m1, m2);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ocsf");
        let p2 = dir.path().join("b.ocsf");
        save_model(&m1, &p1).unwrap();
        save_model(&m2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn single_class_and_tiny_sets_are_rejected() {
        let mut set = separable_set(40, 1);
        set.rows.retain(|(_, l)| *l == Label::Cyst);
        // Pad back above 20 rows, all one class.
        while set.rows.len() < 25 {
            let row = set.rows[0].clone();
            set.rows.push(row);
        }
        assert!(matches!(
            train_forest(&set, 1, &ForestParams::default()),
            Err(ForestError::SingleClassTrainingSet)
        ));

        let small = TrainingSet {
            rows: separable_set(10, 2).rows,
            provenance: vec![],
        };
        assert!(matches!(
            train_forest(&small, 1, &ForestParams::default()),
            Err(ForestError::TooFewSamples(10))
        ));
    }

    #[test]
    fn pure_forest_predicts_one() {
        // Hand-built forest: every tree is a single pure-cyst leaf.
        let tree = DecisionTree {
            nodes: vec![TreeNode::Leaf { counts: [0, 5] }],
        };
        let model = ForestModel {
            trees: vec![tree; FOREST_TREES],
            feature_subset_size: 8,
            train_seed: 0,
            format_version: FORMAT_VERSION,
        };
        let fv = FeatureVector::new(vec![0.0; FEATURE_LEN]).unwrap();
        assert_eq!(predict(&model, &fv).unwrap(), 1.0);
    }

    #[test]
    fn hand_traced_single_tree() {
        // One root split on feature 0 at 0.5; pure leaves.
        let tree = DecisionTree {
            nodes: vec![
                TreeNode::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { counts: [3, 0] },
                TreeNode::Leaf { counts: [0, 7] },
            ],
        };
        let model = ForestModel {
            trees: vec![tree],
            feature_subset_size: 8,
            train_seed: 0,
            format_version: FORMAT_VERSION,
        };
        let mut values = vec![0f32; FEATURE_LEN];
        values[0] = 0.2;
        let left = FeatureVector::new(values.clone()).unwrap();
        assert_eq!(predict(&model, &left).unwrap(), 0.0);
        values[0] = 0.9;
        let right = FeatureVector::new(values).unwrap();
        assert_eq!(predict(&model, &right).unwrap(), 1.0);
    }

    #[test]
    fn save_load_round_trip_predicts_identically() {
        use rand::Rng;
        let set = separable_set(80, 9);
        let (model, _) = train_forest(&set, 11, &ForestParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ocsf");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.train_seed, 11);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let values: Vec<f32> = (0..FEATURE_LEN)
                .map(|_| rng.gen::<f32>() * 4.0 - 2.0)
                .collect();
            let fv = FeatureVector::new(values).unwrap();
            let a = predict(&model, &fv).unwrap();
            let b = predict(&loaded, &fv).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_and_future_version_files_are_rejected() {
        let set = separable_set(40, 4);
        let (model, _) = train_forest(&set, 2, &ForestParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ocsf");
        save_model(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated_path = dir.path().join("trunc.ocsf");
        std::fs::write(&truncated_path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_model(&truncated_path),
            Err(ForestError::CorruptModelFile(_))
        ));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&99u32.to_le_bytes());
        let future_path = dir.path().join("future.ocsf");
        std::fs::write(&future_path, &future).unwrap();
        assert!(matches!(
            load_model(&future_path),
            Err(ForestError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn monotone_feature_transform_leaves_predictions_unchanged() {
        // Tree splits are threshold-based: applying x -> 2x + 1 to one
        // feature in both training and test data changes nothing.
        let base = separable_set(100, 6);
        let transformed = TrainingSet {
            rows: base
                .rows
                .iter()
                .map(|(fv, l)| {
                    let mut values = fv.values().to_vec();
                    values[3] = 2.0 * values[3] + 1.0;
                    (FeatureVector::new(values).unwrap(), *l)
                })
                .collect(),
            provenance: base.provenance.clone(),
        };
        let (m1, _) = train_forest(&base, 13, &ForestParams::default()).unwrap();
        let (m2, _) = train_forest(&transformed, 13, &ForestParams::default()).unwrap();
        for (a, b) in base.rows.iter().zip(&transformed.rows) {
            let p1 = predict(&m1, &a.0).unwrap();
            let p2 = predict(&m2, &b.0).unwrap();
            assert_eq!(p1.to_bits(), p2.to_bits());
        }
    }
}
