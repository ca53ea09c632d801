//! Dark maximally stable extremal regions via a min-tree (component tree of
//! lower level sets), restricted to the retinal ROI.
//!
//! The tree is built by union-find immersion over pixels sorted by
//! intensity; 4-connectivity throughout, matching the mask conventions.
//! Cysts are dark, so only the min-tree is computed.

use thiserror::Error;

use crate::volume::{BinaryMask, Slice};

#[derive(Debug, Error)]
pub enum MserError {
    #[error("invalid MSER parameters: {0}")]
    InvalidParams(String),
}

/// MSER selection parameters on the 0-255 intensity scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MserParams {
    /// Intensity step used for the stability (variation) measure, >= 1.
    pub delta: u8,
    /// Smallest region area kept, in pixels (>= 10).
    pub min_area: usize,
    /// Largest region area kept, in pixels (<= 20000).
    pub max_area: usize,
    /// Variation ceiling for a region to count as stable.
    pub max_variation: f64,
    /// Nested regions closer in relative area than this are deduplicated.
    pub min_diversity: f64,
    /// Minimum fraction of region pixels that must lie inside the ROI.
    pub min_roi_overlap: f64,
}

impl Default for MserParams {
    fn default() -> Self {
        MserParams {
            delta: 5,
            min_area: 30,
            max_area: 15000,
            max_variation: 0.5,
            min_diversity: 0.3,
            min_roi_overlap: 0.5,
        }
    }
}

impl MserParams {
    pub fn validate(&self) -> Result<(), MserError> {
        let err = |m: String| Err(MserError::InvalidParams(m));
        if self.delta == 0 {
            return err("delta must be >= 1".into());
        }
        if self.min_area < 10 || self.max_area > 20000 || self.min_area > self.max_area {
            return err(format!(
                "area bounds must satisfy 10 <= min ({}) <= max ({}) <= 20000",
                self.min_area, self.max_area
            ));
        }
        if self.max_variation < 0.0 {
            return err("max_variation must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_diversity) {
            return err("min_diversity must be in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.min_roi_overlap) {
            return err("min_roi_overlap must be in [0,1]".into());
        }
        Ok(())
    }
}

/// One node of the min-tree: a connected component of a lower level set,
/// canonical at the highest threshold where it gained pixels.
#[derive(Debug, Clone)]
pub struct TreeNode {
    /// Threshold at which this component is complete.
    pub level: u8,
    /// Total pixels in the component (own + all descendants).
    pub area: usize,
    /// Smallest enclosing component at a higher threshold; None for the root.
    pub parent: Option<usize>,
    /// Pixels whose intensity equals `level` inside this component.
    own_pixels: Vec<u32>,
}

/// Min-tree of 4-connected components of `{p : I(p) <= t}` for t = 0..255.
#[derive(Debug)]
pub struct ComponentTree {
    width: usize,
    height: usize,
    nodes: Vec<TreeNode>,
    children: Vec<Vec<usize>>,
    root: usize,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn link(&mut self, a: u32, b: u32) -> u32 {
        self.parent[b as usize] = a;
        a
    }
}

impl ComponentTree {
    /// Builds the min-tree of an 8-bit image.
    pub fn from_u8(width: usize, height: usize, values: &[u8]) -> Self {
        assert_eq!(values.len(), width * height);
        let n = values.len();

        // Bucket pixels by intensity; scan order inside buckets is pixel
        // index order, so construction is fully deterministic.
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); 256];
        for (i, &v) in values.iter().enumerate() {
            buckets[v as usize].push(i as u32);
        }

        let mut uf = DisjointSet::new(n);
        let mut processed = vec![false; n];
        // Provisional nodes; same-level merges alias one id to another.
        let mut raw: Vec<TreeNode> = Vec::new();
        let mut alias: Vec<usize> = Vec::new();
        let mut node_of_root: Vec<usize> = vec![usize::MAX; n];

        fn resolve(alias: &mut [usize], mut id: usize) -> usize {
            while alias[id] != id {
                let up = alias[alias[id]];
                alias[id] = up;
                id = up;
            }
            id
        }

        for level in 0..=255u8 {
            for &p in &buckets[level as usize] {
                processed[p as usize] = true;
                let node_id = raw.len();
                raw.push(TreeNode {
                    level,
                    area: 1,
                    parent: None,
                    own_pixels: vec![p],
                });
                alias.push(node_id);
                node_of_root[p as usize] = node_id;

                let x = p as usize % width;
                let y = p as usize / width;
                let mut neighbors = [None; 4];
                if x > 0 {
                    neighbors[0] = Some(p - 1);
                }
                if x + 1 < width {
                    neighbors[1] = Some(p + 1);
                }
                if y > 0 {
                    neighbors[2] = Some(p - width as u32);
                }
                if y + 1 < height {
                    neighbors[3] = Some(p + width as u32);
                }

                for q in neighbors.into_iter().flatten() {
                    if !processed[q as usize] {
                        continue;
                    }
                    let rp = uf.find(p);
                    let rq = uf.find(q);
                    if rp == rq {
                        continue;
                    }
                    let np = resolve(&mut alias, node_of_root[rp as usize]);
                    let nq = resolve(&mut alias, node_of_root[rq as usize]);
                    let merged = if np == nq {
                        np
                    } else if raw[nq].level == level {
                        // Two components completing at the same threshold
                        // join into one node.
                        let (keep, drop) = (np, nq);
                        let own = std::mem::take(&mut raw[drop].own_pixels);
                        raw[keep].own_pixels.extend(own);
                        raw[keep].area += raw[drop].area;
                        alias[drop] = keep;
                        keep
                    } else {
                        // The earlier component becomes a child of the
                        // current-level node.
                        debug_assert!(raw[nq].level < level);
                        debug_assert!(raw[nq].parent.is_none());
                        raw[nq].parent = Some(np);
                        raw[np].area += raw[nq].area;
                        np
                    };
                    let new_root = uf.link(rp, rq);
                    node_of_root[new_root as usize] = merged;
                }
            }
        }

        // Compact to canonical nodes, resolving aliases in parents.
        let mut id_map = vec![usize::MAX; raw.len()];
        let mut nodes: Vec<TreeNode> = Vec::new();
        for i in 0..raw.len() {
            if resolve(&mut alias, i) == i {
                id_map[i] = nodes.len();
                nodes.push(TreeNode {
                    level: raw[i].level,
                    area: raw[i].area,
                    parent: raw[i].parent,
                    own_pixels: std::mem::take(&mut raw[i].own_pixels),
                });
            }
        }
        let mut root = usize::MAX;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (new_id, node) in nodes.iter_mut().enumerate() {
            node.parent = node.parent.map(|p| id_map[resolve(&mut alias, p)]);
            match node.parent {
                Some(p) => children[p].push(new_id),
                None => {
                    debug_assert_eq!(root, usize::MAX, "min-tree must have one root");
                    root = new_id;
                }
            }
        }

        ComponentTree {
            width,
            height,
            nodes,
            children,
            root,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// All pixels of the component, as (x, y), sorted row-major.
    pub fn region_pixels(&self, id: usize) -> Vec<(usize, usize)> {
        let mut idxs: Vec<u32> = Vec::with_capacity(self.nodes[id].area);
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            idxs.extend_from_slice(&self.nodes[n].own_pixels);
            stack.extend_from_slice(&self.children[n]);
        }
        idxs.sort_unstable();
        idxs.into_iter()
            .map(|i| (i as usize % self.width, i as usize / self.width))
            .collect()
    }

    /// Area of the enclosing component `delta` intensity levels up: the
    /// highest ancestor whose level is still `<= level + delta`.
    fn area_at_plus_delta(&self, id: usize, delta: u8) -> usize {
        let target = self.nodes[id].level as u32 + delta as u32;
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            if self.nodes[p].level as u32 <= target {
                cur = p;
            } else {
                break;
            }
        }
        self.nodes[cur].area
    }

    /// Relative area growth over `delta` levels.
    pub fn variation(&self, id: usize, delta: u8) -> f64 {
        let area = self.nodes[id].area as f64;
        (self.area_at_plus_delta(id, delta) as f64 - area) / area
    }
}

/// Builds the min-tree of a slice after 8-bit quantization
/// (`round(v * 255)` for unit-range slices).
pub fn build_min_tree(s: &Slice) -> ComponentTree {
    ComponentTree::from_u8(s.width(), s.height(), &s.quantize_u8())
}

/// A connected pixel set proposed as a cyst candidate.
#[derive(Debug, Clone)]
pub struct CandidateRegion {
    /// Region pixels as (x, y), sorted row-major; 4-connected, non-empty.
    pub pixels: Vec<(usize, usize)>,
    /// Tight bounding box (x_min, y_min, x_max, y_max), inclusive.
    pub bbox: (usize, usize, usize, usize),
    /// Pixel count; equals `pixels.len()`.
    pub area: usize,
    /// MSER variation score (lower = more stable).
    pub stability: f64,
    /// Mean saliency over the region's pixels.
    pub saliency_score: f64,
    /// Set by the classifier stage.
    pub cyst_prob: Option<f64>,
}

impl CandidateRegion {
    fn from_pixels(pixels: Vec<(usize, usize)>, stability: f64, saliency_score: f64) -> Self {
        debug_assert!(!pixels.is_empty());
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &pixels {
            bbox.0 = bbox.0.min(x);
            bbox.1 = bbox.1.min(y);
            bbox.2 = bbox.2.max(x);
            bbox.3 = bbox.3.max(y);
        }
        let area = pixels.len();
        CandidateRegion {
            pixels,
            bbox,
            area,
            stability,
            saliency_score,
            cyst_prob: None,
        }
    }

    /// Number of region pixels inside a mask.
    pub fn overlap_with_mask(&self, mask: &BinaryMask) -> usize {
        self.pixels.iter().filter(|&&(x, y)| mask.get(x, y)).count()
    }
}

/// Node ids passing the stability test (variation <= ceiling and a local
/// variation minimum against parent and children), before diversity pruning.
/// The root (the whole image) is never a candidate.
pub fn stable_node_ids(tree: &ComponentTree, delta: u8, max_variation: f64) -> Vec<usize> {
    let n = tree.nodes().len();
    let vars: Vec<f64> = (0..n).map(|i| tree.variation(i, delta)).collect();
    (0..n)
        .filter(|&i| {
            if i == tree.root() {
                return false;
            }
            if vars[i] > max_variation {
                return false;
            }
            let parent_ok = match tree.nodes()[i].parent {
                Some(p) => p == tree.root() || vars[i] <= vars[p],
                None => true,
            };
            parent_ok && tree.children(i).iter().all(|&c| vars[i] <= vars[c])
        })
        .collect()
}

fn diversity_prune(
    tree: &ComponentTree,
    stable: &[usize],
    delta: u8,
    min_diversity: f64,
) -> Vec<usize> {
    let mut is_stable = vec![false; tree.nodes().len()];
    for &id in stable {
        is_stable[id] = true;
    }
    let mut alive = is_stable.clone();

    // Small regions first; each is compared against its nearest surviving
    // stable ancestor, and the less stable of the pair is dropped.
    let mut order: Vec<usize> = stable.to_vec();
    order.sort_by_key(|&id| (tree.nodes()[id].area, id));
    for &id in &order {
        if !alive[id] {
            continue;
        }
        let mut anc = tree.nodes()[id].parent;
        while let Some(a) = anc {
            if is_stable[a] && alive[a] {
                break;
            }
            anc = tree.nodes()[a].parent;
        }
        if let Some(a) = anc.filter(|&a| is_stable[a] && alive[a]) {
            let (big, small) = (tree.nodes()[a].area as f64, tree.nodes()[id].area as f64);
            if (big - small) / big < min_diversity {
                if tree.variation(id, delta) <= tree.variation(a, delta) {
                    alive[a] = false;
                } else {
                    alive[id] = false;
                }
            }
        }
    }
    (0..tree.nodes().len()).filter(|&i| alive[i]).collect()
}

/// Detects dark MSER candidates inside the ROI.
///
/// Regions with area outside `[min_area, max_area]` or with less than
/// `min_roi_overlap` of their pixels inside the ROI are discarded. Survivors
/// are scored with the mean saliency over their pixels and returned sorted
/// by that score (descending, deterministic tie-breaking).
pub fn detect_mser(
    s: &Slice,
    roi: &BinaryMask,
    saliency: Option<&Slice>,
    p: &MserParams,
) -> Result<Vec<CandidateRegion>, MserError> {
    p.validate()?;
    assert_eq!(roi.width(), s.width(), "ROI must match the slice grid");
    assert_eq!(roi.height(), s.height());
    let tree = build_min_tree(s);
    let stable = stable_node_ids(&tree, p.delta, p.max_variation);
    let kept = diversity_prune(&tree, &stable, p.delta, p.min_diversity);

    let mut regions = Vec::new();
    for id in kept {
        let area = tree.nodes()[id].area;
        if area < p.min_area || area > p.max_area {
            continue;
        }
        let pixels = tree.region_pixels(id);
        let inside = pixels.iter().filter(|&&(x, y)| roi.get(x, y)).count();
        if (inside as f64) < p.min_roi_overlap * area as f64 {
            continue;
        }
        let sal = match saliency {
            Some(map) => {
                pixels
                    .iter()
                    .map(|&(x, y)| map.get(x, y) as f64)
                    .sum::<f64>()
                    / area as f64
            }
            None => 0.0,
        };
        regions.push(CandidateRegion::from_pixels(
            pixels,
            tree.variation(id, p.delta),
            sal,
        ));
    }
    regions.sort_by(|a, b| {
        b.saliency_score
            .partial_cmp(&a.saliency_score)
            .unwrap()
            .then(a.bbox.cmp(&b.bbox))
            .then(a.area.cmp(&b.area))
    });
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{MaskSource, PixelRange};
    use std::collections::BTreeSet;

    fn full_roi(w: usize, h: usize) -> BinaryMask {
        BinaryMask::new(w, h, vec![true; w * h], MaskSource::Prediction)
    }

    /// Brute-force 4-connected components of `{p : I(p) <= t}`.
    fn flood_components(w: usize, h: usize, values: &[u8], t: u8) -> Vec<BTreeSet<u32>> {
        let mut seen = vec![false; w * h];
        let mut comps = Vec::new();
        for start in 0..w * h {
            if seen[start] || values[start] > t {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                comp.insert(i as u32);
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if !seen[j] && values[j] <= t {
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
            comps.push(comp);
        }
        comps
    }

    fn node_pixel_set(tree: &ComponentTree, id: usize) -> BTreeSet<u32> {
        tree.region_pixels(id)
            .into_iter()
            .map(|(x, y)| (y * tree.width() + x) as u32)
            .collect()
    }

    #[test]
    fn constant_image_is_a_single_root() {
        let tree = ComponentTree::from_u8(6, 5, &[77; 30]);
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.nodes()[0].area, 30);
        assert_eq!(tree.nodes()[0].level, 77);
        assert!(tree.nodes()[0].parent.is_none());
    }

    #[test]
    fn two_isolated_dark_pixels_merge_only_at_background_level() {
        let (w, h) = (8, 8);
        let mut img = vec![200u8; w * h];
        img[w + 1] = 0;
        img[6 * w + 6] = 0;
        let tree = ComponentTree::from_u8(w, h, &img);

        let leaves: Vec<usize> = (0..tree.nodes().len())
            .filter(|&i| tree.nodes()[i].level == 0)
            .collect();
        assert_eq!(leaves.len(), 2);
        for &l in &leaves {
            assert_eq!(tree.nodes()[l].area, 1);
            assert_eq!(tree.nodes()[l].parent, Some(tree.root()));
        }
        assert_eq!(tree.nodes()[tree.root()].level, 200);

        // Brute-force agreement at both levels.
        let comps0 = flood_components(w, h, &img, 0);
        assert_eq!(comps0.len(), 2);
        for &l in &leaves {
            assert!(comps0.contains(&node_pixel_set(&tree, l)));
        }
    }

    #[test]
    fn nested_squares_form_a_chain() {
        let (w, h) = (11, 11);
        let mut img = vec![250u8; w * h];
        for y in 2..9 {
            for x in 2..9 {
                img[y * w + x] = 128;
            }
        }
        for y in 4..7 {
            for x in 4..7 {
                img[y * w + x] = 10;
            }
        }
        let tree = ComponentTree::from_u8(w, h, &img);
        assert_eq!(tree.nodes().len(), 3);
        let mut areas: Vec<usize> = tree.nodes().iter().map(|n| n.area).collect();
        areas.sort_unstable();
        assert_eq!(areas, vec![9, 49, 121]);
        // Chain: 9 -> 49 -> 121.
        let inner = tree.nodes().iter().position(|n| n.area == 9).unwrap();
        let mid = tree.nodes().iter().position(|n| n.area == 49).unwrap();
        assert_eq!(tree.nodes()[inner].parent, Some(mid));
        assert_eq!(tree.nodes()[mid].parent, Some(tree.root()));
    }

    #[test]
    fn every_node_is_a_flood_fill_component_and_vice_versa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (w, h) = (8, 8);
            let levels = [0u8, 85, 170, 255];
            let img: Vec<u8> = (0..w * h).map(|_| levels[rng.gen_range(0..4)]).collect();
            let tree = ComponentTree::from_u8(w, h, &img);

            // Soundness: every node equals a component of its own level set.
            for id in 0..tree.nodes().len() {
                let set = node_pixel_set(&tree, id);
                let comps = flood_components(w, h, &img, tree.nodes()[id].level);
                assert!(
                    comps.contains(&set),
                    "node {id} is not a level-set component"
                );
            }
            // Completeness: every component of every level set is a node.
            let node_sets: Vec<BTreeSet<u32>> = (0..tree.nodes().len())
                .map(|id| node_pixel_set(&tree, id))
                .collect();
            for &t in &levels {
                for comp in flood_components(w, h, &img, t) {
                    assert!(node_sets.contains(&comp), "missing component at level {t}");
                }
            }
            // Areas are consistent.
            for id in 0..tree.nodes().len() {
                assert_eq!(tree.nodes()[id].area, node_pixel_set(&tree, id).len());
            }
        }
    }

    #[test]
    fn blank_slice_yields_no_candidates() {
        let s = Slice::constant(64, 48, 0.5, PixelRange::Unit);
        let out = detect_mser(&s, &full_roi(64, 48), None, &MserParams::default()).unwrap();
        assert!(out.is_empty());
    }

    fn slice_with_dark_rects(rects: &[(usize, usize, usize, usize)]) -> Slice {
        let (w, h) = (128, 96);
        let mut s = Slice::constant(w, h, 0.7, PixelRange::Unit);
        for &(x0, y0, rw, rh) in rects {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    s.set(x, y, 0.15);
                }
            }
        }
        s
    }

    #[test]
    fn dark_rectangles_are_detected_and_nested_or_disjoint() {
        let s = slice_with_dark_rects(&[(10, 10, 10, 8), (60, 40, 20, 15)]);
        let out = detect_mser(&s, &full_roi(128, 96), None, &MserParams::default()).unwrap();
        assert_eq!(out.len(), 2);
        let areas: BTreeSet<usize> = out.iter().map(|r| r.area).collect();
        assert_eq!(areas, BTreeSet::from([80, 300]));
        for r in &out {
            // Tight bbox check.
            let (x0, y0, x1, y1) = r.bbox;
            assert!(r
                .pixels
                .iter()
                .all(|&(x, y)| x >= x0 && x <= x1 && y >= y0 && y <= y1));
            assert!(r.pixels.iter().any(|&(x, _)| x == x0));
            assert!(r.pixels.iter().any(|&(x, _)| x == x1));
            assert!(r.pixels.iter().any(|&(_, y)| y == y0));
            assert!(r.pixels.iter().any(|&(_, y)| y == y1));
        }
        // Disjoint or nested.
        let sa: BTreeSet<_> = out[0].pixels.iter().collect();
        let sb: BTreeSet<_> = out[1].pixels.iter().collect();
        let inter = sa.intersection(&sb).count();
        assert!(inter == 0 || inter == sa.len().min(sb.len()));
    }

    #[test]
    fn region_straddling_roi_border_is_discarded_at_30_percent() {
        let s = slice_with_dark_rects(&[(10, 10, 10, 10)]);
        // ROI covers only the top 3 rows of the 10-row region: 30% inside.
        let mut roi = full_roi(128, 96);
        for y in 13..96 {
            for x in 0..128 {
                roi.set(x, y, false);
            }
        }
        let out = detect_mser(&s, &roi, None, &MserParams::default()).unwrap();
        assert!(out.is_empty());

        // At 50% inside the region it is kept.
        let mut roi_half = full_roi(128, 96);
        for y in 15..96 {
            for x in 0..128 {
                roi_half.set(x, y, false);
            }
        }
        let out = detect_mser(&s, &roi_half, None, &MserParams::default()).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn area_bounds_are_respected() {
        let s = slice_with_dark_rects(&[(10, 10, 4, 4), (40, 10, 10, 10), (70, 10, 40, 40)]);
        let p = MserParams {
            min_area: 30,
            max_area: 500,
            ..MserParams::default()
        };
        let out = detect_mser(&s, &full_roi(128, 96), None, &p).unwrap();
        assert_eq!(out.len(), 1, "only the 100 px region fits the bounds");
        assert!(out
            .iter()
            .all(|r| r.area >= p.min_area && r.area <= p.max_area));
    }

    #[test]
    fn candidate_set_is_monotone_in_max_variation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (32, 32);
        let img: Vec<u8> = (0..w * h).map(|_| rng.gen::<u8>()).collect();
        let tree = ComponentTree::from_u8(w, h, &img);
        let small: BTreeSet<usize> = stable_node_ids(&tree, 5, 0.2).into_iter().collect();
        let large: BTreeSet<usize> = stable_node_ids(&tree, 5, 0.8).into_iter().collect();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = MserParams {
            min_area: 5,
            ..MserParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = MserParams {
            max_area: 30000,
            ..MserParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = MserParams {
            delta: 0,
            ..MserParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
