//! Cross-view semantic mask alignment.
//!
//! Three passes turn per-view segmentation masks into view-consistent
//! region groups:
//!
//! 1. pixel-match voting: each mask follows its dense matches into the
//!    other view and pairs with the mask that receives the most votes,
//!    scored by a blend of area ratio and feature cosine;
//! 2. fusion: at coarse granularities, masks of one view that all pair
//!    with the same mask elsewhere are merged and take over its feature;
//! 3. reprojection: masks are lifted to 3D with per-pixel points, projected
//!    into the other view and kept only when the match is bilaterally
//!    consistent and scores above the second threshold.
//!
//! Accepted pairs are merged with union-find into groups that each carry a
//! single canonical feature.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Camera, Granularity, PipelineConfig, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("granularity mismatch: {0} vs {1}")]
    GranularityMismatch(Granularity, Granularity),
    #[error("match field covers views ({0}, {1}), expected ({2}, {3})")]
    FieldMismatch(usize, usize, usize, usize),
    #[error("masks {0} and {1} overlap in view {2} at {3}")]
    Overlap(u32, u32, usize, Granularity),
    #[error("mask {0} is empty")]
    EmptyMask(u32),
    #[error("feature {0} is missing from the store")]
    MissingFeature(usize),
    #[error("feature has zero or non-finite norm")]
    DegenerateFeature,
    #[error("view {0} has no {1}")]
    MissingInput(usize, &'static str),
}

/// Run-length encoded set of row-major pixel indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// Sorted, non-overlapping, non-adjacent `(start, length)` runs.
    pub runs: Vec<(u32, u32)>,
}

impl RleMask {
    /// Builds from pixel indices in any order; duplicates are ignored.
    pub fn from_indices(indices: impl IntoIterator<Item = u32>) -> Self {
        let mut idx: Vec<u32> = indices.into_iter().collect();
        idx.sort_unstable();
        idx.dedup();
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for i in idx {
            match runs.last_mut() {
                Some((s, l)) if *s + *l == i => *l += 1,
                _ => runs.push((i, 1)),
            }
        }
        Self { runs }
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|(_, l)| *l as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|(s, l)| *s..*s + *l)
    }

    pub fn contains(&self, index: u32) -> bool {
        match self.runs.binary_search_by(|(s, _)| s.cmp(&index)) {
            Ok(_) => true,
            Err(0) => false,
            Err(pos) => {
                let (s, l) = self.runs[pos - 1];
                index < s + l
            }
        }
    }

    pub fn union(&self, other: &RleMask) -> RleMask {
        RleMask::from_indices(self.iter().chain(other.iter()))
    }

    pub fn intersection_area(&self, other: &RleMask) -> usize {
        let (mut i, mut j, mut total) = (0, 0, 0usize);
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, al) = self.runs[i];
            let (b0, bl) = other.runs[j];
            let (a1, b1) = (a0 + al, b0 + bl);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += (hi - lo) as usize;
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    /// Bounding box `(x0, y0, x1, y1)` inclusive, for an image `width` wide.
    pub fn bbox(&self, width: usize) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.iter();
        let first = it.next()? as usize;
        let mut b = (first % width, first / width, first % width, first / width);
        for i in self.iter() {
            let (x, y) = (i as usize % width, i as usize / width);
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        Some(b)
    }
}

/// One segmentation region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    /// Label value, ≥ 1.
    pub id: u32,
    pub pixels: RleMask,
    /// Index into the [`FeatureStore`].
    pub feature: usize,
}

/// All regions of one view at one granularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub view: usize,
    pub granularity: Granularity,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(view: usize, granularity: Granularity, width: usize, height: usize) -> Self {
        Self { view, granularity, width, height, masks: Vec::new() }
    }

    /// Builds from a label image (0 = unlabeled); `features[label]` gives the
    /// feature id of each label.
    pub fn from_labels(
        view: usize,
        granularity: Granularity,
        width: usize,
        height: usize,
        labels: &[u32],
        feature_of: impl Fn(u32) -> usize,
    ) -> Self {
        let mut by_label: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 {
                by_label.entry(l).or_default().push(i as u32);
            }
        }
        let masks = by_label
            .into_iter()
            .map(|(id, px)| Mask { id, pixels: RleMask::from_indices(px), feature: feature_of(id) })
            .collect();
        Self { view, granularity, width, height, masks }
    }

    pub fn get(&self, id: u32) -> Option<&Mask> {
        self.masks.iter().find(|m| m.id == id)
    }

    /// Label image with 0 for unlabeled pixels. Later masks win on overlap.
    pub fn label_map(&self) -> Vec<u32> {
        let mut labels = vec![0u32; self.width * self.height];
        for m in &self.masks {
            for i in m.pixels.iter() {
                labels[i as usize] = m.id;
            }
        }
        labels
    }

    pub fn total_area(&self) -> usize {
        self.masks.iter().map(|m| m.pixels.area()).sum()
    }

    pub fn check(&self) -> Result<(), AlignError> {
        let mut owner = vec![0u32; self.width * self.height];
        for m in &self.masks {
            if m.pixels.is_empty() {
                return Err(AlignError::EmptyMask(m.id));
            }
            for i in m.pixels.iter() {
                let slot = &mut owner[i as usize];
                if *slot != 0 {
                    return Err(AlignError::Overlap(*slot, m.id, self.view, self.granularity));
                }
                *slot = m.id;
            }
        }
        Ok(())
    }
}

/// Unit-norm region embeddings addressed by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureStore {
    pub features: Vec<Vec<f64>>,
}

impl FeatureStore {
    /// Normalizes and stores `feature`, returning its id.
    pub fn push(&mut self, feature: Vec<f64>) -> Result<usize, AlignError> {
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(AlignError::DegenerateFeature);
        }
        self.features.push(feature.into_iter().map(|v| v / norm).collect());
        Ok(self.features.len() - 1)
    }

    pub fn get(&self, id: usize) -> Result<&[f64], AlignError> {
        self.features.get(id).map(|f| f.as_slice()).ok_or(AlignError::MissingFeature(id))
    }

    pub fn dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }
}

/// Dense correspondence from every pixel of one view into another.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMatchField {
    pub source: usize,
    pub target: usize,
    pub width: usize,
    pub height: usize,
    pub target_width: usize,
    pub target_height: usize,
    /// Sub-pixel `(x, y)` in the target image, per source pixel.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl PixelMatchField {
    /// Target pixel index of source pixel `index`, rounded to the nearest
    /// pixel.
    pub fn lookup(&self, index: usize) -> Option<usize> {
        if !self.valid[index] {
            return None;
        }
        let [x, y] = self.coords[index];
        let (xr, yr) = (x.round(), y.round());
        if xr < 0.0 || yr < 0.0 || xr >= self.target_width as f64 || yr >= self.target_height as f64 {
            return None;
        }
        Some(yr as usize * self.target_width + xr as usize)
    }
}

/// Per-pixel 3D points of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskRef {
    pub view: usize,
    pub granularity: Granularity,
    pub mask: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    PixelVote,
    Reprojection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub source: MaskRef,
    pub target: MaskRef,
    pub votes: usize,
    pub s_area: f64,
    pub s_lang: f64,
    pub s_match: f64,
    pub accepted: bool,
    pub origin: PairSource,
}

/// Feature cosine clamped to [0, 1].
pub fn lang_score(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Votes landing in the target mask over its area, clamped to [0, 1].
pub fn area_score(votes: usize, target_area: usize) -> f64 {
    if target_area == 0 {
        return 0.0;
    }
    (votes as f64 / target_area as f64).min(1.0)
}

/// `λ·S_lang + (1-λ)·S_area`.
pub fn match_score(s_lang: f64, s_area: f64, lang_weight: f64) -> f64 {
    lang_weight * s_lang + (1.0 - lang_weight) * s_area
}

/// Majority vote over target labels; ties go to the larger feature cosine,
/// then the smaller mask id. Returns `(mask id, votes, s_lang)`.
fn majority(
    votes: &BTreeMap<u32, usize>,
    source_feature: &[f64],
    targets: &MaskSet,
    features: &FeatureStore,
) -> Result<Option<(u32, usize, f64)>, AlignError> {
    let mut best: Option<(u32, usize, f64)> = None;
    for (&id, &count) in votes {
        let mask = targets.get(id).expect("label belongs to mask set");
        let s_lang = lang_score(source_feature, features.get(mask.feature)?);
        let better = match best {
            None => true,
            Some((_, bc, bl)) => count > bc || (count == bc && s_lang > bl),
        };
        if better {
            best = Some((id, count, s_lang));
        }
    }
    Ok(best)
}

/// Pixel-match voting from every mask of `masks_i` into `masks_j`.
pub fn step1_pixel_vote(
    masks_i: &MaskSet,
    masks_j: &MaskSet,
    field: &PixelMatchField,
    features: &FeatureStore,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredPair>, AlignError> {
    if masks_i.granularity != masks_j.granularity {
        return Err(AlignError::GranularityMismatch(masks_i.granularity, masks_j.granularity));
    }
    if field.source != masks_i.view || field.target != masks_j.view {
        return Err(AlignError::FieldMismatch(field.source, field.target, masks_i.view, masks_j.view));
    }
    let labels_j = masks_j.label_map();
    let gran = masks_i.granularity;
    let mut out = Vec::new();
    for m in &masks_i.masks {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for p in m.pixels.iter() {
            if let Some(q) = field.lookup(p as usize) {
                let l = labels_j[q];
                if l != 0 {
                    *votes.entry(l).or_default() += 1;
                }
            }
        }
        let source_feature = features.get(m.feature)?;
        let Some((target, count, s_lang)) = majority(&votes, source_feature, masks_j, features)? else {
            continue;
        };
        let s_area = area_score(count, masks_j.get(target).unwrap().pixels.area());
        let s_match = match_score(s_lang, s_area, cfg.lang_weight);
        out.push(ScoredPair {
            source: MaskRef { view: masks_i.view, granularity: gran, mask: m.id },
            target: MaskRef { view: masks_j.view, granularity: gran, mask: target },
            votes: count,
            s_area,
            s_lang,
            s_match,
            accepted: s_match > cfg.pixel_match_threshold,
            origin: PairSource::PixelVote,
        });
    }
    Ok(out)
}

/// Merges masks of view `i` whose accepted pairs point at the same target
/// mask, giving the union the target's feature. Pairs are re-pointed to the
/// fused mask (which keeps the smallest member id). Granularities outside
/// `cfg.fusion_granularities` pass through unchanged.
pub fn step2_fuse(
    masks_i: &MaskSet,
    pairs: &mut [ScoredPair],
    target_sets: &BTreeMap<usize, MaskSet>,
    cfg: &PipelineConfig,
) -> MaskSet {
    let mut out = masks_i.clone();
    if !cfg.fusion_granularities.contains(&masks_i.granularity) {
        return out;
    }
    let targets: BTreeSet<MaskRef> = pairs
        .iter()
        .filter(|p| p.accepted && p.source.view == masks_i.view && p.source.granularity == masks_i.granularity)
        .map(|p| p.target)
        .collect();
    for target in targets {
        let members: BTreeSet<u32> = pairs
            .iter()
            .filter(|p| p.accepted && p.target == target && p.source.view == masks_i.view)
            .filter(|p| p.source.granularity == masks_i.granularity)
            .map(|p| p.source.mask)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let Some(target_mask) = target_sets.get(&target.view).and_then(|s| s.get(target.mask)) else {
            continue;
        };
        let keep = *members.iter().next().unwrap();
        let mut union = RleMask::default();
        for m in out.masks.iter().filter(|m| members.contains(&m.id)) {
            union = union.union(&m.pixels);
        }
        out.masks.retain(|m| !members.contains(&m.id) || m.id == keep);
        if let Some(m) = out.masks.iter_mut().find(|m| m.id == keep) {
            m.pixels = union;
            m.feature = target_mask.feature;
        }
        debug!("view {} {}: fused {:?} into {keep}", masks_i.view, masks_i.granularity, members);
        for p in pairs.iter_mut() {
            if p.source.view == masks_i.view && p.source.granularity == masks_i.granularity && members.contains(&p.source.mask) {
                p.source.mask = keep;
            }
            if p.target.view == masks_i.view && p.target.granularity == masks_i.granularity && members.contains(&p.target.mask) {
                p.target.mask = keep;
            }
        }
    }
    out
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] || (self.size[ra] == self.size[rb] && ra > rb) {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchGroup {
    pub members: Vec<MaskRef>,
    pub canonical_feature: usize,
    /// Member whose feature became canonical.
    pub canonical_member: MaskRef,
}

/// Result of alignment: retained pairs and the groups they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchGraph {
    pub pairs: Vec<ScoredPair>,
    pub groups: Vec<MatchGroup>,
}

impl MatchGraph {
    pub fn group_of(&self, mask: &MaskRef) -> Option<usize> {
        self.groups.iter().position(|g| g.members.contains(mask))
    }

    /// Canonical feature id for every grouped mask.
    pub fn aligned_features(&self) -> BTreeMap<MaskRef, usize> {
        self.groups
            .iter()
            .flat_map(|g| g.members.iter().map(move |m| (*m, g.canonical_feature)))
            .collect()
    }

    /// Unordered cross-view pairs of masks that share a group.
    pub fn grouped_pairs(&self) -> BTreeSet<(MaskRef, MaskRef)> {
        let mut out = BTreeSet::new();
        for g in &self.groups {
            for (i, a) in g.members.iter().enumerate() {
                for b in &g.members[i + 1..] {
                    if a.view != b.view {
                        out.insert(if a < b { (*a, *b) } else { (*b, *a) });
                    }
                }
            }
        }
        out
    }
}

/// Everything the reprojection pass reads.
pub struct AlignmentInputs<'a> {
    /// `masksets[view][granularity]`
    pub masksets: &'a [BTreeMap<Granularity, MaskSet>],
    pub features: &'a FeatureStore,
    pub points: &'a [PointMap],
    pub cameras: &'a [Camera],
}

struct Projection {
    votes: BTreeMap<u32, usize>,
    projectable: usize,
}

fn reproject(mask: &Mask, points: &PointMap, cam: &Camera, labels: &[u32]) -> Projection {
    let mut votes = BTreeMap::new();
    let mut projectable = 0;
    for p in mask.pixels.iter() {
        let p = p as usize;
        if !points.valid[p] {
            continue;
        }
        let Some((u, v, _)) = cam.project(&points.points[p]) else { continue };
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= cam.width as f64 || vr >= cam.height as f64 {
            continue;
        }
        projectable += 1;
        let l = labels[vr as usize * cam.width + ur as usize];
        if l != 0 {
            *votes.entry(l).or_default() += 1;
        }
    }
    Projection { votes, projectable }
}

enum Reprojected {
    Skipped,
    NoTarget,
    Target { id: u32, votes: usize, s_lang: f64 },
}

fn reproject_majority(
    mask: &Mask,
    from: usize,
    to: &MaskSet,
    to_labels: &[u32],
    inputs: &AlignmentInputs<'_>,
    cfg: &PipelineConfig,
) -> Result<Reprojected, AlignError> {
    let proj = reproject(mask, &inputs.points[from], &inputs.cameras[to.view], to_labels);
    if proj.projectable < cfg.min_projectable_points {
        return Ok(Reprojected::Skipped);
    }
    let feature = inputs.features.get(mask.feature)?;
    Ok(match majority(&proj.votes, feature, to, inputs.features)? {
        Some((id, votes, s_lang)) => Reprojected::Target { id, votes, s_lang },
        None => Reprojected::NoTarget,
    })
}

/// Reprojection refinement over all view pairs and granularities, followed
/// by grouping.
///
/// Candidates are the `prior` pairs plus every bilaterally consistent pair
/// found by reprojection. A candidate `(a, b)` is kept when `a` reprojects
/// to `b`, `b` reprojects back to `a`, and the better of the two directional
/// scores exceeds the reprojection threshold. Prior pairs that cannot be
/// evaluated (too few projectable points) keep their earlier verdict.
pub fn step3_reproject_refine(
    inputs: &AlignmentInputs<'_>,
    prior: &[ScoredPair],
    cfg: &PipelineConfig,
) -> Result<MatchGraph, AlignError> {
    let n_views = inputs.masksets.len();
    if inputs.points.len() != n_views {
        return Err(AlignError::MissingInput(inputs.points.len(), "point map"));
    }
    if inputs.cameras.len() != n_views {
        return Err(AlignError::MissingInput(inputs.cameras.len(), "camera"));
    }
    let mut jobs = Vec::new();
    for i in 0..n_views {
        for j in i + 1..n_views {
            for gran in Granularity::ALL {
                if inputs.masksets[i].contains_key(&gran) && inputs.masksets[j].contains_key(&gran) {
                    jobs.push((i, j, gran));
                }
            }
        }
    }

    let results: Vec<Result<Vec<ScoredPair>, AlignError>> = jobs
        .par_iter()
        .map(|&(i, j, gran)| {
            let set_i = &inputs.masksets[i][&gran];
            let set_j = &inputs.masksets[j][&gran];
            let labels_i = set_i.label_map();
            let labels_j = set_j.label_map();

            let mut candidates: BTreeSet<(u32, u32)> = BTreeSet::new();
            let mut prior_accepted: BTreeMap<(u32, u32), bool> = BTreeMap::new();
            for p in prior.iter().filter(|p| p.source.granularity == gran) {
                let key = match (p.source.view, p.target.view) {
                    (a, b) if a == i && b == j => (p.source.mask, p.target.mask),
                    (a, b) if a == j && b == i => (p.target.mask, p.source.mask),
                    _ => continue,
                };
                if set_i.get(key.0).is_none() || set_j.get(key.1).is_none() {
                    continue;
                }
                candidates.insert(key);
                *prior_accepted.entry(key).or_insert(false) |= p.accepted;
            }

            // forward and backward reprojection targets
            let mut fwd: BTreeMap<u32, Reprojected> = BTreeMap::new();
            for m in &set_i.masks {
                fwd.insert(m.id, reproject_majority(m, i, set_j, &labels_j, inputs, cfg)?);
            }
            let mut bwd: BTreeMap<u32, Reprojected> = BTreeMap::new();
            for m in &set_j.masks {
                bwd.insert(m.id, reproject_majority(m, j, set_i, &labels_i, inputs, cfg)?);
            }
            for (a, r) in &fwd {
                if let Reprojected::Target { id, .. } = r {
                    candidates.insert((*a, *id));
                }
            }
            for (b, r) in &bwd {
                if let Reprojected::Target { id, .. } = r {
                    candidates.insert((*id, *b));
                }
            }

            let mut kept = Vec::new();
            for (a, b) in candidates {
                let mask_a = set_i.get(a).unwrap();
                let mask_b = set_j.get(b).unwrap();
                let source = MaskRef { view: i, granularity: gran, mask: a };
                let target = MaskRef { view: j, granularity: gran, mask: b };
                let (f, r) = (&fwd[&a], &bwd[&b]);
                if matches!(f, Reprojected::Skipped) || matches!(r, Reprojected::Skipped) {
                    if let Some(true) = prior_accepted.get(&(a, b)) {
                        warn!("view pair ({i}, {j}) {gran}: masks {a}/{b} lack projectable points, keeping pixel-vote verdict");
                        let s_lang = lang_score(inputs.features.get(mask_a.feature)?, inputs.features.get(mask_b.feature)?);
                        kept.push(ScoredPair {
                            source,
                            target,
                            votes: 0,
                            s_area: 0.0,
                            s_lang,
                            s_match: f64::NAN,
                            accepted: true,
                            origin: PairSource::PixelVote,
                        });
                    } else {
                        debug!("view pair ({i}, {j}) {gran}: masks {a}/{b} skipped, too few projectable points");
                    }
                    continue;
                }
                let (
                    Reprojected::Target { id: fwd_id, votes: fwd_votes, s_lang },
                    Reprojected::Target { id: bwd_id, votes: bwd_votes, .. },
                ) = (f, r)
                else {
                    continue;
                };
                if *fwd_id != b || *bwd_id != a {
                    continue;
                }
                let s_area_ij = area_score(*fwd_votes, mask_b.pixels.area());
                let s_area_ji = area_score(*bwd_votes, mask_a.pixels.area());
                let s_area = s_area_ij.max(s_area_ji);
                let s_match = match_score(*s_lang, s_area, cfg.lang_weight);
                if s_match > cfg.reproj_match_threshold {
                    kept.push(ScoredPair {
                        source,
                        target,
                        votes: *fwd_votes,
                        s_area,
                        s_lang: *s_lang,
                        s_match,
                        accepted: true,
                        origin: PairSource::Reprojection,
                    });
                }
            }
            Ok(kept)
        })
        .collect();

    let mut pairs = Vec::new();
    for r in results {
        pairs.extend(r?);
    }
    group_pairs(inputs.masksets, inputs.features, pairs)
}

/// Union-find grouping of accepted pairs; every mask ends up in exactly one
/// group. The canonical feature is that of the largest member, ties going
/// to the smallest mask reference.
pub fn group_pairs(
    masksets: &[BTreeMap<Granularity, MaskSet>],
    features: &FeatureStore,
    pairs: Vec<ScoredPair>,
) -> Result<MatchGraph, AlignError> {
    let mut nodes: Vec<(MaskRef, usize, usize)> = Vec::new();
    for sets in masksets {
        for (gran, set) in sets {
            for m in &set.masks {
                nodes.push((MaskRef { view: set.view, granularity: *gran, mask: m.id }, m.pixels.area(), m.feature));
            }
        }
    }
    nodes.sort_by_key(|n| n.0);
    let index: BTreeMap<MaskRef, usize> = nodes.iter().enumerate().map(|(i, n)| (n.0, i)).collect();
    let mut uf = UnionFind::new(nodes.len());
    for p in pairs.iter().filter(|p| p.accepted) {
        if let (Some(&a), Some(&b)) = (index.get(&p.source), index.get(&p.target)) {
            uf.union(a, b);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..nodes.len() {
        by_root.entry(uf.find(i)).or_default().push(i);
    }
    let mut groups: Vec<MatchGroup> = by_root
        .into_values()
        .map(|members| {
            let best = members
                .iter()
                .copied()
                .max_by(|&a, &b| nodes[a].1.cmp(&nodes[b].1).then(nodes[b].0.cmp(&nodes[a].0)))
                .unwrap();
            MatchGroup {
                members: members.iter().map(|&m| nodes[m].0).collect(),
                canonical_feature: nodes[best].2,
                canonical_member: nodes[best].0,
            }
        })
        .collect();
    for g in &groups {
        features.get(g.canonical_feature)?;
    }
    groups.sort_by_key(|g| g.members[0]);
    Ok(MatchGraph { pairs, groups })
}

/// Output of the full three-step alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Mask sets after fusion, `[view][granularity]`.
    pub masksets: Vec<BTreeMap<Granularity, MaskSet>>,
    pub pixel_pairs: Vec<ScoredPair>,
    pub graph: MatchGraph,
}

/// Runs pixel voting over every ordered view pair with a match field,
/// fusion, and reprojection refinement.
pub fn align(
    masksets: &[BTreeMap<Granularity, MaskSet>],
    features: &FeatureStore,
    fields: &[PixelMatchField],
    points: &[PointMap],
    cameras: &[Camera],
    cfg: &PipelineConfig,
) -> Result<AlignmentResult, AlignError> {
    let mut jobs = Vec::new();
    for field in fields {
        for gran in Granularity::ALL {
            let (Some(a), Some(b)) = (
                masksets.get(field.source).and_then(|s| s.get(&gran)),
                masksets.get(field.target).and_then(|s| s.get(&gran)),
            ) else {
                continue;
            };
            jobs.push((a, b, field));
        }
    }
    let voted: Vec<Result<Vec<ScoredPair>, AlignError>> =
        jobs.par_iter().map(|(a, b, f)| step1_pixel_vote(a, b, f, features, cfg)).collect();
    let mut pairs = Vec::new();
    for v in voted {
        pairs.extend(v?);
    }

    let mut fused: Vec<BTreeMap<Granularity, MaskSet>> = masksets.to_vec();
    for view in 0..fused.len() {
        for gran in Granularity::ALL {
            let Some(set) = fused[view].get(&gran).cloned() else { continue };
            // fuse against each target view in turn
            let targets: BTreeSet<usize> = pairs
                .iter()
                .filter(|p| p.source.view == view && p.source.granularity == gran)
                .map(|p| p.target.view)
                .collect();
            let mut current = set;
            for t in targets {
                let target_sets: BTreeMap<usize, MaskSet> =
                    fused[t].get(&gran).map(|s| (t, s.clone())).into_iter().collect();
                let mut subset: Vec<ScoredPair> =
                    pairs.iter().filter(|p| p.target.view == t || p.source.view == view).cloned().collect();
                let next = step2_fuse(&current, &mut subset, &target_sets, cfg);
                if next != current {
                    // re-point every pair that referenced a fused mask
                    let remap = fused_ids(&current, &next);
                    for p in pairs.iter_mut() {
                        for r in [&mut p.source, &mut p.target] {
                            if r.view == view && r.granularity == gran {
                                if let Some(new) = remap.get(&r.mask) {
                                    r.mask = *new;
                                }
                            }
                        }
                    }
                    current = next;
                }
            }
            fused[view].insert(gran, current);
        }
    }
    dedup_pairs(&mut pairs);

    let inputs = AlignmentInputs { masksets: &fused, features, points, cameras };
    let graph = step3_reproject_refine(&inputs, &pairs, cfg)?;
    Ok(AlignmentResult { masksets: fused, pixel_pairs: pairs, graph })
}

/// Maps ids that disappeared in `after` to the fused mask that now covers
/// their pixels.
fn fused_ids(before: &MaskSet, after: &MaskSet) -> BTreeMap<u32, u32> {
    let mut map = BTreeMap::new();
    for m in &before.masks {
        if after.get(m.id).is_some() {
            continue;
        }
        if let Some(first) = m.pixels.iter().next() {
            if let Some(owner) = after.masks.iter().find(|a| a.pixels.contains(first)) {
                map.insert(m.id, owner.id);
            }
        }
    }
    map
}

fn dedup_pairs(pairs: &mut Vec<ScoredPair>) {
    let mut seen = BTreeSet::new();
    pairs.retain(|p| seen.insert((p.source, p.target)));
}
