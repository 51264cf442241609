//! Open-vocabulary queries over decoded semantic maps: relevancy, mean
//! filtering, localization, segmentation and metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featcodec::FeatureCodec;
use crate::rasterizer::RenderOutput;
use crate::scene::{Granularity, PipelineConfig};

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("canonical embedding set is empty")]
    EmptyCanonical,
    #[error("smoothing kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("no relevancy maps given")]
    NoMaps,
    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryMode {
    #[serde(rename = "lerf")]
    Lerf,
    #[serde(rename = "3d-ovs")]
    Ovs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub embedding: Vec<f64>,
    pub canonical: Vec<Vec<f64>>,
    pub mode: QueryMode,
    pub lerf_threshold: f64,
    pub ovs_threshold: f64,
    pub area_threshold: usize,
    pub smoothing_kernel: usize,
}

impl QuerySpec {
    pub fn new(embedding: Vec<f64>, canonical: Vec<Vec<f64>>, mode: QueryMode, cfg: &PipelineConfig) -> Self {
        Self {
            embedding,
            canonical,
            mode,
            lerf_threshold: cfg.lerf_threshold,
            ovs_threshold: cfg.ovs_threshold,
            area_threshold: cfg.area_threshold,
            smoothing_kernel: cfg.smoothing_kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub granularity: Granularity,
    pub query: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `min_i exp(s·q) / (exp(s·c_i) + exp(s·q))`, evaluated as a logistic of
/// the smallest margin.
pub fn relevancy_score(sem: &[f64], query: &[f64], canonical: &[Vec<f64>]) -> Result<f64, QueryError> {
    let worst = canonical.iter().map(|c| dot(sem, c)).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let worst = worst.ok_or(QueryError::EmptyCanonical)?;
    let margin = dot(sem, query) - worst;
    Ok(if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    })
}

/// Relevancy of every pixel of an H×W×D semantic map.
pub fn relevancy(
    sem_map: &[f64],
    width: usize,
    height: usize,
    spec: &QuerySpec,
    granularity: Granularity,
    query: &str,
) -> Result<RelevancyMap, QueryError> {
    let dim = spec.embedding.len();
    if sem_map.len() != width * height * dim {
        return Err(QueryError::Shape(format!("semantic map has {} values, expected {width}×{height}×{dim}", sem_map.len())));
    }
    if spec.canonical.iter().any(|c| c.len() != dim) {
        return Err(QueryError::Shape("canonical embedding dimension differs from the query".into()));
    }
    let values = sem_map
        .chunks(dim.max(1))
        .take(width * height)
        .map(|s| relevancy_score(s, &spec.embedding, &spec.canonical))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RelevancyMap { width, height, values, granularity, query: query.to_string() })
}

/// k×k mean filter with edge replication.
pub fn smooth(map: &RelevancyMap, k: usize) -> Result<RelevancyMap, QueryError> {
    if k % 2 == 0 {
        return Err(QueryError::EvenKernel(k));
    }
    let (w, h) = (map.width, map.height);
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| map.values[y * w + clamp(x as isize + d, w)]).sum();
            tmp[y * w + x] = s / k as f64;
        }
    }
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| tmp[clamp(y as isize + d, h) * w + x]).sum();
            values[y * w + x] = s / k as f64;
        }
    }
    Ok(RelevancyMap { values, ..map.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub granularity: Granularity,
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Global argmax over (already smoothed) maps; ties go to the coarser
/// granularity, then the first pixel in row-major order.
pub fn localize(maps: &[RelevancyMap]) -> Result<Localization, QueryError> {
    let mut ordered: Vec<&RelevancyMap> = maps.iter().collect();
    ordered.sort_by_key(|m| m.granularity);
    let mut best: Option<Localization> = None;
    for m in ordered {
        for (i, &v) in m.values.iter().enumerate() {
            if best.as_ref().is_none_or(|b| v > b.score) {
                best = Some(Localization { granularity: m.granularity, x: i % m.width, y: i / m.width, score: v });
            }
        }
    }
    best.ok_or(QueryError::NoMaps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub granularity: Option<Granularity>,
    pub mask: Vec<bool>,
}

impl Segmentation {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }
}

/// Binary mask from (already smoothed) maps according to the query mode.
pub fn segment(maps: &[RelevancyMap], spec: &QuerySpec) -> Result<Segmentation, QueryError> {
    let first = maps.first().ok_or(QueryError::NoMaps)?;
    let mut ordered: Vec<&RelevancyMap> = maps.iter().collect();
    ordered.sort_by_key(|m| m.granularity);
    match spec.mode {
        QueryMode::Lerf => {
            let mut best = ordered[0];
            let max_of = |m: &RelevancyMap| m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for m in &ordered[1..] {
                if max_of(m) > max_of(best) {
                    best = m;
                }
            }
            Ok(Segmentation {
                granularity: Some(best.granularity),
                mask: best.values.iter().map(|v| *v > spec.lerf_threshold).collect(),
            })
        }
        QueryMode::Ovs => {
            struct Candidate {
                gran: Granularity,
                mask: Vec<bool>,
                area: usize,
                mean: f64,
            }
            let candidates: Vec<Candidate> = ordered
                .iter()
                .map(|m| {
                    let mask: Vec<bool> = m.values.iter().map(|v| *v > spec.ovs_threshold).collect();
                    let area = mask.iter().filter(|v| **v).count();
                    let sum: f64 = m.values.iter().zip(&mask).filter(|(_, on)| **on).map(|(v, _)| v).sum();
                    Candidate { gran: m.granularity, mask, area, mean: if area > 0 { sum / area as f64 } else { 0.0 } }
                })
                .filter(|c| c.area > 0)
                .collect();
            let mut chosen: Option<&Candidate> = None;
            for c in candidates.iter().filter(|c| c.area > spec.area_threshold) {
                if chosen.is_none_or(|b| c.mean > b.mean) {
                    chosen = Some(c);
                }
            }
            if chosen.is_none() {
                for c in &candidates {
                    if chosen.is_none_or(|b| c.area > b.area) {
                        chosen = Some(c);
                    }
                }
            }
            Ok(match chosen {
                Some(c) => Segmentation { granularity: Some(c.gran), mask: c.mask.clone() },
                None => Segmentation { granularity: None, mask: vec![false; first.values.len()] },
            })
        }
    }
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Inclusive pixel box `[x0, y0, x1, y1]`.
pub type BBox = [usize; 4];

pub fn inside(x: usize, y: usize, b: &BBox) -> bool {
    x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]
}

pub fn bbox_of(mask: &[bool], width: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, v)| **v) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => [x, y, x, y],
            Some(b) => [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)],
        });
    }
    b
}

pub fn mean_iou(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<f64, QueryError> {
    if preds.len() != gts.len() {
        return Err(QueryError::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    Ok(preds.iter().zip(gts).map(|(p, g)| iou(p, g)).sum::<f64>() / preds.len() as f64)
}

pub fn localization_accuracy(points: &[(usize, usize)], boxes: &[BBox]) -> Result<f64, QueryError> {
    if points.len() != boxes.len() {
        return Err(QueryError::LengthMismatch(points.len(), boxes.len()));
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    let hits = points.iter().zip(boxes).filter(|((x, y), b)| inside(*x, *y, b)).count();
    Ok(hits as f64 / points.len() as f64)
}

/// Decodes a rendered code image into an H×W×D feature map. Pixels whose
/// alpha is below `alpha_min` get a zero feature.
pub fn decode_feature_map(
    render: &RenderOutput,
    granularity: Granularity,
    codec: &FeatureCodec,
    alpha_min: f64,
) -> Result<Vec<f64>, QueryError> {
    let codes = render
        .features
        .get(&granularity)
        .ok_or_else(|| QueryError::Shape(format!("render lacks {granularity} features")))?;
    let d = render.semantic_dim;
    if codec.code_dim() != d {
        return Err(QueryError::Shape(format!("codec dimension {} differs from render {d}", codec.code_dim())));
    }
    let dim = codec.input_dim();
    let mut out = vec![0.0; render.pixels() * dim];
    for (i, code) in codes.chunks(d).enumerate() {
        if render.alpha[i] < alpha_min {
            continue;
        }
        if let Ok(hit) = codec.decode(code) {
            out[i * dim..(i + 1) * dim].copy_from_slice(hit.feature);
        }
    }
    Ok(out)
}

/// Relevancy, smoothing, localization and segmentation of one query over
/// decoded maps keyed by granularity.
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub smoothed: Vec<RelevancyMap>,
    pub localization: Localization,
    pub segmentation: Segmentation,
}

pub fn run_query(
    decoded: &BTreeMap<Granularity, Vec<f64>>,
    width: usize,
    height: usize,
    spec: &QuerySpec,
    name: &str,
) -> Result<QueryOutcome, QueryError> {
    let mut smoothed = Vec::new();
    for (gran, map) in decoded {
        let raw = relevancy(map, width, height, spec, *gran, name)?;
        smoothed.push(smooth(&raw, spec.smoothing_kernel)?);
    }
    let localization = localize(&smoothed)?;
    let segmentation = segment(&smoothed, spec)?;
    Ok(QueryOutcome { smoothed, localization, segmentation })
}

/// One ground-truth target of a query in one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTarget {
    pub view: usize,
    #[serde(default)]
    pub gt_mask: Option<String>,
    #[serde(default)]
    pub gt_bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub text: String,
    /// Feature tensor whose first row is the query embedding.
    pub embedding: String,
    #[serde(default)]
    pub targets: Vec<QueryTarget>,
}

/// Query set file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    /// Feature tensor with one canonical embedding per row.
    pub canonical: String,
    pub mode: QueryMode,
    pub queries: Vec<QueryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub text: String,
    pub view: usize,
    pub granularity: Option<Granularity>,
    pub point: (usize, usize),
    pub point_granularity: Granularity,
    pub score: f64,
    pub area: usize,
    pub iou: Option<f64>,
    pub hit: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub results: Vec<QueryResult>,
    pub mean_iou: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

impl QueryReport {
    pub fn summarize(results: Vec<QueryResult>) -> Self {
        let ious: Vec<f64> = results.iter().filter_map(|r| r.iou).collect();
        let hits: Vec<bool> = results.iter().filter_map(|r| r.hit).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Self {
            mean_iou: mean(&ious),
            mean_accuracy: mean(&hits.iter().map(|h| *h as u8 as f64).collect::<Vec<_>>()),
            results,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    fn map(w: usize, h: usize, values: Vec<f64>, g: Granularity) -> RelevancyMap {
        RelevancyMap { width: w, height: h, values, granularity: g, query: "q".into() }
    }

    fn spec(mode: QueryMode) -> QuerySpec {
        QuerySpec::new(unit(4, 0), vec![unit(4, 1)], mode, &PipelineConfig::default())
    }

    #[test]
    fn worked_relevancy_examples() {
        let q = unit(4, 0);
        let canon = vec![unit(4, 1), unit(4, 2), unit(4, 3)];
        let e = std::f64::consts::E;
        let v = relevancy_score(&q, &q, &canon).unwrap();
        assert!((v - e / (1.0 + e)).abs() < 1e-12);
        assert!((v - 0.7311).abs() < 1e-4);

        let s = [0.6, 0.8, 0.0, 0.0];
        let q2 = [0.8, 0.6, 0.0, 0.0];
        let c2 = vec![vec![0.8, 0.6, 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.8]];
        let c_equal = vec![vec![0.0, 1.2, 0.0, 0.0], vec![1.6, 0.0, 0.0, 0.0], vec![0.0, 1.2, 5.0, -3.0]];
        // every canon dot equals the query dot
        assert!((relevancy_score(&s, &q2, &c_equal).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(relevancy_score(&s, &q2, &c2).unwrap(), 0.5);
        assert_eq!(relevancy_score(&q, &q, &[]), Err(QueryError::EmptyCanonical));
    }

    #[test]
    fn smoothing_examples() {
        let constant = map(7, 5, vec![0.3; 35], Granularity::Whole);
        let s = smooth(&constant, 3).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.3).abs() < 1e-15));

        let mut impulse = vec![0.0; 49];
        impulse[3 * 7 + 3] = 1.0;
        let s = smooth(&map(7, 7, impulse.clone(), Granularity::Whole), 3).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let want = if (2..=4).contains(&x) && (2..=4).contains(&y) { 1.0 / 9.0 } else { 0.0 };
                assert!((s.values[y * 7 + x] - want).abs() < 1e-15);
            }
        }
        assert_eq!(smooth(&map(7, 7, impulse.clone(), Granularity::Whole), 1).unwrap().values, impulse);
        assert_eq!(smooth(&constant, 4), Err(QueryError::EvenKernel(4)));
    }

    #[test]
    fn localization_examples() {
        let mut v = vec![0.1; 100];
        v[7 * 10 + 5] = 0.9;
        let l = localize(&[map(10, 10, v, Granularity::Whole)]).unwrap();
        assert_eq!((l.x, l.y), (5, 7));

        let mut a = vec![0.0; 16];
        a[3] = 0.8;
        let mut b = vec![0.0; 16];
        b[9] = 0.9;
        let l = localize(&[map(4, 4, a, Granularity::Whole), map(4, 4, b, Granularity::Subpart)]).unwrap();
        assert_eq!((l.granularity, l.x, l.y), (Granularity::Subpart, 1, 2));

        let flat = [map(4, 4, vec![0.5; 16], Granularity::Part), map(4, 4, vec![0.5; 16], Granularity::Whole)];
        let l = localize(&flat).unwrap();
        assert_eq!((l.granularity, l.x, l.y), (Granularity::Whole, 0, 0));
        assert_eq!(localize(&[]), Err(QueryError::NoMaps));
    }

    #[test]
    fn lerf_segmentation_is_a_step_threshold() {
        let region: Vec<bool> = (0..64).map(|i| (i % 8) < 3 && i / 8 > 2).collect();
        let values = region.iter().map(|r| if *r { 1.0 } else { 0.0 }).collect();
        let s = segment(&[map(8, 8, values, Granularity::Whole)], &spec(QueryMode::Lerf)).unwrap();
        assert_eq!(s.mask, region);

        let s = segment(&[map(8, 8, vec![0.55; 64], Granularity::Whole)], &spec(QueryMode::Lerf)).unwrap();
        assert_eq!(s.area(), 0);
    }

    #[test]
    fn ovs_area_floor_beats_higher_score() {
        let (w, h) = (100, 50);
        let mut a = vec![0.0; w * h];
        a[..2500].fill(0.85);
        let mut b = vec![0.0; w * h];
        b[..1500].fill(0.95);
        let maps = [map(w, h, a, Granularity::Whole), map(w, h, b, Granularity::Subpart)];
        let s = segment(&maps, &spec(QueryMode::Ovs)).unwrap();
        assert_eq!((s.granularity, s.area()), (Some(Granularity::Whole), 2500));

        // below the floor everywhere: largest area wins
        let mut c = vec![0.0; w * h];
        c[..300].fill(0.9);
        let mut d = vec![0.0; w * h];
        d[..200].fill(0.99);
        let maps = [map(w, h, c, Granularity::Whole), map(w, h, d, Granularity::Part)];
        assert_eq!(segment(&maps, &spec(QueryMode::Ovs)).unwrap().area(), 300);

        let none = [map(w, h, vec![0.1; w * h], Granularity::Whole)];
        assert_eq!(segment(&none, &spec(QueryMode::Ovs)).unwrap().area(), 0);
    }

    #[test]
    fn metric_examples() {
        let full = vec![true; 16];
        let left: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let right: Vec<bool> = left.iter().map(|v| !v).collect();
        assert_eq!(iou(&full, &full), 1.0);
        assert_eq!(iou(&left, &right), 0.0);
        assert_eq!(iou(&left, &full), 0.5);
        assert_eq!(mean_iou(&[left.clone()], &[]), Err(QueryError::LengthMismatch(1, 0)));
        assert_eq!(bbox_of(&left, 4), Some([0, 0, 1, 3]));
        assert_eq!(localization_accuracy(&[(1, 1), (5, 5)], &[[0, 0, 2, 2], [0, 0, 2, 2]]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn relevancy_is_bounded_and_monotone(a in -5.0f64..5.0, da in 0.01f64..2.0, c1 in -5.0f64..5.0, c2 in -5.0f64..5.0) {
            // sem = e0, query and canonicals scaled to give the chosen dots
            let sem = vec![1.0, 0.0];
            let canon = vec![vec![c1, 0.0], vec![c2, 1.0]];
            let lo = relevancy_score(&sem, &[a, 0.0], &canon).unwrap();
            let hi = relevancy_score(&sem, &[a + da, 0.0], &canon).unwrap();
            prop_assert!(lo > 0.0 && lo < 1.0);
            prop_assert!(hi > lo);
        }

        #[test]
        fn smoothing_keeps_range_and_interior_mean(values in prop::collection::vec(0.0f64..1.0, 36), k in prop::sample::select(vec![1usize, 3, 5])) {
            let (w, h, pad) = (16, 16, 5);
            let mut full = vec![0.0; w * h];
            for (i, v) in values.iter().enumerate() {
                full[(pad + i / 6) * w + pad + i % 6] = *v;
            }
            let m = map(w, h, full.clone(), Granularity::Whole);
            let s = smooth(&m, k).unwrap();
            let (lo, hi) = full.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
            prop_assert!(s.values.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((mean(&s.values) - mean(&full)).abs() < 1e-9);
        }

        #[test]
        fn lerf_mask_is_exact_threshold(values in prop::collection::vec(0.0f64..1.0, 25)) {
            let s = segment(&[map(5, 5, values.clone(), Granularity::Part)], &spec(QueryMode::Lerf)).unwrap();
            prop_assert_eq!(s.mask, values.iter().map(|v| *v > 0.6).collect::<Vec<_>>());
        }

        #[test]
        fn iou_is_symmetric(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30)) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
