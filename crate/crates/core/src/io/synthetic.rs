//! Synthetic multi-view fixtures with exact ground truth.
//!
//! Objects are flat elliptical discs filled with small splats, laid out
//! near a plane facing a small arc of cameras, optionally in front of a
//! grey backdrop. Halves and quadrants of each disc form the finer
//! granularities. Masks come from the dominant contributor of each pixel,
//! 3D points from the plane of the owning object, and match fields from
//! projecting those points into the other views with an object-identity
//! visibility test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{FeatureStore, Mask, MaskRef, MaskSet, PixelMatchField, PointMap, RleMask};
use crate::query::{bbox_of, QueryEntry, QueryMode, QuerySet, QueryTarget};
use crate::rasterizer::render_with_state;
use crate::scene::{Camera, Gaussian3D, GaussianCloud, Granularity, Image, PipelineConfig, Vec3};

use super::ply::{save_points, ColoredPoint};
use super::{
    save_features, save_image, save_label_png, save_match_field, save_maskset, save_point_map, write_json, Artifacts,
    IoError, Manifest, MatchEntry, ViewEntry,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub seed: u64,
    pub views: usize,
    /// Extra views interleaved between training views, for evaluation.
    pub held_out_views: usize,
    pub objects: usize,
    pub width: usize,
    pub height: usize,
    pub embed_dim: usize,
    pub canonical_count: usize,
    /// Fraction of masks per view and granularity whose features are
    /// swapped pairwise.
    pub swap_fraction: f64,
    /// Standard deviation of Gaussian noise added to match coordinates.
    pub match_noise_px: f64,
    pub min_region_pixels: usize,
    /// Norm of the per-view perturbation applied to region features.
    pub feature_noise: f64,
    /// Adds a grey backdrop plane behind the objects. It is one more
    /// region, with index `objects`, at every granularity.
    pub backdrop: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            views: 3,
            held_out_views: 0,
            objects: 10,
            width: 64,
            height: 64,
            embed_dim: 512,
            canonical_count: 4,
            swap_fraction: 0.0,
            match_noise_px: 0.0,
            min_region_pixels: 8,
            feature_noise: 0.02,
            backdrop: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId {
    pub granularity: Granularity,
    pub object: usize,
    /// 0 for whole objects, 0..2 for halves, 0..4 for quarters.
    pub part: usize,
}

impl RegionId {
    /// Region of `gran` containing quadrant `q` of `object`.
    fn of(gran: Granularity, object: usize, q: usize) -> Self {
        let part = match gran {
            Granularity::Whole => 0,
            Granularity::Subpart => q % 2,
            Granularity::Part => q,
        };
        Self { granularity: gran, object, part }
    }

    pub fn parts(gran: Granularity) -> usize {
        match gran {
            Granularity::Whole => 1,
            Granularity::Subpart => 2,
            Granularity::Part => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub options: SyntheticOptions,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub training_views: Vec<usize>,
    pub held_out: Vec<usize>,
    pub gt_cloud: GaussianCloud,
    pub masksets: Vec<BTreeMap<Granularity, MaskSet>>,
    pub features: FeatureStore,
    /// Noise-free embedding of every region.
    pub region_features: BTreeMap<RegionId, Vec<f64>>,
    pub mask_regions: BTreeMap<MaskRef, RegionId>,
    /// Match fields between ordered pairs of training views.
    pub fields: Vec<PixelMatchField>,
    pub points: Vec<PointMap>,
    pub point_cloud: Vec<ColoredPoint>,
    pub canonical: Vec<Vec<f64>>,
    pub swapped: Vec<(MaskRef, MaskRef)>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector whose |cosine| with every vector in `existing` is below
/// `max_cos`.
fn separated_unit(rng: &mut ChaCha8Rng, dim: usize, existing: &[&Vec<f64>], max_cos: f64) -> Result<Vec<f64>, IoError> {
    for _ in 0..2000 {
        let v = random_unit(rng, dim);
        if existing.iter().all(|e| e.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < max_cos) {
            return Ok(v);
        }
    }
    Err(IoError::Invalid(format!("cannot separate {} embeddings in {dim} dimensions", existing.len() + 1)))
}

struct Layout {
    cloud: GaussianCloud,
    /// `(object, quarter)` of each splat.
    owners: Vec<(usize, usize)>,
    /// World z of each object's plane.
    planes: Vec<f64>,
}

const CAMERA_DISTANCE: f64 = 4.0;
const FOCAL_FRACTION: f64 = 0.9;

/// Splat spacing inside an object, in pixels at the nominal distance.
const SPLAT_SPACING_PX: f64 = 0.5;
const BACKDROP_Z: f64 = 1.0;
const BACKDROP_SPACING_PX: f64 = 1.5;

/// Jittered grid layout: one object per randomly chosen cell. Each object
/// is an elliptical disc in a plane of constant z, filled with small
/// flattened splats so that its silhouette is sharp; its four quadrants
/// are the quarter parts.
fn place_objects(rng: &mut ChaCha8Rng, n: usize, pixel_world: f64) -> Option<Layout> {
    let half_extent = 1.8;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (2.0 * half_extent / cols as f64, 2.0 * half_extent / rows as f64);
    let mut cells: Vec<usize> = (0..cols * rows).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells.sort_unstable();
    let spacing = SPLAT_SPACING_PX * pixel_world;
    let margin = 2.0 * pixel_world;
    let mut cloud = GaussianCloud::new(3);
    let mut owners = Vec::new();
    let mut planes = Vec::new();
    for (k, cell) in cells.into_iter().enumerate() {
        let (gx, gy) = (cell % cols, cell / cols);
        let a = rng.random_range(0.36..0.42) * cw.min(ch);
        let b = a * rng.random_range(0.7..0.95);
        let slack_x = (cw / 2.0 - a - margin).max(0.0);
        let slack_y = (ch / 2.0 - a - margin).max(0.0);
        let c = Vec3::new(
            -half_extent + (gx as f64 + 0.5) * cw + rng.random_range(-1.0..=1.0) * slack_x,
            -half_extent + (gy as f64 + 0.5) * ch + rng.random_range(-1.0..=1.0) * slack_y,
            rng.random_range(-0.2..0.2),
        );
        let hue = (k as f64 + rng.random_range(0.0..0.5)) / n as f64;
        let base = hsv(hue, rng.random_range(0.6..0.9), rng.random_range(0.8..0.95));
        let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (u, v) = (Vec3::new(yaw.cos(), yaw.sin(), 0.0), Vec3::new(-yaw.sin(), yaw.cos(), 0.0));
        let steps = (a / spacing).ceil() as i64;
        for i in -steps..=steps {
            for j in -steps..=steps {
                let (lu, lv) = ((i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing);
                if (lu / a).powi(2) + (lv / b).powi(2) > 1.0 {
                    continue;
                }
                let q = usize::from(lu >= 0.0) + 2 * usize::from(lv >= 0.0);
                let shade = 0.8 + 0.12 * q as f64;
                let color = (base * shade).map(|x| x.clamp(0.0, 1.0));
                let mut g = Gaussian3D::new(c + u * lu + v * lv, 0.6 * spacing, 0.98, color);
                g.log_scale.z = (0.3 * spacing).ln();
                cloud.gaussians.push(g);
                owners.push((k, q));
            }
        }
        planes.push(c.z);
    }
    Some(Layout { cloud, owners, planes })
}

/// Appends a uniform grey plane behind every object, keeping only splats
/// that land near some camera's image.
fn add_backdrop(layout: &mut Layout, cameras: &[Camera], pixel_world: f64) {
    let object = layout.planes.len();
    let spacing = BACKDROP_SPACING_PX * pixel_world * (CAMERA_DISTANCE + BACKDROP_Z) / CAMERA_DISTANCE;
    let extent = 2.0 * (CAMERA_DISTANCE + BACKDROP_Z);
    let steps = (extent / spacing).ceil() as i64;
    let margin = 3.0;
    for i in -steps..=steps {
        for j in -steps..=steps {
            let pos = Vec3::new(i as f64 * spacing, j as f64 * spacing, BACKDROP_Z);
            let seen = cameras.iter().any(|c| {
                c.project(&pos).is_some_and(|(u, v, _)| {
                    u > -margin && v > -margin && u < c.width as f64 + margin && v < c.height as f64 + margin
                })
            });
            if seen {
                let mut g = Gaussian3D::new(pos, 0.7 * spacing, 0.98, Vec3::new(0.3, 0.3, 0.3));
                g.log_scale.z = (0.3 * spacing).ln();
                layout.cloud.gaussians.push(g);
                layout.owners.push((object, 0));
            }
        }
    }
    layout.planes.push(BACKDROP_Z);
}

fn hsv(h: f64, s: f64, v: f64) -> Vec3 {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Vec3::new(r, g, b)
}

fn make_cameras(opts: &SyntheticOptions) -> (Vec<Camera>, Vec<usize>, Vec<usize>) {
    let total = opts.views + opts.held_out_views;
    let focal = FOCAL_FRACTION * opts.width as f64;
    let distance = CAMERA_DISTANCE;
    let span = 18f64.to_radians();
    let train_yaw = |k: usize| if opts.views == 1 { 0.0 } else { -span + 2.0 * span * k as f64 / (opts.views - 1) as f64 };
    let mut poses: Vec<(f64, f64, bool)> = (0..opts.views)
        .map(|k| (train_yaw(k), if k % 2 == 0 { 6f64 } else { -6f64 }.to_radians(), true))
        .collect();
    for k in 0..opts.held_out_views {
        let a = k % opts.views.saturating_sub(1).max(1);
        let yaw = if opts.views > 1 { 0.5 * (train_yaw(a) + train_yaw(a + 1)) } else { 0.1 };
        poses.push((yaw, 2f64.to_radians(), false));
    }
    // order views by yaw so held-out views sit between their neighbours
    poses.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cams = Vec::with_capacity(total);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, (yaw, pitch, is_train)) in poses.into_iter().enumerate() {
        let eye = Vec3::new(distance * yaw.sin() * pitch.cos(), distance * pitch.sin(), -distance * yaw.cos() * pitch.cos());
        cams.push(Camera::new(focal, focal, opts.width, opts.height).look_at(&eye, &Vec3::zeros(), &Vec3::new(0.0, -1.0, 0.0)));
        if is_train {
            train.push(i);
        } else {
            held.push(i);
        }
    }
    (cams, train, held)
}

struct ViewGt {
    image: Image,
    /// `(object, quarter)` per labeled pixel.
    owner: Vec<Option<(usize, usize)>>,
    points: PointMap,
}

/// Labels pixels by dominant contributor and lifts them onto the plane of
/// their object, so points agree across views.
fn render_view(layout: &Layout, cam: &Camera, view: usize) -> Result<ViewGt, IoError> {
    let cloud = &layout.cloud;
    let (out, state) = render_with_state(cloud, cam, &[]).map_err(|e| IoError::Invalid(e.to_string()))?;
    let dominant = state.dominant_contributors(cam);
    let center = cam.center();
    let n = cam.width * cam.height;
    let mut owner = vec![None; n];
    let mut points = PointMap { view, width: cam.width, height: cam.height, points: vec![Vec3::zeros(); n], valid: vec![false; n] };
    for i in 0..n {
        if out.alpha[i] >= 0.5 {
            if let Some(g) = dominant[i] {
                let dir = cam.unproject((i % cam.width) as f64, (i / cam.width) as f64, 1.0) - center;
                let (object, quarter) = layout.owners[g];
                let t = (layout.planes[object] - center.z) / dir.z;
                if t > 0.0 {
                    owner[i] = Some((object, quarter));
                    points.points[i] = center + dir * t;
                    points.valid[i] = true;
                }
            }
        }
    }
    let image = Image { width: cam.width, height: cam.height, data: out.color }.quantized();
    Ok(ViewGt { image, owner, points })
}

fn region_areas(views: &[ViewGt]) -> Vec<BTreeMap<RegionId, usize>> {
    views
        .iter()
        .map(|v| {
            let mut areas = BTreeMap::new();
            for (object, quarter) in v.owner.iter().flatten() {
                for gran in Granularity::ALL {
                    *areas.entry(RegionId::of(gran, *object, *quarter)).or_insert(0) += 1;
                }
            }
            areas
        })
        .collect()
}

/// Match field between two views from exact per-pixel points. Every
/// foreground pixel that projects carries its coordinate; it is marked
/// valid when it lands on the same object and its whole bilinear
/// neighbourhood does too.
fn exact_field(src: &ViewGt, dst: &ViewGt, cam_dst: &Camera, source: usize, target: usize) -> PixelMatchField {
    let (w, h) = (src.points.width, src.points.height);
    let mut coords = vec![[0.0, 0.0]; w * h];
    let mut valid = vec![false; w * h];
    let object_at = |x: usize, y: usize| dst.owner[y * cam_dst.width + x].map(|(o, _)| o);
    for i in 0..w * h {
        let Some((object, _)) = src.owner[i] else { continue };
        let Some((u, v, _)) = cam_dst.project(&src.points.points[i]) else { continue };
        coords[i] = [u, v];
        if u < 0.0 || v < 0.0 || u > (cam_dst.width - 1) as f64 || v > (cam_dst.height - 1) as f64 {
            continue;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cam_dst.width - 1), (y0 + 1).min(cam_dst.height - 1));
        let obj = Some(object);
        valid[i] = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].iter().all(|&(x, y)| object_at(x, y) == obj);
    }
    PixelMatchField { source, target, width: w, height: h, target_width: cam_dst.width, target_height: cam_dst.height, coords, valid }
}

/// Bilinear corners of a target coordinate, as row-major indices.
pub fn bilinear_corners(u: f64, v: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let (x0, y0) = (u.floor().max(0.0) as usize, v.floor().max(0.0) as usize);
    let (x0, y0) = (x0.min(width - 1), y0.min(height - 1));
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (tx, ty) = (u - x0 as f64, v - y0 as f64);
    [
        (y0 * width + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * width + x1, tx * (1.0 - ty)),
        (y1 * width + x0, (1.0 - tx) * ty),
        (y1 * width + x1, tx * ty),
    ]
}

/// Builds a synthetic scene. Layouts where some region covers fewer than
/// `min_region_pixels` in any view are redrawn, up to a fixed budget.
pub fn generate_synthetic(opts: &SyntheticOptions) -> Result<SyntheticScene, IoError> {
    if opts.views < 2 || opts.objects == 0 || opts.embed_dim == 0 || opts.width < 8 || opts.height < 8 {
        return Err(IoError::Invalid("synthetic scenes need ≥2 views, ≥1 object, ≥8×8 pixels and a non-zero embedding".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (cameras, training_views, held_out) = make_cameras(opts);

    let pixel_world = CAMERA_DISTANCE / (FOCAL_FRACTION * opts.width.min(opts.height) as f64);
    let mut attempt = 0;
    let (cloud, views) = loop {
        attempt += 1;
        if attempt > 64 {
            return Err(IoError::Invalid(format!(
                "could not lay out {} objects with every region visible in every view",
                opts.objects
            )));
        }
        let Some(mut layout) = place_objects(&mut rng, opts.objects, pixel_world) else { continue };
        if opts.backdrop {
            add_backdrop(&mut layout, &cameras, pixel_world);
        }
        let views: Vec<ViewGt> =
            cameras.iter().enumerate().map(|(v, c)| render_view(&layout, c, v)).collect::<Result<_, _>>()?;
        let areas = region_areas(&views);
        let expected = opts.objects * 7 + if opts.backdrop { 3 } else { 0 };
        if areas.iter().all(|a| a.len() == expected && a.values().all(|n| *n >= opts.min_region_pixels)) {
            break (layout.cloud, views);
        }
        debug!("synthetic layout attempt {attempt} rejected");
    };

    let mut region_features: BTreeMap<RegionId, Vec<f64>> = BTreeMap::new();
    let regions = opts.objects + usize::from(opts.backdrop);
    for gran in Granularity::ALL {
        for object in 0..regions {
            let parts = if object < opts.objects { RegionId::parts(gran) } else { 1 };
            for part in 0..parts {
                let existing: Vec<&Vec<f64>> = region_features.values().collect();
                let f = separated_unit(&mut rng, opts.embed_dim, &existing, 0.5)?;
                region_features.insert(RegionId { granularity: gran, object, part }, f);
            }
        }
    }
    let mut canonical = Vec::new();
    for _ in 0..opts.canonical_count {
        let existing: Vec<&Vec<f64>> = region_features.values().chain(canonical.iter()).collect();
        let f = separated_unit(&mut rng, opts.embed_dim, &existing, 0.5)?;
        canonical.push(f);
    }

    let mut features = FeatureStore::default();
    let mut masksets = Vec::new();
    let mut mask_regions = BTreeMap::new();
    for (v, gt) in views.iter().enumerate() {
        let mut sets = BTreeMap::new();
        for gran in Granularity::ALL {
            // ids in order of first appearance, as a segmenter would emit them
            let mut ids: BTreeMap<RegionId, u32> = BTreeMap::new();
            let mut pixels: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (i, g) in gt.owner.iter().enumerate() {
                let Some(g) = g else { continue };
                let region = RegionId::of(gran, g.0, g.1);
                let next = ids.len() as u32 + 1;
                let id = *ids.entry(region).or_insert(next);
                pixels.entry(id).or_default().push(i as u32);
            }
            let mut set = MaskSet::new(v, gran, opts.width, opts.height);
            for (region, id) in &ids {
                let noise: Vec<f64> = (0..opts.embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let scale = opts.feature_noise / (opts.embed_dim as f64).sqrt();
                let f: Vec<f64> = region_features[region].iter().zip(&noise).map(|(a, n)| a + scale * n).collect();
                let fid = features.push(f)?;
                set.masks.push(Mask { id: *id, pixels: RleMask::from_indices(pixels[id].iter().copied()), feature: fid });
                mask_regions.insert(MaskRef { view: v, granularity: gran, mask: *id }, *region);
            }
            set.masks.sort_by_key(|m| m.id);
            sets.insert(gran, set);
        }
        masksets.push(sets);
    }

    let mut swapped = Vec::new();
    if opts.swap_fraction > 0.0 {
        for sets in masksets.iter_mut() {
            for (gran, set) in sets.iter_mut() {
                let n = set.masks.len();
                let pairs = (opts.swap_fraction * n as f64).round() as usize / 2;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for p in 0..pairs.min(n / 2) {
                    let (a, b) = (order[2 * p], order[2 * p + 1]);
                    let fa = set.masks[a].feature;
                    set.masks[a].feature = set.masks[b].feature;
                    set.masks[b].feature = fa;
                    swapped.push((
                        MaskRef { view: set.view, granularity: *gran, mask: set.masks[a].id },
                        MaskRef { view: set.view, granularity: *gran, mask: set.masks[b].id },
                    ));
                }
            }
        }
    }

    let mut fields = Vec::new();
    for &i in &training_views {
        for &j in &training_views {
            if i != j {
                fields.push(exact_field(&views[i], &views[j], &cameras[j], i, j));
            }
        }
    }
    if opts.match_noise_px > 0.0 {
        for f in fields.iter_mut() {
            let (wmax, hmax) = ((f.target_width - 1) as f64, (f.target_height - 1) as f64);
            for (c, ok) in f.coords.iter_mut().zip(&f.valid) {
                if *ok {
                    let dx: f64 = StandardNormal.sample(&mut rng);
                    let dy: f64 = StandardNormal.sample(&mut rng);
                    c[0] = (c[0] + opts.match_noise_px * dx).clamp(0.0, wmax);
                    c[1] = (c[1] + opts.match_noise_px * dy).clamp(0.0, hmax);
                }
            }
        }
    }

    let mut point_cloud = Vec::new();
    for &v in &training_views {
        let gt = &views[v];
        for (i, ok) in gt.points.valid.iter().enumerate() {
            if *ok {
                let c = gt.image.pixel(i % opts.width, i / opts.width);
                point_cloud.push(ColoredPoint {
                    position: gt.points.points[i],
                    color: c.map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
                });
            }
        }
    }

    let (images, points): (Vec<Image>, Vec<PointMap>) = views.into_iter().map(|v| (v.image, v.points)).unzip();
    Ok(SyntheticScene {
        options: opts.clone(),
        cameras,
        images,
        training_views,
        held_out,
        gt_cloud: cloud,
        masksets,
        features,
        region_features,
        mask_regions,
        fields,
        points,
        point_cloud,
        canonical,
        swapped,
    })
}

/// Ground-truth pairs written next to a synthetic manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<(MaskRef, MaskRef)>,
    pub swapped: Vec<(MaskRef, MaskRef)>,
    pub mask_regions: Vec<(MaskRef, RegionId)>,
}

impl SyntheticScene {
    /// Cross-view pairs of masks covering the same region, among `views`.
    pub fn gt_pairs(&self, views: &[usize]) -> BTreeSet<(MaskRef, MaskRef)> {
        let mut by_region: BTreeMap<RegionId, Vec<MaskRef>> = BTreeMap::new();
        for (m, r) in &self.mask_regions {
            if views.contains(&m.view) {
                by_region.entry(*r).or_default().push(*m);
            }
        }
        let mut out = BTreeSet::new();
        for members in by_region.values() {
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    if a.view != b.view {
                        out.insert(if a < b { (*a, *b) } else { (*b, *a) });
                    }
                }
            }
        }
        out
    }

    /// Pixel mask of `region` in `view`.
    pub fn region_mask(&self, view: usize, region: RegionId) -> Vec<bool> {
        let set = &self.masksets[view][&region.granularity];
        let mut out = vec![false; set.width * set.height];
        for m in &set.masks {
            let r = MaskRef { view, granularity: region.granularity, mask: m.id };
            if self.mask_regions.get(&r) == Some(&region) {
                for i in m.pixels.iter() {
                    out[i as usize] = true;
                }
            }
        }
        out
    }

    /// Writes the scene as a manifest-driven dataset and returns the
    /// manifest path.
    pub fn write(&self, dir: &Path, config: &PipelineConfig) -> Result<PathBuf, IoError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e.into()))?;
        let mut views = Vec::new();
        for (v, cam) in self.cameras.iter().enumerate() {
            let image = format!("images/view{v}.png");
            save_image(&dir.join(&image), &self.images[v])?;
            let mut masks = BTreeMap::new();
            let mut feats = BTreeMap::new();
            for (gran, set) in &self.masksets[v] {
                let m = format!("masks/view{v}_{gran}.png");
                save_maskset(&dir.join(&m), set)?;
                let max_id = set.masks.iter().map(|m| m.id).max().unwrap_or(0) as usize;
                let mut rows = vec![vec![0.0; self.options.embed_dim]; max_id];
                for mask in &set.masks {
                    rows[mask.id as usize - 1] = self.features.features[mask.feature].clone();
                }
                let f = format!("features/view{v}_{gran}.slgs");
                save_features(&dir.join(&f), &rows)?;
                masks.insert(*gran, m);
                feats.insert(*gran, f);
            }
            let points = format!("points/view{v}.slgs");
            save_point_map(&dir.join(&points), &self.points[v])?;
            views.push(ViewEntry {
                name: format!("view{v}"),
                image,
                camera: cam.clone(),
                masks,
                features: feats,
                points: Some(points),
            });
        }
        let mut matches = Vec::new();
        for f in &self.fields {
            let path = format!("matches/{}_{}.slgs", f.source, f.target);
            save_match_field(&dir.join(&path), f)?;
            matches.push(MatchEntry { source: f.source, target: f.target, path });
        }
        save_points(&dir.join("init.ply"), &self.point_cloud)?;

        save_features(&dir.join("queries/canonical.slgs"), &self.canonical)?;
        let mut queries = Vec::new();
        for object in 0..self.options.objects {
            let region = RegionId { granularity: Granularity::Whole, object, part: 0 };
            let embedding = format!("queries/object{object}.slgs");
            save_features(&dir.join(&embedding), &[self.region_features[&region].clone()])?;
            let mut targets = Vec::new();
            for &v in &self.training_views {
                let mask = self.region_mask(v, region);
                let gt = format!("queries/gt/object{object}_view{v}.png");
                save_label_png(&dir.join(&gt), self.options.width, self.options.height, &mask.iter().map(|b| *b as u32).collect::<Vec<_>>())?;
                targets.push(QueryTarget { view: v, gt_mask: Some(gt), gt_bbox: bbox_of(&mask, self.options.width) });
            }
            queries.push(QueryEntry { text: format!("object {object}"), embedding, targets });
        }
        write_json(
            &dir.join("queries/queries.json"),
            &QuerySet { canonical: "canonical.slgs".into(), mode: QueryMode::Lerf, queries: queries.into_iter().map(|mut q| {
                q.embedding = q.embedding.trim_start_matches("queries/").to_string();
                for t in &mut q.targets {
                    t.gt_mask = t.gt_mask.as_ref().map(|p| p.trim_start_matches("queries/").to_string());
                }
                q
            }).collect() },
        )?;
        write_json(
            &dir.join("ground_truth.json"),
            &GroundTruth {
                pairs: self.gt_pairs(&self.training_views).into_iter().collect(),
                swapped: self.swapped.clone(),
                mask_regions: self.mask_regions.iter().map(|(k, v)| (*k, *v)).collect(),
            },
        )?;

        let manifest = Manifest {
            views,
            matches,
            point_cloud: Some("init.ply".into()),
            held_out: self.held_out.clone(),
            queries: Some("queries/queries.json".into()),
            config: config.clone(),
            artifacts: Artifacts::default(),
        };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}
