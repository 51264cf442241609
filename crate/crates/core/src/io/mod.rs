//! Interchange formats, manifest handling and synthetic fixtures.
//!
//! A dataset is described by a JSON manifest whose relative paths resolve
//! against the manifest's directory. Per-view inputs are an RGB PNG, label
//! masks per granularity (16-bit PNG or run-length JSON), one feature row
//! per mask label, and optionally a per-pixel point map. Dense matches
//! between ordered view pairs live in separate tensor files.

pub mod ply;
pub mod synthetic;
pub mod tensor;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignError, FeatureStore, Mask, MaskSet, PixelMatchField, PointMap, RleMask};
use crate::scene::{Camera, Gaussian3D, GaussianCloud, Granularity, Image, PipelineConfig, SceneError, Vec3};

use ply::ColoredPoint;
use tensor::{load_tensors, save_tensors, Tensor};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    At { path: PathBuf, source: Box<IoError> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl IoError {
    pub fn at(path: &Path, source: IoError) -> Self {
        IoError::At { path: path.to_path_buf(), source: Box::new(source) }
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| IoError::at(path, e.into()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::at(path, e.into()))?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::at(path, e.into()))
}

fn ensure_parent(path: &Path) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e.into()))?;
    }
    Ok(())
}

pub fn save_image(path: &Path, img: &Image) -> Result<(), IoError> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| IoError::at(path, e.into()))
}

pub fn load_image(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path).map_err(|e| IoError::at(path, e.into()))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    })
}

/// 16-bit grayscale label image, 0 = unlabeled.
pub fn save_label_png(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<(), IoError> {
    ensure_parent(path)?;
    let data = labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| IoError::Format(format!("label {l} exceeds 16 bits"))))
        .collect::<Result<Vec<u16>, _>>()?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| IoError::Format("label buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| IoError::at(path, e.into()))
}

pub fn load_label_png(path: &Path) -> Result<(usize, usize, Vec<u32>), IoError> {
    let img = image::open(path).map_err(|e| IoError::at(path, e.into()))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(u32::from).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleEntry {
    pub id: u32,
    pub runs: Vec<(u32, u32)>,
}

/// Run-length mask file; unlike a label image it can express overlaps,
/// which validation then reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleFile {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<RleEntry>,
}

impl RleFile {
    pub fn from_maskset(set: &MaskSet) -> Self {
        Self {
            width: set.width,
            height: set.height,
            masks: set.masks.iter().map(|m| RleEntry { id: m.id, runs: m.pixels.runs.clone() }).collect(),
        }
    }
}

/// Loads raw `(id, pixels)` pairs from either mask encoding.
pub fn load_mask_regions(path: &Path) -> Result<(usize, usize, Vec<(u32, RleMask)>), IoError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let f: RleFile = read_json(path)?;
        let n = (f.width * f.height) as u64;
        let mut out = Vec::new();
        for e in f.masks {
            if e.id == 0 {
                return Err(IoError::at(path, IoError::Format("mask id 0 is reserved".into())));
            }
            if e.runs.iter().any(|(s, l)| *s as u64 + *l as u64 > n) {
                return Err(IoError::at(path, IoError::Format(format!("mask {} runs past the image", e.id))));
            }
            out.push((e.id, RleMask::from_indices(e.runs.iter().flat_map(|(s, l)| *s..*s + *l))));
        }
        Ok((f.width, f.height, out))
    } else {
        let (w, h, labels) = load_label_png(path)?;
        let mut by_label: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 {
                by_label.entry(l).or_default().push(i as u32);
            }
        }
        Ok((w, h, by_label.into_iter().map(|(id, px)| (id, RleMask::from_indices(px))).collect()))
    }
}

pub fn save_maskset(path: &Path, set: &MaskSet) -> Result<(), IoError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        write_json(path, &RleFile::from_maskset(set))
    } else {
        save_label_png(path, set.width, set.height, &set.label_map())
    }
}

/// Feature rows: row `k` belongs to mask label `k + 1`.
pub fn save_features(path: &Path, rows: &[Vec<f64>]) -> Result<(), IoError> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(IoError::Format("feature rows differ in length".into()));
    }
    let data: Vec<f32> = rows.iter().flatten().map(|v| *v as f32).collect();
    save_tensors(path, &[&Tensor::from_f32(rows.len(), 1, dim, data)])
}

pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    let t = load_tensors(path, 1)?.remove(0);
    if t.width != 1 {
        return Err(IoError::at(path, IoError::Format(format!("feature tensor width {} != 1", t.width))));
    }
    let data = t.as_f32().map_err(|e| IoError::at(path, e))?;
    Ok(data.chunks(t.channels.max(1)).take(t.height).map(|c| c.iter().map(|v| *v as f64).collect()).collect())
}

pub fn save_match_field(path: &Path, field: &PixelMatchField) -> Result<(), IoError> {
    let coords: Vec<f32> = field.coords.iter().flat_map(|c| [c[0] as f32, c[1] as f32]).collect();
    let valid: Vec<u8> = field.valid.iter().map(|v| *v as u8).collect();
    save_tensors(
        path,
        &[
            &Tensor::from_f32(field.height, field.width, 2, coords),
            &Tensor::from_u8(field.height, field.width, 1, valid),
        ],
    )
}

pub fn load_match_field(
    path: &Path,
    source: usize,
    target: usize,
    target_width: usize,
    target_height: usize,
) -> Result<PixelMatchField, IoError> {
    let ts = load_tensors(path, 2)?;
    let (c, v) = (&ts[0], &ts[1]);
    let shape = |e| IoError::at(path, e);
    c.expect_shape(c.height, c.width, 2).map_err(shape)?;
    v.expect_shape(c.height, c.width, 1).map_err(shape)?;
    let coords = c.as_f32().map_err(shape)?.chunks(2).map(|p| [p[0] as f64, p[1] as f64]).collect();
    let valid = v.as_u8().map_err(shape)?.iter().map(|b| *b != 0).collect();
    Ok(PixelMatchField {
        source,
        target,
        width: c.width,
        height: c.height,
        target_width,
        target_height,
        coords,
        valid,
    })
}

pub fn save_point_map(path: &Path, map: &PointMap) -> Result<(), IoError> {
    let pts: Vec<f32> = map.points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    let valid: Vec<u8> = map.valid.iter().map(|v| *v as u8).collect();
    save_tensors(
        path,
        &[&Tensor::from_f32(map.height, map.width, 3, pts), &Tensor::from_u8(map.height, map.width, 1, valid)],
    )
}

pub fn load_point_map(path: &Path, view: usize) -> Result<PointMap, IoError> {
    let ts = load_tensors(path, 2)?;
    let (p, v) = (&ts[0], &ts[1]);
    let shape = |e| IoError::at(path, e);
    p.expect_shape(p.height, p.width, 3).map_err(shape)?;
    v.expect_shape(p.height, p.width, 1).map_err(shape)?;
    Ok(PointMap {
        view,
        width: p.width,
        height: p.height,
        points: p.as_f32().map_err(shape)?.chunks(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect(),
        valid: v.as_u8().map_err(shape)?.iter().map(|b| *b != 0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub image: String,
    pub camera: Camera,
    #[serde(default)]
    pub masks: BTreeMap<Granularity, String>,
    #[serde(default)]
    pub features: BTreeMap<Granularity, String>,
    #[serde(default)]
    pub points: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub source: usize,
    pub target: usize,
    pub path: String,
}

/// Outputs of pipeline stages, recorded in the manifest as they appear.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Artifacts {
    pub alignment: Option<String>,
    pub aligned_features: Option<String>,
    pub codecs: BTreeMap<Granularity, String>,
    pub checkpoint_rgb: Option<String>,
    pub checkpoint_sem: Option<String>,
    pub cameras: Option<String>,
    pub training_log: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub matches: Vec<MatchEntry>,
    /// Colored point cloud used to initialize Gaussians.
    #[serde(default)]
    pub point_cloud: Option<String>,
    /// Views excluded from training and used for evaluation only.
    #[serde(default)]
    pub held_out: Vec<usize>,
    /// Query set for evaluation.
    #[serde(default)]
    pub queries: Option<String>,
    #[serde(default)]
    pub config: PipelineConfig,
    #[serde(default)]
    pub artifacts: Artifacts,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|v| !self.held_out.contains(v)).collect()
    }
}

/// Directory that relative manifest paths resolve against.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// A manifest with every input loaded and checked.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub manifest: Manifest,
    pub base: PathBuf,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// `[view][granularity]`
    pub masksets: Vec<BTreeMap<Granularity, MaskSet>>,
    pub features: FeatureStore,
    pub fields: Vec<PixelMatchField>,
    /// Empty when the manifest has no point maps.
    pub points: Vec<PointMap>,
}

impl SceneData {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }
}

/// Loads every input referenced by the manifest. Feature rows are
/// renormalized to unit length on the way in.
pub fn load_scene(manifest_path: &Path) -> Result<SceneData, IoError> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    manifest.config.validate().map_err(|e| IoError::at(manifest_path, e.into()))?;
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut masksets = Vec::new();
    let mut features = FeatureStore::default();
    let mut points = Vec::new();
    for (v, view) in manifest.views.iter().enumerate() {
        view.camera.validate().map_err(|e| IoError::at(manifest_path, e.into()))?;
        let img_path = base.join(&view.image);
        let img = load_image(&img_path)?;
        if (img.width, img.height) != (view.camera.width, view.camera.height) {
            return Err(IoError::at(
                &img_path,
                IoError::Invalid(format!(
                    "image is {}×{}, camera says {}×{}",
                    img.width, img.height, view.camera.width, view.camera.height
                )),
            ));
        }
        let mut sets = BTreeMap::new();
        for (gran, rel) in &view.masks {
            let mpath = base.join(rel);
            let (w, h, regions) = load_mask_regions(&mpath)?;
            if (w, h) != (img.width, img.height) {
                return Err(IoError::at(&mpath, IoError::Invalid(format!("mask is {w}×{h}, image is {}×{}", img.width, img.height))));
            }
            let frel = view.features.get(gran).ok_or_else(|| {
                IoError::at(manifest_path, IoError::Invalid(format!("view {v} has {gran} masks but no features")))
            })?;
            let fpath = base.join(frel);
            let rows = load_features(&fpath)?;
            let mut set = MaskSet::new(v, *gran, w, h);
            for (id, pixels) in regions {
                let row = rows.get(id as usize - 1).ok_or_else(|| {
                    IoError::at(&fpath, IoError::Invalid(format!("no feature row for mask {id}")))
                })?;
                let fid = features.push(row.clone()).map_err(|e| IoError::at(&fpath, e.into()))?;
                set.masks.push(Mask { id, pixels, feature: fid });
            }
            set.check().map_err(|e| IoError::at(&mpath, e.into()))?;
            sets.insert(*gran, set);
        }
        if let Some(rel) = &view.points {
            let p = load_point_map(&base.join(rel), v)?;
            if (p.width, p.height) != (img.width, img.height) {
                return Err(IoError::at(&base.join(rel), IoError::Invalid("point map size differs from image".into())));
            }
            points.push(p);
        }
        cameras.push(view.camera.clone());
        images.push(img);
        masksets.push(sets);
    }
    if !points.is_empty() && points.len() != manifest.views.len() {
        return Err(IoError::at(manifest_path, IoError::Invalid("point maps must be given for all views or none".into())));
    }
    let mut fields = Vec::new();
    for m in &manifest.matches {
        let (Some(s), Some(t)) = (cameras.get(m.source), cameras.get(m.target)) else {
            return Err(IoError::at(manifest_path, IoError::Invalid(format!("match {}→{} names a missing view", m.source, m.target))));
        };
        let f = load_match_field(&base.join(&m.path), m.source, m.target, t.width, t.height)?;
        if (f.width, f.height) != (s.width, s.height) {
            return Err(IoError::at(&base.join(&m.path), IoError::Invalid("match field size differs from source view".into())));
        }
        fields.push(f);
    }
    info!("loaded {} views, {} match fields, {} features", cameras.len(), fields.len(), features.features.len());
    Ok(SceneData { manifest, base, cameras, images, masksets, features, fields, points })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub file: String,
    pub location: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.iter().all(|i| i.severity != Severity::Error)
    }

    fn push(&mut self, severity: Severity, file: impl Into<String>, location: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { severity, file: file.into(), location: location.into(), message: message.into() });
    }

    fn error(&mut self, file: impl Into<String>, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Error, file, location, message);
    }
}

/// Checks a dataset without stopping at the first problem.
pub fn validate(manifest_path: &Path) -> ValidationReport {
    let mut r = ValidationReport::default();
    let mfile = manifest_path.display().to_string();
    let manifest = match Manifest::load(manifest_path) {
        Ok(m) => m,
        Err(e) => {
            r.error(&mfile, "", e.to_string());
            return r;
        }
    };
    let base = base_dir(manifest_path);
    if let Err(e) = manifest.config.validate() {
        r.error(&mfile, "config", e.to_string());
    }
    if manifest.views.len() < 2 {
        r.error(&mfile, "views", format!("need at least 2 views, found {}", manifest.views.len()));
    }
    let mut dims = Vec::new();
    for (v, view) in manifest.views.iter().enumerate() {
        let loc = format!("views[{v}]");
        if let Err(e) = view.camera.validate() {
            r.error(&mfile, format!("{loc}.camera"), e.to_string());
        }
        let (w, h) = (view.camera.width, view.camera.height);
        dims.push((w, h));
        let ipath = base.join(&view.image);
        match image::image_dimensions(&ipath) {
            Ok((iw, ih)) if (iw as usize, ih as usize) != (w, h) => {
                r.error(ipath.display().to_string(), "", format!("image is {iw}×{ih}, camera says {w}×{h}"))
            }
            Ok(_) => {}
            Err(e) => r.error(ipath.display().to_string(), "", e.to_string()),
        }
        for (gran, rel) in &view.masks {
            let mpath = base.join(rel);
            let mfile_s = mpath.display().to_string();
            let regions = match load_mask_regions(&mpath) {
                Ok((mw, mh, regions)) => {
                    if (mw, mh) != (w, h) {
                        r.error(&mfile_s, "", format!("mask is {mw}×{mh}, view is {w}×{h}"));
                    }
                    regions
                }
                Err(e) => {
                    r.error(&mfile_s, "", e.to_string());
                    continue;
                }
            };
            let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
            let mut reported = BTreeSet::new();
            for (id, px) in &regions {
                for p in px.iter() {
                    if let Some(prev) = owner.insert(p, *id) {
                        if reported.insert((prev, *id)) {
                            r.error(&mfile_s, format!("pixel {p}"), format!("masks {prev} and {id} overlap"));
                        }
                    }
                }
            }
            let Some(frel) = view.features.get(gran) else {
                r.error(&mfile, format!("{loc}.features"), format!("no {gran} features for {gran} masks"));
                continue;
            };
            let fpath = base.join(frel);
            let ffile = fpath.display().to_string();
            match load_features(&fpath) {
                Ok(rows) => {
                    for (id, _) in &regions {
                        match rows.get(*id as usize - 1) {
                            None => r.error(&ffile, format!("row {}", id - 1), format!("missing feature for mask {id}")),
                            Some(row) => {
                                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                                if !(norm.is_finite() && norm > 0.0) {
                                    r.error(&ffile, format!("row {}", id - 1), "feature has zero or non-finite norm");
                                } else if (norm - 1.0).abs() > 1e-6 {
                                    r.push(Severity::Warning, &ffile, format!("row {}", id - 1), format!("feature norm {norm:.6} will be renormalized"));
                                }
                            }
                        }
                    }
                }
                Err(e) => r.error(&ffile, "", e.to_string()),
            }
        }
        if let Some(rel) = &view.points {
            let ppath = base.join(rel);
            match load_point_map(&ppath, v) {
                Ok(p) if (p.width, p.height) != (w, h) => {
                    r.error(ppath.display().to_string(), "", format!("point map is {}×{}, view is {w}×{h}", p.width, p.height))
                }
                Ok(p) => {
                    if let Some(i) = p.points.iter().zip(&p.valid).position(|(x, ok)| *ok && !x.iter().all(|c| c.is_finite())) {
                        r.error(ppath.display().to_string(), format!("pixel {i}"), "non-finite point");
                    }
                }
                Err(e) => r.error(ppath.display().to_string(), "", e.to_string()),
            }
        }
    }
    for (k, m) in manifest.matches.iter().enumerate() {
        let loc = format!("matches[{k}]");
        let (Some(&(sw, sh)), Some(&(tw, th))) = (dims.get(m.source), dims.get(m.target)) else {
            r.error(&mfile, loc, format!("match {}→{} names a missing view", m.source, m.target));
            continue;
        };
        if m.source == m.target {
            r.error(&mfile, &loc, "match field maps a view onto itself");
        }
        let path = base.join(&m.path);
        match load_match_field(&path, m.source, m.target, tw, th) {
            Ok(f) => {
                if (f.width, f.height) != (sw, sh) {
                    r.error(path.display().to_string(), "", format!("field is {}×{}, source view is {sw}×{sh}", f.width, f.height));
                }
                let bad = f
                    .coords
                    .iter()
                    .zip(&f.valid)
                    .position(|(c, ok)| *ok && !(c[0] > -0.5 && c[1] > -0.5 && c[0] < tw as f64 - 0.5 && c[1] < th as f64 - 0.5));
                if let Some(i) = bad {
                    r.error(path.display().to_string(), format!("pixel {i}"), "valid match points outside the target image");
                }
            }
            Err(e) => r.error(path.display().to_string(), "", e.to_string()),
        }
    }
    if let Some(rel) = &manifest.point_cloud {
        if let Err(e) = ply::PlyTable::load(&base.join(rel)) {
            r.error(base.join(rel).display().to_string(), "", e.to_string());
        }
    }
    r
}

/// Initial Gaussians from a colored point cloud: optional voxel
/// downsampling, isotropic scale from the mean distance to the three
/// nearest neighbours, low opacity.
pub fn ingest_stereo_init(points: &[ColoredPoint], voxel: Option<f64>, semantic_dim: usize) -> Result<GaussianCloud, IoError> {
    if points.is_empty() {
        return Err(IoError::Invalid("point cloud is empty".into()));
    }
    if let Some(i) = points.iter().position(|p| !p.position.iter().all(|v| v.is_finite())) {
        return Err(IoError::Invalid(format!("point {i} is not finite")));
    }
    let pts: Vec<(Vec3, Vec3)> = match voxel {
        Some(size) if size > 0.0 => {
            let mut cells: BTreeMap<(i64, i64, i64), (Vec3, Vec3, usize)> = BTreeMap::new();
            for p in points {
                let key = (
                    (p.position.x / size).floor() as i64,
                    (p.position.y / size).floor() as i64,
                    (p.position.z / size).floor() as i64,
                );
                let c = Vec3::new(p.color[0] as f64, p.color[1] as f64, p.color[2] as f64) / 255.0;
                let e = cells.entry(key).or_insert((Vec3::zeros(), Vec3::zeros(), 0));
                e.0 += p.position;
                e.1 += c;
                e.2 += 1;
            }
            cells.into_values().map(|(s, c, n)| (s / n as f64, c / n as f64)).collect()
        }
        _ => points
            .iter()
            .map(|p| (p.position, Vec3::new(p.color[0] as f64, p.color[1] as f64, p.color[2] as f64) / 255.0))
            .collect(),
    };
    let scales = knn_mean_distance(&pts.iter().map(|p| p.0).collect::<Vec<_>>(), 3);
    let mut cloud = GaussianCloud::new(semantic_dim);
    for ((mean, color), s) in pts.into_iter().zip(scales) {
        cloud.gaussians.push(Gaussian3D::new(mean, s.max(1e-7), 0.1, color));
    }
    info!("initialized {} gaussians from {} points", cloud.len(), points.len());
    Ok(cloud)
}

/// One named camera in a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub name: String,
    #[serde(flatten)]
    pub camera: Camera,
}

/// Camera poses emitted by the stereo stage, or refined by training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub views: Vec<PoseEntry>,
}

impl PoseFile {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let poses: PoseFile = read_json(path)?;
        if poses.views.is_empty() {
            return Err(IoError::at(path, IoError::Invalid("pose file lists no views".into())));
        }
        for v in &poses.views {
            v.camera.validate().map_err(|e| IoError::at(path, IoError::Invalid(format!("view {}: {e}", v.name))))?;
        }
        Ok(poses)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }
}

/// File-level stereo ingest: a colored PLY plus a pose file.
pub fn ingest_stereo_files(
    ply_path: &Path,
    poses_path: &Path,
    voxel: Option<f64>,
    semantic_dim: usize,
) -> Result<(GaussianCloud, Vec<PoseEntry>), IoError> {
    let points = ply::load_points(ply_path)?;
    let cloud = ingest_stereo_init(&points, voxel, semantic_dim).map_err(|e| IoError::at(ply_path, e))?;
    Ok((cloud, PoseFile::load(poses_path)?.views))
}

/// Mean distance to the `k` nearest other points, via a kd-tree. Points
/// with no neighbours get the cloud's mean spacing.
fn knn_mean_distance(points: &[Vec3], k: usize) -> Vec<f64> {
    use kiddo::immutable::float::kdtree::ImmutableKdTree;
    use kiddo::SquaredEuclidean;
    use rayon::prelude::*;
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(&coords);
    let mut out: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let found = tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], std::num::NonZero::new(k + 1).unwrap());
            let d: Vec<f64> = found.iter().filter(|n| n.item != i as u64).take(k).map(|n| n.distance.sqrt()).collect();
            if d.is_empty() {
                f64::NAN
            } else {
                d.iter().sum::<f64>() / d.len() as f64
            }
        })
        .collect();
    let finite: Vec<f64> = out.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    let fallback = if finite.is_empty() { 0.01 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    for v in &mut out {
        if !(v.is_finite() && *v > 0.0) {
            warn!("point without distinct neighbours, using mean spacing {fallback}");
            *v = fallback;
        }
    }
    out
}

/// Image with `mask` tinted by `color`, for visual inspection.
pub fn save_overlay(path: &Path, img: &Image, mask: &[bool], color: [f64; 3]) -> Result<(), IoError> {
    let mut out = img.clone();
    for (i, on) in mask.iter().enumerate() {
        if *on {
            for c in 0..3 {
                out.data[i * 3 + c] = 0.5 * out.data[i * 3 + c] + 0.5 * color[c];
            }
        }
    }
    save_image(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let labels: Vec<u32> = (0..12).map(|i| if i % 3 == 0 { 0 } else { 300 + i }).collect();
        save_label_png(&p, 4, 3, &labels).unwrap();
        assert_eq!(load_label_png(&p).unwrap(), (4, 3, labels));
        assert!(save_label_png(&p, 1, 1, &[70000]).is_err());
    }

    #[test]
    fn image_round_trip_is_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Image { width: 2, height: 1, data: vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1] };
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img.quantized());
    }

    #[test]
    fn match_field_and_points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = PixelMatchField {
            source: 0,
            target: 1,
            width: 3,
            height: 2,
            target_width: 5,
            target_height: 4,
            coords: (0..6).map(|i| [i as f64 * 0.5, 1.25]).collect(),
            valid: vec![true, false, true, true, false, true],
        };
        let p = dir.path().join("f.slgs");
        save_match_field(&p, &f).unwrap();
        assert_eq!(load_match_field(&p, 0, 1, 5, 4).unwrap(), f);

        let m = PointMap {
            view: 2,
            width: 2,
            height: 1,
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 8.0)],
            valid: vec![true, false],
        };
        let p = dir.path().join("p.slgs");
        save_point_map(&p, &m).unwrap();
        assert_eq!(load_point_map(&p, 2).unwrap(), m);
    }

    #[test]
    fn rle_json_round_trip_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = MaskSet::new(0, Granularity::Part, 4, 4);
        set.masks.push(Mask { id: 2, pixels: RleMask::from_indices([0, 1, 5]), feature: 0 });
        let p = dir.path().join("m.json");
        save_maskset(&p, &set).unwrap();
        let (w, h, regions) = load_mask_regions(&p).unwrap();
        assert_eq!((w, h), (4, 4));
        assert_eq!(regions, vec![(2, set.masks[0].pixels.clone())]);
        write_json(&p, &RleFile { width: 2, height: 2, masks: vec![RleEntry { id: 1, runs: vec![(3, 2)] }] }).unwrap();
        assert!(load_mask_regions(&p).is_err());
    }

    #[test]
    fn stereo_init_scales_and_colors() {
        let pts: Vec<ColoredPoint> = (0..4)
            .map(|i| ColoredPoint { position: Vec3::new(i as f64, 0.0, 0.0), color: [255, 0, 51] })
            .collect();
        let cloud = ingest_stereo_init(&pts, None, 3).unwrap();
        assert_eq!(cloud.len(), 4);
        // neighbours of an end point are 1, 2, 3 away
        assert!((cloud.gaussians[0].scale()[0] - 2.0).abs() < 1e-12);
        // an inner point sees 1, 1, 2
        assert!((cloud.gaussians[1].scale()[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((cloud.gaussians[0].color - Vec3::new(1.0, 0.0, 0.2)).norm() < 1e-12);
        assert!((cloud.gaussians[0].opacity() - 0.1).abs() < 1e-12);

        let merged = ingest_stereo_init(&pts, Some(10.0), 3).unwrap();
        assert_eq!(merged.len(), 1);
        assert!((merged.gaussians[0].mean - Vec3::new(1.5, 0.0, 0.0)).norm() < 1e-12);
        assert!(ingest_stereo_init(&[], None, 3).is_err());
    }

    #[test]
    fn stereo_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<ColoredPoint> = (0..1000)
            .map(|i| ColoredPoint {
                position: Vec3::new((i % 10) as f64 * 0.01, (i / 10 % 10) as f64 * 0.01, (i / 100) as f64 * 0.01),
                color: [255, 0, 0],
            })
            .collect();
        let ply_path = dir.path().join("init.ply");
        ply::save_points(&ply_path, &pts).unwrap();
        let cam = Camera::new(50.0, 50.0, 64, 48).look_at(&Vec3::new(0.0, 0.0, -3.0), &Vec3::zeros(), &Vec3::new(0.0, -1.0, 0.0));
        let poses = PoseFile { views: vec![PoseEntry { name: "a".into(), camera: cam.clone() }] };
        let pose_path = dir.path().join("poses.json");
        poses.save(&pose_path).unwrap();
        assert_eq!(PoseFile::load(&pose_path).unwrap(), poses);

        let (cloud, cams) = ingest_stereo_files(&ply_path, &pose_path, None, 3).unwrap();
        assert_eq!(cloud.len(), 1000);
        assert_eq!(cams[0].camera, cam);
        assert!((cloud.gaussians[7].color - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let (coarse, _) = ingest_stereo_files(&ply_path, &pose_path, Some(0.05), 3).unwrap();
        assert!(coarse.len() < 1000);

        write_json(&pose_path, &PoseFile::default()).unwrap();
        assert!(PoseFile::load(&pose_path).is_err());
    }
}
