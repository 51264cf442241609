//! Stage orchestration over a scene manifest. Each stage reads its inputs
//! from the manifest and earlier artifacts, writes its outputs under the
//! output directory and records them in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align, AlignError, AlignmentResult, FeatureStore, MaskRef};
use crate::featcodec::{CodecError, FeatureCodec};
use crate::io::{
    self, base_dir, ingest_stereo_init, load_features, load_label_png, load_scene, ply, read_json, write_json, IoError,
    Manifest, PoseEntry, PoseFile, SceneData,
};
use crate::query::{
    decode_feature_map, inside, iou, run_query, BBox, QueryError, QueryMode, QueryReport, QueryResult, QuerySet,
    QuerySpec,
};
use crate::rasterizer::{render, RasterError};
use crate::scene::{psnr, Camera, GaussianCloud, Granularity, Image, PipelineConfig, SceneError};
use crate::trainer::{stage_a, stage_b, SemanticTarget, SemanticTargetMap, TrainError, TrainOptions, TrainingLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Config(#[from] SceneError),
    #[error("{0} is missing; run the `{1}` stage first")]
    MissingArtifact(&'static str, &'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Validate,
    Align,
    FitCodec,
    TrainRgb,
    TrainSem,
    Render,
    Query,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Validate,
        Stage::Align,
        Stage::FitCodec,
        Stage::TrainRgb,
        Stage::TrainSem,
        Stage::Render,
        Stage::Query,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Align => "align",
            Stage::FitCodec => "fit-codec",
            Stage::TrainRgb => "train-rgb",
            Stage::TrainSem => "train-sem",
            Stage::Render => "render",
            Stage::Query => "query",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Alignment output plus the feature rows its ids refer to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentArtifact {
    pub result: AlignmentResult,
    pub features: FeatureStore,
}

/// A manifest opened for stage execution.
pub struct Workspace {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub base: PathBuf,
    pub out: PathBuf,
    pub train: TrainOptions,
}

impl Workspace {
    /// Opens a manifest, applying `key=value` config overrides and an
    /// optional seed. Artifacts go to `out`, by default `<manifest dir>/out`.
    pub fn open(manifest_path: &Path, out: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, PipelineError> {
        let mut manifest = Manifest::load(manifest_path)?;
        for o in overrides {
            manifest.config.apply_override(o)?;
        }
        if let Some(seed) = seed {
            manifest.config.seed = seed;
        }
        manifest.config.validate()?;
        let base = base_dir(manifest_path);
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| base.join("out"));
        std::fs::create_dir_all(&out).map_err(|e| IoError::at(&out, e.into()))?;
        let train = TrainOptions { dump_dir: Some(out.join("dumps")), ..Default::default() };
        Ok(Self { manifest_path: manifest_path.to_path_buf(), manifest, base, out, train })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.manifest.config
    }

    /// Absolute path of an output file and its manifest entry, relative to
    /// the manifest when the output directory lies below it.
    fn output(&self, name: &str) -> (PathBuf, String) {
        let abs = self.out.join(name);
        let rel = abs.strip_prefix(&self.base).map(|p| p.to_string_lossy().into_owned());
        let entry = rel.unwrap_or_else(|_| abs.to_string_lossy().into_owned());
        (abs, entry)
    }

    fn resolve(&self, entry: &str) -> PathBuf {
        self.base.join(entry)
    }

    pub fn save_manifest(&self) -> Result<(), PipelineError> {
        self.manifest.save(&self.manifest_path)?;
        Ok(())
    }

    pub fn load_scene(&self) -> Result<SceneData, PipelineError> {
        let mut scene = load_scene(&self.manifest_path)?;
        scene.manifest.config = self.manifest.config.clone();
        Ok(scene)
    }

    pub fn load_alignment(&self) -> Result<AlignmentArtifact, PipelineError> {
        let rel = self.manifest.artifacts.alignment.as_ref().ok_or(PipelineError::MissingArtifact("alignment", "align"))?;
        Ok(read_json(&self.resolve(rel))?)
    }

    pub fn load_codecs(&self) -> Result<BTreeMap<Granularity, FeatureCodec>, PipelineError> {
        if self.manifest.artifacts.codecs.is_empty() {
            return Err(PipelineError::MissingArtifact("feature codecs", "fit-codec"));
        }
        let mut out = BTreeMap::new();
        for (gran, rel) in &self.manifest.artifacts.codecs {
            out.insert(*gran, FeatureCodec::load(&self.resolve(rel))?);
        }
        Ok(out)
    }

    pub fn load_checkpoint(&self, semantic: bool) -> Result<GaussianCloud, PipelineError> {
        let a = &self.manifest.artifacts;
        let rel = if semantic {
            a.checkpoint_sem.as_ref().ok_or(PipelineError::MissingArtifact("semantic checkpoint", "train-sem"))?
        } else {
            a.checkpoint_rgb.as_ref().ok_or(PipelineError::MissingArtifact("RGB checkpoint", "train-rgb"))?
        };
        Ok(ply::load_cloud(&self.resolve(rel))?)
    }

    /// Cameras for every view, with refined poses where stage A wrote them.
    pub fn cameras(&self) -> Result<Vec<Camera>, PipelineError> {
        let mut cams: Vec<Camera> = self.manifest.views.iter().map(|v| v.camera.clone()).collect();
        if let Some(rel) = &self.manifest.artifacts.cameras {
            for PoseEntry { name, camera } in PoseFile::load(&self.resolve(rel))?.views {
                if let Some(k) = self.manifest.views.iter().position(|v| v.name == name) {
                    cams[k] = camera;
                }
            }
        }
        Ok(cams)
    }

    /// Writes the training log; later stages append below earlier rows.
    fn append_log(&mut self, log: &TrainingLog, reset: bool) -> Result<(), PipelineError> {
        let (abs, rel) = self.output("training_log.csv");
        let mut csv = if !reset && abs.exists() {
            std::fs::read_to_string(&abs).map_err(|e| IoError::at(&abs, e.into()))?
        } else {
            String::new()
        };
        let fresh = log.to_csv();
        if csv.is_empty() {
            csv = fresh;
        } else {
            csv.extend(fresh.lines().skip(1).map(|l| format!("{l}\n")));
        }
        io::write_atomic(&abs, csv.as_bytes()).map_err(|e| IoError::at(&abs, e.into()))?;
        self.manifest.artifacts.training_log = Some(rel);
        Ok(())
    }
}

/// Mask sets restricted to the training views; held-out views stay empty
/// so they take no part in alignment.
fn training_masksets(scene: &SceneData) -> Vec<BTreeMap<Granularity, crate::alignment::MaskSet>> {
    let train = scene.manifest.training_views();
    scene
        .masksets
        .iter()
        .enumerate()
        .map(|(v, s)| if train.contains(&v) { s.clone() } else { BTreeMap::new() })
        .collect()
}

/// Three-step alignment over the training views.
pub fn align_scene(scene: &SceneData) -> Result<AlignmentResult, PipelineError> {
    let train = scene.manifest.training_views();
    let fields: Vec<_> =
        scene.fields.iter().filter(|f| train.contains(&f.source) && train.contains(&f.target)).cloned().collect();
    let res = align(&training_masksets(scene), &scene.features, &fields, &scene.points, &scene.cameras, &scene.manifest.config)?;
    Ok(res)
}

/// Canonical feature rows per granularity, in group order.
pub fn canonical_features(result: &AlignmentResult, features: &FeatureStore) -> Result<BTreeMap<Granularity, Vec<Vec<f64>>>, PipelineError> {
    let mut out: BTreeMap<Granularity, Vec<Vec<f64>>> = BTreeMap::new();
    for g in &result.graph.groups {
        out.entry(g.canonical_member.granularity).or_default().push(features.get(g.canonical_feature)?.to_vec());
    }
    Ok(out)
}

pub fn fit_codecs(
    result: &AlignmentResult,
    features: &FeatureStore,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<Granularity, FeatureCodec>, PipelineError> {
    let mut out = BTreeMap::new();
    for (gran, rows) in canonical_features(result, features)? {
        let codec = FeatureCodec::fit(&rows, cfg.semantic_dim)?.with_granularity(gran);
        info!("{gran} codec: {} entries", codec.len());
        out.insert(gran, codec);
    }
    Ok(out)
}

/// Code targets for each of `views`, painted from the aligned masks.
pub fn semantic_targets(
    result: &AlignmentResult,
    features: &FeatureStore,
    codecs: &BTreeMap<Granularity, FeatureCodec>,
    views: &[usize],
) -> Result<SemanticTargetMap, PipelineError> {
    let aligned = result.graph.aligned_features();
    let mut out = SemanticTargetMap::default();
    for &v in views {
        let mut per = BTreeMap::new();
        for (gran, set) in result.masksets.get(v).into_iter().flatten() {
            let Some(codec) = codecs.get(gran) else { continue };
            let target = SemanticTarget::from_masks(set, codec, |m| {
                let r = MaskRef { view: v, granularity: *gran, mask: m.id };
                aligned.get(&r).and_then(|id| features.get(*id).ok())
            })?;
            per.insert(*gran, target);
        }
        out.views.push(per);
    }
    Ok(out)
}

/// Initial Gaussians from the manifest's point cloud.
pub fn initial_cloud(scene: &SceneData) -> Result<GaussianCloud, PipelineError> {
    let rel = scene.manifest.point_cloud.as_ref().ok_or_else(|| PipelineError::Invalid("manifest names no point cloud".into()))?;
    let points = ply::load_points(&scene.resolve(rel))?;
    let cfg = &scene.manifest.config;
    Ok(ingest_stereo_init(&points, Some(cfg.init_voxel), cfg.semantic_dim)?)
}

/// Decoded high-dimensional feature maps for every codec granularity.
pub fn decoded_maps(
    cloud: &GaussianCloud,
    cam: &Camera,
    codecs: &BTreeMap<Granularity, FeatureCodec>,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<Granularity, Vec<f64>>, PipelineError> {
    let grans: Vec<Granularity> = codecs.keys().copied().collect();
    let out = render(cloud, cam, &grans)?;
    let mut maps = BTreeMap::new();
    for (gran, codec) in codecs {
        maps.insert(*gran, decode_feature_map(&out, *gran, codec, cfg.feature_alpha_min)?);
    }
    Ok(maps)
}

/// A query set with its embeddings and ground truth loaded.
#[derive(Clone, Debug)]
pub struct LoadedQueries {
    pub mode: QueryMode,
    pub canonical: Vec<Vec<f64>>,
    pub queries: Vec<LoadedQuery>,
}

#[derive(Clone, Debug)]
pub struct LoadedQuery {
    pub text: String,
    pub embedding: Vec<f64>,
    pub targets: Vec<LoadedTarget>,
}

#[derive(Clone, Debug)]
pub struct LoadedTarget {
    pub view: usize,
    pub gt_mask: Option<Vec<bool>>,
    pub gt_bbox: Option<BBox>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

pub fn load_queries(path: &Path) -> Result<LoadedQueries, PipelineError> {
    let set: QuerySet = read_json(path)?;
    let base = base_dir(path);
    let canonical = load_features(&base.join(&set.canonical))?.into_iter().map(unit).collect();
    let mut queries = Vec::new();
    for q in set.queries {
        let epath = base.join(&q.embedding);
        let embedding = load_features(&epath)?
            .into_iter()
            .next()
            .map(unit)
            .ok_or_else(|| IoError::at(&epath, IoError::Invalid("empty embedding tensor".into())))?;
        let mut targets = Vec::new();
        for t in q.targets {
            let gt_mask = match &t.gt_mask {
                Some(rel) => Some(load_label_png(&base.join(rel))?.2.into_iter().map(|l| l != 0).collect()),
                None => None,
            };
            targets.push(LoadedTarget { view: t.view, gt_mask, gt_bbox: t.gt_bbox });
        }
        queries.push(LoadedQuery { text: q.text, embedding, targets });
    }
    Ok(LoadedQueries { mode: set.mode, canonical, queries })
}

/// Runs every query in every target view and scores it against the ground
/// truth that is available. Also returns each result's predicted mask.
pub fn evaluate_queries(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    codecs: &BTreeMap<Granularity, FeatureCodec>,
    queries: &LoadedQueries,
    cfg: &PipelineConfig,
) -> Result<(QueryReport, Vec<Vec<bool>>), PipelineError> {
    let mut masks = Vec::new();
    let mut cache: BTreeMap<usize, BTreeMap<Granularity, Vec<f64>>> = BTreeMap::new();
    let mut results = Vec::new();
    for q in &queries.queries {
        let spec = QuerySpec::new(q.embedding.clone(), queries.canonical.clone(), queries.mode, cfg);
        for t in &q.targets {
            let cam = cameras.get(t.view).ok_or_else(|| PipelineError::Invalid(format!("query `{}` names view {}", q.text, t.view)))?;
            if !cache.contains_key(&t.view) {
                cache.insert(t.view, decoded_maps(cloud, cam, codecs, cfg)?);
            }
            let outcome = run_query(&cache[&t.view], cam.width, cam.height, &spec, &q.text)?;
            let loc = &outcome.localization;
            let seg = &outcome.segmentation;
            let iou_v = t.gt_mask.as_ref().map(|gt| iou(&seg.mask, gt));
            let hit = match (&t.gt_bbox, &t.gt_mask) {
                (Some(b), _) => Some(inside(loc.x, loc.y, b)),
                (None, Some(m)) => Some(m[loc.y * cam.width + loc.x]),
                (None, None) => None,
            };
            results.push(QueryResult {
                text: q.text.clone(),
                view: t.view,
                granularity: seg.granularity,
                point: (loc.x, loc.y),
                point_granularity: loc.granularity,
                score: loc.score,
                area: seg.area(),
                iou: iou_v,
                hit,
            });
            masks.push(outcome.segmentation.mask);
        }
    }
    Ok((QueryReport::summarize(results), masks))
}

/// Rendering quality on training and held-out views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub psnr: BTreeMap<String, f64>,
    pub training_psnr: Option<f64>,
    pub held_out_psnr: Option<f64>,
}

pub fn render_report(cloud: &GaussianCloud, cameras: &[Camera], images: &[Image], manifest: &Manifest) -> Result<RenderReport, PipelineError> {
    let mut report = RenderReport::default();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (v, (cam, img)) in cameras.iter().zip(images).enumerate() {
        let out = render(cloud, cam, &[])?;
        let p = psnr(&out.color, &img.data);
        report.psnr.insert(manifest.views[v].name.clone(), p);
        if manifest.held_out.contains(&v) {
            held.push(p);
        } else {
            train.push(p);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    report.training_psnr = mean(&train);
    report.held_out_psnr = mean(&held);
    Ok(report)
}

/// Summary written by the `eval` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub render: RenderReport,
    pub queries: Option<QueryReport>,
}

pub fn run_align(ws: &mut Workspace) -> Result<AlignmentArtifact, PipelineError> {
    let scene = ws.load_scene()?;
    let result = align_scene(&scene)?;
    info!("alignment: {} groups, {} scored pairs", result.graph.groups.len(), result.graph.pairs.len());
    let artifact = AlignmentArtifact { result, features: scene.features };
    let (abs, rel) = ws.output("alignment.json");
    write_json(&abs, &artifact)?;
    ws.manifest.artifacts.alignment = Some(rel);
    let (abs, rel) = ws.output("aligned_features.json");
    let aligned: Vec<(MaskRef, usize)> = artifact.result.graph.aligned_features().into_iter().collect();
    write_json(&abs, &aligned)?;
    ws.manifest.artifacts.aligned_features = Some(rel);
    ws.save_manifest()?;
    Ok(artifact)
}

pub fn run_fit_codec(ws: &mut Workspace) -> Result<BTreeMap<Granularity, FeatureCodec>, PipelineError> {
    let art = ws.load_alignment()?;
    let codecs = fit_codecs(&art.result, &art.features, ws.config())?;
    ws.manifest.artifacts.codecs.clear();
    for (gran, codec) in &codecs {
        let (abs, rel) = ws.output(&format!("codec_{gran}.slgc"));
        if let Some(dir) = abs.parent() {
            std::fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e.into()))?;
        }
        codec.save(&abs)?;
        ws.manifest.artifacts.codecs.insert(*gran, rel);
    }
    ws.save_manifest()?;
    Ok(codecs)
}

pub fn run_train_rgb(ws: &mut Workspace) -> Result<GaussianCloud, PipelineError> {
    let scene = ws.load_scene()?;
    let train = scene.manifest.training_views();
    let cloud = initial_cloud(&scene)?;
    let cams: Vec<Camera> = train.iter().map(|v| scene.cameras[*v].clone()).collect();
    let imgs: Vec<Image> = train.iter().map(|v| scene.images[*v].clone()).collect();
    let out = stage_a(cloud, cams, &imgs, ws.config(), &ws.train)?;
    let (abs, rel) = ws.output("checkpoint_rgb.ply");
    ply::save_cloud(&abs, &out.cloud)?;
    ws.manifest.artifacts.checkpoint_rgb = Some(rel);
    let poses = PoseFile {
        views: train
            .iter()
            .zip(out.cameras)
            .map(|(v, camera)| PoseEntry { name: scene.manifest.views[*v].name.clone(), camera })
            .collect(),
    };
    let (abs, rel) = ws.output("cameras.json");
    poses.save(&abs)?;
    ws.manifest.artifacts.cameras = Some(rel);
    ws.append_log(&out.log, true)?;
    ws.save_manifest()?;
    Ok(out.cloud)
}

pub fn run_train_sem(ws: &mut Workspace) -> Result<GaussianCloud, PipelineError> {
    let scene = ws.load_scene()?;
    let art = ws.load_alignment()?;
    let codecs = ws.load_codecs()?;
    let cloud = ws.load_checkpoint(false)?;
    let cameras = ws.cameras()?;
    let train = scene.manifest.training_views();
    let targets = semantic_targets(&art.result, &art.features, &codecs, &train)?;
    let cams: Vec<Camera> = train.iter().map(|v| cameras[*v].clone()).collect();
    let imgs: Vec<Image> = train.iter().map(|v| scene.images[*v].clone()).collect();
    let out = stage_b(cloud, &cams, &imgs, &targets, ws.config(), &ws.train)?;
    let (abs, rel) = ws.output("checkpoint_sem.ply");
    ply::save_cloud(&abs, &out.cloud)?;
    ws.manifest.artifacts.checkpoint_sem = Some(rel);
    ws.append_log(&out.log, false)?;
    ws.save_manifest()?;
    Ok(out.cloud)
}

/// Latest checkpoint: semantic if present, else RGB.
fn latest_checkpoint(ws: &Workspace) -> Result<GaussianCloud, PipelineError> {
    if ws.manifest.artifacts.checkpoint_sem.is_some() {
        ws.load_checkpoint(true)
    } else {
        ws.load_checkpoint(false)
    }
}

/// Writes a color render of every view and reports PSNR.
pub fn run_render(ws: &mut Workspace) -> Result<RenderReport, PipelineError> {
    let scene = ws.load_scene()?;
    let cloud = latest_checkpoint(ws)?;
    let cameras = ws.cameras()?;
    for (v, cam) in cameras.iter().enumerate() {
        let out = render(&cloud, cam, &[])?;
        let img = Image { width: cam.width, height: cam.height, data: out.color };
        io::save_image(&ws.out.join(format!("renders/{}.png", scene.manifest.views[v].name)), &img)?;
    }
    let report = render_report(&cloud, &cameras, &scene.images, &scene.manifest)?;
    write_json(&ws.out.join("render_report.json"), &report)?;
    Ok(report)
}

fn queries_path(ws: &Workspace) -> Result<PathBuf, PipelineError> {
    let rel = ws.manifest.queries.as_ref().ok_or_else(|| PipelineError::Invalid("manifest names no query set".into()))?;
    Ok(ws.resolve(rel))
}

/// Runs the query set and writes a report plus an overlay per result.
pub fn run_query_stage(ws: &mut Workspace) -> Result<QueryReport, PipelineError> {
    let scene = ws.load_scene()?;
    let cloud = ws.load_checkpoint(true)?;
    let codecs = ws.load_codecs()?;
    let cameras = ws.cameras()?;
    let queries = load_queries(&queries_path(ws)?)?;
    let (report, masks) = evaluate_queries(&cloud, &cameras, &codecs, &queries, ws.config())?;
    for (k, (r, mask)) in report.results.iter().zip(&masks).enumerate() {
        let path = ws.out.join(format!("queries/{k:03}_view{}.png", r.view));
        io::save_overlay(&path, &scene.images[r.view], mask, [1.0, 0.0, 0.0])?;
    }
    write_json(&ws.out.join("query_report.json"), &report)?;
    Ok(report)
}

/// Rendering and query metrics in one report.
pub fn run_eval(ws: &mut Workspace) -> Result<EvalReport, PipelineError> {
    let scene = ws.load_scene()?;
    let cloud = latest_checkpoint(ws)?;
    let cameras = ws.cameras()?;
    let render = render_report(&cloud, &cameras, &scene.images, &scene.manifest)?;
    let queries = match (&ws.manifest.queries, ws.manifest.artifacts.checkpoint_sem.is_some()) {
        (Some(_), true) => {
            let codecs = ws.load_codecs()?;
            let q = load_queries(&queries_path(ws)?)?;
            Some(evaluate_queries(&cloud, &cameras, &codecs, &q, ws.config())?.0)
        }
        _ => None,
    };
    let report = EvalReport { render, queries };
    write_json(&ws.out.join("eval_report.json"), &report)?;
    Ok(report)
}
