//! Core scene types: Gaussians, cameras, granularity levels and the pipeline
//! configuration shared by every stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest per-axis standard deviation treated as non-degenerate.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("singular covariance")]
    SingularCovariance,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent cloud: {0}")]
    InconsistentCloud(String),
}

/// Segmentation scale. Indexed 1..=3 from coarse to fine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Whole = 1,
    Subpart = 2,
    Part = 3,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Whole, Granularity::Subpart, Granularity::Part];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            1 => Some(Granularity::Whole),
            2 => Some(Granularity::Subpart),
            3 => Some(Granularity::Part),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Whole => "whole",
            Granularity::Subpart => "subpart",
            Granularity::Part => "part",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "whole" | "1" => Some(Granularity::Whole),
            "subpart" | "2" => Some(Granularity::Subpart),
            "part" | "3" => Some(Granularity::Part),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One anisotropic Gaussian primitive.
///
/// Scales are stored as logs and opacity as a logit so that unconstrained
/// gradient steps always map back to a valid primitive. The rotation is a
/// quaternion in `(w, x, y, z)` order; renderers normalize it on use.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vec3,
    pub sem_code: BTreeMap<Granularity, Vec<f64>>,
}

impl Gaussian3D {
    pub fn new(mean: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            mean,
            log_scale: Vec3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
            sem_code: BTreeMap::new(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(normalize_quat(self.rotation))
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = normalize_quat(self.rotation);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix.
pub fn matrix_to_quat(r: &Mat3) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    normalize_quat([q.w, q.i, q.j, q.k])
}

/// Rotation by angle `|v|` about axis `v`.
pub fn axis_angle(v: &Vec3) -> Mat3 {
    *nalgebra::Rotation3::new(*v).matrix()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(g: &Gaussian3D) -> Mat3 {
    let m = g.rotation_matrix() * Mat3::from_diagonal(&g.scale());
    m * m.transpose()
}

/// Unnormalized Gaussian density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn gaussian_density(g: &Gaussian3D, x: &Vec3) -> Result<f64, SceneError> {
    let scale = g.scale();
    if scale.iter().any(|s| !(*s > MIN_SCALE)) {
        return Err(SceneError::SingularCovariance);
    }
    // Σ⁻¹ = R S⁻² Rᵀ, so the Mahalanobis term is |S⁻¹ Rᵀ (x-μ)|².
    let local = g.rotation_matrix().transpose() * (x - g.mean);
    let m2: f64 = local.iter().zip(scale.iter()).map(|(d, s)| (d / s) * (d / s)).sum();
    Ok((-0.5 * m2).exp())
}

/// Collection of Gaussians sharing one semantic code dimension and one set
/// of granularities.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    pub semantic_dim: usize,
}

impl GaussianCloud {
    pub fn new(semantic_dim: usize) -> Self {
        Self { gaussians: Vec::new(), semantic_dim }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn granularities(&self) -> BTreeSet<Granularity> {
        self.gaussians
            .first()
            .map(|g| g.sem_code.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Adds a zero code of the cloud's dimension for `granularity` to every
    /// Gaussian that lacks one.
    pub fn ensure_granularity(&mut self, granularity: Granularity) {
        let dim = self.semantic_dim;
        for g in &mut self.gaussians {
            g.sem_code.entry(granularity).or_insert_with(|| vec![0.0; dim]);
        }
    }

    pub fn check(&self) -> Result<(), SceneError> {
        let grans = self.granularities();
        for (i, g) in self.gaussians.iter().enumerate() {
            let mine: BTreeSet<_> = g.sem_code.keys().copied().collect();
            if mine != grans {
                return Err(SceneError::InconsistentCloud(format!(
                    "gaussian {i} carries granularities {mine:?}, expected {grans:?}"
                )));
            }
            if let Some((gran, code)) = g.sem_code.iter().find(|(_, c)| c.len() != self.semantic_dim) {
                return Err(SceneError::InconsistentCloud(format!(
                    "gaussian {i} has {gran} code of length {}, expected {}",
                    code.len(),
                    self.semantic_dim
                )));
            }
        }
        Ok(())
    }

    /// Center and radius of the bounding sphere of all means.
    pub fn extent(&self) -> (Vec3, f64) {
        if self.gaussians.is_empty() {
            return (Vec3::zeros(), 1.0);
        }
        let n = self.gaussians.len() as f64;
        let center = self.gaussians.iter().fold(Vec3::zeros(), |acc, g| acc + g.mean) / n;
        let radius = self
            .gaussians
            .iter()
            .map(|g| (g.mean - center).norm())
            .fold(0.0, f64::max);
        (center, radius.max(1e-6))
    }
}

/// Interleaved RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rounds to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }
}

/// Peak signal-to-noise ratio in dB for signals in [0, 1].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Pinhole camera with a world-to-camera rigid transform. The camera looks
/// down +z with +x right and +y down in the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(with = "row_major")]
    pub rotation: Mat3,
    #[serde(with = "vec3_array")]
    pub translation: Vec3,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    0.01
}

impl Camera {
    pub fn new(fx: f64, fy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            near: default_near(),
        }
    }

    /// Places the camera at `eye` looking at `target`, with image-up
    /// approximately along `up`.
    pub fn look_at(mut self, eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up);
        let x = if x.norm() > 1e-12 { x.normalize() } else { Vec3::x() };
        let y = z.cross(&x);
        // rows are the camera axes expressed in world coordinates
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        self.rotation = r;
        self.translation = -(r * eye);
        self
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1x1");
        }
        if !(self.near > 0.0) {
            return bad("near plane must be positive");
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(err <= 1e-9) || self.rotation.determinant() <= 0.0 {
            return bad("rotation is not orthonormal");
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return bad("translation is not finite");
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates and depth of a world point, or `None` when it lies
    /// at or in front of the near plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= self.near {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World point at camera depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.rotation.transpose() * (c - self.translation)
    }

    /// Left-multiplied pose update: the new camera-space point is
    /// `Rot(φ)·p + ρ` for tangent `(ρ, φ)`.
    pub fn retract(&self, tangent: &[f64; 6]) -> Camera {
        let rho = Vec3::new(tangent[0], tangent[1], tangent[2]);
        let phi = Vec3::new(tangent[3], tangent[4], tangent[5]);
        let rot = axis_angle(&phi);
        let mut out = self.clone();
        out.rotation = rot * self.rotation;
        out.translation = rot * self.translation + rho;
        // keep the rotation orthonormal against drift
        let q = matrix_to_quat(&out.rotation);
        out.rotation = quat_to_matrix(q);
        out
    }

    /// Angle in radians between this camera's rotation and `other`'s.
    pub fn rotation_error(&self, other: &Camera) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

mod row_major {
    use super::Mat3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|r, c| rows[r][c]))
    }
}

mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}

/// Per-group Adam learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene radius. Decays log-linearly to
    /// `position_final` over stage A; stage B uses the final value.
    pub position: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub semantic: f64,
    pub pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            semantic: 2.5e-3,
            pose: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient norm above which a Gaussian is
    /// cloned or split.
    pub grad_threshold: f64,
    pub interval: usize,
    pub start: usize,
    pub end: usize,
    pub prune_opacity: f64,
    /// Split instead of clone when the largest scale exceeds this fraction
    /// of the scene radius.
    pub split_scale_fraction: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            interval: 100,
            start: 500,
            end: 2000,
            prune_opacity: 0.005,
            split_scale_fraction: 0.05,
            max_gaussians: 20_000,
        }
    }
}

/// Every tunable of the pipeline, with defaults materialized on
/// deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Weight of the feature cosine in the mask match score.
    pub lang_weight: f64,
    /// Acceptance threshold for pixel-match voting.
    pub pixel_match_threshold: f64,
    /// Acceptance threshold for reprojection refinement.
    pub reproj_match_threshold: f64,
    /// L1 weight inside the image loss (the rest goes to 1 - SSIM).
    pub l1_weight: f64,
    /// Image-loss weight in the joint semantic loss.
    pub image_loss_weight: f64,
    pub semantic_dim: usize,
    pub iterations_rgb: usize,
    pub iterations_sem: usize,
    /// Leading stage-B iterations that update only the semantic codes.
    pub semantic_warmup: usize,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
    pub pose_refine: bool,
    /// Granularities at which many-to-one matches are fused.
    pub fusion_granularities: Vec<Granularity>,
    /// Minimum projectable points for a mask to take part in reprojection.
    pub min_projectable_points: usize,
    pub lerf_threshold: f64,
    pub ovs_threshold: f64,
    pub smoothing_kernel: usize,
    pub area_threshold: usize,
    /// Rendered alpha below which a pixel carries no decoded feature.
    pub feature_alpha_min: f64,
    /// Voxel size for merging the initial point cloud; 0 keeps every point.
    pub init_voxel: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lang_weight: 0.3,
            pixel_match_threshold: 0.5,
            reproj_match_threshold: 0.5,
            l1_weight: 0.8,
            image_loss_weight: 0.3,
            semantic_dim: 3,
            iterations_rgb: 2000,
            iterations_sem: 1000,
            semantic_warmup: 300,
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            pose_refine: true,
            fusion_granularities: vec![Granularity::Whole],
            min_projectable_points: 8,
            lerf_threshold: 0.6,
            ovs_threshold: 0.8,
            smoothing_kernel: 11,
            area_threshold: 2000,
            feature_alpha_min: 0.5,
            init_voxel: 0.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let unit = [
            ("lang_weight", self.lang_weight),
            ("pixel_match_threshold", self.pixel_match_threshold),
            ("reproj_match_threshold", self.reproj_match_threshold),
            ("l1_weight", self.l1_weight),
            ("image_loss_weight", self.image_loss_weight),
            ("lerf_threshold", self.lerf_threshold),
            ("ovs_threshold", self.ovs_threshold),
            ("feature_alpha_min", self.feature_alpha_min),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(SceneError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(2..=16).contains(&self.semantic_dim) {
            return Err(SceneError::InvalidConfig(format!(
                "semantic_dim = {} is outside 2..=16",
                self.semantic_dim
            )));
        }
        if self.smoothing_kernel % 2 == 0 {
            return Err(SceneError::InvalidConfig("smoothing_kernel must be odd".into()));
        }
        if !(self.init_voxel >= 0.0 && self.init_voxel.is_finite()) {
            return Err(SceneError::InvalidConfig(format!("init_voxel = {} must be finite and non-negative", self.init_voxel)));
        }
        Ok(())
    }

    /// Applies a `key=value` override. Keys are dotted paths into the
    /// serialized config; values are parsed as JSON, falling back to a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), SceneError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SceneError::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| SceneError::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let updated: PipelineConfig =
            serde_json::from_value(tree).map_err(|e| SceneError::InvalidConfig(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
