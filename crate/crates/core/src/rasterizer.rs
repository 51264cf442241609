//! Tile-based software rasterizer for Gaussian clouds.
//!
//! Gaussians are projected with the EWA approximation, sorted once per view
//! by camera depth and binned into 16×16 tiles. Each pixel composites its
//! tile's contributors front to back; color and semantic codes share the
//! blend weights and are produced in one fused pass. The backward pass
//! replays the compositing in reverse, recovering transmittance by division,
//! and pushes gradients through the projection into every Gaussian field and
//! optionally the camera pose.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{quat_to_matrix, Camera, GaussianCloud, Granularity, Mat3, Vec3};

pub const TILE_SIZE: usize = 16;
/// Upper clamp on per-Gaussian alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance would fall below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Low-pass floor added to the diagonal of every 2D covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("forward/backward mismatch")]
    StaleForward,
    #[error("cloud has no semantic codes for granularity {0}")]
    MissingGranularity(Granularity),
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
}

/// A Gaussian projected into one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    /// Regularized screen-space covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub parent: usize,
    pub opacity: f64,
    /// Half-widths of the bounding box outside which alpha < `ALPHA_MIN`.
    pub extent: [f64; 2],
    cam_point: Vec3,
    jacobian: Matrix2x3<f64>,
    cov_cam: Mat3,
}

/// Perspective Jacobian of `(u, v)` with respect to the camera-space point.
fn jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Projects every Gaussian in front of the near plane whose footprint can
/// reach the image. The result is sorted by ascending depth, ties broken by
/// cloud index.
pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Vec<Projected2D> {
    let w = cam.rotation;
    let mut out: Vec<Projected2D> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(parent, g)| {
            let t = w * g.mean + cam.translation;
            if t.z <= cam.near {
                return None;
            }
            let opacity = g.opacity();
            // alpha ≥ ALPHA_MIN needs Mahalanobis² ≤ 2 ln(o / ALPHA_MIN)
            let reach = 2.0 * (opacity / ALPHA_MIN).ln();
            if !(reach > 0.0) {
                return None;
            }
            let cov_cam = w * crate::scene::covariance(g) * w.transpose();
            let j = jacobian(cam, &t);
            let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
            if !(det > 0.0) {
                return None;
            }
            let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
            let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
            let extent = [(reach * cov2d[(0, 0)]).sqrt(), (reach * cov2d[(1, 1)]).sqrt()];
            let off_screen = mean2d.x + extent[0] < 0.0
                || mean2d.y + extent[1] < 0.0
                || mean2d.x - extent[0] > (cam.width - 1) as f64
                || mean2d.y - extent[1] > (cam.height - 1) as f64;
            if off_screen || !mean2d.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(Projected2D {
                mean2d,
                cov2d,
                conic,
                depth: t.z,
                parent,
                opacity,
                extent,
                cam_point: t,
                jacobian: j,
                cov_cam,
            })
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.parent.cmp(&b.parent)));
    out
}

/// Rendered images for one view. Pixel `(x, y)` sits at `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H×W×3
    pub color: Vec<f64>,
    /// H×W×d per granularity
    pub features: BTreeMap<Granularity, Vec<f64>>,
    /// H×W
    pub alpha: Vec<f64>,
    /// Number of Gaussians blended into each pixel.
    pub contributors: Vec<u32>,
    pub semantic_dim: usize,
}

impl RenderOutput {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn feature_at(&self, gran: Granularity, x: usize, y: usize) -> &[f64] {
        let d = self.semantic_dim;
        let i = (y * self.width + x) * d;
        &self.features[&gran][i..i + d]
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    projected: Vec<Projected2D>,
    tiles: Vec<Vec<usize>>,
    final_transmittance: Vec<f64>,
    /// Per pixel, one past the last tile-list position that contributed.
    last_contributor: Vec<u32>,
    granularities: Vec<Granularity>,
    channels: Vec<f64>,
    fingerprint: u64,
}

impl ForwardState {
    pub fn projected(&self) -> &[Projected2D] {
        &self.projected
    }

    /// Per pixel sum of blend weights `α_i Π_{j<i}(1-α_j)`, accumulated
    /// directly rather than from transmittance.
    /// Calls `f(pixel, parent, weight, depth)` for every contribution in
    /// compositing order.
    pub fn for_each_contribution(&self, cam: &Camera, mut f: impl FnMut(usize, usize, f64, f64)) {
        for (tile, list) in self.tiles.iter().enumerate() {
            for (x, y) in tile_pixels(cam, tile) {
                let pix = y * cam.width + x;
                let mut t = 1.0;
                let end = self.last_contributor[pix] as usize;
                for &idx in &list[..end] {
                    let p = &self.projected[idx];
                    if let Some(a) = eval_alpha(p, x, y) {
                        f(pix, p.parent, a.alpha * t, p.depth);
                        t *= 1.0 - a.alpha;
                    }
                }
            }
        }
    }

    /// Sum of blend weights per pixel.
    pub fn blend_weight_sums(&self, cam: &Camera) -> Vec<f64> {
        let mut sums = vec![0.0; cam.width * cam.height];
        self.for_each_contribution(cam, |pix, _, w, _| sums[pix] += w);
        sums
    }

    /// Parent index of the largest blend weight per pixel; ties go to the
    /// nearer contributor.
    pub fn dominant_contributors(&self, cam: &Camera) -> Vec<Option<usize>> {
        let mut best: Vec<(f64, Option<usize>)> = vec![(0.0, None); cam.width * cam.height];
        self.for_each_contribution(cam, |pix, parent, w, _| {
            if w > best[pix].0 {
                best[pix] = (w, Some(parent));
            }
        });
        best.into_iter().map(|(_, p)| p).collect()
    }

    /// Weight-normalized camera depth per pixel, `None` where nothing
    /// contributes.
    pub fn expected_depth(&self, cam: &Camera) -> Vec<Option<f64>> {
        let mut acc = vec![(0.0, 0.0); cam.width * cam.height];
        self.for_each_contribution(cam, |pix, _, w, z| {
            acc[pix].0 += w * z;
            acc[pix].1 += w;
        });
        acc.into_iter().map(|(wz, w)| (w > 0.0).then(|| wz / w)).collect()
    }
}

fn fingerprint(cloud: &GaussianCloud, cam: &Camera, grans: &[Granularity]) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for v in [cam.fx, cam.fy, cam.cx, cam.cy, cam.near] {
        put(v);
    }
    cam.rotation.iter().chain(cam.translation.iter()).for_each(|v| put(*v));
    for g in &cloud.gaussians {
        g.mean.iter().chain(g.log_scale.iter()).chain(g.color.iter()).for_each(|v| put(*v));
        g.rotation.iter().for_each(|v| put(*v));
        put(g.opacity_logit);
        for gran in grans {
            if let Some(code) = g.sem_code.get(gran) {
                code.iter().for_each(|v| put(*v));
            }
        }
    }
    let mut h2 = DefaultHasher::new();
    h.finish().hash(&mut h2);
    (cam.width, cam.height, cloud.len(), grans).hash(&mut h2);
    h2.finish()
}

fn tiles_x(cam: &Camera) -> usize {
    cam.width.div_ceil(TILE_SIZE)
}

fn tiles_y(cam: &Camera) -> usize {
    cam.height.div_ceil(TILE_SIZE)
}

fn tile_pixels(cam: &Camera, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % tiles_x(cam);
    let ty = tile / tiles_x(cam);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width);
    let y1 = (y0 + TILE_SIZE).min(cam.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn bin_tiles(projected: &[Projected2D], cam: &Camera) -> Vec<Vec<usize>> {
    let (nx, ny) = (tiles_x(cam), tiles_y(cam));
    let mut tiles = vec![Vec::new(); nx * ny];
    let clamp_tile = |v: f64, n: usize| -> usize { (v.floor().max(0.0) as usize / TILE_SIZE).min(n - 1) };
    for (idx, p) in projected.iter().enumerate() {
        let x0 = clamp_tile(p.mean2d.x - p.extent[0], nx);
        let x1 = clamp_tile(p.mean2d.x + p.extent[0], nx);
        let y0 = clamp_tile(p.mean2d.y - p.extent[1], ny);
        let y1 = clamp_tile(p.mean2d.y + p.extent[1], ny);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * nx + tx].push(idx);
            }
        }
    }
    tiles
}

struct AlphaEval {
    alpha: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

#[inline]
fn eval_alpha(p: &Projected2D, x: usize, y: usize) -> Option<AlphaEval> {
    let dx = x as f64 - p.mean2d.x;
    let dy = y as f64 - p.mean2d.y;
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 {
        return None;
    }
    let gauss = power.exp();
    let raw = p.opacity * gauss;
    if raw < ALPHA_MIN {
        return None;
    }
    let clamped = raw > ALPHA_MAX;
    Some(AlphaEval { alpha: raw.min(ALPHA_MAX), gauss, clamped, dx, dy })
}

/// Per-Gaussian channel vectors `[r, g, b, codes...]` for the requested
/// granularities.
fn gather_channels(cloud: &GaussianCloud, grans: &[Granularity]) -> Result<Vec<f64>, RasterError> {
    let k = 3 + grans.len() * cloud.semantic_dim;
    let mut channels = Vec::with_capacity(cloud.len() * k);
    for g in &cloud.gaussians {
        channels.extend(g.color.iter());
        for gran in grans {
            let code = g.sem_code.get(gran).ok_or(RasterError::MissingGranularity(*gran))?;
            channels.extend(code.iter());
        }
    }
    Ok(channels)
}

struct TileForward {
    /// Per tile pixel: channel accumulation (K values).
    accum: Vec<f64>,
    transmittance: Vec<f64>,
    last: Vec<u32>,
    count: Vec<u32>,
}

/// Renders color plus the requested semantic granularities.
pub fn render(cloud: &GaussianCloud, cam: &Camera, granularities: &[Granularity]) -> Result<RenderOutput, RasterError> {
    render_with_state(cloud, cam, granularities).map(|(out, _)| out)
}

/// Renders and keeps the state required by [`render_backward`].
pub fn render_with_state(
    cloud: &GaussianCloud,
    cam: &Camera,
    granularities: &[Granularity],
) -> Result<(RenderOutput, ForwardState), RasterError> {
    let grans: Vec<Granularity> = granularities.to_vec();
    let channels = gather_channels(cloud, &grans)?;
    let k = 3 + grans.len() * cloud.semantic_dim;
    let projected = project(cloud, cam);
    let tiles = bin_tiles(&projected, cam);

    let tile_results: Vec<TileForward> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let n = tile_pixels(cam, tile).count();
            let mut res = TileForward {
                accum: vec![0.0; n * k],
                transmittance: vec![1.0; n],
                last: vec![0; n],
                count: vec![0; n],
            };
            for (local, (x, y)) in tile_pixels(cam, tile).enumerate() {
                let acc = &mut res.accum[local * k..(local + 1) * k];
                let mut t = 1.0;
                for (pos, &idx) in list.iter().enumerate() {
                    let p = &projected[idx];
                    let Some(a) = eval_alpha(p, x, y) else { continue };
                    let next_t = t * (1.0 - a.alpha);
                    if next_t < TRANSMITTANCE_MIN {
                        break;
                    }
                    let weight = a.alpha * t;
                    let ch = &channels[p.parent * k..(p.parent + 1) * k];
                    for (o, c) in acc.iter_mut().zip(ch) {
                        *o += weight * c;
                    }
                    t = next_t;
                    res.last[local] = pos as u32 + 1;
                    res.count[local] += 1;
                }
                res.transmittance[local] = t;
            }
            res
        })
        .collect();

    let npix = cam.width * cam.height;
    let d = cloud.semantic_dim;
    let mut out = RenderOutput {
        width: cam.width,
        height: cam.height,
        color: vec![0.0; npix * 3],
        features: grans.iter().map(|g| (*g, vec![0.0; npix * d])).collect(),
        alpha: vec![0.0; npix],
        contributors: vec![0; npix],
        semantic_dim: d,
    };
    let mut final_transmittance = vec![1.0; npix];
    let mut last_contributor = vec![0u32; npix];
    for (tile, res) in tile_results.iter().enumerate() {
        for (local, (x, y)) in tile_pixels(cam, tile).enumerate() {
            let pix = y * cam.width + x;
            let acc = &res.accum[local * k..(local + 1) * k];
            out.color[pix * 3..pix * 3 + 3].copy_from_slice(&acc[..3]);
            for (gi, gran) in grans.iter().enumerate() {
                let src = &acc[3 + gi * d..3 + (gi + 1) * d];
                out.features.get_mut(gran).unwrap()[pix * d..(pix + 1) * d].copy_from_slice(src);
            }
            out.alpha[pix] = 1.0 - res.transmittance[local];
            out.contributors[pix] = res.count[local];
            final_transmittance[pix] = res.transmittance[local];
            last_contributor[pix] = res.last[local];
        }
    }
    let state = ForwardState {
        projected,
        tiles,
        final_transmittance,
        last_contributor,
        fingerprint: fingerprint(cloud, cam, &grans),
        granularities: grans,
        channels,
    };
    Ok((out, state))
}

/// Gradients of a scalar loss with respect to every Gaussian field.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGradients {
    pub mean: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    /// N×d per granularity.
    pub sem_code: BTreeMap<Granularity, Vec<f64>>,
    /// Norm of the screen-space mean gradient, used by densification.
    pub mean2d_norm: Vec<f64>,
    /// Tangent `(ρ, φ)` matching [`Camera::retract`].
    pub pose: Option<[f64; 6]>,
}

impl CloudGradients {
    pub fn zeros(n: usize, dim: usize, grans: &[Granularity]) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            sem_code: grans.iter().map(|g| (*g, vec![0.0; n * dim])).collect(),
            mean2d_norm: vec![0.0; n],
            pose: None,
        }
    }

    /// Largest absolute entry across all Gaussian fields.
    pub fn max_abs(&self) -> f64 {
        let v3 = |v: &Vec<Vec3>| v.iter().map(|x| x.abs().max()).fold(0.0, f64::max);
        let mut m = v3(&self.mean).max(v3(&self.log_scale)).max(v3(&self.color));
        m = self.rotation.iter().flatten().fold(m, |a, b| a.max(b.abs()));
        m = self.opacity_logit.iter().fold(m, |a, b| a.max(b.abs()));
        m = self.sem_code.values().flatten().fold(m, |a, b| a.max(b.abs()));
        if let Some(p) = self.pose {
            m = p.iter().fold(m, |a, b| a.max(b.abs()));
        }
        m
    }

    /// Adds `other` scaled by `s`.
    pub fn add_scaled(&mut self, other: &CloudGradients, s: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b * s;
        }
        for (a, b) in self.log_scale.iter_mut().zip(&other.log_scale) {
            *a += b * s;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b * s;
        }
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for k in 0..4 {
                a[k] += b[k] * s;
            }
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += b * s;
        }
        for (gran, src) in &other.sem_code {
            let dst = self.sem_code.entry(*gran).or_insert_with(|| vec![0.0; src.len()]);
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b * s;
            }
        }
        for (a, b) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *a += b * s.abs();
        }
        if let Some(p) = other.pose {
            let dst = self.pose.get_or_insert([0.0; 6]);
            for k in 0..6 {
                dst[k] += p[k] * s;
            }
        }
    }
}

/// Per projected Gaussian screen-space gradient.
#[derive(Clone)]
struct ScreenGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    channels: Vec<f64>,
}

/// Backpropagates per-pixel gradients on color (H×W×3) and on each rendered
/// granularity's codes (H×W×d) through a matching forward pass.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    state: &ForwardState,
    d_color: &[f64],
    d_features: &BTreeMap<Granularity, Vec<f64>>,
    with_pose: bool,
) -> Result<CloudGradients, RasterError> {
    if fingerprint(cloud, cam, &state.granularities) != state.fingerprint {
        return Err(RasterError::StaleForward);
    }
    let npix = cam.width * cam.height;
    let d = cloud.semantic_dim;
    let grans = &state.granularities;
    let k = 3 + grans.len() * d;
    if d_color.len() != npix * 3 {
        return Err(RasterError::GradientShape { expected: npix * 3, got: d_color.len() });
    }
    for (gran, g) in d_features {
        if !grans.contains(gran) {
            return Err(RasterError::MissingGranularity(*gran));
        }
        if g.len() != npix * d {
            return Err(RasterError::GradientShape { expected: npix * d, got: g.len() });
        }
    }

    let projected = &state.projected;
    let channels = &state.channels;

    // screen-space gradients per tile, aligned with each tile's list
    let per_tile: Vec<Vec<ScreenGrad>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![
                ScreenGrad { mean2d: [0.0; 2], conic: [0.0; 3], opacity: 0.0, channels: vec![0.0; k] };
                list.len()
            ];
            let mut d_out = vec![0.0; k];
            let mut behind = vec![0.0; k];
            for (x, y) in tile_pixels(cam, tile) {
                let pix = y * cam.width + x;
                d_out[..3].copy_from_slice(&d_color[pix * 3..pix * 3 + 3]);
                for (gi, gran) in grans.iter().enumerate() {
                    let dst = &mut d_out[3 + gi * d..3 + (gi + 1) * d];
                    match d_features.get(gran) {
                        Some(g) => dst.copy_from_slice(&g[pix * d..(pix + 1) * d]),
                        None => dst.fill(0.0),
                    }
                }
                if d_out.iter().all(|v| *v == 0.0) {
                    continue;
                }
                behind.fill(0.0);
                let mut t = state.final_transmittance[pix];
                let end = state.last_contributor[pix] as usize;
                for pos in (0..end).rev() {
                    let p = &projected[list[pos]];
                    let Some(a) = eval_alpha(p, x, y) else { continue };
                    t /= 1.0 - a.alpha;
                    let weight = a.alpha * t;
                    let ch = &channels[p.parent * k..(p.parent + 1) * k];
                    let sg = &mut local[pos];
                    let mut d_alpha = 0.0;
                    for c in 0..k {
                        sg.channels[c] += weight * d_out[c];
                        d_alpha += (ch[c] - behind[c]) * d_out[c];
                        behind[c] = a.alpha * ch[c] + (1.0 - a.alpha) * behind[c];
                    }
                    d_alpha *= t;
                    if a.clamped {
                        continue;
                    }
                    sg.opacity += a.gauss * d_alpha;
                    let d_power = p.opacity * a.gauss * d_alpha;
                    let [ca, cb, cc] = p.conic;
                    // power = -½(a dx² + c dy²) - b dx dy with d = pixel - mean
                    sg.mean2d[0] += d_power * (ca * a.dx + cb * a.dy);
                    sg.mean2d[1] += d_power * (cb * a.dx + cc * a.dy);
                    sg.conic[0] += -0.5 * a.dx * a.dx * d_power;
                    sg.conic[1] += -a.dx * a.dy * d_power;
                    sg.conic[2] += -0.5 * a.dy * a.dy * d_power;
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad { mean2d: [0.0; 2], conic: [0.0; 3], opacity: 0.0, channels: vec![0.0; k] }; projected.len()];
    for (list, local) in state.tiles.iter().zip(&per_tile) {
        for (&idx, sg) in list.iter().zip(local) {
            let dst = &mut screen[idx];
            dst.mean2d[0] += sg.mean2d[0];
            dst.mean2d[1] += sg.mean2d[1];
            for c in 0..3 {
                dst.conic[c] += sg.conic[c];
            }
            dst.opacity += sg.opacity;
            for (a, b) in dst.channels.iter_mut().zip(&sg.channels) {
                *a += b;
            }
        }
    }

    let mut grads = CloudGradients::zeros(cloud.len(), d, grans);
    let w = cam.rotation;
    let mut pose_rho = Vec3::zeros();
    let mut pose_phi = Vec3::zeros();
    for (p, sg) in projected.iter().zip(&screen) {
        let i = p.parent;
        let g = &cloud.gaussians[i];
        grads.color[i] = Vec3::new(sg.channels[0], sg.channels[1], sg.channels[2]);
        for (gi, gran) in grans.iter().enumerate() {
            grads.sem_code.get_mut(gran).unwrap()[i * d..(i + 1) * d]
                .copy_from_slice(&sg.channels[3 + gi * d..3 + (gi + 1) * d]);
        }
        let o = p.opacity;
        grads.opacity_logit[i] = sg.opacity * o * (1.0 - o);
        grads.mean2d_norm[i] = (sg.mean2d[0].powi(2) + sg.mean2d[1].powi(2)).sqrt();

        // conic → 2D covariance: dM = -Q dQ Q
        let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let g_q = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let g_m = -(q * g_q * q);
        let j = &p.jacobian;
        let g_cov_cam = j.transpose() * g_m * j;
        let g_j = 2.0 * g_m * j * p.cov_cam;

        // camera-space mean
        let t = &p.cam_point;
        let (fx, fy) = (cam.fx, cam.fy);
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let (gu, gv) = (sg.mean2d[0], sg.mean2d[1]);
        let g_t = Vec3::new(
            gu * fx * iz + g_j[(0, 2)] * (-fx * iz2),
            gv * fy * iz + g_j[(1, 2)] * (-fy * iz2),
            -gu * fx * t.x * iz2 - gv * fy * t.y * iz2
                + g_j[(0, 0)] * (-fx * iz2)
                + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
                + g_j[(1, 1)] * (-fy * iz2)
                + g_j[(1, 2)] * (2.0 * fy * t.y * iz3),
        );
        grads.mean[i] = w.transpose() * g_t;

        // world covariance Σ = M Mᵀ with M = R S
        let g_sigma = w.transpose() * g_cov_cam * w;
        let qn = crate::scene::normalize_quat(g.rotation);
        let r = quat_to_matrix(qn);
        let s = g.scale();
        let m = r * Mat3::from_diagonal(&s);
        let g_mm = 2.0 * g_sigma * m;
        let g_r = g_mm * Mat3::from_diagonal(&s);
        let g_s = r.transpose() * g_mm;
        grads.log_scale[i] = Vec3::new(g_s[(0, 0)] * s.x, g_s[(1, 1)] * s.y, g_s[(2, 2)] * s.z);
        grads.rotation[i] = quat_backward(g.rotation, qn, &g_r);

        if with_pose {
            pose_rho += g_t;
            pose_phi += t.cross(&g_t);
            let sigma = m * m.transpose();
            let g_w = 2.0 * g_cov_cam * w * sigma;
            let x = g_w * w.transpose();
            pose_phi += Vec3::new(x[(2, 1)] - x[(1, 2)], x[(0, 2)] - x[(2, 0)], x[(1, 0)] - x[(0, 1)]);
        }
    }
    if with_pose {
        grads.pose = Some([pose_rho.x, pose_rho.y, pose_rho.z, pose_phi.x, pose_phi.y, pose_phi.z]);
    }
    Ok(grads)
}

/// Gradient with respect to the raw quaternion `raw`, given the gradient on
/// the rotation matrix built from its normalization `qn`.
fn quat_backward(raw: [f64; 4], qn: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = qn;
    let gq = [
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    ];
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|k| qn[k] * gq[k]).sum();
    std::array::from_fn(|k| (gq[k] - qn[k] * dot) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian3D};

    fn cam64() -> Camera {
        let mut cam = Camera::new(100.0, 100.0, 64, 64);
        cam.cx = 32.0;
        cam.cy = 32.0;
        cam
    }

    fn single(mean: Vec3, scale: f64, opacity: f64, color: Vec3) -> GaussianCloud {
        let mut cloud = GaussianCloud::new(3);
        let mut g = Gaussian3D::new(mean, scale, opacity, color);
        g.sem_code.insert(Granularity::Whole, vec![0.2, -0.4, 0.9]);
        cloud.gaussians.push(g);
        cloud
    }

    #[test]
    fn on_axis_projection() {
        let cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, Vec3::zeros());
        let p = project(&cloud, &cam64());
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].mean2d.x, p[0].mean2d.y), (32.0, 32.0));
        // (100 · 0.1 / 5)² = 4, plus the floor
        assert!((p[0].cov2d - Matrix2::identity() * (4.0 + COV2D_FLOOR)).abs().max() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cloud = single(Vec3::new(0.0, 0.0, -1.0), 0.1, 0.5, Vec3::zeros());
        assert!(project(&cloud, &cam64()).is_empty());
    }

    #[test]
    fn empty_cloud_renders_zero() {
        let cloud = GaussianCloud::new(3);
        let out = render(&cloud, &cam64(), &[]).unwrap();
        assert!(out.color.iter().all(|v| *v == 0.0));
        assert!(out.alpha.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let color = Vec3::new(0.2, 0.5, 0.7);
        let cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.1, 1.0 - 1e-12, color);
        let out = render(&cloud, &cam64(), &[Granularity::Whole]).unwrap();
        let pix = 32 * 64 + 32;
        // alpha clamps to ALPHA_MAX
        for c in 0..3 {
            assert!((out.color[pix * 3 + c] - ALPHA_MAX * color[c]).abs() < 1e-12);
        }
        let f = out.feature_at(Granularity::Whole, 32, 32);
        for (a, b) in f.iter().zip([0.2, -0.4, 0.9]) {
            assert!((a - ALPHA_MAX * b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_coincident_half_alpha_gaussians() {
        let mut cloud = GaussianCloud::new(3);
        let c1 = Vec3::new(1.0, 0.0, 0.0);
        let c2 = Vec3::new(0.0, 1.0, 0.0);
        cloud.gaussians.push(Gaussian3D::new(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, c1));
        cloud.gaussians.push(Gaussian3D::new(Vec3::new(0.0, 0.0, 5.0 + 1e-9), 0.1, 0.5, c2));
        let out = render(&cloud, &cam64(), &[]).unwrap();
        let pix = 32 * 64 + 32;
        let expect = c1 * 0.5 + c2 * 0.25;
        for c in 0..3 {
            assert!((out.color[pix * 3 + c] - expect[c]).abs() < 1e-12);
        }
        assert!((out.alpha[pix] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_opacity_renders_nothing() {
        let mut cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.3, 0.5, Vec3::new(1.0, 1.0, 1.0));
        cloud.gaussians[0].opacity_logit = f64::NEG_INFINITY;
        let out = render(&cloud, &cam64(), &[Granularity::Whole]).unwrap();
        assert!(out.color.iter().chain(out.alpha.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn missing_granularity_is_reported() {
        let cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, Vec3::zeros());
        assert_eq!(
            render(&cloud, &cam64(), &[Granularity::Part]).unwrap_err(),
            RasterError::MissingGranularity(Granularity::Part)
        );
    }

    #[test]
    fn stale_state_is_rejected() {
        let mut cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, Vec3::zeros());
        let cam = cam64();
        let (_, state) = render_with_state(&cloud, &cam, &[]).unwrap();
        cloud.gaussians[0].color.x = 0.3;
        let d = vec![0.0; 64 * 64 * 3];
        let err = render_backward(&cloud, &cam, &state, &d, &BTreeMap::new(), false).unwrap_err();
        assert_eq!(err, RasterError::StaleForward);
        assert_eq!(err.to_string(), "forward/backward mismatch");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cloud = single(Vec3::new(0.1, 0.0, 5.0), 0.1, 0.5, Vec3::new(0.3, 0.3, 0.3));
        let cam = cam64();
        let (_, state) = render_with_state(&cloud, &cam, &[Granularity::Whole]).unwrap();
        let d = vec![0.0; 64 * 64 * 3];
        let grads = render_backward(&cloud, &cam, &state, &d, &BTreeMap::new(), true).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn invisible_gaussian_gets_no_color_gradient() {
        let mut cloud = single(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, Vec3::new(0.3, 0.3, 0.3));
        // far off to the side: projects outside the image
        let mut g = Gaussian3D::new(Vec3::new(40.0, 0.0, 5.0), 0.1, 0.5, Vec3::new(1.0, 0.0, 0.0));
        g.sem_code.insert(Granularity::Whole, vec![0.0; 3]);
        cloud.gaussians.push(g);
        let cam = cam64();
        let (_, state) = render_with_state(&cloud, &cam, &[]).unwrap();
        let d = vec![1.0; 64 * 64 * 3];
        let grads = render_backward(&cloud, &cam, &state, &d, &BTreeMap::new(), false).unwrap();
        assert_eq!(grads.color[1], Vec3::zeros());
        assert!(grads.color[0].x > 0.0);
    }

    #[test]
    fn opacity_gradient_matches_central_difference() {
        let mut cloud = single(Vec3::new(0.05, -0.03, 5.0), 0.15, 0.6, Vec3::new(0.3, 0.6, 0.9));
        cloud.gaussians[0].opacity_logit = logit(0.6);
        let cam = cam64();
        let weights: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let loss = |c: &GaussianCloud| -> f64 {
            let out = render(c, &cam, &[]).unwrap();
            out.color.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, state) = render_with_state(&cloud, &cam, &[]).unwrap();
        let grads = render_backward(&cloud, &cam, &state, &weights, &BTreeMap::new(), false).unwrap();
        let h = 1e-6;
        let mut plus = cloud.clone();
        plus.gaussians[0].opacity_logit += h;
        let mut minus = cloud.clone();
        minus.gaussians[0].opacity_logit -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let rel = (grads.opacity_logit[0] - fd).abs() / fd.abs();
        assert!(rel < 1e-4, "analytic {} vs fd {fd}", grads.opacity_logit[0]);
    }

    #[test]
    fn order_of_input_does_not_matter() {
        let mut cloud = GaussianCloud::new(3);
        for k in 0..5 {
            let z = 4.0 + k as f64 * 0.3;
            let mean = Vec3::new(0.05 * k as f64, -0.04 * k as f64, z);
            cloud.gaussians.push(Gaussian3D::new(mean, 0.2, 0.6, Vec3::new(0.1 * k as f64, 0.5, 0.2)));
        }
        let a = render(&cloud, &cam64(), &[]).unwrap();
        cloud.gaussians.reverse();
        let b = render(&cloud, &cam64(), &[]).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.alpha, b.alpha);
    }
}
