//! Shared test fixtures: random small scenes and a central-difference
//! gradient oracle that only ever calls the forward renderer.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slgs::rasterizer::{render, render_backward, render_with_state};
use slgs::scene::{axis_angle, logit, normalize_quat, Camera, Gaussian3D, GaussianCloud, Granularity, Vec3};

pub const GRANS: [Granularity; 2] = [Granularity::Whole, Granularity::Part];

pub struct RandomScene {
    pub cloud: GaussianCloud,
    pub cam: Camera,
    pub color_weights: Vec<f64>,
    pub feature_weights: BTreeMap<Granularity, Vec<f64>>,
}

/// Up to 10 Gaussians in front of a 16×16 camera with a non-trivial pose.
pub fn random_scene(seed: u64) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 16;
    let mut cam = Camera::new(20.0, 22.0, size, size);
    cam.cx = 7.6;
    cam.cy = 8.3;
    let axis = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    cam.rotation = axis_angle(&axis);
    cam.translation = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));

    let dim = 3;
    let mut cloud = GaussianCloud::new(dim);
    let n = rng.random_range(1..=10);
    for _ in 0..n {
        let z: f64 = rng.random_range(3.0..6.0);
        let pc = Vec3::new(rng.random_range(-0.3..0.3) * z, rng.random_range(-0.3..0.3) * z, z);
        let mean = cam.rotation.transpose() * (pc - cam.translation);
        let log_scale = Vec3::from_fn(|_, _| rng.random_range((z / 20.0).ln()..(3.0 * z / 20.0).ln()));
        let rotation = normalize_quat([
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        let mut g = Gaussian3D {
            mean,
            log_scale,
            rotation,
            opacity_logit: logit(rng.random_range(0.2..0.9)),
            color: Vec3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            sem_code: BTreeMap::new(),
        };
        for gran in GRANS {
            g.sem_code.insert(gran, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        cloud.gaussians.push(g);
    }
    let npix = size * size;
    let color_weights = (0..npix * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feature_weights = GRANS
        .iter()
        .map(|g| (*g, (0..npix * dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    RandomScene { cloud, cam, color_weights, feature_weights }
}

impl RandomScene {
    /// Linear functional of the rendered images.
    pub fn loss(&self, cloud: &GaussianCloud, cam: &Camera) -> f64 {
        let out = render(cloud, cam, &GRANS).unwrap();
        let mut total: f64 = out.color.iter().zip(&self.color_weights).map(|(a, b)| a * b).sum();
        for (gran, w) in &self.feature_weights {
            total += out.features[gran].iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    }
}

/// Max error per parameter group, normalized by the largest magnitude in
/// that group.
#[derive(Debug, Default, Clone)]
pub struct GroupErrors {
    pub errors: BTreeMap<&'static str, f64>,
}

impl GroupErrors {
    pub fn worst(&self) -> f64 {
        self.errors.values().copied().fold(0.0, f64::max)
    }
}

fn group_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Compares analytic gradients against central differences with step `h`.
pub fn check_gradients(scene: &RandomScene, h: f64) -> GroupErrors {
    let (_, state) = render_with_state(&scene.cloud, &scene.cam, &GRANS).unwrap();
    let grads = render_backward(
        &scene.cloud,
        &scene.cam,
        &state,
        &scene.color_weights,
        &scene.feature_weights,
        true,
    )
    .unwrap();

    let n = scene.cloud.len();
    let d = scene.cloud.semantic_dim;
    let perturbed = |edit: &dyn Fn(&mut GaussianCloud, f64)| {
        central_difference(
            |step| {
                let mut c = scene.cloud.clone();
                edit(&mut c, step);
                scene.loss(&c, &scene.cam)
            },
            h,
        )
    };

    let mut out = GroupErrors::default();
    let mut push = |name: &'static str, a: Vec<f64>, f: Vec<f64>| {
        out.errors.insert(name, group_error(&a, &f));
    };

    let mut a = Vec::new();
    let mut f = Vec::new();
    for i in 0..n {
        for k in 0..3 {
            a.push(grads.mean[i][k]);
            f.push(perturbed(&|c, s| c.gaussians[i].mean[k] += s));
        }
    }
    push("mean", a, f);

    let (mut a, mut f) = (Vec::new(), Vec::new());
    for i in 0..n {
        for k in 0..3 {
            a.push(grads.log_scale[i][k]);
            f.push(perturbed(&|c, s| c.gaussians[i].log_scale[k] += s));
        }
    }
    push("log_scale", a, f);

    let (mut a, mut f) = (Vec::new(), Vec::new());
    for i in 0..n {
        for k in 0..4 {
            a.push(grads.rotation[i][k]);
            f.push(perturbed(&|c, s| c.gaussians[i].rotation[k] += s));
        }
    }
    push("rotation", a, f);

    let (mut a, mut f) = (Vec::new(), Vec::new());
    for i in 0..n {
        a.push(grads.opacity_logit[i]);
        f.push(perturbed(&|c, s| c.gaussians[i].opacity_logit += s));
    }
    push("opacity_logit", a, f);

    let (mut a, mut f) = (Vec::new(), Vec::new());
    for i in 0..n {
        for k in 0..3 {
            a.push(grads.color[i][k]);
            f.push(perturbed(&|c, s| c.gaussians[i].color[k] += s));
        }
    }
    push("color", a, f);

    let (mut a, mut f) = (Vec::new(), Vec::new());
    for gran in GRANS {
        for i in 0..n {
            for k in 0..d {
                a.push(grads.sem_code[&gran][i * d + k]);
                f.push(perturbed(&|c, s| c.gaussians[i].sem_code.get_mut(&gran).unwrap()[k] += s));
            }
        }
    }
    push("sem_code", a, f);

    let pose = grads.pose.expect("pose gradient requested");
    let (mut a, mut f) = (Vec::new(), Vec::new());
    for k in 0..6 {
        a.push(pose[k]);
        f.push(central_difference(
            |step| {
                let mut tangent = [0.0; 6];
                tangent[k] = step;
                scene.loss(&scene.cloud, &scene.cam.retract(&tangent))
            },
            h,
        ));
    }
    push("pose", a, f);
    out
}

/// Runs the three-step alignment on the training views of a synthetic
/// scene, directly from memory.
pub fn align_synthetic(
    scene: &slgs::io::synthetic::SyntheticScene,
    cfg: &slgs::PipelineConfig,
) -> slgs::alignment::AlignmentResult {
    slgs::alignment::align(&scene.masksets, &scene.features, &scene.fields, &scene.points, &scene.cameras, cfg).unwrap()
}

/// Precision, recall and F1 of `found` against `truth`.
pub fn pair_scores<T: Ord>(found: &std::collections::BTreeSet<T>, truth: &std::collections::BTreeSet<T>) -> (f64, f64, f64) {
    let hit = found.intersection(truth).count() as f64;
    let p = if found.is_empty() { 1.0 } else { hit / found.len() as f64 };
    let r = if truth.is_empty() { 1.0 } else { hit / truth.len() as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}
