mod common;

use common::align_synthetic;
use slgs::io::ingest_stereo_init;
use slgs::io::synthetic::{generate_synthetic, SyntheticOptions, SyntheticScene};
use slgs::pipeline::{fit_codecs, semantic_targets};
use slgs::scene::Mat3;
use slgs::trainer::{mean_psnr, stage_a, stage_b, TrainOptions};
use slgs::{Camera, PipelineConfig};

fn small(seed: u64) -> SyntheticScene {
    generate_synthetic(&SyntheticOptions { seed, objects: 4, width: 32, height: 32, embed_dim: 32, ..Default::default() })
        .unwrap()
}

fn rotation_error(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a * b.transpose()).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

#[test]
fn pose_refinement_reduces_rotation_error() {
    let scene = small(0);
    let truth: Vec<Camera> = scene.training_views.iter().map(|v| scene.cameras[*v].clone()).collect();
    let images: Vec<_> = scene.training_views.iter().map(|v| scene.images[*v].clone()).collect();
    let angle = 0.5f64.to_radians();
    let axes = [[0.6, 0.8, 0.0], [0.0, -0.6, 0.8]];
    let mut perturbed = vec![truth[0].clone()];
    for (c, a) in truth[1..].iter().zip(axes) {
        perturbed.push(c.retract(&[0.0, 0.0, 0.0, a[0] * angle, a[1] * angle, a[2] * angle]));
    }
    let before: Vec<f64> = perturbed.iter().zip(&truth).map(|(p, t)| rotation_error(&p.rotation, &t.rotation)).collect();

    let mut cfg = PipelineConfig::default();
    cfg.iterations_rgb = 300;
    cfg.densify.start = usize::MAX;
    let out = stage_a(scene.gt_cloud.clone(), perturbed, &images, &cfg, &TrainOptions::default()).unwrap();
    // the first camera anchors the gauge and stays put
    assert_eq!(out.cameras[0], truth[0]);
    for k in 1..truth.len() {
        let after = rotation_error(&out.cameras[k].rotation, &truth[k].rotation);
        assert!(after < before[k], "camera {k}: {:.4}° -> {:.4}°", before[k].to_degrees(), after.to_degrees());
    }
}

struct Trained {
    psnr_a: f64,
    psnr_b: f64,
    losses_a: Vec<f64>,
    losses: Vec<f64>,
}

fn train_both(scene: &SyntheticScene, cfg: &PipelineConfig) -> Trained {
    let train = &scene.training_views;
    let cams: Vec<Camera> = train.iter().map(|v| scene.cameras[*v].clone()).collect();
    let images: Vec<_> = train.iter().map(|v| scene.images[*v].clone()).collect();
    let cloud = ingest_stereo_init(&scene.point_cloud, Some(0.1), cfg.semantic_dim).unwrap();
    let a = stage_a(cloud, cams, &images, cfg, &TrainOptions::default()).unwrap();
    let psnr_a = mean_psnr(&a.cloud, &a.cameras, &images).unwrap();
    let a_losses = a.log.rows.iter().map(|r| r.loss).collect();

    let result = align_synthetic(scene, cfg);
    let codecs = fit_codecs(&result, &scene.features, cfg).unwrap();
    let targets = semantic_targets(&result, &scene.features, &codecs, train).unwrap();
    let opts = TrainOptions { log_every: 10, ..TrainOptions::default() };
    let b = stage_b(a.cloud, &a.cameras, &images, &targets, cfg, &opts).unwrap();
    let psnr_b = mean_psnr(&b.cloud, &a.cameras, &images).unwrap();
    Trained { psnr_a, psnr_b, losses_a: a_losses, losses: b.log.rows.iter().map(|r| r.loss).collect() }
}

#[test]
fn default_training_lowers_losses_and_keeps_image_quality() {
    let scene = small(1);
    let t = train_both(&scene, &PipelineConfig::default());
    eprintln!("stage A {:.2} dB, stage B {:.2} dB", t.psnr_a, t.psnr_b);
    assert!(t.psnr_a > 25.0, "stage A reached only {:.2} dB", t.psnr_a);
    assert!(t.psnr_b >= t.psnr_a - 1.0, "stage B fell from {:.2} to {:.2} dB", t.psnr_a, t.psnr_b);
    assert!(t.losses_a.last().unwrap() < t.losses_a.first().unwrap());
    assert!(t.losses.iter().all(|l| l.is_finite()));
    assert!(t.losses.last().unwrap() < t.losses.first().unwrap());
}
