mod common;

use common::{check_gradients, random_scene, GRANS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slgs::rasterizer::{render, render_with_state};

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..8 {
        let scene = random_scene(1000 + seed);
        let errs = check_gradients(&scene, 1e-6);
        for (group, err) in &errs.errors {
            assert!(*err < 1e-4, "seed {seed}: group {group} relative error {err:e}");
        }
    }
}

#[test]
fn blend_weights_sum_to_alpha() {
    for seed in 0..20 {
        let scene = random_scene(2000 + seed);
        let (out, state) = render_with_state(&scene.cloud, &scene.cam, &GRANS).unwrap();
        let sums = state.blend_weight_sums(&scene.cam);
        for (s, a) in sums.iter().zip(&out.alpha) {
            assert!((s - a).abs() < 1e-9);
            assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn input_permutation_leaves_render_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        let scene = random_scene(3000 + seed);
        let base = render(&scene.cloud, &scene.cam, &GRANS).unwrap();
        let mut shuffled = scene.cloud.clone();
        shuffled.gaussians.shuffle(&mut rng);
        let other = render(&shuffled, &scene.cam, &GRANS).unwrap();
        assert_eq!(base.color, other.color);
        assert_eq!(base.features, other.features);
        assert_eq!(base.alpha, other.alpha);
    }
}
