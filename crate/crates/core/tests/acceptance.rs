//! Acceptance suite. Runs every headline criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero on any FAIL.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use common::{align_synthetic, check_gradients, pair_scores, random_scene, GRANS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use slgs::alignment::match_score;
use slgs::featcodec::FeatureCodec;
use slgs::io::synthetic::{generate_synthetic, SyntheticOptions};
use slgs::pipeline::{run_align, run_eval, run_fit_codec, run_train_rgb, run_train_sem, render_report, Workspace};
use slgs::query::relevancy_score;
use slgs::rasterizer::render_with_state;
use slgs::PipelineConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let scenes = 24;
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    for seed in 0..scenes {
        let errs = check_gradients(&random_scene(seed), 1e-6);
        for (group, e) in errs.errors {
            if e > worst.0 {
                worst = (e, group, seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 60.0,
        format!("{scenes} scenes, worst relative error {:.2e} ({} in scene {}), {secs:.1}s", worst.0, worst.1, worst.2),
    )
}

fn blending() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let scene = random_scene(10_000 + seed);
        let (out, state) = render_with_state(&scene.cloud, &scene.cam, &GRANS).unwrap();
        let sums = state.blend_weight_sums(&scene.cam);
        for (s, a) in sums.iter().zip(&out.alpha) {
            worst = worst.max((s - a).abs());
        }
    }
    outcome(worst <= 1e-9, format!("100 renders, max |sum of weights - alpha| = {worst:.2e}"))
}

fn alignment_oracle() -> Outcome {
    let cfg = PipelineConfig::default();
    let mut pass = true;
    let mut notes = Vec::new();
    for (seed, objects) in [(0u64, 5usize), (1, 10), (2, 15)] {
        let base = SyntheticOptions { seed, objects, embed_dim: 64, ..Default::default() };
        let exact = generate_synthetic(&base).unwrap();
        let t = Instant::now();
        let res = align_synthetic(&exact, &cfg);
        let secs = t.elapsed().as_secs_f64();
        let (p, r, _) = pair_scores(&res.graph.grouped_pairs(), &exact.gt_pairs(&exact.training_views));

        let noisy = generate_synthetic(&SyntheticOptions { swap_fraction: 0.2, match_noise_px: 2.0, ..base }).unwrap();
        let t = Instant::now();
        let res = align_synthetic(&noisy, &cfg);
        let secs_noisy = t.elapsed().as_secs_f64();
        let (_, _, f1) = pair_scores(&res.graph.grouped_pairs(), &noisy.gt_pairs(&noisy.training_views));

        pass &= p == 1.0 && r == 1.0 && f1 >= 0.95 && secs < 30.0 && secs_noisy < 30.0;
        notes.push(format!("{objects} objects: P={p:.3} R={r:.3} F1(noisy)={f1:.3} {:.1}s", secs.max(secs_noisy)));
    }
    outcome(pass, notes.join("; "))
}

fn scoring() -> Outcome {
    let cfg = PipelineConfig::default();
    let a = match_score(1.0, 0.5, cfg.lang_weight);
    let b = match_score(0.0, 0.4, cfg.lang_weight);
    // hand-evaluated: 0.3·1 + 0.7·0.5 and 0.3·0 + 0.7·0.4
    let pass = (a - 0.65).abs() < 1e-12
        && (b - 0.28).abs() < 1e-12
        && a > cfg.pixel_match_threshold
        && b <= cfg.pixel_match_threshold;
    outcome(pass, format!("S_match = {a:.12} (accept), {b:.12} (reject)"))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn brute_nearest(codec: &FeatureCodec, code: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..codec.len() {
        let d: f64 = codec.code(i).iter().zip(code).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn bijection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let features: Vec<Vec<f64>> = (0..10_000).map(|_| random_unit(&mut rng, 512)).collect();
    let codec = FeatureCodec::fit(&features, 3).unwrap();
    let exact = features.iter().all(|f| {
        let code = codec.encode(f).unwrap().to_vec();
        let back = codec.decode(&code).unwrap().feature;
        back.len() == f.len() && back.iter().zip(f).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let dmin = codec.min_pairwise_distance();
    let mut correct = 0;
    for f in &features {
        let code = codec.encode(f).unwrap();
        let dir = random_unit(&mut rng, 3);
        let radius = 0.49 * dmin * rng.random_range(0.0..1.0f64);
        let noisy: Vec<f64> = code.iter().zip(&dir).map(|(c, d)| c + radius * d).collect();
        let got = codec.decode(&noisy).unwrap();
        let oracle = brute_nearest(&codec, &noisy);
        if got.index == oracle && codec.original(oracle) == f.as_slice() {
            correct += 1;
        }
    }
    outcome(
        exact && correct == features.len(),
        format!(
            "{} entries, round trip {}, noisy decode {correct}/{} (min code distance {dmin:.2e})",
            codec.len(),
            if exact { "bit-exact" } else { "NOT exact" },
            features.len()
        ),
    )
}

fn relevancy() -> Outcome {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let a = relevancy_score(&e(0), &e(0), &[e(1), e(2)]).unwrap();
    let b = relevancy_score(&e(0), &[s, s, 0.0, 0.0], &[vec![s, 0.0, s, 0.0], vec![s, 0.0, 0.0, s]]).unwrap();
    // the other canonicals sit no closer to the semantic vector than the query
    let q = vec![0.5, 0.5, 0.5, 0.5];
    let c = relevancy_score(&[0.7, 0.1, 0.5, 0.5], &q, &[e(2), q.clone(), e(3)]).unwrap();
    let expected = 1.0 / (1.0 + (-1.0f64).exp());
    let pass = (a - 0.7311).abs() < 1e-4 && (a - expected).abs() < 1e-12 && (b - 0.5).abs() < 1e-4 && (c - 0.5).abs() < 1e-4;
    outcome(pass, format!("{a:.6}, {b:.6}, {c:.6}"))
}

struct EndToEnd {
    psnr_a: f64,
    miou: f64,
    macc: f64,
    secs: f64,
    held_out_joint: f64,
    held_out_semantic_only: f64,
}

fn end_to_end() -> EndToEnd {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let scene = generate_synthetic(&SyntheticOptions { seed: 0, held_out_views: 1, ..Default::default() }).unwrap();
    let mut cfg = PipelineConfig::default();
    // objects span about 10 px at 64×64, so the relevancy filter must stay small
    cfg.smoothing_kernel = 3;
    // about one pixel at the object plane
    cfg.init_voxel = 0.07;
    let manifest = scene.write(dir.path(), &cfg).unwrap();
    let mut ws = Workspace::open(&manifest, None, &[], None).unwrap();
    run_align(&mut ws).unwrap();
    run_fit_codec(&mut ws).unwrap();
    let rgb = run_train_rgb(&mut ws).unwrap();
    let images = ws.load_scene().unwrap().images;
    let cameras = ws.cameras().unwrap();
    let report_a = render_report(&rgb, &cameras, &images, &ws.manifest).unwrap();
    run_train_sem(&mut ws).unwrap();
    let eval = run_eval(&mut ws).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let queries = eval.queries.expect("synthetic scenes ship queries");

    let mut ablation = Workspace::open(&manifest, None, &["image_loss_weight=0".to_string()], None).unwrap();
    let semantic_only = run_train_sem(&mut ablation).unwrap();
    let report_b0 = render_report(&semantic_only, &cameras, &images, &ablation.manifest).unwrap();

    EndToEnd {
        psnr_a: report_a.training_psnr.unwrap(),
        miou: queries.mean_iou.unwrap_or(0.0),
        macc: queries.mean_accuracy.unwrap_or(0.0),
        secs,
        held_out_joint: eval.render.held_out_psnr.unwrap(),
        held_out_semantic_only: report_b0.held_out_psnr.unwrap(),
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("gradient correctness", gradients());
    report("blending conservation", blending());
    report("alignment oracle", alignment_oracle());
    report("scoring arithmetic", scoring());
    report("bijection", bijection());
    report("relevancy formula", relevancy());

    let e = end_to_end();
    report(
        "end-to-end synthetic pipeline",
        outcome(
            e.psnr_a >= 30.0 && e.miou >= 0.90 && e.macc == 1.0 && e.secs < 600.0,
            format!("stage A PSNR {:.2} dB, mIoU {:.4}, mAcc {:.4}, {:.0}s", e.psnr_a, e.miou, e.macc, e.secs),
        ),
    );
    let gap = e.held_out_joint - e.held_out_semantic_only;
    report(
        "RGB-assisted training",
        outcome(
            gap >= 2.0,
            format!(
                "held-out PSNR {:.2} dB with image loss vs {:.2} dB without (gap {gap:.2} dB)",
                e.held_out_joint, e.held_out_semantic_only
            ),
        ),
    );

    let failed: BTreeSet<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
