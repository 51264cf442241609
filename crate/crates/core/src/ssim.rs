//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) and its
//! gradient with respect to the first image.
//!
//! Windows are truncated at the border and renormalized, so every pixel is a
//! window center and constant images give the closed-form value.

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k: [f64; WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SIGMA * SIGMA)).exp()
    });
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable zero-padded "same" convolution of one W×H plane.
fn blur(plane: &[f64], width: usize, height: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = x as isize + t as isize - half;
                if sx >= 0 && (sx as usize) < width {
                    acc += kv * plane[y * width + sx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = y as isize + t as isize - half;
                if sy >= 0 && (sy as usize) < height {
                    acc += kv * tmp[sy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn planes(img: &[f64], channels: usize) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|c| img.iter().skip(c).step_by(channels).copied().collect())
        .collect()
}

/// Mean SSIM over all pixels and channels of two interleaved H×W×C images.
pub fn ssim(x: &[f64], y: &[f64], width: usize, height: usize, channels: usize) -> f64 {
    ssim_impl(x, y, width, height, channels, false).0
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &[f64], y: &[f64], width: usize, height: usize, channels: usize) -> (f64, Vec<f64>) {
    let (v, g) = ssim_impl(x, y, width, height, channels, true);
    (v, g.expect("gradient requested"))
}

fn ssim_impl(
    x: &[f64],
    y: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    assert_eq!(x.len(), width * height * channels);
    assert_eq!(y.len(), x.len());
    let k = kernel();
    let npix = width * height;
    let count = (npix * channels) as f64;
    let norm = blur(&vec![1.0; npix], width, height, &k);
    let avg = |p: &[f64]| -> Vec<f64> { blur(p, width, height, &k).iter().zip(&norm).map(|(a, n)| a / n).collect() };

    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    for (c, (xp, yp)) in planes(x, channels).into_iter().zip(planes(y, channels)).enumerate() {
        let mu_x = avg(&xp);
        let mu_y = avg(&yp);
        let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
        let e_xx = avg(&sq(&xp, &xp));
        let e_yy = avg(&sq(&yp, &yp));
        let e_xy = avg(&sq(&xp, &yp));

        let mut d_mu = vec![0.0; npix];
        let mut d_exx = vec![0.0; npix];
        let mut d_exy = vec![0.0; npix];
        for q in 0..npix {
            let (mx, my) = (mu_x[q], mu_y[q]);
            let vx = e_xx[q] - mx * mx;
            let vy = e_yy[q] - my * my;
            let cxy = e_xy[q] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = vx + vy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds_mu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
                let ds_vx = -s / b2;
                let ds_cxy = 2.0 * a1 / (b1 * b2);
                d_mu[q] = (ds_mu - 2.0 * mx * ds_vx - my * ds_cxy) / norm[q];
                d_exx[q] = ds_vx / norm[q];
                d_exy[q] = ds_cxy / norm[q];
            }
        }
        if let Some(g) = grad.as_mut() {
            let b_mu = blur(&d_mu, width, height, &k);
            let b_xx = blur(&d_exx, width, height, &k);
            let b_xy = blur(&d_exy, width, height, &k);
            for p in 0..npix {
                g[p * channels + c] = (b_mu[p] + 2.0 * xp[p] * b_xx[p] + yp[p] * b_xy[p]) / count;
            }
        }
    }
    (total / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window evaluation, independent of the separable path.
    fn ssim_brute(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
        let half = (WINDOW / 2) as isize;
        let g = |d: isize| (-(d * d) as f64 / (2.0 * SIGMA * SIGMA)).exp();
        let mut total = 0.0;
        for cy in 0..h as isize {
            for cx in 0..w as isize {
                let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (px, py) = (cx + dx, cy + dy);
                        if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                            continue;
                        }
                        let wt = g(dx) * g(dy);
                        let i = py as usize * w + px as usize;
                        sw += wt;
                        sx += wt * x[i];
                        sy += wt * y[i];
                        sxx += wt * x[i] * x[i];
                        syy += wt * y[i] * y[i];
                        sxy += wt * x[i] * y[i];
                    }
                }
                let (mx, my) = (sx / sw, sy / sw);
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cxy = sxy / sw - mx * my;
                total += (2.0 * mx * my + C1) * (2.0 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
        total / (w * h) as f64
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 20 * 14 * 3);
        assert!((ssim(&x, &x, 20, 14, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_closed_form() {
        let a = vec![0.0; 16 * 16];
        let b = vec![1.0; 16 * 16];
        let expect = C1 / (1.0 + C1);
        assert!((ssim(&a, &b, 16, 16, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_window_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 19 * 13);
        let y = random_image(&mut rng, 19 * 13);
        assert!((ssim(&x, &y, 19, 13, 1) - ssim_brute(&x, &y, 19, 13)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h, c) = (12, 9, 2);
        let x = random_image(&mut rng, w * h * c);
        let y = random_image(&mut rng, w * h * c);
        let (_, g) = ssim_with_grad(&x, &y, w, h, c);
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += step;
            let mut m = x.clone();
            m[i] -= step;
            let fd = (ssim(&p, &y, w, h, c) - ssim(&m, &y, w, h, c)) / (2.0 * step);
            worst = worst.max((fd - g[i]).abs());
        }
        let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(worst / scale < 1e-5, "worst {worst} scale {scale}");
    }
}
