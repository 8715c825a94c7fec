//! Multi-scale SSIM over RGB frames.
//!
//! Standard construction: 11×11 Gaussian window (σ = 1.5), five scales with
//! weights 0.0448/0.2856/0.3001/0.2363/0.1333, contrast·structure at every
//! scale and the luminance term only at the coarsest, 2×2 average-pool
//! downsampling between scales. Inputs too small for five scales use as
//! many as fit (window ≥ 11 px) with the weights renormalized. Computed per
//! RGB channel, then averaged.

use crate::error::{Error, Result};
use crate::imageio::{ColorSpace, Frame};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.color_space != ColorSpace::Rgb || b.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace("ms_ssim expects RGB frames".to_string()));
    }
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "ms_ssim dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let min_dim = a.width.min(a.height);
    if min_dim < WINDOW {
        return Err(Error::shape(format!(
            "ms_ssim needs at least {WINDOW}px in each dimension, got {}x{}",
            a.width, a.height
        )));
    }
    // Number of usable scales: each halving must keep the window inside.
    let mut scales = 1usize;
    while scales < 5 && (min_dim >> scales) >= WINDOW {
        scales += 1;
    }
    let wsum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = SCALE_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();

    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let mut pa = a.planes[c].to_f64();
        let mut pb = b.planes[c].to_f64();
        let (mut w, mut h) = (a.width, a.height);
        let mut score = 1.0f64;
        for (s, &weight) in weights.iter().enumerate() {
            let (l, cs) = ssim_components(&pa, &pb, w, h, &kernel);
            if s + 1 < scales {
                score *= cs.max(0.0).powf(weight);
                pa = downsample2(&pa, w, h);
                pb = downsample2(&pb, w, h);
                w /= 2;
                h /= 2;
            } else {
                score *= (l * cs).max(0.0).powf(weight);
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

/// Mean luminance and contrast-structure terms over valid window positions.
fn ssim_components(a: &[f64], b: &[f64], w: usize, h: usize, kernel: &[f64]) -> (f64, f64) {
    let mu_a = gaussian_filter(a, w, h, kernel);
    let mu_b = gaussian_filter(b, w, h, kernel);
    let aa: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let e_aa = gaussian_filter(&aa, w, h, kernel);
    let e_bb = gaussian_filter(&bb, w, h, kernel);
    let e_ab = gaussian_filter(&ab, w, h, kernel);

    let vw = w - WINDOW + 1;
    let vh = h - WINDOW + 1;
    let mut sum_l = 0.0;
    let mut sum_cs = 0.0;
    for i in 0..vw * vh {
        let ma = mu_a[i];
        let mb = mu_b[i];
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum_l += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        sum_cs += (2.0 * cov + C2) / (var_a + var_b + C2);
    }
    let n = (vw * vh) as f64;
    (sum_l / n, sum_cs / n)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let mut k = Vec::with_capacity(WINDOW);
    let mut sum = 0.0;
    for i in -half..=half {
        let v = (-((i * i) as f64) / (2.0 * SIGMA * SIGMA)).exp();
        k.push(v);
        sum += v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter; output is (w-10)×(h-10).
fn gaussian_filter(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let vw = w - WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + k];
            }
            tmp[y * vw + x] = acc;
        }
    }
    // Vertical pass.
    let vh = h - WINDOW + 1;
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// 2×2 average pooling (odd tail rows/columns dropped).
fn downsample2(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let nw = w / 2;
    let nh = h / 2;
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
        }
    }
    out
}
