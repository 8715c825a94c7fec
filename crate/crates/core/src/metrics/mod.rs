//! Quality and rate metrics: PSNR, MS-SSIM, Bjøntegaard delta-rate and
//! per-GOP quality-fluctuation statistics. Everything runs in double
//! precision with a fixed summation order.

mod bdrate;
mod msssim;

pub use bdrate::bd_rate;
pub use msssim::ms_ssim;

use crate::error::{Error, Result};
use crate::imageio::{ColorSpace, Frame};

/// Sentinel PSNR for identical frames; also the cap for near-zero MSE.
pub const PSNR_CAP_DB: f64 = 99.0;

/// PSNR in dB over RGB frames: MSE pooled over all pixels and channels,
/// 10·log10(255²/MSE), capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if a.color_space != ColorSpace::Rgb || b.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace("psnr expects RGB frames".to_string()));
    }
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "psnr dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut sse = 0.0f64;
    for (pa, pb) in a.planes.iter().zip(&b.planes) {
        for (&x, &y) in pa.data.iter().zip(&pb.data) {
            let d = x as f64 - y as f64;
            sse += d * d;
        }
    }
    let n = (3 * a.width * a.height) as f64;
    let mse = sse / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// PSNR from a mean-squared error in [0,1]-normalized units.
pub fn psnr_from_mse_unit(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// One (rate, quality) measurement of a codec run.
#[derive(Clone, Debug, PartialEq)]
pub struct RDPoint {
    /// Bits per pixel on the ORIGINAL resolution.
    pub bpp: f64,
    /// dB for PSNR curves, unitless in (0,1] for MS-SSIM curves.
    pub quality: f64,
    pub label: String,
}

/// Validated rate-distortion curve: strictly increasing bpp, nondecreasing
/// quality.
#[derive(Clone, Debug)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("RD curve needs at least one point".to_string()));
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
        for p in &points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite() {
                return Err(Error::arg(format!(
                    "invalid RD point (bpp {}, quality {})",
                    p.bpp, p.quality
                )));
            }
        }
        for w in points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(Error::arg(format!(
                    "bpp must be strictly increasing ({} then {})",
                    w[0].bpp, w[1].bpp
                )));
            }
            if w[1].quality < w[0].quality {
                return Err(Error::arg(format!(
                    "quality must be nondecreasing with rate ({} then {})",
                    w[0].quality, w[1].quality
                )));
            }
        }
        Ok(RDCurve { points })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-GOP quality statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GopStats {
    pub gop_index: usize,
    pub start_frame: usize,
    pub frame_count: usize,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation over the GOP.
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct FluctuationTrace {
    /// (frame index, value, gop index) per frame.
    pub per_frame: Vec<(usize, f64, usize)>,
    pub gops: Vec<GopStats>,
}

/// Quality-fluctuation analysis: the per-frame series annotated with GOP
/// membership plus min/max/std per GOP (boundaries at multiples of `gop`).
pub fn fluctuation_trace(per_frame_quality: &[f64], gop: usize) -> Result<FluctuationTrace> {
    if per_frame_quality.is_empty() {
        return Err(Error::arg("fluctuation trace needs at least one frame".to_string()));
    }
    if gop == 0 {
        return Err(Error::arg("GOP size must be >= 1".to_string()));
    }
    let per_frame: Vec<(usize, f64, usize)> = per_frame_quality
        .iter()
        .enumerate()
        .map(|(i, &q)| (i, q, i / gop))
        .collect();
    let mut gops = Vec::new();
    for (gi, chunk) in per_frame_quality.chunks(gop).enumerate() {
        let min = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / chunk.len() as f64;
        gops.push(GopStats {
            gop_index: gi,
            start_frame: gi * gop,
            frame_count: chunk.len(),
            min,
            max,
            std: var.sqrt(),
        });
    }
    Ok(FluctuationTrace { per_frame, gops })
}
