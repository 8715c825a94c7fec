//! Training-free smooth motion estimation: an adaptive search over
//! downsampling scales for flow estimation, activated only when the
//! flow magnitude at scale 1 exceeds a threshold.
//!
//! For each candidate scale D the current and reference frames are
//! bilinearly downsampled by D, flow is estimated there, upsampled back to
//! the original resolution and scored by the PSNR between the current frame
//! and the warped reference. A candidate only replaces the incumbent when
//! it wins by more than the margin δ; the final flow is re-estimated at the
//! winning scale. Candidates are independent, so they may be evaluated in
//! parallel — selection always folds in scale order, keeping tie-breaking
//! identical to the sequential pass.

use crate::error::{Error, Result};
use crate::flow::{flow_magnitude, rescale_flow_to, warp_frame, FlowEstimator, FlowField};
use crate::imageio::{resize_rgb, ColorSpace, Frame};
use crate::metrics::psnr;
use crate::resample::scaled_dim;
use rayon::prelude::*;

/// Configuration of the scale search.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSearchConfig {
    /// Ordered candidate scales; must start at 1 and strictly increase.
    pub scales: Vec<f64>,
    /// PSNR margin (dB) a candidate must clear to replace the incumbent.
    pub delta: f64,
    /// Activation threshold on the scale-1 flow magnitude (pixels).
    pub tau: f64,
}

impl Default for ScaleSearchConfig {
    /// Full search space 𝒟 = {1, 1.25, 1.5, …, 4.75, 5}, δ = 0.1, τ = 10.
    fn default() -> Self {
        ScaleSearchConfig {
            scales: (0..17).map(|i| 1.0 + 0.25 * i as f64).collect(),
            delta: 0.1,
            tau: 10.0,
        }
    }
}

impl ScaleSearchConfig {
    /// Restricted search used for 1080p-class content: {1, 1.25}, τ = 10.
    pub fn hevc_b() -> Self {
        ScaleSearchConfig {
            scales: vec![1.0, 1.25],
            delta: 0.1,
            tau: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::arg("scale set must be non-empty".to_string()));
        }
        if self.scales[0] != 1.0 {
            return Err(Error::arg(format!(
                "scale set must start at 1, got {}",
                self.scales[0]
            )));
        }
        for w in self.scales.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::arg(format!(
                    "scale set must strictly increase ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if !(self.delta >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::arg(format!(
                "delta and tau must be nonnegative, got {} / {}",
                self.delta, self.tau
            )));
        }
        Ok(())
    }
}

/// Outcome of evaluating one candidate scale.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleOutcome {
    Evaluated { warp_psnr: f64 },
    Skipped { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEntry {
    pub scale: f64,
    pub outcome: ScaleOutcome,
}

/// Full search result: chosen scale, the flow re-estimated at it, and the
/// per-scale report.
#[derive(Clone, Debug)]
pub struct ScaleSearchResult {
    pub best_scale: f64,
    pub flow: FlowField,
    pub report: Vec<ScaleEntry>,
}

fn check_frames(cur: &Frame, reference: &Frame) -> Result<()> {
    if cur.color_space != ColorSpace::Rgb || reference.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace("scale search expects RGB frames".to_string()));
    }
    if cur.width != reference.width || cur.height != reference.height {
        return Err(Error::shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            cur.width, cur.height, reference.width, reference.height
        )));
    }
    Ok(())
}

/// Estimate flow at one downsampling scale and score it at full resolution.
fn evaluate_scale<E: FlowEstimator>(
    cur: &Frame,
    reference: &Frame,
    estimator: &E,
    scale: f64,
) -> Result<(FlowField, f64)> {
    let flow = flow_at_scale(cur, reference, estimator, scale)?;
    let warped = warp_frame(reference, &flow)?;
    let score = psnr(cur, &warped)?;
    Ok((flow, score))
}

/// Flow estimated after downsampling both frames by `scale`, upsampled back
/// to the exact original resolution. Scale 1 runs the estimator directly.
fn flow_at_scale<E: FlowEstimator>(
    cur: &Frame,
    reference: &Frame,
    estimator: &E,
    scale: f64,
) -> Result<FlowField> {
    if scale == 1.0 {
        return estimator.estimate(cur, reference);
    }
    let nw = scaled_dim(cur.width, 1.0 / scale);
    let nh = scaled_dim(cur.height, 1.0 / scale);
    let cur_d = resize_rgb(cur, nw, nh)?;
    let ref_d = resize_rgb(reference, nw, nh)?;
    let flow_d = estimator.estimate(&cur_d, &ref_d)?;
    rescale_flow_to(&flow_d, cur.width, cur.height)
}

/// Run the scale search. `parallel` evaluates candidates concurrently;
/// the report and selection are identical either way.
pub fn select_scale<E: FlowEstimator>(
    cur: &Frame,
    reference: &Frame,
    cfg: &ScaleSearchConfig,
    estimator: &E,
    parallel: bool,
) -> Result<ScaleSearchResult> {
    cfg.validate()?;
    check_frames(cur, reference)?;

    let evaluate = |&scale: &f64| -> Result<ScaleEntry> {
        let nw = scaled_dim(cur.width, 1.0 / scale);
        let nh = scaled_dim(cur.height, 1.0 / scale);
        if nw.min(nh) < estimator.min_dim() {
            return Ok(ScaleEntry {
                scale,
                outcome: ScaleOutcome::Skipped {
                    reason: format!(
                        "downsampled size {nw}x{nh} below estimator minimum {}",
                        estimator.min_dim()
                    ),
                },
            });
        }
        let (_, warp_psnr) = evaluate_scale(cur, reference, estimator, scale)?;
        Ok(ScaleEntry {
            scale,
            outcome: ScaleOutcome::Evaluated { warp_psnr },
        })
    };

    let report: Vec<ScaleEntry> = if parallel {
        cfg.scales
            .par_iter()
            .map(evaluate)
            .collect::<Result<Vec<_>>>()?
    } else {
        cfg.scales.iter().map(evaluate).collect::<Result<Vec<_>>>()?
    };

    // Selection folds in scale order regardless of evaluation order.
    let mut best_scale = 1.0;
    let mut best_psnr = 0.0f64;
    for entry in &report {
        if let ScaleOutcome::Evaluated { warp_psnr } = entry.outcome {
            if warp_psnr > best_psnr + cfg.delta {
                best_psnr = warp_psnr;
                best_scale = entry.scale;
            }
        }
    }

    let flow = flow_at_scale(cur, reference, estimator, best_scale)?;
    Ok(ScaleSearchResult {
        best_scale,
        flow,
        report,
    })
}

/// Flow with the magnitude gate: estimate at scale 1; run the scale search
/// only when the flow magnitude exceeds τ.
#[derive(Clone, Debug)]
pub struct GatedFlow {
    pub flow: FlowField,
    /// Magnitude of the scale-1 flow the gate was decided on.
    pub base_magnitude: f64,
    /// Present only when the search ran.
    pub search: Option<ScaleSearchResult>,
}

pub fn gated_flow<E: FlowEstimator>(
    cur: &Frame,
    reference: &Frame,
    cfg: &ScaleSearchConfig,
    estimator: &E,
    parallel: bool,
) -> Result<GatedFlow> {
    cfg.validate()?;
    check_frames(cur, reference)?;
    let base = estimator.estimate(cur, reference)?;
    let base_magnitude = flow_magnitude(&base);
    if base_magnitude <= cfg.tau {
        return Ok(GatedFlow {
            flow: base,
            base_magnitude,
            search: None,
        });
    }
    let search = select_scale(cur, reference, cfg, estimator, parallel)?;
    Ok(GatedFlow {
        flow: search.flow.clone(),
        base_magnitude,
        search: Some(search),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::PyramidLk;
    use crate::imageio::{SynthKind, SynthSequence, SynthSpec};

    fn static_pair(w: usize, h: usize) -> (Frame, Frame) {
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::Static,
            width: w,
            height: h,
            frames: 2,
            seed: 55,
            cell: 16.0,
        })
        .unwrap();
        (seq.frame(1).unwrap(), seq.frame(0).unwrap())
    }

    #[test]
    fn static_pair_selects_scale_one() {
        let (cur, reference) = static_pair(64, 48);
        let cfg = ScaleSearchConfig {
            scales: vec![1.0, 1.25, 1.5, 2.0],
            delta: 0.1,
            tau: 0.0,
        };
        let est = PyramidLk::default();
        let res = select_scale(&cur, &reference, &cfg, &est, false).unwrap();
        assert_eq!(res.best_scale, 1.0);
        // Scale 1 hits the PSNR cap; later scales cannot beat it by δ.
        match res.report[0].outcome {
            ScaleOutcome::Evaluated { warp_psnr } => assert_eq!(warp_psnr, 99.0),
            _ => panic!("scale 1 must be evaluated"),
        }
    }

    #[test]
    fn singleton_scale_set_is_bit_identical_to_plain_estimation() {
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::GlobalShift { dx: -3.0, dy: 1.0 },
            width: 72,
            height: 56,
            frames: 2,
            seed: 8,
            cell: 16.0,
        })
        .unwrap();
        let cur = seq.frame(1).unwrap();
        let reference = seq.frame(0).unwrap();
        let cfg = ScaleSearchConfig {
            scales: vec![1.0],
            delta: 0.1,
            tau: 0.0,
        };
        let est = PyramidLk::default();
        let res = select_scale(&cur, &reference, &cfg, &est, false).unwrap();
        let plain = est.estimate(&cur, &reference).unwrap();
        assert_eq!(res.flow, plain);
        assert_eq!(res.best_scale, 1.0);
    }

    #[test]
    fn tiny_scales_are_skipped_with_reason() {
        let (cur, reference) = static_pair(32, 32);
        let cfg = ScaleSearchConfig {
            scales: vec![1.0, 8.0],
            delta: 0.1,
            tau: 0.0,
        };
        let est = PyramidLk::default();
        let res = select_scale(&cur, &reference, &cfg, &est, false).unwrap();
        assert_eq!(res.report.len(), 2);
        match &res.report[1].outcome {
            ScaleOutcome::Skipped { reason } => assert!(reason.contains("below")),
            _ => panic!("expected skip"),
        }
    }

    #[test]
    fn gate_closed_on_zero_motion() {
        let (cur, reference) = static_pair(48, 48);
        let cfg = ScaleSearchConfig {
            scales: vec![1.0, 1.25],
            delta: 0.1,
            tau: 10.0,
        };
        let est = PyramidLk::default();
        let out = gated_flow(&cur, &reference, &cfg, &est, false).unwrap();
        assert!(out.search.is_none());
        assert!(out.base_magnitude < 10.0);
    }

    #[test]
    fn gate_always_open_at_tau_zero() {
        // The epsilon floor keeps the magnitude strictly positive, so τ = 0
        // always triggers the search, even on zero motion.
        let (cur, reference) = static_pair(48, 48);
        let cfg = ScaleSearchConfig {
            scales: vec![1.0, 1.25],
            delta: 0.1,
            tau: 0.0,
        };
        let est = PyramidLk::default();
        let out = gated_flow(&cur, &reference, &cfg, &est, false).unwrap();
        assert!(out.search.is_some());
    }

    #[test]
    fn parallel_and_sequential_reports_are_identical() {
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::GlobalShift { dx: -6.0, dy: 0.0 },
            width: 96,
            height: 72,
            frames: 2,
            seed: 14,
            cell: 16.0,
        })
        .unwrap();
        let cur = seq.frame(1).unwrap();
        let reference = seq.frame(0).unwrap();
        let cfg = ScaleSearchConfig {
            scales: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            delta: 0.1,
            tau: 0.0,
        };
        let est = PyramidLk::default();
        let seq_res = select_scale(&cur, &reference, &cfg, &est, false).unwrap();
        let par_res = select_scale(&cur, &reference, &cfg, &est, true).unwrap();
        assert_eq!(seq_res.report, par_res.report);
        assert_eq!(seq_res.best_scale, par_res.best_scale);
        assert_eq!(seq_res.flow, par_res.flow);
    }

    #[test]
    fn config_validation_rejects_bad_sets() {
        let bad = ScaleSearchConfig {
            scales: vec![1.25, 1.5],
            delta: 0.1,
            tau: 1.0,
        };
        assert!(bad.validate().is_err());
        let bad = ScaleSearchConfig {
            scales: vec![1.0, 1.0],
            delta: 0.1,
            tau: 1.0,
        };
        assert!(bad.validate().is_err());
        assert!(ScaleSearchConfig::default().validate().is_ok());
        assert_eq!(ScaleSearchConfig::default().scales.len(), 17);
        assert_eq!(ScaleSearchConfig::hevc_b().scales, vec![1.0, 1.25]);
    }
}
