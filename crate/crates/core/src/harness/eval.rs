//! GOP-structured sequence evaluation and the ablation matrix.
//!
//! Frame 0 of every GOP stands in for the intra model as a ground-truth
//! copy (flagged in the CSV). P-frames run gated flow → two-stage motion
//! compensation → reconstruction head; with the alignment stage disabled
//! the reconstruction degrades to the plain flow warp of the previous
//! reconstruction. The bits column is the offset-magnitude rate proxy, not
//! an entropy-coded size, and bpp always normalizes by the original
//! resolution.

use super::train::compute_flow;
use super::{load_rgb_frames, ExperimentConfig, MetricMode, Precision, ReconHead};
use crate::error::Result;
use crate::flow::warp_frame;
use crate::imageio::{crop_frame, pad_to_multiple, write_png, Frame};
use crate::metrics::{self, RDPoint};
use crate::numerics::Scalar;
use crate::numerics::Graph;
use crate::tsmc::{level_flows, read_checkpoint, tsmc_forward_graph, FgdParams};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize)]
pub struct FrameRow {
    pub frame_idx: usize,
    /// Offset-magnitude surrogate, NOT entropy-coded bits.
    pub bits: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub intra: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<FrameRow>,
    pub rd_point: RDPoint,
    pub csv_path: PathBuf,
    pub warnings: Vec<String>,
}

pub fn evaluate_sequence(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutput> {
    cfg.validate()?;
    match cfg.output.precision {
        Precision::F32 => run::<f32>(cfg, checkpoint),
        Precision::F64 => run::<f64>(cfg, checkpoint),
    }
}

fn load_model<T: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<(FgdParams<T>, ReconHead<T>)> {
    let tsmc_cfg = cfg.tsmc.to_config();
    match checkpoint {
        Some(path) => {
            let entries = read_checkpoint::<T>(path)?;
            let params = FgdParams::from_named(tsmc_cfg, &entries)?;
            let recon = ReconHead::from_named(tsmc_cfg.channels[0], &entries)?;
            Ok((params, recon))
        }
        None => Ok((
            FgdParams::init(tsmc_cfg, cfg.train.seed)?,
            ReconHead::init(tsmc_cfg.channels[0], cfg.train.seed),
        )),
    }
}

fn run<T: Scalar>(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutput> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    let mut warnings = Vec::new();
    let mut frames = load_rgb_frames(cfg)?;
    if frames.len() > cfg.protocol.frame_budget {
        frames.truncate(cfg.protocol.frame_budget);
    }
    if frames.len() < cfg.protocol.frame_budget {
        warnings.push(format!(
            "sequence has {} frames, budget is {}; evaluating what exists",
            frames.len(),
            cfg.protocol.frame_budget
        ));
    }
    let (orig_w, orig_h) = (frames[0].width, frames[0].height);
    let pixels = (orig_w * orig_h) as f64;
    let (params, recon) = load_model::<T>(cfg, checkpoint)?;
    let estimator = cfg.flow.estimator();

    let recon_dir = cfg.output.dir.join("recon");
    if cfg.output.dump_recon {
        std::fs::create_dir_all(&recon_dir)?;
    }

    let mut rows: Vec<FrameRow> = Vec::with_capacity(frames.len());
    let mut reference = frames[0].clone();
    for (t, cur) in frames.iter().enumerate() {
        let intra = t % cfg.protocol.gop == 0;
        let (recon_frame, bits) = if intra {
            (cur.clone(), 0.0)
        } else {
            reconstruct_frame(cfg, &params, &recon, cur, &reference, &estimator)?
        };
        let psnr = metrics::psnr(cur, &recon_frame)?;
        let ms_ssim = if cur.width.min(cur.height) >= 11 {
            metrics::ms_ssim(cur, &recon_frame)?
        } else {
            if t == 0 {
                warnings.push("frames too small for MS-SSIM; column forced to 0".to_string());
            }
            0.0
        };
        rows.push(FrameRow {
            frame_idx: t,
            bits,
            bpp: bits / pixels,
            psnr,
            ms_ssim,
            intra,
        });
        if cfg.output.dump_recon {
            write_png(&recon_dir.join(format!("frame_{t:04}.png")), &recon_frame)?;
        }
        reference = recon_frame;
    }

    let total_bits: f64 = rows.iter().map(|r| r.bits).sum();
    let bpp = total_bits / (rows.len() as f64 * pixels);
    let p_rows: Vec<&FrameRow> = rows.iter().filter(|r| !r.intra).collect();
    let quality = if p_rows.is_empty() {
        99.0
    } else {
        let sum: f64 = p_rows
            .iter()
            .map(|r| match cfg.protocol.metric {
                MetricMode::Psnr => r.psnr,
                MetricMode::MsSsim => r.ms_ssim,
            })
            .sum();
        sum / p_rows.len() as f64
    };

    let csv_path = cfg.output.dir.join(format!("{}_frames.csv", cfg.output.label));
    let mut csv = String::from("frame_idx,bits,bpp,psnr,ms_ssim,intra\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.8},{:.10},{:.6},{:.8},{}\n",
            r.frame_idx,
            r.bits,
            r.bpp,
            r.psnr,
            r.ms_ssim,
            r.intra as u8
        ));
    }
    std::fs::write(&csv_path, csv)?;

    Ok(EvalOutput {
        rows,
        rd_point: RDPoint {
            bpp: bpp.max(f64::MIN_POSITIVE),
            quality,
            label: cfg.output.label.clone(),
        },
        csv_path,
        warnings,
    })
}

/// One P-frame reconstruction; returns the frame and the bits surrogate.
fn reconstruct_frame<T: Scalar>(
    cfg: &ExperimentConfig,
    params: &FgdParams<T>,
    recon: &ReconHead<T>,
    cur: &Frame,
    reference: &Frame,
    estimator: &crate::flow::PyramidLk,
) -> Result<(Frame, f64)> {
    let (cur_p, orig) = pad_to_multiple(cur, cfg.protocol.pad_multiple)?;
    let (ref_p, _) = pad_to_multiple(reference, cfg.protocol.pad_multiple)?;
    let flow = compute_flow(cfg, &cur_p, &ref_p, estimator)?;

    if !cfg.tsmc.enabled {
        let warped = warp_frame(&ref_p, &flow)?;
        return Ok((crop_frame(&warped, orig.width, orig.height)?, 0.0));
    }

    let lf = level_flows(&flow)?;
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let (rw, rb) = recon.bind(&g, false);
    let frame = g.constant(ref_p.to_rgb_tensor()?);
    let flows = [
        g.constant(lf[0].to_tensor()),
        g.constant(lf[1].to_tensor()),
        g.constant(lf[2].to_tensor()),
    ];
    let out = tsmc_forward_graph(&g, &vars, frame, &flows)?;
    let rec = g.conv2d(out.contexts[0], rw, rb, 1, 1)?;
    let mut bits = 0.0;
    for s in 0..3 {
        let o = g.tensor(out.offsets_coarse[s]);
        bits += o.data().iter().map(|v| v.as_f64().abs()).sum::<f64>();
    }
    let rec_frame = crop_frame(
        &Frame::from_rgb_tensor(&g.tensor(rec))?,
        orig.width,
        orig.height,
    )?;
    Ok((rec_frame, bits))
}

/// One row of the ablation matrix.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub tsmc: bool,
    pub mrqa: bool,
    pub sme: bool,
    pub bpp: f64,
    pub quality: f64,
    pub csv: PathBuf,
}

/// Run the Ma–Mf toggle matrix from one configuration: two checkpoints are
/// trained (with and without quality-aware weighting), then each variant
/// evaluates with its own two eval-time switches. Relative orderings are
/// reported, not asserted.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let base_dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&base_dir)?;

    let mut train_plain = cfg.clone();
    train_plain.mrqa.enabled = false;
    train_plain.output.dir = base_dir.join("train_plain");
    let report_plain = super::train::train_toy(&train_plain)?;

    let mut train_mrqa = cfg.clone();
    train_mrqa.mrqa.enabled = true;
    if train_mrqa.train.steps_joint == 0 {
        train_mrqa.train.steps_joint = 10;
    }
    train_mrqa.output.dir = base_dir.join("train_mrqa");
    let report_mrqa = super::train::train_toy(&train_mrqa)?;

    let matrix: [(&str, bool, bool, bool); 6] = [
        ("Ma", false, false, false),
        ("Mb", true, false, false),
        ("Mc", false, true, false),
        ("Md", false, false, true),
        ("Me", true, true, false),
        ("Mf", true, true, true),
    ];
    let mut rows = Vec::with_capacity(6);
    for (name, tsmc, mrqa, sme) in matrix {
        let mut ecfg = cfg.clone();
        ecfg.tsmc.enabled = tsmc;
        ecfg.sme.enabled = sme;
        ecfg.mrqa.enabled = mrqa;
        ecfg.output.dir = base_dir.join(name);
        ecfg.output.label = name.to_string();
        let ckpt = if mrqa {
            &report_mrqa.checkpoint
        } else {
            &report_plain.checkpoint
        };
        let out = evaluate_sequence(&ecfg, Some(ckpt))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            tsmc,
            mrqa,
            sme,
            bpp: out.rd_point.bpp,
            quality: out.rd_point.quality,
            csv: out.csv_path,
        });
    }

    let mut summary = String::from("variant,tsmc,mrqa,sme,bpp,quality\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{:.10},{:.6}\n",
            r.variant, r.tsmc as u8, r.mrqa as u8, r.sme as u8, r.bpp, r.quality
        ));
    }
    std::fs::write(base_dir.join("ablation_summary.csv"), summary)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::SynthKind;

    fn eval_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.sequence.width = 32;
        cfg.sequence.height = 32;
        cfg.sequence.frames = 12;
        cfg.sequence.motion = SynthKind::GlobalShift { dx: -1.0, dy: 0.0 };
        cfg.protocol.gop = 4;
        cfg.protocol.frame_budget = 12;
        cfg.tsmc.channels = [4, 6, 8];
        cfg.sme.enabled = false;
        cfg.output.dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn rows_and_gop_flags_follow_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = eval_cfg(dir.path());
        let out = evaluate_sequence(&cfg, None).unwrap();
        assert_eq!(out.rows.len(), 12);
        for r in &out.rows {
            assert_eq!(r.intra, r.frame_idx % 4 == 0, "frame {}", r.frame_idx);
            assert!(r.psnr > 0.0);
        }
        assert!(out.csv_path.exists());
    }

    #[test]
    fn static_sequence_p_frames_hit_the_cap() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = eval_cfg(dir.path());
        cfg.sequence.motion = SynthKind::Static;
        cfg.tsmc.enabled = false; // plain warp path: zero flow, exact copy
        let out = evaluate_sequence(&cfg, None).unwrap();
        for r in &out.rows {
            assert_eq!(r.psnr, 99.0, "frame {}", r.frame_idx);
        }
    }

    #[test]
    fn short_sequence_warns_and_evaluates_what_exists() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = eval_cfg(dir.path());
        cfg.sequence.frames = 6;
        cfg.protocol.frame_budget = 12;
        let out = evaluate_sequence(&cfg, None).unwrap();
        assert_eq!(out.rows.len(), 6);
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn padding_is_internal_and_bpp_uses_original_resolution() {
        use crate::numerics::Tensor;
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = eval_cfg(dir.path());
        // 30x22 pads to 32x32 internally; bpp must divide by 30*22.
        cfg.sequence.width = 30;
        cfg.sequence.height = 22;
        cfg.sequence.frames = 4;
        cfg.protocol.frame_budget = 4;
        cfg.protocol.gop = 4;
        // The pristine initialization has an exactly-zero coarse branch, so
        // perturb it to give the bits surrogate something to measure.
        let tsmc_cfg = cfg.tsmc.to_config();
        let mut params = crate::tsmc::FgdParams::<f32>::init(tsmc_cfg, 1).unwrap();
        for l in &mut params.levels {
            l.hidden_conv.weight =
                Tensor::from_fn(l.hidden_conv.weight.shape(), |i| (i % 13) as f32 * 0.001);
        }
        let recon = ReconHead::<f32>::init(tsmc_cfg.channels[0], 1);
        let ckpt = dir.path().join("p.ckpt");
        let mut named = params.named_tensors();
        named.extend(recon.named_tensors());
        let refs: Vec<(&str, &Tensor<f32>)> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        crate::tsmc::write_checkpoint(&ckpt, &refs).unwrap();

        let out = evaluate_sequence(&cfg, Some(&ckpt)).unwrap();
        let p = &out.rows[1];
        assert!(p.bits > 0.0);
        assert!((p.bpp - p.bits / (30.0 * 22.0)).abs() < 1e-12);
        // Reconstruction must come back at the original size (psnr computed).
        assert!(p.psnr.is_finite());
    }
}
