//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 data
//! or processing error.

use super::{
    emit_plots, evaluate_sequence, load_rgb_frames, run_ablation, train_toy, write_manifest,
    ExperimentConfig,
};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, flow_magnitude, write_flow};
use crate::imageio::{pad_to_multiple, read_png, Frame};
use crate::metrics::{bd_rate, psnr_from_mse_unit, RDCurve};
use crate::mrqa::{schedule_rollout, MrqaState};
use crate::numerics::Tensor;
use crate::sme::{select_scale, ScaleOutcome, ScaleSearchConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "flowalign",
    version,
    about = "Content-adaptive motion alignment toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate optical flow between two frames
    Flow(FlowArgs),
    /// Adaptive downsampling-scale search for flow estimation
    Sme(SmeArgs),
    /// Run two-stage motion compensation and report per-level alignment
    Align(AlignArgs),
    /// Quality-aware weight schedule from a per-frame PSNR CSV
    Mrqa(MrqaArgs),
    /// Train the alignment module at desk scale
    Train(TrainArgs),
    /// GOP-structured sequence evaluation
    Eval(EvalArgs),
    /// BD-rate between two RD-curve CSVs
    Bdrate(BdrateArgs),
    /// Render SVG plots from CSV outputs
    Plot(PlotArgs),
    /// Run the quick invariant suite
    Selftest,
}

/// Frame-pair source shared by flow/sme: two PNGs, or a configured
/// sequence plus a frame index (the reference is the preceding frame).
#[derive(Args)]
struct PairSource {
    /// Current frame (PNG)
    #[arg(long)]
    cur: Option<PathBuf>,
    /// Reference frame (PNG)
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Experiment config supplying the sequence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame index within the configured sequence (reference is index-1)
    #[arg(long, default_value_t = 1)]
    index: usize,
}

impl PairSource {
    fn load(&self) -> Result<(Frame, Frame, Option<ExperimentConfig>)> {
        match (&self.cur, &self.reference, &self.config) {
            (Some(c), Some(r), _) => Ok((read_png(c)?, read_png(r)?, None)),
            (None, None, Some(cfg_path)) => {
                let cfg = ExperimentConfig::from_file(cfg_path)?;
                let frames = load_rgb_frames(&cfg)?;
                if self.index == 0 || self.index >= frames.len() {
                    return Err(Error::arg(format!(
                        "frame index {} out of range 1..{}",
                        self.index,
                        frames.len()
                    )));
                }
                let cur = frames[self.index].clone();
                let reference = frames[self.index - 1].clone();
                Ok((cur, reference, Some(cfg)))
            }
            _ => Err(Error::arg(
                "provide either --cur and --reference PNGs, or --config (+ --index)".to_string(),
            )),
        }
    }
}

#[derive(Args)]
struct FlowArgs {
    #[command(flatten)]
    source: PairSource,
    /// Pyramid levels
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Refinement iterations per level
    #[arg(long, default_value_t = 4)]
    iters: usize,
    /// Write the flow field (text header + little-endian f32 pairs)
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct SmeArgs {
    #[command(flatten)]
    source: PairSource,
    /// Activation threshold in pixels (inf disables the search)
    #[arg(long)]
    tau: Option<f64>,
    /// Improvement margin in dB
    #[arg(long)]
    delta: Option<f64>,
    /// Comma-separated scale set, e.g. "1,1.25,1.5"
    #[arg(long)]
    scales: Option<String>,
    /// Evaluate candidates in parallel
    #[arg(long, default_value_t = false)]
    parallel: bool,
    /// Write the per-scale PSNR table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the selected flow field
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// Experiment config (sequence + model settings)
    #[arg(long)]
    config: PathBuf,
    /// Parameter checkpoint; omitted → documented initialization
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Frame index within the sequence (reference is index-1)
    #[arg(long, default_value_t = 1)]
    index: usize,
}

#[derive(Args)]
struct MrqaArgs {
    /// Per-frame PSNR CSV (column "psnr")
    #[arg(long)]
    psnr: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    lambda_max: f64,
    /// Override the 7-entry base pattern, e.g. "1.8,0.6,0.8,0.6,1.4,0.6,0.8"
    #[arg(long)]
    base_weights: Option<String>,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Append the run's RD point to this per-curve CSV
    #[arg(long)]
    append_curve: Option<PathBuf>,
    /// Run the six-variant ablation matrix instead of a single evaluation
    #[arg(long, default_value_t = false)]
    ablation: bool,
}

#[derive(Args)]
struct BdrateArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// RD-curve CSVs (label,bpp,quality)
    #[arg(long, num_args = 1..)]
    rd: Vec<PathBuf>,
    /// Per-frame CSV with a psnr column
    #[arg(long)]
    fluctuation: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    gop: usize,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Flow(args) => cmd_flow(args),
        Cmd::Sme(args) => cmd_sme(args),
        Cmd::Align(args) => cmd_align(args),
        Cmd::Mrqa(args) => cmd_mrqa(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Bdrate(args) => cmd_bdrate(args),
        Cmd::Plot(args) => cmd_plot(args),
        Cmd::Selftest => cmd_selftest(),
    }
}

fn cmd_flow(args: FlowArgs) -> Result<()> {
    let (cur, reference, _) = args.source.load()?;
    let flow = estimate_flow(&cur, &reference, args.levels, args.iters)?;
    println!("flow: {}x{}", flow.width, flow.height);
    println!("magnitude: {:.6}", flow_magnitude(&flow));
    let n = (flow.width * flow.height) as f64;
    let mean_vx: f64 = flow.vx.iter().sum::<f64>() / n;
    let mean_vy: f64 = flow.vy.iter().sum::<f64>() / n;
    println!("mean: ({mean_vx:.4}, {mean_vy:.4})");
    if let Some(path) = args.dump {
        write_flow(&path, &flow)?;
        println!("dumped: {}", path.display());
    }
    Ok(())
}

fn cmd_sme(args: SmeArgs) -> Result<()> {
    let (cur, reference, cfg) = args.source.load()?;
    let mut search = cfg
        .as_ref()
        .map(|c| c.sme.to_search_config())
        .unwrap_or_default();
    if let Some(tau) = args.tau {
        search.tau = tau;
    }
    if let Some(delta) = args.delta {
        search.delta = delta;
    }
    if let Some(scales) = &args.scales {
        search.scales = scales
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::arg(format!("bad scale {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
    }
    let estimator = cfg
        .as_ref()
        .map(|c| c.flow.estimator())
        .unwrap_or_default();
    let result = select_scale(&cur, &reference, &search, &estimator, args.parallel)?;

    let mut table = String::from("scale,psnr,skipped\n");
    for e in &result.report {
        match &e.outcome {
            ScaleOutcome::Evaluated { warp_psnr } => {
                table.push_str(&format!("{:.2},{warp_psnr:.6},\n", e.scale));
            }
            ScaleOutcome::Skipped { reason } => {
                table.push_str(&format!("{:.2},,{reason}\n", e.scale));
            }
        }
    }
    match &args.csv {
        Some(path) => {
            std::fs::write(path, &table)?;
            println!("table: {}", path.display());
        }
        None => print!("{table}"),
    }
    println!("best_scale: {:.2}", result.best_scale);
    if let Some(path) = args.dump {
        write_flow(&path, &result.flow)?;
        println!("dumped: {}", path.display());
    }
    Ok(())
}

fn cmd_align(args: AlignArgs) -> Result<()> {
    use crate::numerics::Scalar;
    let cfg = ExperimentConfig::from_file(&args.config)?;
    fn run<T: Scalar>(cfg: &ExperimentConfig, args: &AlignArgs) -> Result<()> {
        let frames = load_rgb_frames(cfg)?;
        if args.index == 0 || args.index >= frames.len() {
            return Err(Error::arg(format!(
                "frame index {} out of range 1..{}",
                args.index,
                frames.len()
            )));
        }
        let (cur_p, _) = pad_to_multiple(&frames[args.index], cfg.protocol.pad_multiple)?;
        let (ref_p, _) = pad_to_multiple(&frames[args.index - 1], cfg.protocol.pad_multiple)?;
        let estimator = cfg.flow.estimator();
        let flow = super::train::compute_flow(cfg, &cur_p, &ref_p, &estimator)?;
        let (params, _recon) = match &args.checkpoint {
            Some(path) => {
                let entries = crate::tsmc::read_checkpoint::<T>(path)?;
                (
                    crate::tsmc::FgdParams::from_named(cfg.tsmc.to_config(), &entries)?,
                    (),
                )
            }
            None => (
                crate::tsmc::FgdParams::init(cfg.tsmc.to_config(), cfg.train.seed)?,
                (),
            ),
        };
        let out = crate::tsmc::tsmc_forward(&ref_p, &flow, &params)?;
        let targets = crate::tsmc::build_feature_pyramid(&cur_p, &params)?;
        println!("level,aligned_mse,aligned_psnr,coarse_mse,coarse_psnr");
        for s in 0..3 {
            let mse = |a: &Tensor<T>, b: &Tensor<T>| -> f64 {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| {
                        let d = x.as_f64() - y.as_f64();
                        d * d
                    })
                    .sum::<f64>()
                    / a.numel() as f64
            };
            let am = mse(&out.contexts[s], &targets.levels[s]);
            let cm = mse(&out.warped[s], &targets.levels[s]);
            println!(
                "{},{:.8e},{:.3},{:.8e},{:.3}",
                s + 1,
                am,
                psnr_from_mse_unit(am),
                cm,
                psnr_from_mse_unit(cm)
            );
        }
        Ok(())
    }
    match cfg.output.precision {
        super::Precision::F32 => run::<f32>(&cfg, &args),
        super::Precision::F64 => run::<f64>(&cfg, &args),
    }
}

fn cmd_mrqa(args: MrqaArgs) -> Result<()> {
    let trace = super::parse_csv_column(&args.psnr, "psnr")?;
    let mut state = MrqaState::new(args.lambda, args.lambda_max)?;
    if let Some(bw) = &args.base_weights {
        let parts: Vec<f64> = bw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::arg(format!("bad weight {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let arr: [f64; 7] = parts
            .try_into()
            .map_err(|_| Error::arg("base weights need exactly 7 entries".to_string()))?;
        state = state.with_base_weights(arr);
    }
    let weights = schedule_rollout(&trace, &state)?;
    let mut csv = String::from("p_index,weight\n");
    for (i, w) in weights.iter().enumerate() {
        csv.push_str(&format!("{i},{w:.10}\n"));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("weights: {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&args.config)?;
    let report = train_toy(&cfg)?;
    write_manifest(&cfg.output.dir, "train", &cfg)?;
    println!("steps: {} align + {} joint", report.steps_align, report.steps_joint);
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        println!("loss: {first:.6e} -> {last:.6e}");
    }
    println!(
        "aligned_mse: {:.6e}  coarse_mse: {:.6e}  ratio: {:.3}",
        report.final_aligned_mse,
        report.final_coarse_mse,
        report.final_aligned_mse / report.final_coarse_mse
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("wall_clock_sec: {:.1}", report.wall_clock_sec);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&args.config)?;
    if args.ablation {
        let rows = run_ablation(&cfg)?;
        write_manifest(&cfg.output.dir, "eval --ablation", &cfg)?;
        println!("variant,tsmc,mrqa,sme,bpp,quality");
        for r in &rows {
            println!(
                "{},{},{},{},{:.10},{:.6}",
                r.variant, r.tsmc as u8, r.mrqa as u8, r.sme as u8, r.bpp, r.quality
            );
        }
        return Ok(());
    }
    let out = evaluate_sequence(&cfg, args.checkpoint.as_deref())?;
    write_manifest(&cfg.output.dir, "eval", &cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    println!("frames: {}", out.rows.len());
    println!(
        "rd_point: label={} bpp={:.10} quality={:.6}",
        out.rd_point.label, out.rd_point.bpp, out.rd_point.quality
    );
    println!("csv: {}", out.csv_path.display());
    if let Some(curve) = &args.append_curve {
        let line = format!(
            "{},{:.10},{:.6}\n",
            out.rd_point.label, out.rd_point.bpp, out.rd_point.quality
        );
        if curve.exists() {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().append(true).open(curve)?;
            f.write_all(line.as_bytes())?;
        } else {
            std::fs::write(curve, format!("label,bpp,quality\n{line}"))?;
        }
        println!("curve: {}", curve.display());
    }
    Ok(())
}

fn cmd_bdrate(args: BdrateArgs) -> Result<()> {
    let anchor = RDCurve::new(super::parse_curve_csv(&args.anchor)?)?;
    let test = RDCurve::new(super::parse_curve_csv(&args.test)?)?;
    let rate = bd_rate(&anchor, &test)?;
    println!("BD-rate: {rate:.2}%");
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    if args.rd.is_empty() && args.fluctuation.is_none() {
        return Err(Error::arg(
            "nothing to plot: pass --rd and/or --fluctuation".to_string(),
        ));
    }
    let written = emit_plots(&args.rd, args.fluctuation.as_deref(), args.gop, &args.out)?;
    for p in written {
        println!("wrote: {}", p.display());
    }
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    use crate::flow::{warp_frame, FlowField};
    use crate::imageio::{SynthKind, SynthSequence, SynthSpec};
    use crate::metrics::RDPoint;
    use crate::mrqa::BASE_WEIGHTS;
    use rand::Rng;
    use rand::SeedableRng;

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Deformable convolution degenerates to plain convolution.
    {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ok = true;
        for _ in 0..3 {
            let input = Tensor::<f64>::from_fn(&[1, 3, 6, 6], |_| rng.gen_range(-1.0..1.0));
            let weight = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let bias = Tensor::<f64>::from_fn(&[4], |_| rng.gen_range(-1.0..1.0));
            let spec =
                crate::numerics::ConvSpec::new(3, 4, (3, 3), 1, 1, weight, bias).unwrap();
            let offsets = Tensor::zeros(&[1, 18, 6, 6]);
            let mask = Tensor::full(&[1, 9, 6, 6], 1.0);
            let a = crate::numerics::deformable_conv(&input, &offsets, &mask, &spec, 1).unwrap();
            let b = crate::numerics::conv2d(&input, &spec).unwrap();
            ok &= a == b;
        }
        check("deformable conv degenerates to conv2d (bitwise)", ok);
    }

    // Zero-flow warp is the identity.
    {
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::Static,
            width: 32,
            height: 24,
            frames: 1,
            seed: 2,
            cell: 16.0,
        })
        .unwrap();
        let f = seq.frame(0).unwrap();
        let w = warp_frame(&f, &FlowField::zeros(32, 24)).unwrap();
        check("warp with zero flow is identity", w == f);
    }

    // Channel concat/split round-trips.
    {
        let a = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 5, 4, 4], |i| -(i as f64));
        let cat = crate::numerics::concat_channels(&[&a, &b]).unwrap();
        let parts = crate::numerics::split_channels(&cat, &[3, 5]).unwrap();
        check("concat/split round trip", parts[0] == a && parts[1] == b);
    }

    // Constant PSNR trace tiles the base pattern.
    {
        let state = MrqaState::new(2048.0, 2048.0).unwrap();
        let weights = schedule_rollout(&[35.0; 15], &state).unwrap();
        let ok = weights
            .iter()
            .enumerate()
            .all(|(i, &w)| w == BASE_WEIGHTS[i % 7]);
        check("constant trace tiles base weights", ok);
    }

    // BD-rate identities.
    {
        let mk = |f: f64| -> RDCurve {
            RDCurve::new(
                [(0.05, 30.0), (0.1, 32.0), (0.2, 34.0), (0.4, 36.0)]
                    .iter()
                    .map(|&(b, q)| RDPoint {
                        bpp: b * f,
                        quality: q,
                        label: "s".into(),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let zero = bd_rate(&mk(1.0), &mk(1.0)).unwrap();
        let half = bd_rate(&mk(1.0), &mk(0.5)).unwrap();
        check(
            "BD-rate identity and half-rate",
            zero == 0.0 && (half + 50.0).abs() < 1e-6,
        );
    }

    // PSNR reference value.
    {
        let a = Frame::rgb_filled(16, 16, 100);
        let b = Frame::rgb_filled(16, 16, 101);
        let p = crate::metrics::psnr(&a, &b).unwrap();
        check(
            "PSNR of uniform unit difference",
            (p - 48.130803608679344).abs() < 1e-9,
        );
    }

    // Gate stays closed on a static pair.
    {
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::Static,
            width: 48,
            height: 48,
            frames: 2,
            seed: 3,
            cell: 16.0,
        })
        .unwrap();
        let cur = seq.frame(1).unwrap();
        let reference = seq.frame(0).unwrap();
        let cfg = ScaleSearchConfig::hevc_b();
        let est = crate::flow::PyramidLk::default();
        let out = crate::sme::gated_flow(&cur, &reference, &cfg, &est, false).unwrap();
        check("SME gate closed on zero motion", out.search.is_none());
    }

    if failures > 0 {
        return Err(Error::data(format!("{failures} selftest check(s) failed")));
    }
    println!("selftest: all checks passed");
    Ok(())
}
