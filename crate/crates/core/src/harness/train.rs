//! Toy training of the alignment module.
//!
//! Two phases over seeded synthetic (or file-backed) frame pairs, with the
//! classical flow estimator frozen throughout:
//!
//! 1. alignment pretraining — plain gradient descent on the flow-guided
//!    deformable branches, minimizing w·λ·D + R over aligned-context vs
//!    current-frame pyramid features (w = 1 here);
//! 2. optional joint finetuning — GOP-style rollouts through the toy
//!    reconstruction head, with per-frame weights from the quality-aware
//!    scheduler when enabled; the rate proxy R is the mean coarse-offset
//!    magnitude.
//!
//! Runs are bit-reproducible from (config, seed): fixed-step descent, no
//! stochastic layers, ChaCha-seeded initialization.

use super::{load_rgb_frames, ExperimentConfig, Precision, ReconHead};
use crate::error::{Error, Result};
use crate::flow::{FlowEstimator, FlowField};
use crate::imageio::{crop_frame, pad_to_multiple, Frame};
use crate::metrics;
use crate::mrqa::{schedule_rollout, MrqaState};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::tsmc::{
    build_feature_pyramid, level_flows, tsmc_forward, tsmc_forward_graph, write_checkpoint,
    FgdParams, FgdVars, TsmcGraphOut,
};
use serde::Serialize;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub steps_align: usize,
    pub steps_joint: usize,
    pub loss_trace: Vec<f64>,
    /// MSE of refined aligned contexts against current-frame features.
    pub final_aligned_mse: f64,
    /// MSE of the stage-one (flow warp only) features against the same target.
    pub final_coarse_mse: f64,
    pub checkpoint: PathBuf,
    pub wall_clock_sec: f64,
}

pub fn train_toy(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    match cfg.output.precision {
        Precision::F32 => run::<f32>(cfg),
        Precision::F64 => run::<f64>(cfg),
    }
}

struct PairData<T: Scalar> {
    reference_padded: Frame,
    flow: FlowField,
    ref_tensor: Tensor<T>,
    flow_tensors: [Tensor<T>; 3],
    targets: [Tensor<T>; 3],
}

pub(crate) fn compute_flow<E: FlowEstimator>(
    cfg: &ExperimentConfig,
    cur: &Frame,
    reference: &Frame,
    estimator: &E,
) -> Result<FlowField> {
    if cfg.sme.enabled {
        Ok(crate::sme::gated_flow(
            cur,
            reference,
            &cfg.sme.to_search_config(),
            estimator,
            cfg.sme.parallel,
        )?
        .flow)
    } else {
        estimator.estimate(cur, reference)
    }
}

fn run<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.output.dir)?;
    let frames = load_rgb_frames(cfg)?;
    if frames.len() < 2 {
        return Err(Error::arg("training needs at least 2 frames".to_string()));
    }
    let estimator = cfg.flow.estimator();
    let tsmc_cfg = cfg.tsmc.to_config();
    let seed = cfg.train.seed;

    let params0 = FgdParams::<T>::init(tsmc_cfg, seed)?;
    let mut params = params0.clone();
    let mut recon = ReconHead::<T>::init(tsmc_cfg.channels[0], seed);

    // Precompute per-pair inputs; the flow estimator and the pyramid
    // extractor stay frozen, so flows and targets are fixed for the run.
    let npairs = cfg.train.pairs.clamp(1, frames.len() - 1);
    let mut pairs: Vec<PairData<T>> = Vec::with_capacity(npairs);
    for i in 0..npairs {
        let (ref_p, _) = pad_to_multiple(&frames[i], cfg.protocol.pad_multiple)?;
        let (cur_p, _) = pad_to_multiple(&frames[i + 1], cfg.protocol.pad_multiple)?;
        let flow = compute_flow(cfg, &cur_p, &ref_p, &estimator)?;
        let lf = level_flows(&flow)?;
        let targets = build_feature_pyramid(&cur_p, &params)?.levels;
        pairs.push(PairData {
            ref_tensor: ref_p.to_rgb_tensor()?,
            reference_padded: ref_p,
            flow,
            flow_tensors: [lf[0].to_tensor(), lf[1].to_tensor(), lf[2].to_tensor()],
            targets,
        });
    }

    let lambda = cfg.rate.lambda;
    let mut loss_trace: Vec<f64> = Vec::with_capacity(cfg.train.steps_align + cfg.train.steps_joint);
    let mut initial_loss: Option<f64> = None;

    // Phase 1: alignment-only descent.
    for step in 0..cfg.train.steps_align {
        let pair = &pairs[step % npairs];
        let g: Graph<T> = Graph::new();
        let vars = params.bind(&g, true);
        let frame = g.constant(pair.ref_tensor.clone());
        let flows = [
            g.constant(pair.flow_tensors[0].clone()),
            g.constant(pair.flow_tensors[1].clone()),
            g.constant(pair.flow_tensors[2].clone()),
        ];
        let out = tsmc_forward_graph(&g, &vars, frame, &flows)?;
        let mut d: Option<Var> = None;
        for s in 0..3 {
            let target = g.constant(pair.targets[s].clone());
            let m = g.mse(out.contexts[s], target)?;
            d = Some(match d {
                Some(acc) => g.add(acc, m)?,
                None => m,
            });
        }
        let d = g.scale(d.expect("three levels"), 1.0 / 3.0);
        let loss = weighted_loss(&g, &out, d, 1.0, lambda, cfg.train.rproxy_weight)?;
        g.backward(loss)?;
        let value = g.tensor(loss).data()[0].as_f64();
        guard_divergence(step, value, &mut initial_loss)?;
        loss_trace.push(value);

        let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
        collect_trainable_grads(&g, &vars, &mut grads);
        apply_grads(&mut params, &mut recon, &grads, cfg.train.lr);
    }

    // Phase 2: joint rollouts through the reconstruction head.
    if cfg.train.steps_joint > 0 {
        let rollout = cfg.train.rollout.max(2);
        if frames.len() < rollout {
            return Err(Error::arg(format!(
                "joint stage needs at least {rollout} frames, sequence has {}",
                frames.len()
            )));
        }
        let bases = frames.len() - rollout + 1;
        for step in 0..cfg.train.steps_joint {
            let base = step % bases;
            let value = joint_step(
                cfg,
                &mut params,
                &mut recon,
                &frames,
                base,
                rollout,
                &estimator,
            )?;
            guard_divergence(cfg.train.steps_align + step, value, &mut initial_loss)?;
            loss_trace.push(value);
        }
    }

    // Final alignment metrics against the frozen targets.
    let (aligned, coarse) = alignment_metrics(&params, &pairs)?;

    let checkpoint = cfg.output.dir.join("checkpoint.bin");
    let mut named = params.named_tensors();
    named.extend(recon.named_tensors());
    let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_checkpoint(&checkpoint, &refs)?;

    let mut trace_csv = String::from("step,loss\n");
    for (i, l) in loss_trace.iter().enumerate() {
        trace_csv.push_str(&format!("{i},{l:.12e}\n"));
    }
    std::fs::write(cfg.output.dir.join("loss_trace.csv"), trace_csv)?;

    let report = TrainReport {
        steps_align: cfg.train.steps_align,
        steps_joint: cfg.train.steps_joint,
        loss_trace,
        final_aligned_mse: aligned,
        final_coarse_mse: coarse,
        checkpoint,
        wall_clock_sec: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("report: {e}")))?;
    std::fs::write(cfg.output.dir.join("train_report.json"), json)?;
    Ok(report)
}

/// w·λ·D plus the offset-magnitude rate proxy.
fn weighted_loss<T: Scalar>(
    g: &Graph<T>,
    out: &TsmcGraphOut,
    distortion: Var,
    w: f64,
    lambda: f64,
    rproxy_weight: f64,
) -> Result<Var> {
    let weighted = g.scale(distortion, w * lambda);
    if rproxy_weight == 0.0 {
        return Ok(weighted);
    }
    let mut proxy: Option<Var> = None;
    for s in 0..3 {
        let m = g.mean_all(g.abs(out.offsets_coarse[s]));
        proxy = Some(match proxy {
            Some(acc) => g.add(acc, m)?,
            None => m,
        });
    }
    let proxy = g.scale(proxy.expect("three levels"), rproxy_weight / 3.0);
    g.add(weighted, proxy)
}

fn guard_divergence(step: usize, value: f64, initial: &mut Option<f64>) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged(format!(
            "loss became non-finite at step {step}"
        )));
    }
    match initial {
        None => *initial = Some(value.max(1e-12)),
        Some(init) => {
            if value > 1e3 * *init {
                return Err(Error::Diverged(format!(
                    "loss {value:.6e} at step {step} exceeds 1000x the initial {init:.6e}; \
                     lower the learning rate"
                )));
            }
        }
    }
    Ok(())
}

fn collect_trainable_grads<T: Scalar>(
    g: &Graph<T>,
    vars: &FgdVars,
    into: &mut HashMap<String, Tensor<T>>,
) {
    vars.visit_trainable(&mut |name, var| {
        if let Some(grad) = g.grad(var) {
            match into.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    into.insert(name, grad);
                }
            }
        }
    });
}

fn apply_grads<T: Scalar>(
    params: &mut FgdParams<T>,
    recon: &mut ReconHead<T>,
    grads: &HashMap<String, Tensor<T>>,
    lr: f64,
) {
    let step = T::of(lr);
    params.visit_tensors_mut(&mut |name, tensor| {
        if let Some(grad) = grads.get(&name) {
            for (v, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                *v = *v - step * *g;
            }
        }
    });
    for (name, tensor) in [
        ("recon.weight", &mut recon.conv.weight),
        ("recon.bias", &mut recon.conv.bias),
    ] {
        if let Some(grad) = grads.get(name) {
            for (v, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                *v = *v - step * *g;
            }
        }
    }
}

/// One joint rollout: reconstruct a mini-GOP frame by frame (references
/// detached), schedule the weights from the realized PSNR trace, then take
/// a single descent step on the summed weighted losses.
#[allow(clippy::too_many_arguments)]
fn joint_step<T: Scalar>(
    cfg: &ExperimentConfig,
    params: &mut FgdParams<T>,
    recon: &mut ReconHead<T>,
    frames: &[Frame],
    base: usize,
    rollout: usize,
    estimator: &crate::flow::PyramidLk,
) -> Result<f64> {
    let lambda = cfg.rate.lambda;
    let mut reference = frames[base].clone();
    let mut trace = vec![metrics::psnr(&frames[base], &reference)?];
    let mut recorded: Vec<(Graph<T>, FgdVars, Var, Var)> = Vec::with_capacity(rollout - 1);

    for t in 1..rollout {
        let cur = &frames[base + t];
        let (cur_p, orig) = pad_to_multiple(cur, cfg.protocol.pad_multiple)?;
        let (ref_p, _) = pad_to_multiple(&reference, cfg.protocol.pad_multiple)?;
        let flow = compute_flow(cfg, &cur_p, &ref_p, estimator)?;
        let lf = level_flows(&flow)?;

        let g: Graph<T> = Graph::new();
        let vars = params.bind(&g, true);
        let (rw, rb) = recon.bind(&g, true);
        let frame = g.constant(ref_p.to_rgb_tensor()?);
        let flows = [
            g.constant(lf[0].to_tensor()),
            g.constant(lf[1].to_tensor()),
            g.constant(lf[2].to_tensor()),
        ];
        let out = tsmc_forward_graph(&g, &vars, frame, &flows)?;
        let rec = g.conv2d(out.contexts[0], rw, rb, 1, 1)?;
        let target = g.constant(cur_p.to_rgb_tensor()?);
        let d = g.mse(rec, target)?;
        let loss_unweighted = weighted_loss(&g, &out, d, 1.0, lambda, cfg.train.rproxy_weight)?;

        let rec_frame = crop_frame(
            &Frame::from_rgb_tensor(&g.tensor(rec))?,
            orig.width,
            orig.height,
        )?;
        trace.push(metrics::psnr(cur, &rec_frame)?);
        reference = rec_frame;
        recorded.push((g, vars, rw, loss_unweighted));
        let _ = rb;
    }

    let weights = if cfg.mrqa.enabled {
        let mut state = MrqaState::new(lambda, cfg.rate.lambda_max)?;
        if let Some(base_w) = cfg.mrqa.base_weights {
            state = state.with_base_weights(base_w);
        }
        schedule_rollout(&trace, &state)?
    } else {
        vec![1.0; rollout - 1]
    };

    let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
    let mut total = 0.0;
    for ((g, vars, rw, loss), w) in recorded.iter().zip(&weights) {
        // The weight multiplies the whole w·λ·D term; the proxy rides along.
        let weighted = g.scale(*loss, *w);
        g.backward(weighted)?;
        total += g.tensor(weighted).data()[0].as_f64();
        collect_trainable_grads(g, vars, &mut grads);
        for (name, var) in [("recon.weight", *rw)] {
            if let Some(grad) = g.grad(var) {
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        grads.insert(name.to_string(), grad);
                    }
                }
            }
        }
    }
    apply_grads(params, recon, &grads, cfg.train.lr);
    Ok(total)
}

fn tensor_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    acc / a.numel() as f64
}

fn alignment_metrics<T: Scalar>(
    params: &FgdParams<T>,
    pairs: &[PairData<T>],
) -> Result<(f64, f64)> {
    let mut aligned = 0.0;
    let mut coarse = 0.0;
    for pair in pairs {
        let out = tsmc_forward(&pair.reference_padded, &pair.flow, params)?;
        for s in 0..3 {
            aligned += tensor_mse(&out.contexts[s], &pair.targets[s]) / 3.0;
            coarse += tensor_mse(&out.warped[s], &pair.targets[s]) / 3.0;
        }
    }
    Ok((aligned / pairs.len() as f64, coarse / pairs.len() as f64))
}
