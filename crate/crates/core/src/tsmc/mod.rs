//! Two-stage motion compensation with flow-guided deformable warping.
//!
//! Stage one bilinearly warps multi-scale reference features with the
//! (downscaled) optical flow. Stage two fuses the warped and unwarped
//! features to predict per-tap sampling offsets and modulation masks for a
//! deformable convolution that realigns the original features; a small
//! residual stack refines the aligned contexts. Offsets are inferred from
//! the flow and features — nothing besides the flow is transmitted.
//!
//! At initialization the module degenerates to pure flow-guided warping:
//! the coarse offset branch is zeroed and the fine branch replicates the
//! flow into every kernel tap, so training starts from a sensible
//! alignment instead of noise.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};

use crate::error::{Error, Result};
use crate::flow::{rescale_flow, FlowField};
use crate::imageio::Frame;
use crate::numerics::{identity_grid, ConvSpec, Graph, ResBlockSpec, Scalar, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Width/group/kernel settings of the alignment module.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TsmcConfig {
    /// Feature channels per pyramid level (increasing width).
    pub channels: [usize; 3],
    /// Deformable groups (input channels are partitioned across them).
    pub groups: usize,
    /// Kernel size of the prediction and deformable convolutions.
    pub kernel: usize,
}

impl Default for TsmcConfig {
    fn default() -> Self {
        TsmcConfig {
            channels: [32, 64, 96],
            groups: 1,
            kernel: 3,
        }
    }
}

impl TsmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::arg(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.groups == 0 {
            return Err(Error::arg("groups must be >= 1".to_string()));
        }
        for (s, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::arg("channel counts must be positive".to_string()));
            }
            if c % self.groups != 0 {
                return Err(Error::arg(format!(
                    "level-{} channels {c} not divisible by {} groups",
                    s + 1,
                    self.groups
                )));
            }
        }
        Ok(())
    }

    fn taps(&self) -> usize {
        self.groups * self.kernel * self.kernel
    }

    /// Offset channels (2·G·k²) and mask channels (G·k²) of one level.
    pub fn offset_mask_channels(&self) -> (usize, usize) {
        (2 * self.taps(), self.taps())
    }
}

/// Learned parameters of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelParams<T: Scalar> {
    /// Pyramid extraction: stride-1 at level 1, stride-2 below.
    pub pyr_conv: ConvSpec<T>,
    pub pyr_res: ResBlockSpec<T>,
    /// Hidden branch over concat[warped, reference] features.
    pub hidden_res: ResBlockSpec<T>,
    /// Projects the hidden representation to offsets + mask logits.
    pub hidden_conv: ConvSpec<T>,
    /// Fine offsets straight from the flow.
    pub fine_conv: ConvSpec<T>,
    /// Deformable alignment convolution.
    pub deform: ConvSpec<T>,
    pub refine: [ResBlockSpec<T>; 2],
}

/// All learned parameters of the alignment module.
#[derive(Clone, Debug)]
pub struct FgdParams<T: Scalar> {
    pub cfg: TsmcConfig,
    pub levels: Vec<LevelParams<T>>,
}

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

fn random_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> ConvSpec<T> {
    let pad = (k - 1) / 2;
    ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel: (k, k),
        stride,
        padding: pad,
        weight: uniform_init(rng, &[cout, cin, k, k], cin * k * k),
        bias: Tensor::zeros(&[cout]),
    }
}

/// Residual block whose second conv starts at zero, making it an exact
/// identity at initialization.
fn identity_resblock<T: Scalar>(rng: &mut ChaCha8Rng, channels: usize, k: usize) -> ResBlockSpec<T> {
    let pad = (k - 1) / 2;
    ResBlockSpec {
        conv1: random_conv(rng, channels, channels, k, 1),
        conv2: ConvSpec::zeros(channels, channels, (k, k), 1, pad),
    }
}

impl<T: Scalar> FgdParams<T> {
    /// Training initialization: random (frozen) pyramid, zeroed coarse
    /// branch (offsets 0, mask 0.5), flow-replicating fine branch,
    /// identity refinement. The deformable center tap carries weight 2 =
    /// 1/sigmoid(0) so the 0.5 mask cancels and the module starts as an
    /// exact flow-guided warp.
    pub fn init(cfg: TsmcConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, 0.0, 2.0)
    }

    /// Like [`FgdParams::init`] but with unit center taps and the mask
    /// logits biased so far positive that the sigmoid saturates to exactly
    /// 1, making the whole module an exact identity pipeline under zero
    /// flow.
    pub fn identity_degenerate(cfg: TsmcConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, 40.0, 1.0)
    }

    fn build(cfg: TsmcConfig, seed: u64, mask_bias: f64, center_tap: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.kernel;
        let (off_ch, mask_ch) = cfg.offset_mask_channels();
        let mut levels = Vec::with_capacity(3);
        for s in 0..3 {
            let c = cfg.channels[s];
            let (pyr_in, stride) = if s == 0 {
                (3, 1)
            } else {
                (cfg.channels[s - 1], 2)
            };
            let pyr_conv = random_conv(&mut rng, pyr_in, c, k, stride);
            let pyr_res = identity_resblock(&mut rng, c, k);

            let hidden_res = identity_resblock(&mut rng, 2 * c, k);
            let mut hidden_conv = ConvSpec::zeros(2 * c, off_ch + mask_ch, (k, k), 1, (k - 1) / 2);
            for m in 0..mask_ch {
                hidden_conv.bias.data_mut()[off_ch + m] = T::of(mask_bias);
            }

            // Fine branch replicates (vx, vy) into every tap's offset slot.
            let mut fine_conv = ConvSpec::zeros(2, off_ch, (k, k), 1, (k - 1) / 2);
            let center = (k / 2) * k + k / 2;
            for t in 0..cfg.taps() {
                let w = fine_conv.weight.data_mut();
                w[(2 * t) * 2 * k * k + center] = T::one(); // x ← vx
                w[(2 * t + 1) * 2 * k * k + k * k + center] = T::one(); // y ← vy
            }

            // Center-tap identity alignment weights.
            let mut deform = ConvSpec::zeros(c, c, (k, k), 1, (k - 1) / 2);
            for ch in 0..c {
                deform.weight.data_mut()[(ch * c + ch) * k * k + center] = T::of(center_tap);
            }

            let refine = [
                identity_resblock(&mut rng, c, k),
                identity_resblock(&mut rng, c, k),
            ];
            levels.push(LevelParams {
                pyr_conv,
                pyr_res,
                hidden_res,
                hidden_conv,
                fine_conv,
                deform,
                refine,
            });
        }
        Ok(FgdParams { cfg, levels })
    }

    /// Visit every tensor with a stable name (checkpoint order).
    pub fn visit_tensors(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (s, l) in self.levels.iter().enumerate() {
            let conv = |name: &str, c: &ConvSpec<T>, f: &mut dyn FnMut(String, &Tensor<T>)| {
                f(format!("level{s}.{name}.weight"), &c.weight);
                f(format!("level{s}.{name}.bias"), &c.bias);
            };
            conv("pyr_conv", &l.pyr_conv, f);
            conv("pyr_res.conv1", &l.pyr_res.conv1, f);
            conv("pyr_res.conv2", &l.pyr_res.conv2, f);
            conv("hidden_res.conv1", &l.hidden_res.conv1, f);
            conv("hidden_res.conv2", &l.hidden_res.conv2, f);
            conv("hidden_conv", &l.hidden_conv, f);
            conv("fine_conv", &l.fine_conv, f);
            conv("deform", &l.deform, f);
            conv("refine0.conv1", &l.refine[0].conv1, f);
            conv("refine0.conv2", &l.refine[0].conv2, f);
            conv("refine1.conv1", &l.refine[1].conv1, f);
            conv("refine1.conv2", &l.refine[1].conv2, f);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (s, l) in self.levels.iter_mut().enumerate() {
            let conv =
                |name: &str, c: &mut ConvSpec<T>, f: &mut dyn FnMut(String, &mut Tensor<T>)| {
                    f(format!("level{s}.{name}.weight"), &mut c.weight);
                    f(format!("level{s}.{name}.bias"), &mut c.bias);
                };
            conv("pyr_conv", &mut l.pyr_conv, f);
            conv("pyr_res.conv1", &mut l.pyr_res.conv1, f);
            conv("pyr_res.conv2", &mut l.pyr_res.conv2, f);
            conv("hidden_res.conv1", &mut l.hidden_res.conv1, f);
            conv("hidden_res.conv2", &mut l.hidden_res.conv2, f);
            conv("hidden_conv", &mut l.hidden_conv, f);
            conv("fine_conv", &mut l.fine_conv, f);
            conv("deform", &mut l.deform, f);
            conv("refine0.conv1", &mut l.refine[0].conv1, f);
            conv("refine0.conv2", &mut l.refine[0].conv2, f);
            conv("refine1.conv1", &mut l.refine[1].conv1, f);
            conv("refine1.conv2", &mut l.refine[1].conv2, f);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Rebuild parameters from named tensors (shape-checked against `cfg`).
    pub fn from_named(cfg: TsmcConfig, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        use std::collections::HashMap;
        let map: HashMap<&str, &Tensor<T>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut params = FgdParams::init(cfg, 0)?;
        let mut missing = Vec::new();
        params.visit_tensors_mut(&mut |name, dst| match map.get(name.as_str()) {
            Some(src) => {
                if src.shape() == dst.shape() {
                    *dst = (*src).clone();
                } else {
                    missing.push(format!(
                        "{name}: shape {:?} in checkpoint, {:?} expected",
                        src.shape(),
                        dst.shape()
                    ));
                }
            }
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "checkpoint does not match configuration: {}",
                missing.join("; ")
            )));
        }
        Ok(params)
    }
}

/// Tape handles for one bound convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvVars {
    /// Bind pre-existing weight/bias nodes as a convolution.
    pub fn new(weight: Var, bias: Var, stride: usize, padding: usize) -> Self {
        ConvVars {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Clone, Debug)]
pub struct LevelVars {
    pub pyr_conv: ConvVars,
    pub pyr_res: ResVars,
    pub hidden_res: ResVars,
    pub hidden_conv: ConvVars,
    pub fine_conv: ConvVars,
    pub deform: ConvVars,
    pub refine: [ResVars; 2],
}

/// Parameters bound onto a graph. The pyramid extractor is always frozen;
/// `trainable` controls whether the alignment branches receive gradients.
#[derive(Clone, Debug)]
pub struct FgdVars {
    pub cfg: TsmcConfig,
    pub levels: Vec<LevelVars>,
}

fn bind_conv<T: Scalar>(g: &Graph<T>, spec: &ConvSpec<T>, train: bool) -> ConvVars {
    ConvVars {
        weight: g.leaf(spec.weight.clone(), train),
        bias: g.leaf(spec.bias.clone(), train),
        stride: spec.stride,
        padding: spec.padding,
    }
}

fn bind_res<T: Scalar>(g: &Graph<T>, spec: &ResBlockSpec<T>, train: bool) -> ResVars {
    ResVars {
        conv1: bind_conv(g, &spec.conv1, train),
        conv2: bind_conv(g, &spec.conv2, train),
    }
}

impl<T: Scalar> FgdParams<T> {
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> FgdVars {
        let levels = self
            .levels
            .iter()
            .map(|l| LevelVars {
                pyr_conv: bind_conv(g, &l.pyr_conv, false),
                pyr_res: bind_res(g, &l.pyr_res, false),
                hidden_res: bind_res(g, &l.hidden_res, trainable),
                hidden_conv: bind_conv(g, &l.hidden_conv, trainable),
                fine_conv: bind_conv(g, &l.fine_conv, trainable),
                deform: bind_conv(g, &l.deform, trainable),
                refine: [
                    bind_res(g, &l.refine[0], trainable),
                    bind_res(g, &l.refine[1], trainable),
                ],
            })
            .collect();
        FgdVars {
            cfg: self.cfg,
            levels,
        }
    }
}

impl FgdVars {
    /// Visit the trainable alignment parameters in checkpoint order,
    /// mirroring [`FgdParams::visit_tensors`] names.
    pub fn visit_trainable(&self, f: &mut dyn FnMut(String, Var)) {
        for (s, l) in self.levels.iter().enumerate() {
            let conv = |name: &str, c: &ConvVars, f: &mut dyn FnMut(String, Var)| {
                f(format!("level{s}.{name}.weight"), c.weight);
                f(format!("level{s}.{name}.bias"), c.bias);
            };
            conv("hidden_res.conv1", &l.hidden_res.conv1, f);
            conv("hidden_res.conv2", &l.hidden_res.conv2, f);
            conv("hidden_conv", &l.hidden_conv, f);
            conv("fine_conv", &l.fine_conv, f);
            conv("deform", &l.deform, f);
            conv("refine0.conv1", &l.refine[0].conv1, f);
            conv("refine0.conv2", &l.refine[0].conv2, f);
            conv("refine1.conv1", &l.refine[1].conv1, f);
            conv("refine1.conv2", &l.refine[1].conv2, f);
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &Graph<T>, x: Var, c: &ConvVars) -> Result<Var> {
    g.conv2d(x, c.weight, c.bias, c.stride, c.padding)
}

pub fn resblock_forward<T: Scalar>(g: &Graph<T>, x: Var, r: &ResVars) -> Result<Var> {
    let h = conv_forward(g, x, &r.conv1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = conv_forward(g, h, &r.conv2)?;
    g.add(x, h)
}

/// Multi-scale reference features {F¹, F², F³} on the tape.
pub fn pyramid_forward<T: Scalar>(g: &Graph<T>, vars: &FgdVars, frame: Var) -> Result<[Var; 3]> {
    let (_, _, h, w) = g.value(frame).dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!(
            "pyramid input {w}x{h} must be divisible by 4"
        )));
    }
    let mut feats = Vec::with_capacity(3);
    let mut x = frame;
    for l in &vars.levels {
        x = conv_forward(g, x, &l.pyr_conv)?;
        x = resblock_forward(g, x, &l.pyr_res)?;
        feats.push(x);
    }
    Ok([feats[0], feats[1], feats[2]])
}

/// Offset/mask prediction for one level on the tape.
pub struct PredictVars {
    pub offsets: Var,
    pub mask: Var,
    pub offsets_coarse: Var,
    pub warped: Var,
}

pub fn predict_forward<T: Scalar>(
    g: &Graph<T>,
    vars: &FgdVars,
    level: usize,
    feat: Var,
    flow: Var,
) -> Result<PredictVars> {
    let (n, _, fh, fw) = g.value(feat).dims4()?;
    let (fn_, two, vh, vw) = g.value(flow).dims4()?;
    if fn_ != n || two != 2 || vh != fh || vw != fw {
        return Err(Error::shape(format!(
            "flow shape {:?} does not match level-{level} feature {:?}",
            g.value(flow).shape(),
            g.value(feat).shape()
        )));
    }
    let lv = &vars.levels[level];
    let (off_ch, mask_ch) = vars.cfg.offset_mask_channels();

    // Stage one: coarse flow-guided warp of the reference feature.
    let grid = g.constant(identity_grid::<T>(n, fh, fw));
    let coords = g.add(grid, flow)?;
    let warped = g.bilinear_sample(feat, coords)?;

    // Fuse warped and unwarped features into offset + mask predictions.
    let cat = g.concat_channels(&[warped, feat])?;
    let hid = resblock_forward(g, cat, &lv.hidden_res)?;
    let hid = conv_forward(g, hid, &lv.hidden_conv)?;
    let parts = g.split_channels(hid, &[off_ch, mask_ch])?;
    let offsets_coarse = parts[0];
    let mask = g.sigmoid(parts[1]);

    let offsets_fine = conv_forward(g, flow, &lv.fine_conv)?;
    let offsets = g.add(offsets_coarse, offsets_fine)?;
    Ok(PredictVars {
        offsets,
        mask,
        offsets_coarse,
        warped,
    })
}

pub fn align_forward<T: Scalar>(
    g: &Graph<T>,
    vars: &FgdVars,
    level: usize,
    feat: Var,
    offsets: Var,
    mask: Var,
) -> Result<Var> {
    let lv = &vars.levels[level];
    g.deform_conv(
        feat,
        offsets,
        mask,
        lv.deform.weight,
        lv.deform.bias,
        lv.deform.stride,
        lv.deform.padding,
        vars.cfg.groups,
    )
}

pub fn refine_forward<T: Scalar>(
    g: &Graph<T>,
    vars: &FgdVars,
    level: usize,
    ctx: Var,
) -> Result<Var> {
    let mut x = ctx;
    for r in &vars.levels[level].refine {
        x = resblock_forward(g, x, r)?;
    }
    Ok(x)
}

/// Full forward on the tape. `flows[s]` must match level-s resolution.
pub struct TsmcGraphOut {
    pub pyramid: [Var; 3],
    pub contexts: [Var; 3],
    pub offsets_coarse: [Var; 3],
    pub warped: [Var; 3],
}

pub fn tsmc_forward_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &FgdVars,
    frame: Var,
    flows: &[Var; 3],
) -> Result<TsmcGraphOut> {
    let pyramid = pyramid_forward(g, vars, frame)?;
    let mut contexts = Vec::with_capacity(3);
    let mut coarse = Vec::with_capacity(3);
    let mut warped = Vec::with_capacity(3);
    for s in 0..3 {
        let p = predict_forward(g, vars, s, pyramid[s], flows[s])?;
        let aligned = align_forward(g, vars, s, pyramid[s], p.offsets, p.mask)?;
        let refined = refine_forward(g, vars, s, aligned)?;
        contexts.push(refined);
        coarse.push(p.offsets_coarse);
        warped.push(p.warped);
    }
    Ok(TsmcGraphOut {
        pyramid,
        contexts: [contexts[0], contexts[1], contexts[2]],
        offsets_coarse: [coarse[0], coarse[1], coarse[2]],
        warped: [warped[0], warped[1], warped[2]],
    })
}

/// Flow downscaled to each pyramid level: v^s = rescale(flow, 2^(1-s)).
pub fn level_flows(flow: &FlowField) -> Result<[FlowField; 3]> {
    Ok([
        rescale_flow(flow, 1.0)?,
        rescale_flow(flow, 0.5)?,
        rescale_flow(flow, 0.25)?,
    ])
}

// ---------------------------------------------------------------------------
// Plain (eager) wrappers over the graph pieces.
// ---------------------------------------------------------------------------

/// Three-level reference feature stack.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<T: Scalar> {
    pub levels: [Tensor<T>; 3],
}

/// Predicted offsets and modulation mask for one level.
#[derive(Clone, Debug)]
pub struct OffsetMask<T: Scalar> {
    pub offsets: Tensor<T>,
    pub mask: Tensor<T>,
    pub level: usize,
}

pub fn build_feature_pyramid<T: Scalar>(
    reference: &Frame,
    params: &FgdParams<T>,
) -> Result<PyramidFeatures<T>> {
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let frame = g.constant(reference.to_rgb_tensor()?);
    let pyr = pyramid_forward(&g, &vars, frame)?;
    Ok(PyramidFeatures {
        levels: [g.tensor(pyr[0]), g.tensor(pyr[1]), g.tensor(pyr[2])],
    })
}

pub fn predict_offsets_masks<T: Scalar>(
    feat_s: &Tensor<T>,
    v_s: &FlowField,
    params: &FgdParams<T>,
    level: usize,
) -> Result<OffsetMask<T>> {
    check_level(level)?;
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let feat = g.constant(feat_s.clone());
    let flow = g.constant(v_s.to_tensor());
    let p = predict_forward(&g, &vars, level, feat, flow)?;
    Ok(OffsetMask {
        offsets: g.tensor(p.offsets),
        mask: g.tensor(p.mask),
        level,
    })
}

pub fn deformable_align<T: Scalar>(
    feat_s: &Tensor<T>,
    om: &OffsetMask<T>,
    params: &FgdParams<T>,
    level: usize,
) -> Result<Tensor<T>> {
    check_level(level)?;
    if om.level != level {
        return Err(Error::arg(format!(
            "offset/mask prepared for level {}, requested level {level}",
            om.level
        )));
    }
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let feat = g.constant(feat_s.clone());
    let off = g.constant(om.offsets.clone());
    let mask = g.constant(om.mask.clone());
    let aligned = align_forward(&g, &vars, level, feat, off, mask)?;
    Ok(g.tensor(aligned))
}

pub fn refine_contexts<T: Scalar>(
    contexts: &[Tensor<T>; 3],
    params: &FgdParams<T>,
) -> Result<[Tensor<T>; 3]> {
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let mut out = Vec::with_capacity(3);
    for (s, c) in contexts.iter().enumerate() {
        let v = g.constant(c.clone());
        let r = refine_forward(&g, &vars, s, v)?;
        out.push(g.tensor(r));
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone()])
}

fn check_level(level: usize) -> Result<()> {
    if level >= 3 {
        return Err(Error::arg(format!("level must be 0..3, got {level}")));
    }
    Ok(())
}

/// Eager full forward: refined contexts plus per-level diagnostics.
#[derive(Clone, Debug)]
pub struct TsmcForward<T: Scalar> {
    pub pyramid: PyramidFeatures<T>,
    pub contexts: [Tensor<T>; 3],
    pub offset_masks: Vec<OffsetMask<T>>,
    /// Stage-one warped features per level.
    pub warped: [Tensor<T>; 3],
    pub level_flows: [FlowField; 3],
}

pub fn tsmc_forward<T: Scalar>(
    reference: &Frame,
    flow: &FlowField,
    params: &FgdParams<T>,
) -> Result<TsmcForward<T>> {
    if reference.width != flow.width || reference.height != flow.height {
        return Err(Error::shape(format!(
            "flow {}x{} does not match frame {}x{}",
            flow.width, flow.height, reference.width, reference.height
        )));
    }
    let flows = level_flows(flow)?;
    let g: Graph<T> = Graph::new();
    let vars = params.bind(&g, false);
    let frame = g.constant(reference.to_rgb_tensor()?);
    let flow_vars = [
        g.constant(flows[0].to_tensor()),
        g.constant(flows[1].to_tensor()),
        g.constant(flows[2].to_tensor()),
    ];
    let out = tsmc_forward_graph(&g, &vars, frame, &flow_vars)?;

    let mut offset_masks = Vec::with_capacity(3);
    for s in 0..3 {
        let p = predict_offsets_masks(&g.tensor(out.pyramid[s]), &flows[s], params, s)?;
        offset_masks.push(p);
    }
    Ok(TsmcForward {
        pyramid: PyramidFeatures {
            levels: [
                g.tensor(out.pyramid[0]),
                g.tensor(out.pyramid[1]),
                g.tensor(out.pyramid[2]),
            ],
        },
        contexts: [
            g.tensor(out.contexts[0]),
            g.tensor(out.contexts[1]),
            g.tensor(out.contexts[2]),
        ],
        offset_masks,
        warped: [
            g.tensor(out.warped[0]),
            g.tensor(out.warped[1]),
            g.tensor(out.warped[2]),
        ],
        level_flows: flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{SynthKind, SynthSequence, SynthSpec};
    use crate::numerics::{compare_gradients, finite_diff_check};

    fn small_cfg() -> TsmcConfig {
        TsmcConfig {
            channels: [4, 6, 8],
            groups: 1,
            kernel: 3,
        }
    }

    fn textured_frame(w: usize, h: usize, seed: u64) -> Frame {
        SynthSequence::new(SynthSpec {
            kind: SynthKind::Static,
            width: w,
            height: h,
            frames: 1,
            seed,
            cell: 12.0,
        })
        .unwrap()
        .frame(0)
        .unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_config() {
        let params = FgdParams::<f64>::init(small_cfg(), 1).unwrap();
        let frame = textured_frame(64, 64, 2);
        let pyr = build_feature_pyramid(&frame, &params).unwrap();
        assert_eq!(pyr.levels[0].shape(), &[1, 4, 64, 64]);
        assert_eq!(pyr.levels[1].shape(), &[1, 6, 32, 32]);
        assert_eq!(pyr.levels[2].shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn pyramid_rejects_unaligned_sizes() {
        let params = FgdParams::<f64>::init(small_cfg(), 1).unwrap();
        let frame = textured_frame(66, 64, 2);
        assert!(build_feature_pyramid(&frame, &params).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let params = FgdParams::<f64>::init(small_cfg(), 3).unwrap();
        let frame = Frame::rgb_filled(32, 32, 0);
        let pyr = build_feature_pyramid(&frame, &params).unwrap();
        for l in &pyr.levels {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn initialization_gives_zero_offsets_and_half_mask() {
        let params = FgdParams::<f64>::init(small_cfg(), 4).unwrap();
        let frame = textured_frame(32, 32, 5);
        let pyr = build_feature_pyramid(&frame, &params).unwrap();
        let flow = FlowField::zeros(32, 32);
        let om = predict_offsets_masks(&pyr.levels[0], &flow, &params, 0).unwrap();
        assert!(om.offsets.data().iter().all(|&v| v == 0.0));
        assert!(om.mask.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_flow_replicates_into_every_tap() {
        let params = FgdParams::<f64>::init(small_cfg(), 4).unwrap();
        let frame = textured_frame(32, 32, 5);
        let pyr = build_feature_pyramid(&frame, &params).unwrap();
        let flow = FlowField::constant(32, 32, 2.75, 0.0);
        let om = predict_offsets_masks(&pyr.levels[0], &flow, &params, 0).unwrap();
        let (n, c, h, w) = om.offsets.dims4().unwrap();
        assert_eq!((n, c), (1, 18));
        for t in 0..9 {
            for i in 0..h * w {
                assert_eq!(om.offsets.data()[(2 * t) * h * w + i], 2.75, "tap {t} x");
                assert_eq!(om.offsets.data()[(2 * t + 1) * h * w + i], 0.0, "tap {t} y");
            }
        }
    }

    #[test]
    fn identity_degenerate_reproduces_pyramid_bit_exact() {
        let params = FgdParams::<f64>::identity_degenerate(small_cfg(), 6).unwrap();
        let frame = textured_frame(32, 32, 7);
        let flow = FlowField::zeros(32, 32);
        let out = tsmc_forward(&frame, &flow, &params).unwrap();
        for s in 0..3 {
            assert_eq!(out.contexts[s], out.pyramid.levels[s], "level {s}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = FgdParams::<f32>::init(small_cfg(), 8).unwrap();
        let seq = SynthSequence::new(SynthSpec {
            kind: SynthKind::GlobalShift { dx: -2.0, dy: 1.0 },
            width: 32,
            height: 32,
            frames: 2,
            seed: 9,
            cell: 12.0,
        })
        .unwrap();
        let reference = seq.frame(0).unwrap();
        let flow = FlowField::constant(32, 32, 1.3, -0.4);
        let a = tsmc_forward(&reference, &flow, &params).unwrap();
        let b = tsmc_forward(&reference, &flow, &params).unwrap();
        for s in 0..3 {
            assert_eq!(a.contexts[s], b.contexts[s]);
        }
    }

    #[test]
    fn refinement_at_init_is_exact_identity() {
        let params = FgdParams::<f64>::init(small_cfg(), 10).unwrap();
        let contexts = [
            Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f64).sin()),
            Tensor::from_fn(&[1, 6, 4, 4], |i| (i as f64).cos()),
            Tensor::from_fn(&[1, 8, 2, 2], |i| i as f64),
        ];
        let refined = refine_contexts(&contexts, &params).unwrap();
        for s in 0..3 {
            assert_eq!(refined[s], contexts[s]);
        }
    }

    #[test]
    fn level_flows_scale_resolution_and_values() {
        let flow = FlowField::constant(32, 16, 4.0, -2.0);
        let lf = level_flows(&flow).unwrap();
        assert_eq!((lf[0].width, lf[0].height), (32, 16));
        assert_eq!((lf[1].width, lf[1].height), (16, 8));
        assert_eq!((lf[2].width, lf[2].height), (8, 4));
        assert!(lf[1].vx.iter().all(|&v| v == 2.0));
        assert!(lf[2].vx.iter().all(|&v| v == 1.0));
        assert!(lf[2].vy.iter().all(|&v| v == -0.5));
    }

    #[test]
    fn shift_offsets_recover_shifted_features_interior() {
        // Features shifted 2 px left; offsets sampling at +2 recover them.
        let params = FgdParams::<f64>::identity_degenerate(small_cfg(), 11).unwrap();
        let (w, h) = (16, 12);
        let feat = Tensor::from_fn(&[1, 4, h, w], |i| ((i * 37 % 101) as f64) * 0.07);
        let shifted = {
            let mut s = Tensor::zeros(&[1, 4, h, w]);
            for c in 0..4 {
                for y in 0..h {
                    for x in 0..w {
                        let sx = (x + 2).min(w - 1);
                        s.data_mut()[(c * h + y) * w + x] = feat.data()[(c * h + y) * w + sx];
                    }
                }
            }
            s
        };
        let om = OffsetMask {
            offsets: {
                let mut o = Tensor::zeros(&[1, 18, h, w]);
                for t in 0..9 {
                    for i in 0..h * w {
                        o.data_mut()[(2 * t) * h * w + i] = 2.0;
                    }
                }
                o
            },
            mask: Tensor::full(&[1, 9, h, w], 1.0),
            level: 0,
        };
        let aligned = deformable_align(&shifted, &om, &params, 0).unwrap();
        // aligned(x) should equal feat shifted twice... compare against
        // sampling the shifted tensor at x+2, i.e. feat(x+4) interior.
        for c in 0..4 {
            for y in 0..h {
                for x in 0..w - 5 {
                    let want = shifted.data()[(c * h + y) * w + x + 2];
                    let got = aligned.data()[(c * h + y) * w + x];
                    assert!((got - want).abs() < 1e-12, "({x},{y},{c})");
                }
            }
        }
    }

    #[test]
    fn predict_chain_passes_gradient_check() {
        use rand::Rng;
        use rand::SeedableRng;
        let cfg = TsmcConfig {
            channels: [2, 4, 6],
            groups: 1,
            kernel: 3,
        };
        let mut params = FgdParams::<f64>::init(cfg, 12).unwrap();
        // Activate the coarse branch so its gradients are exercised.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for v in params.levels[0].hidden_conv.weight.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in params.levels[0].hidden_res.conv2.weight.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let (h, w) = (6, 6);
        let feat = Tensor::from_fn(&[1, 2, h, w], |_| rng.gen_range(-1.0..1.0));
        // Flow jittered off the integer lattice (the sampler is non-smooth there).
        let flow = Tensor::from_fn(&[1, 2, h, w], |_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            let frac = v - v.floor();
            if frac < 0.2 || frac > 0.8 {
                v + 0.37
            } else {
                v
            }
        });
        let p2 = params.clone();
        let report = finite_diff_check(
            move |g, vars| {
                let pv = p2.bind(g, true);
                // Rebind the two probed inputs as the checker's leaves.
                let pred = predict_forward(g, &pv, 0, vars[0], vars[1])?;
                let so = g.sum_all(pred.offsets);
                let sm = g.sum_all(pred.mask);
                g.add(so, sm)
            },
            &[feat.clone(), flow.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel() < 1e-4, "max_rel = {}", report.max_rel());

        // Parameter gradients of the same chain against finite differences.
        let p3 = params.clone();
        let g: Graph<f64> = Graph::new();
        let pv = p3.bind(&g, true);
        let fv = g.constant(feat.clone());
        let fl = g.constant(flow.clone());
        let pred = predict_forward(&g, &pv, 0, fv, fl).unwrap();
        let so = g.sum_all(pred.offsets);
        let sm = g.sum_all(pred.mask);
        let loss = g.add(so, sm).unwrap();
        g.backward(loss).unwrap();
        let wvar = pv.levels[0].hidden_conv.weight;
        let analytic = vec![g.grad(wvar).unwrap()];

        let base = params.levels[0].hidden_conv.weight.clone();
        let numeric = {
            let mut grad = Tensor::zeros(base.shape());
            let eps = 1e-5;
            for j in 0..base.numel() {
                let eval = |delta: f64| -> f64 {
                    let mut p = params.clone();
                    p.levels[0].hidden_conv.weight.data_mut()[j] = base.data()[j] + delta;
                    let g: Graph<f64> = Graph::new();
                    let pv = p.bind(&g, false);
                    let fv = g.constant(feat.clone());
                    let fl = g.constant(flow.clone());
                    let pred = predict_forward(&g, &pv, 0, fv, fl).unwrap();
                    let so = g.sum_all(pred.offsets);
                    let sm = g.sum_all(pred.mask);
                    let loss = g.add(so, sm).unwrap();
                    g.tensor(loss).data()[0]
                };
                grad.data_mut()[j] = (eval(eps) - eval(-eps)) / (2.0 * eps);
            }
            vec![grad]
        };
        let report = compare_gradients(&analytic, &numeric).unwrap();
        assert!(report.max_rel() < 1e-4, "param max_rel = {}", report.max_rel());
    }

    #[test]
    fn checkpoint_round_trip_preserves_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fgdw.ckpt");
        let params = FgdParams::<f32>::init(small_cfg(), 20).unwrap();
        let named = params.named_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(&path, &refs).unwrap();
        let entries = read_checkpoint::<f32>(&path).unwrap();
        let loaded = FgdParams::from_named(small_cfg(), &entries).unwrap();
        for ((na, ta), (nb, tb)) in params.named_tensors().iter().zip(loaded.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn trainable_and_tensor_names_stay_in_sync() {
        let params = FgdParams::<f64>::init(small_cfg(), 1).unwrap();
        let mut all = std::collections::HashSet::new();
        params.visit_tensors(&mut |n, _| {
            all.insert(n);
        });
        let g: Graph<f64> = Graph::new();
        let vars = params.bind(&g, true);
        let mut count = 0;
        vars.visit_trainable(&mut |n, _| {
            assert!(all.contains(&n), "unknown trainable name {n}");
            count += 1;
        });
        assert_eq!(count, 3 * 9 * 2); // 9 trainable convs per level
    }
}
