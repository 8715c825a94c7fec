//! Optical-flow estimation and warping.
//!
//! The estimator is a classical coarse-to-fine dense Lucas-Kanade scheme
//! standing in for a learned flow network: per-level incremental updates
//! over a boxed gradient window, bilinear inter-level upsampling with value
//! doubling, and a per-level fallback to zero flow whenever an update would
//! leave the luma warp error worse than no motion at all. Estimators are
//! pluggable through [`FlowEstimator`].
//!
//! Displacements are stored in pixels at the field's own resolution;
//! positive x points right, positive y down, and `v` maps a current-frame
//! pixel to its location in the reference frame.

use crate::error::{Error, Result};
use crate::imageio::{round_u8, ColorSpace, Frame, Plane};
use crate::numerics::{self, Scalar, Tensor};
use crate::resample::{resize_plane, scaled_dim};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Dense per-pixel displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            vx: vec![0.0; width * height],
            vy: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, vx: f64, vy: f64) -> Self {
        FlowField {
            width,
            height,
            vx: vec![vx; width * height],
            vy: vec![vy; width * height],
        }
    }

    pub fn new(width: usize, height: usize, vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        if vx.len() != width * height || vy.len() != width * height {
            return Err(Error::shape(format!(
                "flow component length {}/{} does not match {width}x{height}",
                vx.len(),
                vy.len()
            )));
        }
        Ok(FlowField {
            width,
            height,
            vx,
            vy,
        })
    }

    /// As a (1, 2, h, w) tensor: channel 0 is vx, channel 1 is vy.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.width * self.height);
        data.extend(self.vx.iter().map(|&v| T::of(v)));
        data.extend(self.vy.iter().map(|&v| T::of(v)));
        Tensor::new(&[1, 2, self.height, self.width], data).expect("flow tensor shape")
    }

    pub fn all_finite(&self) -> bool {
        self.vx.iter().chain(&self.vy).all(|v| v.is_finite())
    }
}

/// RMS flow magnitude with an epsilon floor:
/// sqrt((Σ vx² + Σ vy² + 1e-8) / (H·W)).
pub fn flow_magnitude(flow: &FlowField) -> f64 {
    let mut acc = 0.0;
    for &v in &flow.vx {
        acc += v * v;
    }
    for &v in &flow.vy {
        acc += v * v;
    }
    ((acc + 1e-8) / (flow.width * flow.height) as f64).sqrt()
}

/// Bilinear spatial resampling with displacement values multiplied by the
/// same factor (displacements live in output-resolution pixel units).
/// Non-integer factors round dimensions half-up; factor 1 is the identity.
pub fn rescale_flow(flow: &FlowField, factor: f64) -> Result<FlowField> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::arg(format!(
            "rescale factor must be positive, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(flow.clone());
    }
    let nw = scaled_dim(flow.width, factor);
    let nh = scaled_dim(flow.height, factor);
    let vx = resize_plane(&flow.vx, flow.width, flow.height, nw, nh);
    let vy = resize_plane(&flow.vy, flow.width, flow.height, nw, nh);
    Ok(FlowField {
        width: nw,
        height: nh,
        vx: vx.into_iter().map(|v| v * factor).collect(),
        vy: vy.into_iter().map(|v| v * factor).collect(),
    })
}

/// Resample to an exact target size; values scale by the per-axis ratio.
pub fn rescale_flow_to(flow: &FlowField, nw: usize, nh: usize) -> Result<FlowField> {
    if nw == 0 || nh == 0 {
        return Err(Error::arg("flow target size must be positive".to_string()));
    }
    if nw == flow.width && nh == flow.height {
        return Ok(flow.clone());
    }
    let fx = nw as f64 / flow.width as f64;
    let fy = nh as f64 / flow.height as f64;
    let vx = resize_plane(&flow.vx, flow.width, flow.height, nw, nh);
    let vy = resize_plane(&flow.vy, flow.width, flow.height, nw, nh);
    Ok(FlowField {
        width: nw,
        height: nh,
        vx: vx.into_iter().map(|v| v * fx).collect(),
        vy: vy.into_iter().map(|v| v * fy).collect(),
    })
}

/// Edge-clamped bilinear lookup on an f64 plane.
#[inline]
fn sample_plane(src: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    if fx == 0.0 && fy == 0.0 {
        return src[y0 * w + x0];
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = src[y0 * w + x0];
    let v01 = src[y0 * w + x1];
    let v10 = src[y1 * w + x0];
    let v11 = src[y1 * w + x1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

pub(crate) fn warp_plane_f64(src: &[f64], w: usize, h: usize, flow: &FlowField) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.push(sample_plane(
                src,
                w,
                h,
                x as f64 + flow.vx[i],
                y as f64 + flow.vy[i],
            ));
        }
    }
    out
}

/// Warp a full-resolution frame: output(p) = reference(p + v(p)), bilinear
/// and edge-clamped, quantized back to 8 bits (round half away from zero).
pub fn warp_frame(target: &Frame, flow: &FlowField) -> Result<Frame> {
    if target.color_space == ColorSpace::Yuv420 {
        return Err(Error::ColorSpace(
            "warp requires full-resolution planes (RGB or YUV444)".to_string(),
        ));
    }
    if target.width != flow.width || target.height != flow.height {
        return Err(Error::shape(format!(
            "flow {}x{} does not match frame {}x{}",
            flow.width, flow.height, target.width, target.height
        )));
    }
    let mut planes = Vec::with_capacity(3);
    for p in &target.planes {
        let data = warp_plane_f64(&p.to_f64(), p.width, p.height, flow)
            .into_iter()
            .map(round_u8)
            .collect();
        planes.push(Plane {
            width: p.width,
            height: p.height,
            data,
        });
    }
    Ok(Frame {
        width: target.width,
        height: target.height,
        color_space: target.color_space,
        planes,
    })
}

/// Warp a (n, c, h, w) tensor by the same flow applied to every batch/channel.
pub fn warp_tensor<T: Scalar>(target: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let (n, _c, h, w) = target.dims4()?;
    if w != flow.width || h != flow.height {
        return Err(Error::shape(format!(
            "flow {}x{} does not match tensor {w}x{h}",
            flow.width, flow.height
        )));
    }
    let coords = warp_coords::<T>(flow, n);
    numerics::bilinear_sample(target, &coords)
}

/// Sampling grid for a warp: identity grid plus the flow, shaped (n, 2, h, w).
pub fn warp_coords<T: Scalar>(flow: &FlowField, n: usize) -> Tensor<T> {
    let (w, h) = (flow.width, flow.height);
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                data.push(T::of(x as f64 + flow.vx[y * w + x]));
            }
        }
        for y in 0..h {
            for x in 0..w {
                data.push(T::of(y as f64 + flow.vy[y * w + x]));
            }
        }
    }
    Tensor::new(&[n, 2, h, w], data).expect("coords shape")
}

/// Pluggable flow estimator interface (the scale search is generic over it).
pub trait FlowEstimator: Sync {
    fn estimate(&self, cur: &Frame, reference: &Frame) -> Result<FlowField>;
    /// Smallest frame dimension the estimator accepts.
    fn min_dim(&self) -> usize;
}

/// Coarse-to-fine dense Lucas-Kanade estimator.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLk {
    pub levels: usize,
    pub iters_per_level: usize,
    pub window: usize,
}

impl Default for PyramidLk {
    fn default() -> Self {
        PyramidLk {
            levels: 3,
            iters_per_level: 4,
            window: 7,
        }
    }
}

/// Estimate flow with the default pyramidal estimator configuration.
pub fn estimate_flow(
    cur: &Frame,
    reference: &Frame,
    levels: usize,
    iters_per_level: usize,
) -> Result<FlowField> {
    PyramidLk {
        levels,
        iters_per_level,
        window: 7,
    }
    .estimate(cur, reference)
}

impl FlowEstimator for PyramidLk {
    fn estimate(&self, cur: &Frame, reference: &Frame) -> Result<FlowField> {
        if cur.width != reference.width || cur.height != reference.height {
            return Err(Error::shape(format!(
                "frame sizes differ: {}x{} vs {}x{}",
                cur.width, cur.height, reference.width, reference.height
            )));
        }
        if self.levels == 0 || self.iters_per_level == 0 {
            return Err(Error::arg("levels and iterations must be >= 1".to_string()));
        }
        let min_span = 1usize << (self.levels - 1);
        if cur.width < min_span || cur.height < min_span {
            return Err(Error::shape(format!(
                "{}x{} frame too small for {} pyramid levels (needs >= {min_span}px)",
                cur.width, cur.height, self.levels
            )));
        }

        let (w0, h0) = (cur.width, cur.height);
        let cur_luma = cur.luma_f64();
        let ref_luma = reference.luma_f64();

        // Chained halving; dimensions derived from the original each level.
        let mut dims = vec![(w0, h0)];
        let mut cur_pyr = vec![cur_luma];
        let mut ref_pyr = vec![ref_luma];
        for l in 1..self.levels {
            let nw = scaled_dim(w0, 1.0 / (1usize << l) as f64);
            let nh = scaled_dim(h0, 1.0 / (1usize << l) as f64);
            let (pw, ph) = dims[l - 1];
            cur_pyr.push(resize_plane(&cur_pyr[l - 1], pw, ph, nw, nh));
            ref_pyr.push(resize_plane(&ref_pyr[l - 1], pw, ph, nw, nh));
            dims.push((nw, nh));
        }

        let coarsest = self.levels - 1;
        let mut flow = FlowField::zeros(dims[coarsest].0, dims[coarsest].1);
        for l in (0..self.levels).rev() {
            let (lw, lh) = dims[l];
            if flow.width != lw || flow.height != lh {
                flow = rescale_flow_to(&flow, lw, lh)?;
            }
            for _ in 0..self.iters_per_level {
                lk_iteration(&cur_pyr[l], &ref_pyr[l], lw, lh, self.window, &mut flow);
            }
            // Never leave a level with a flow worse than no motion at all.
            let sse_flow = warp_sse(&ref_pyr[l], &cur_pyr[l], lw, lh, &flow);
            let sse_zero = zero_sse(&ref_pyr[l], &cur_pyr[l]);
            if sse_flow > sse_zero {
                flow = FlowField::zeros(lw, lh);
            }
        }
        Ok(flow)
    }

    fn min_dim(&self) -> usize {
        (1usize << (self.levels - 1)).max(8)
    }
}

fn zero_sse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn warp_sse(reference: &[f64], cur: &[f64], w: usize, h: usize, flow: &FlowField) -> f64 {
    let warped = warp_plane_f64(reference, w, h, flow);
    zero_sse(&warped, cur)
}

/// Summed-area table with a zero row/column; lookups give inclusive box sums.
struct Sat {
    w: usize,
    t: Vec<f64>,
}

impl Sat {
    fn build(src: &[f64], w: usize, h: usize) -> Self {
        let mut t = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[y * w + x];
                t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
            }
        }
        Sat { w, t }
    }

    #[inline]
    fn boxsum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.t[(y1 + 1) * s + x1 + 1] + self.t[y0 * s + x0]
            - self.t[y0 * s + x1 + 1]
            - self.t[(y1 + 1) * s + x0]
    }
}

fn lk_iteration(
    cur: &[f64],
    reference: &[f64],
    w: usize,
    h: usize,
    window: usize,
    flow: &mut FlowField,
) {
    let warped = warp_plane_f64(reference, w, h, flow);

    // Spatial gradients of the warped reference (clamped central differences).
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx[y * w + x] = (warped[y * w + xp] - warped[y * w + xm]) / (xp - xm).max(1) as f64;
            gy[y * w + x] = (warped[yp * w + x] - warped[ym * w + x]) / (yp - ym).max(1) as f64;
        }
    }

    let n = w * h;
    let mut gxx = vec![0.0; n];
    let mut gxy = vec![0.0; n];
    let mut gyy = vec![0.0; n];
    let mut gxe = vec![0.0; n];
    let mut gye = vec![0.0; n];
    for i in 0..n {
        let e = warped[i] - cur[i];
        gxx[i] = gx[i] * gx[i];
        gxy[i] = gx[i] * gy[i];
        gyy[i] = gy[i] * gy[i];
        gxe[i] = gx[i] * e;
        gye[i] = gy[i] * e;
    }
    let sxx = Sat::build(&gxx, w, h);
    let sxy = Sat::build(&gxy, w, h);
    let syy = Sat::build(&gyy, w, h);
    let sxe = Sat::build(&gxe, w, h);
    let sye = Sat::build(&gye, w, h);

    let r = window / 2;
    let step_cap = (window as f64) / 2.0;
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let a = sxx.boxsum(x0, y0, x1, y1);
            let b = sxy.boxsum(x0, y0, x1, y1);
            let c = syy.boxsum(x0, y0, x1, y1);
            let bx = sxe.boxsum(x0, y0, x1, y1);
            let by = sye.boxsum(x0, y0, x1, y1);
            let det = a * c - b * b;
            let trace = a + c;
            let lambda_min = 0.5 * (trace - ((a - c) * (a - c) + 4.0 * b * b).sqrt());
            if det <= 1e-9 || lambda_min <= 1e-3 {
                continue; // aperture-degenerate window
            }
            let dx = -(c * bx - b * by) / det;
            let dy = -(-b * bx + a * by) / det;
            let i = y * w + x;
            flow.vx[i] += dx.clamp(-step_cap, step_cap);
            flow.vy[i] += dy.clamp(-step_cap, step_cap);
        }
    }
}

/// Dump format: one ASCII header line `FLOW <width> <height>\n`, then
/// row-major little-endian f32 pairs (vx, vy) per pixel.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "FLOW {} {}", flow.width, flow.height)?;
    for i in 0..flow.width * flow.height {
        out.write_all(&(flow.vx[i] as f32).to_le_bytes())?;
        out.write_all(&(flow.vy[i] as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        reader.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        header.push(b[0]);
        if header.len() > 64 {
            return Err(Error::data("flow header line too long".to_string()));
        }
    }
    let header =
        String::from_utf8(header).map_err(|_| Error::data("flow header not UTF-8".to_string()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "FLOW" {
        return Err(Error::data(format!("bad flow header: {header:?}")));
    }
    let w: usize = parts[1]
        .parse()
        .map_err(|_| Error::data(format!("bad flow width {:?}", parts[1])))?;
    let h: usize = parts[2]
        .parse()
        .map_err(|_| Error::data(format!("bad flow height {:?}", parts[2])))?;
    let mut vx = Vec::with_capacity(w * h);
    let mut vy = Vec::with_capacity(w * h);
    let mut buf = [0u8; 8];
    for _ in 0..w * h {
        reader.read_exact(&mut buf)?;
        vx.push(f32::from_le_bytes(buf[0..4].try_into().unwrap()) as f64);
        vy.push(f32::from_le_bytes(buf[4..8].try_into().unwrap()) as f64);
    }
    FlowField::new(w, h, vx, vy)
}
