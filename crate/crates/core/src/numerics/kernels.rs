//! Forward and backward kernels for the convolution/sampling operator set.
//!
//! Two bilinear samplers live here on purpose. The standalone sampler
//! (`bilinear_sample_*`) edge-clamps out-of-bounds positions, which is the
//! warping semantic. The sampler inside the deformable convolution returns
//! zero outside the frame so that zero offsets with a unit mask reproduce
//! the zero-padded regular convolution bit for bit (same tap order, same
//! accumulation order).

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::arg("convolution stride must be >= 1".to_string()));
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, cin_w, kh, kw) = weight.dims4()?;
    if cin != cin_w {
        return Err(Error::shape(format!(
            "input has {cin} channels but weight expects {cin_w} (weight {:?}, input {:?})",
            weight.shape(),
            input.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok((n, cin, h, w, cout, kh, kw))
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, kh, kw) = check_conv_args(input, weight, bias)?;
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];

    for bi in 0..n {
        for oc in 0..cout {
            let w_oc = &wt[oc * cin * kh * kw..(oc + 1) * cin * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..cin {
                        let plane = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                        let w_ic = &w_oc[ic * kh * kw..(ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + w_ic[ky * kw + kx] * row[ix as usize];
                            }
                        }
                    }
                    out[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    needs: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let (gn, gc, oh, ow) = grad_out.dims4()?;
    if gn != n || gc != cout {
        return Err(Error::shape(format!(
            "grad_out shape {:?} inconsistent with conv output",
            grad_out.shape()
        )));
    }

    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let mut gi = if needs.0 {
        Some(vec![T::zero(); n * cin * h * w])
    } else {
        None
    };
    let mut gw = if needs.1 {
        Some(vec![T::zero(); cout * cin * kh * kw])
    } else {
        None
    };
    let mut gb = if needs.2 {
        Some(vec![T::zero(); cout])
    } else {
        None
    };

    for bi in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((bi * cout + oc) * oh + oy) * ow + ox];
                    if let Some(gb) = gb.as_mut() {
                        gb[oc] = gb[oc] + g;
                    }
                    if gi.is_none() && gw.is_none() {
                        continue;
                    }
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                if let Some(gi) = gi.as_mut() {
                                    gi[xi] = gi[xi] + g * wt[wi];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] = gw[wi] + g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: gi.map(|d| Tensor::new(&[n, cin, h, w], d).expect("conv grad shape")),
        weight: gw.map(|d| Tensor::new(&[cout, cin, kh, kw], d).expect("conv grad shape")),
        bias: gb.map(|d| Tensor::new(&[cout], d).expect("conv grad shape")),
    })
}

/// Edge-clamped bilinear lookup of `plane` (h×w) at position (px, py).
/// Exact gather when the position lands on the integer lattice.
#[inline]
fn sample_clamped<T: Scalar>(plane: &[T], h: usize, w: usize, px: T, py: T) -> T {
    let max_x = T::of((w - 1) as f64);
    let max_y = T::of((h - 1) as f64);
    let x = px.max(T::zero()).min(max_x);
    let y = py.max(T::zero()).min(max_y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0.as_f64() as usize;
    let y0 = y0.as_f64() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    if fx == T::zero() && fy == T::zero() {
        return plane[y0 * w + x0];
    }
    let one = T::one();
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

fn check_coords<T: Scalar>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = feature.dims4()?;
    let (cn, two, oh, ow) = coords.dims4()?;
    if cn != n || two != 2 {
        return Err(Error::shape(format!(
            "coords must be shaped [{n}, 2, oh, ow], got {:?}",
            coords.shape()
        )));
    }
    Ok((n, c, h, w, oh, ow))
}

/// Bilinear gather at absolute positions. Coordinate channel 0 is x,
/// channel 1 is y; positions outside the frame use edge-clamped neighbors.
pub(crate) fn bilinear_sample_forward<T: Scalar>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = check_coords(feature, coords)?;
    let f = feature.data();
    let cd = coords.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for bi in 0..n {
        let cx = &cd[bi * 2 * oh * ow..(bi * 2 + 1) * oh * ow];
        let cy = &cd[(bi * 2 + 1) * oh * ow..(bi * 2 + 2) * oh * ow];
        for ch in 0..c {
            let plane = &f[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            let dst = &mut out[(bi * c + ch) * oh * ow..(bi * c + ch + 1) * oh * ow];
            for i in 0..oh * ow {
                dst[i] = sample_clamped(plane, h, w, cx[i], cy[i]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn bilinear_sample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    feature: &Tensor<T>,
    coords: &Tensor<T>,
    needs: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, c, h, w, oh, ow) = check_coords(feature, coords)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match sample output",
            grad_out.shape()
        )));
    }
    let f = feature.data();
    let cd = coords.data();
    let go = grad_out.data();
    let one = T::one();

    let mut gf = if needs.0 {
        Some(vec![T::zero(); n * c * h * w])
    } else {
        None
    };
    let mut gc = if needs.1 {
        Some(vec![T::zero(); n * 2 * oh * ow])
    } else {
        None
    };

    for bi in 0..n {
        for i in 0..oh * ow {
            let px = cd[bi * 2 * oh * ow + i];
            let py = cd[(bi * 2 + 1) * oh * ow + i];
            let inside_x = px >= T::zero() && px <= T::of((w - 1) as f64);
            let inside_y = py >= T::zero() && py <= T::of((h - 1) as f64);
            let x = px.max(T::zero()).min(T::of((w - 1) as f64));
            let y = py.max(T::zero()).min(T::of((h - 1) as f64));
            let x0f = x.floor();
            let y0f = y.floor();
            let fx = x - x0f;
            let fy = y - y0f;
            let x0 = x0f.as_f64() as usize;
            let y0 = y0f.as_f64() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);

            let mut dval_dx_sum = T::zero();
            let mut dval_dy_sum = T::zero();
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let g = go[(bi * c + ch) * oh * ow + i];
                if let Some(gf) = gf.as_mut() {
                    gf[base + y0 * w + x0] =
                        gf[base + y0 * w + x0] + g * (one - fy) * (one - fx);
                    gf[base + y0 * w + x1] = gf[base + y0 * w + x1] + g * (one - fy) * fx;
                    gf[base + y1 * w + x0] = gf[base + y1 * w + x0] + g * fy * (one - fx);
                    gf[base + y1 * w + x1] = gf[base + y1 * w + x1] + g * fy * fx;
                }
                if gc.is_some() {
                    let v00 = f[base + y0 * w + x0];
                    let v01 = f[base + y0 * w + x1];
                    let v10 = f[base + y1 * w + x0];
                    let v11 = f[base + y1 * w + x1];
                    dval_dx_sum = dval_dx_sum + g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    dval_dy_sum = dval_dy_sum + g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let Some(gc) = gc.as_mut() {
                // Clamped positions are flat in the clamped direction.
                if inside_x {
                    gc[bi * 2 * oh * ow + i] = dval_dx_sum;
                }
                if inside_y {
                    gc[(bi * 2 + 1) * oh * ow + i] = dval_dy_sum;
                }
            }
        }
    }

    Ok((
        gf.map(|d| Tensor::new(&[n, c, h, w], d).expect("grad shape")),
        gc.map(|d| Tensor::new(&[n, 2, oh, ow], d).expect("grad shape")),
    ))
}

/// Zero-outside bilinear lookup used by the deformable convolution.
#[inline]
fn sample_zero<T: Scalar>(plane: &[T], h: usize, w: usize, px: T, py: T) -> T {
    let hh = T::of(h as f64);
    let ww = T::of(w as f64);
    let neg1 = -T::one();
    if !(px > neg1 && px < ww && py > neg1 && py < hh) {
        return T::zero();
    }
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = px - x0f;
    let fy = py - y0f;
    let x0 = x0f.as_f64() as isize;
    let y0 = y0f.as_f64() as isize;
    if fx == T::zero() && fy == T::zero() {
        return if x0 >= 0 && y0 >= 0 {
            plane[y0 as usize * w + x0 as usize]
        } else {
            T::zero()
        };
    }
    let x1 = x0 + 1;
    let y1 = y0 + 1;
    let at = |yy: isize, xx: isize| -> T {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            plane[yy as usize * w + xx as usize]
        } else {
            T::zero()
        }
    };
    let one = T::one();
    let v00 = at(y0, x0);
    let v01 = at(y0, x1);
    let v10 = at(y1, x0);
    let v11 = at(y1, x1);
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

#[allow(clippy::too_many_arguments)]
fn check_deform_args<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w, cout, kh, kw) = check_conv_args(input, weight, bias)?;
    if groups == 0 || cin % groups != 0 {
        return Err(Error::shape(format!(
            "input channels {cin} not divisible by {groups} deformable groups"
        )));
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let taps = groups * kh * kw;
    if offsets.shape() != [n, 2 * taps, oh, ow] {
        return Err(Error::shape(format!(
            "offsets shape {:?}, expected [{n}, {}, {oh}, {ow}] (2·G·kh·kw)",
            offsets.shape(),
            2 * taps
        )));
    }
    if mask.shape() != [n, taps, oh, ow] {
        return Err(Error::shape(format!(
            "mask shape {:?}, expected [{n}, {taps}, {oh}, {ow}] (G·kh·kw)",
            mask.shape()
        )));
    }
    Ok((n, cin, h, w, cout, kh, kw, oh, ow))
}

/// Modulated deformable convolution. Tap `t = g·kh·kw + ky·kw + kx` of
/// deformable group `g` reads its x displacement from offset channel `2t`
/// and its y displacement from channel `2t + 1`; mask channel `t` scales
/// the sampled value before the weighted sum.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) =
        check_deform_args(input, offsets, mask, weight, bias, stride, padding, groups)?;
    let x = input.data();
    let off = offsets.data();
    let m = mask.data();
    let wt = weight.data();
    let b = bias.data();
    let chans_per_group = cin / groups;
    let taps = groups * kh * kw;
    let plane_o = oh * ow;

    let mut out = vec![T::zero(); n * cout * oh * ow];
    for bi in 0..n {
        let off_b = &off[bi * 2 * taps * plane_o..(bi + 1) * 2 * taps * plane_o];
        let m_b = &m[bi * taps * plane_o..(bi + 1) * taps * plane_o];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let pi = oy * ow + ox;
                    let mut acc = b[oc];
                    for ic in 0..cin {
                        let g = ic / chans_per_group;
                        let plane = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let t = g * kh * kw + ky * kw + kx;
                                let dx = off_b[2 * t * plane_o + pi];
                                let dy = off_b[(2 * t + 1) * plane_o + pi];
                                let px = T::of((ox * stride + kx) as f64 - padding as f64) + dx;
                                let py = T::of((oy * stride + ky) as f64 - padding as f64) + dy;
                                let mv = m_b[t * plane_o + pi];
                                let v = sample_zero(plane, h, w, px, py);
                                acc = acc + wt[((oc * cin + ic) * kh + ky) * kw + kx] * (mv * v);
                            }
                        }
                    }
                    out[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub(crate) struct DeformGrads<T> {
    pub input: Option<Tensor<T>>,
    pub offsets: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    needs: (bool, bool, bool, bool, bool),
) -> Result<DeformGrads<T>> {
    let (n, cin, h, w, cout, kh, kw, oh, ow) =
        check_deform_args(input, offsets, mask, weight, bias, stride, padding, groups)?;
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match deformable output",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let off = offsets.data();
    let m = mask.data();
    let wt = weight.data();
    let go = grad_out.data();
    let chans_per_group = cin / groups;
    let taps = groups * kh * kw;
    let plane_o = oh * ow;
    let one = T::one();

    let mut gi = needs.0.then(|| vec![T::zero(); n * cin * h * w]);
    let mut goff = needs.1.then(|| vec![T::zero(); n * 2 * taps * plane_o]);
    let mut gm = needs.2.then(|| vec![T::zero(); n * taps * plane_o]);
    let mut gw = needs.3.then(|| vec![T::zero(); cout * cin * kh * kw]);
    let mut gb = needs.4.then(|| vec![T::zero(); cout]);

    for bi in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let pi = oy * ow + ox;
                    let g = go[((bi * cout + oc) * oh + oy) * ow + ox];
                    if let Some(gb) = gb.as_mut() {
                        gb[oc] = gb[oc] + g;
                    }
                    for ic in 0..cin {
                        let grp = ic / chans_per_group;
                        let pbase = (bi * cin + ic) * h * w;
                        let plane = &x[pbase..pbase + h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let t = grp * kh * kw + ky * kw + kx;
                                let oidx = (bi * 2 * taps + 2 * t) * plane_o + pi;
                                let midx = (bi * taps + t) * plane_o + pi;
                                let dx = off[oidx];
                                let dy = off[oidx + plane_o];
                                let px = T::of((ox * stride + kx) as f64 - padding as f64) + dx;
                                let py = T::of((oy * stride + ky) as f64 - padding as f64) + dy;
                                let mv = m[midx];
                                let wv = wt[((oc * cin + ic) * kh + ky) * kw + kx];

                                let inside = px > -one
                                    && px < T::of(w as f64)
                                    && py > -one
                                    && py < T::of(h as f64);
                                let (v, v00, v01, v10, v11, fx, fy, x0, y0) = if inside {
                                    let x0f = px.floor();
                                    let y0f = py.floor();
                                    let fx = px - x0f;
                                    let fy = py - y0f;
                                    let x0 = x0f.as_f64() as isize;
                                    let y0 = y0f.as_f64() as isize;
                                    let at = |yy: isize, xx: isize| -> T {
                                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                                        {
                                            plane[yy as usize * w + xx as usize]
                                        } else {
                                            T::zero()
                                        }
                                    };
                                    let v00 = at(y0, x0);
                                    let v01 = at(y0, x0 + 1);
                                    let v10 = at(y0 + 1, x0);
                                    let v11 = at(y0 + 1, x0 + 1);
                                    let v = (one - fy) * ((one - fx) * v00 + fx * v01)
                                        + fy * ((one - fx) * v10 + fx * v11);
                                    (v, v00, v01, v10, v11, fx, fy, x0, y0)
                                } else {
                                    let z = T::zero();
                                    (z, z, z, z, z, z, z, 0, 0)
                                };

                                if let Some(gw) = gw.as_mut() {
                                    let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    gw[wi] = gw[wi] + g * mv * v;
                                }
                                if let Some(gm) = gm.as_mut() {
                                    gm[midx] = gm[midx] + g * wv * v;
                                }
                                if !inside {
                                    continue;
                                }
                                let gv = g * wv * mv;
                                if let Some(goff) = goff.as_mut() {
                                    let dvdx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
                                    let dvdy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
                                    goff[oidx] = goff[oidx] + gv * dvdx;
                                    goff[oidx + plane_o] = goff[oidx + plane_o] + gv * dvdy;
                                }
                                if let Some(gi) = gi.as_mut() {
                                    let mut scatter = |yy: isize, xx: isize, wgt: T| {
                                        if yy >= 0
                                            && yy < h as isize
                                            && xx >= 0
                                            && xx < w as isize
                                        {
                                            let idx = pbase + yy as usize * w + xx as usize;
                                            gi[idx] = gi[idx] + gv * wgt;
                                        }
                                    };
                                    scatter(y0, x0, (one - fy) * (one - fx));
                                    scatter(y0, x0 + 1, (one - fy) * fx);
                                    scatter(y0 + 1, x0, fy * (one - fx));
                                    scatter(y0 + 1, x0 + 1, fy * fx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(DeformGrads {
        input: gi.map(|d| Tensor::new(&[n, cin, h, w], d).expect("grad shape")),
        offsets: goff.map(|d| Tensor::new(&[n, 2 * taps, oh, ow], d).expect("grad shape")),
        mask: gm.map(|d| Tensor::new(&[n, taps, oh, ow], d).expect("grad shape")),
        weight: gw.map(|d| Tensor::new(&[cout, cin, kh, kw], d).expect("grad shape")),
        bias: gb.map(|d| Tensor::new(&[cout], d).expect("grad shape")),
    })
}
