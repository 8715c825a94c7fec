//! Frame ingestion, BT.709 color conversion, padding and synthetic
//! sequences for the evaluation protocol.
//!
//! All conversions are pure, deterministic and bit-exact across platforms:
//! arithmetic runs in f64 and quantization rounds half away from zero.
//! YUV uses the limited-range convention (Y 16–235, chroma 16–240).

mod synth;

pub use synth::{SynthKind, SynthSequence, SynthSpec};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// BT.709 luma coefficients (Kr, Kg, Kb).
pub const KR: f64 = 0.2126;
pub const KB: f64 = 0.0722;
pub const KG: f64 = 1.0 - KR - KB;
/// Decode matrix chroma gains: R' = Y' + CR_GAIN·Cr, B' = Y' + CB_GAIN·Cb.
pub const CR_GAIN: f64 = 2.0 * (1.0 - KR); // 1.5748000000
pub const CB_GAIN: f64 = 2.0 * (1.0 - KB); // 1.8556000000

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Yuv420,
    Yuv444,
}

/// One image plane of 8-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "plane {width}x{height} expects {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// An 8-bit video frame with color-space metadata. RGB and YUV444 hold
/// three full-resolution planes; YUV420 subsamples chroma 2×2.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub color_space: ColorSpace,
    pub planes: Vec<Plane>,
}

impl Frame {
    pub fn rgb(width: usize, height: usize, planes: [Plane; 3]) -> Result<Self> {
        for p in &planes {
            if p.width != width || p.height != height {
                return Err(Error::shape(format!(
                    "RGB plane {}x{} does not match frame {width}x{height}",
                    p.width, p.height
                )));
            }
        }
        Ok(Frame {
            width,
            height,
            color_space: ColorSpace::Rgb,
            planes: planes.into(),
        })
    }

    pub fn yuv444(width: usize, height: usize, planes: [Plane; 3]) -> Result<Self> {
        for p in &planes {
            if p.width != width || p.height != height {
                return Err(Error::shape(format!(
                    "YUV444 plane {}x{} does not match frame {width}x{height}",
                    p.width, p.height
                )));
            }
        }
        Ok(Frame {
            width,
            height,
            color_space: ColorSpace::Yuv444,
            planes: planes.into(),
        })
    }

    pub fn yuv420(width: usize, height: usize, planes: [Plane; 3]) -> Result<Self> {
        if width % 2 != 0 || height % 2 != 0 {
            return Err(Error::shape(format!(
                "YUV420 requires even dimensions, got {width}x{height}"
            )));
        }
        let (cw, ch) = (width / 2, height / 2);
        if planes[0].width != width || planes[0].height != height {
            return Err(Error::shape("YUV420 luma plane size mismatch".to_string()));
        }
        for p in &planes[1..] {
            if p.width != cw || p.height != ch {
                return Err(Error::shape(format!(
                    "YUV420 chroma plane {}x{}, expected {cw}x{ch}",
                    p.width, p.height
                )));
            }
        }
        Ok(Frame {
            width,
            height,
            color_space: ColorSpace::Yuv420,
            planes: planes.into(),
        })
    }

    /// Uniform mid-gray RGB frame, handy for tests.
    pub fn rgb_filled(width: usize, height: usize, value: u8) -> Self {
        Frame {
            width,
            height,
            color_space: ColorSpace::Rgb,
            planes: vec![Plane::filled(width, height, value); 3],
        }
    }

    /// Rec.709 luma as f64 (0..255). For YUV frames this is the Y plane.
    pub fn luma_f64(&self) -> Vec<f64> {
        match self.color_space {
            ColorSpace::Rgb => {
                let r = &self.planes[0].data;
                let g = &self.planes[1].data;
                let b = &self.planes[2].data;
                (0..r.len())
                    .map(|i| KR * r[i] as f64 + KG * g[i] as f64 + KB * b[i] as f64)
                    .collect()
            }
            _ => self.planes[0].to_f64(),
        }
    }

    /// RGB planes as a (1, 3, h, w) tensor scaled to [0, 1].
    pub fn to_rgb_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.color_space != ColorSpace::Rgb {
            return Err(Error::ColorSpace(
                "tensor conversion expects an RGB frame".to_string(),
            ));
        }
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for p in &self.planes {
            data.extend(p.data.iter().map(|&v| T::of(v as f64 / 255.0)));
        }
        Tensor::new(&[1, 3, self.height, self.width], data)
    }

    /// Inverse of [`Frame::to_rgb_tensor`]: clamp to [0, 1], scale by 255
    /// and round half away from zero.
    pub fn from_rgb_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Frame> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape(format!(
                "expected a (1, 3, h, w) tensor, got {:?}",
                t.shape()
            )));
        }
        let mut planes = Vec::with_capacity(3);
        for ch in 0..3 {
            let data: Vec<u8> = t.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&v| round_u8(v.as_f64().clamp(0.0, 1.0) * 255.0))
                .collect();
            planes.push(Plane {
                width: w,
                height: h,
                data,
            });
        }
        Ok(Frame {
            width: w,
            height: h,
            color_space: ColorSpace::Rgb,
            planes,
        })
    }
}

/// Round half away from zero and clamp into 8-bit range.
#[inline]
pub(crate) fn round_u8(x: f64) -> u8 {
    let r = if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        -((-x + 0.5).floor())
    };
    r.clamp(0.0, 255.0) as u8
}

#[inline]
fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        -((-x + 0.5).floor())
    }
}

/// Convert limited-range YUV420 to RGB. Chroma is upsampled co-sited
/// bilinear (chroma sample co-located with the even luma sample), then the
/// BT.709 matrix is applied and results round half away from zero.
pub fn yuv420_to_rgb_bt709(f: &Frame) -> Result<Frame> {
    if f.color_space != ColorSpace::Yuv420 {
        return Err(Error::ColorSpace(format!(
            "yuv420_to_rgb_bt709 expects YUV420 input, got {:?}",
            f.color_space
        )));
    }
    let (w, h) = (f.width, f.height);
    let (cw, ch) = (w / 2, h / 2);
    let u_full = upsample_cosited(&f.planes[1].to_f64(), cw, ch, w, h);
    let v_full = upsample_cosited(&f.planes[2].to_f64(), cw, ch, w, h);
    let y = &f.planes[0].data;

    let mut r = vec![0u8; w * h];
    let mut g = vec![0u8; w * h];
    let mut b = vec![0u8; w * h];
    for i in 0..w * h {
        let ey = (y[i] as f64 - 16.0) / 219.0;
        let ecb = (u_full[i] - 128.0) / 224.0;
        let ecr = (v_full[i] - 128.0) / 224.0;
        let rp = ey + CR_GAIN * ecr;
        let bp = ey + CB_GAIN * ecb;
        let gp = (ey - KR * rp - KB * bp) / KG;
        r[i] = round_u8(255.0 * rp);
        g[i] = round_u8(255.0 * gp);
        b[i] = round_u8(255.0 * bp);
    }
    Frame::rgb(
        w,
        h,
        [
            Plane::new(w, h, r)?,
            Plane::new(w, h, g)?,
            Plane::new(w, h, b)?,
        ],
    )
}

/// Co-sited bilinear 2× chroma upsampling: chroma pixel (cx, cy) sits at
/// luma position (2cx, 2cy); constant planes are preserved exactly.
fn upsample_cosited(src: &[f64], cw: usize, ch: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = (y as f64 / 2.0).min((ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let dy = fy - y0 as f64;
        for x in 0..w {
            let fx = (x as f64 / 2.0).min((cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let dx = fx - x0 as f64;
            let v00 = src[y0 * cw + x0];
            let v01 = src[y0 * cw + x1];
            let v10 = src[y1 * cw + x0];
            let v11 = src[y1 * cw + x1];
            out.push(
                (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11),
            );
        }
    }
    out
}

/// Convert RGB to limited-range YUV444 with the inverse BT.709 matrix.
///
/// Luma is quantized first and the chroma differences are computed against
/// the *quantized* luma. This keeps the worst-case RGB→YUV444→RGB
/// round-trip error within ±1 level per channel (independent quantization
/// of Y and Cb can reach ±2 on the blue channel).
pub fn rgb_to_yuv444_bt709(f: &Frame) -> Result<Frame> {
    if f.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace(format!(
            "rgb_to_yuv444_bt709 expects RGB input, got {:?}",
            f.color_space
        )));
    }
    let (w, h) = (f.width, f.height);
    let r = &f.planes[0].data;
    let g = &f.planes[1].data;
    let b = &f.planes[2].data;
    let mut yp = vec![0u8; w * h];
    let mut up = vec![0u8; w * h];
    let mut vp = vec![0u8; w * h];
    for i in 0..w * h {
        let rp = r[i] as f64 / 255.0;
        let gp = g[i] as f64 / 255.0;
        let bp = b[i] as f64 / 255.0;
        let ey = KR * rp + KG * gp + KB * bp;
        let yq = round_half_away(16.0 + 219.0 * ey).clamp(0.0, 255.0);
        let eyq = (yq - 16.0) / 219.0;
        let cb = round_half_away(128.0 + 224.0 * (bp - eyq) / CB_GAIN);
        let cr = round_half_away(128.0 + 224.0 * (rp - eyq) / CR_GAIN);
        yp[i] = yq as u8;
        up[i] = cb.clamp(0.0, 255.0) as u8;
        vp[i] = cr.clamp(0.0, 255.0) as u8;
    }
    Frame::yuv444(
        w,
        h,
        [
            Plane::new(w, h, yp)?,
            Plane::new(w, h, up)?,
            Plane::new(w, h, vp)?,
        ],
    )
}

/// Convert limited-range YUV444 back to RGB (decode matrix leg of the
/// round trip).
pub fn yuv444_to_rgb_bt709(f: &Frame) -> Result<Frame> {
    if f.color_space != ColorSpace::Yuv444 {
        return Err(Error::ColorSpace(format!(
            "yuv444_to_rgb_bt709 expects YUV444 input, got {:?}",
            f.color_space
        )));
    }
    let (w, h) = (f.width, f.height);
    let y = &f.planes[0].data;
    let u = &f.planes[1].data;
    let v = &f.planes[2].data;
    let mut r = vec![0u8; w * h];
    let mut g = vec![0u8; w * h];
    let mut b = vec![0u8; w * h];
    for i in 0..w * h {
        let ey = (y[i] as f64 - 16.0) / 219.0;
        let ecb = (u[i] as f64 - 128.0) / 224.0;
        let ecr = (v[i] as f64 - 128.0) / 224.0;
        let rp = ey + CR_GAIN * ecr;
        let bp = ey + CB_GAIN * ecb;
        let gp = (ey - KR * rp - KB * bp) / KG;
        r[i] = round_u8(255.0 * rp);
        g[i] = round_u8(255.0 * gp);
        b[i] = round_u8(255.0 * bp);
    }
    Frame::rgb(
        w,
        h,
        [
            Plane::new(w, h, r)?,
            Plane::new(w, h, g)?,
            Plane::new(w, h, b)?,
        ],
    )
}

/// Original frame size remembered across padding so that bitrate is
/// normalized on the true resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrigSize {
    pub width: usize,
    pub height: usize,
}

/// Replicate-pad right/bottom edges up to the next multiple of `m`.
/// Returns the padded frame and the original size; a frame already at a
/// multiple passes through unchanged.
pub fn pad_to_multiple(f: &Frame, m: usize) -> Result<(Frame, OrigSize)> {
    if m == 0 {
        return Err(Error::arg("padding multiple must be >= 1".to_string()));
    }
    let orig = OrigSize {
        width: f.width,
        height: f.height,
    };
    let pw = f.width.div_ceil(m) * m;
    let ph = f.height.div_ceil(m) * m;
    if pw == f.width && ph == f.height {
        return Ok((f.clone(), orig));
    }
    if f.color_space == ColorSpace::Yuv420 && (pw % 2 != 0 || ph % 2 != 0) {
        return Err(Error::shape(format!(
            "padding YUV420 to odd dimensions {pw}x{ph}"
        )));
    }
    let mut planes = Vec::with_capacity(3);
    for (pi, p) in f.planes.iter().enumerate() {
        let (tw, th) = if f.color_space == ColorSpace::Yuv420 && pi > 0 {
            (pw / 2, ph / 2)
        } else {
            (pw, ph)
        };
        planes.push(replicate_pad(p, tw, th));
    }
    Ok((
        Frame {
            width: pw,
            height: ph,
            color_space: f.color_space,
            planes,
        },
        orig,
    ))
}

fn replicate_pad(p: &Plane, tw: usize, th: usize) -> Plane {
    let mut data = Vec::with_capacity(tw * th);
    for y in 0..th {
        let sy = y.min(p.height - 1);
        let row = &p.data[sy * p.width..(sy + 1) * p.width];
        data.extend_from_slice(row);
        data.extend(std::iter::repeat(row[p.width - 1]).take(tw - p.width));
    }
    Plane {
        width: tw,
        height: th,
        data,
    }
}

/// Crop back to the top-left `width`×`height` region (inverse of padding).
pub fn crop_frame(f: &Frame, width: usize, height: usize) -> Result<Frame> {
    if width > f.width || height > f.height {
        return Err(Error::shape(format!(
            "cannot crop {}x{} to {width}x{height}",
            f.width, f.height
        )));
    }
    if f.color_space == ColorSpace::Yuv420 && (width % 2 != 0 || height % 2 != 0) {
        return Err(Error::shape("YUV420 crop must keep even dimensions".to_string()));
    }
    let mut planes = Vec::with_capacity(3);
    for (pi, p) in f.planes.iter().enumerate() {
        let (tw, th) = if f.color_space == ColorSpace::Yuv420 && pi > 0 {
            (width / 2, height / 2)
        } else {
            (width, height)
        };
        let mut data = Vec::with_capacity(tw * th);
        for y in 0..th {
            data.extend_from_slice(&p.data[y * p.width..y * p.width + tw]);
        }
        planes.push(Plane {
            width: tw,
            height: th,
            data,
        });
    }
    Ok(Frame {
        width,
        height,
        color_space: f.color_space,
        planes,
    })
}

/// Where a sequence's frames come from.
#[derive(Clone, Debug)]
pub enum SequenceSource {
    /// Planar 8-bit 4:2:0 file, I420 plane order (Y then U then V).
    RawYuv420 { path: PathBuf },
    /// Deterministic synthetic generator.
    Synthetic(SynthSpec),
}

/// Declaration of an input sequence for readers and the harness.
#[derive(Clone, Debug)]
pub struct SequenceSpec {
    pub source: SequenceSource,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    /// Metadata only; nothing in the toolkit depends on it.
    pub fps: f64,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::arg(format!(
                "sequence needs at least 2 frames, got {}",
                self.frame_count
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("sequence dimensions must be positive".to_string()));
        }
        Ok(())
    }

    /// Materialize frames (RGB for synthetic sources, YUV420 for raw files).
    pub fn load_frames(&self) -> Result<Vec<Frame>> {
        self.validate()?;
        match &self.source {
            SequenceSource::RawYuv420 { path } => {
                read_raw_video(path, self.width, self.height, self.frame_count)?.collect()
            }
            SequenceSource::Synthetic(spec) => {
                let synth = SynthSequence::new(spec.clone())?;
                (0..self.frame_count).map(|t| synth.frame(t)).collect()
            }
        }
    }
}

/// Streaming reader over a planar I420 file. Validates total size up front:
/// the file must be an exact multiple of the per-frame byte count and hold
/// at least `frame_count` frames.
pub struct RawVideoReader {
    reader: BufReader<File>,
    width: usize,
    height: usize,
    remaining: usize,
}

pub fn read_raw_video(
    path: &Path,
    width: usize,
    height: usize,
    frame_count: usize,
) -> Result<RawVideoReader> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::shape(format!(
            "4:2:0 video requires even dimensions, got {width}x{height}"
        )));
    }
    let frame_bytes = width * height + 2 * (width / 2) * (height / 2);
    let meta = std::fs::metadata(path)?;
    let size = meta.len() as usize;
    if size % frame_bytes != 0 {
        return Err(Error::data(format!(
            "{} has {size} bytes, not a multiple of the {frame_bytes}-byte frame \
             ({}x{} 4:2:0); nearest whole count is {} frames ({} bytes)",
            path.display(),
            width,
            height,
            size / frame_bytes,
            (size / frame_bytes) * frame_bytes
        )));
    }
    let available = size / frame_bytes;
    if available < frame_count {
        return Err(Error::data(format!(
            "{} holds {available} frames, {frame_count} requested",
            path.display()
        )));
    }
    Ok(RawVideoReader {
        reader: BufReader::new(File::open(path)?),
        width,
        height,
        remaining: frame_count,
    })
}

impl Iterator for RawVideoReader {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let (w, h) = (self.width, self.height);
        let (cw, ch) = (w / 2, h / 2);
        let mut y = vec![0u8; w * h];
        let mut u = vec![0u8; cw * ch];
        let mut v = vec![0u8; cw * ch];
        let res = (|| -> Result<Frame> {
            self.reader.read_exact(&mut y)?;
            self.reader.read_exact(&mut u)?;
            self.reader.read_exact(&mut v)?;
            Frame::yuv420(
                w,
                h,
                [
                    Plane::new(w, h, y)?,
                    Plane::new(cw, ch, u)?,
                    Plane::new(cw, ch, v)?,
                ],
            )
        })();
        Some(res)
    }
}

/// Append frames to a planar I420 file (testing and synthetic export).
pub fn write_raw_video(path: &Path, frames: &[Frame]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for f in frames {
        if f.color_space != ColorSpace::Yuv420 {
            return Err(Error::ColorSpace(
                "raw video writer expects YUV420 frames".to_string(),
            ));
        }
        for p in &f.planes {
            out.write_all(&p.data)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write an RGB frame as PNG.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    if frame.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace("PNG writer expects an RGB frame".to_string()));
    }
    let (w, h) = (frame.width, frame.height);
    let mut buf = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        buf.push(frame.planes[0].data[i]);
        buf.push(frame.planes[1].data[i]);
        buf.push(frame.planes[2].data[i]);
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path)
        .map_err(|e| Error::data(format!("PNG write {}: {e}", path.display())))
}

/// Read a PNG into an RGB frame.
pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("PNG read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = vec![0u8; w * h];
    let mut g = vec![0u8; w * h];
    let mut b = vec![0u8; w * h];
    for (i, px) in img.pixels().enumerate() {
        r[i] = px[0];
        g[i] = px[1];
        b[i] = px[2];
    }
    Frame::rgb(
        w,
        h,
        [
            Plane::new(w, h, r)?,
            Plane::new(w, h, g)?,
            Plane::new(w, h, b)?,
        ],
    )
}

/// Bilinear-resize an RGB frame (used by the adaptive-scale search).
pub fn resize_rgb(f: &Frame, nw: usize, nh: usize) -> Result<Frame> {
    if f.color_space != ColorSpace::Rgb {
        return Err(Error::ColorSpace("resize expects an RGB frame".to_string()));
    }
    if nw == 0 || nh == 0 {
        return Err(Error::arg("resize target must be positive".to_string()));
    }
    let mut planes = Vec::with_capacity(3);
    for p in &f.planes {
        let res = crate::resample::resize_plane(&p.to_f64(), p.width, p.height, nw, nh);
        planes.push(Plane {
            width: nw,
            height: nh,
            data: res.into_iter().map(round_u8).collect(),
        });
    }
    Ok(Frame {
        width: nw,
        height: nh,
        color_space: ColorSpace::Rgb,
        planes,
    })
}
