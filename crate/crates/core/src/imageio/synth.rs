//! Deterministic synthetic test sequences: smooth value-noise textures
//! moved by known per-frame motion, with the ground truth retained for
//! oracle tests. Everything derives from the seed; regeneration is
//! byte-identical.

use super::{round_u8, ColorSpace, Frame, Plane};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Motion model of a synthetic sequence.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Every frame identical.
    Static,
    /// Content translates by (dx, dy) pixels per frame.
    GlobalShift { dx: f64, dy: f64 },
    /// Fresh random affine step each frame, drawn within the given bounds
    /// (translation in pixels, rotation in degrees, scale deviation from 1).
    Affine {
        max_translate: f64,
        max_rotate_deg: f64,
        max_scale_dev: f64,
    },
    /// Texture rotates about the frame center at a fixed rate.
    RotatingTexture { deg_per_frame: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Coarsest noise cell size in pixels; finer octaves halve it twice.
    #[serde(default = "default_cell")]
    pub cell: f64,
}

fn default_cell() -> f64 {
    16.0
}

/// Row-major 2×3 affine map: (x, y) → (a·x + b·y + tx, c·x + d·y + ty).
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 1.0,
            tx: dx,
            ty: dy,
        }
    }

    /// Rotation by `rad` and uniform scale about a center point.
    pub fn similarity_about(cx: f64, cy: f64, rad: f64, scale: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = rad.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        // p' = M (p - center) + center + t
        Affine {
            a,
            b,
            c: cc,
            d,
            tx: cx - (a * cx + b * cy) + dx,
            ty: cy - (cc * cx + d * cy) + dy,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    /// self ∘ rhs: apply `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Affine) -> Affine {
        Affine {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
            tx: self.a * rhs.tx + self.b * rhs.ty + self.tx,
            ty: self.c * rhs.tx + self.d * rhs.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Affine {
        let det = self.a * self.d - self.b * self.c;
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Affine {
            a: ia,
            b: ib,
            c: ic,
            d: id,
            tx: -(ia * self.tx + ib * self.ty),
            ty: -(ic * self.tx + id * self.ty),
        }
    }
}

/// Continuous value-noise texture over an extended domain, so motion can
/// sample outside the visible frame without inventing structure.
struct NoiseTexture {
    octaves: Vec<NoiseOctave>,
    margin: f64,
}

struct NoiseOctave {
    cell: f64,
    weight: f64,
    gw: usize,
    gh: usize,
    lattice: Vec<f64>,
}

impl NoiseTexture {
    fn build(rng: &mut ChaCha8Rng, w: usize, h: usize, margin: f64, base_cell: f64) -> Self {
        let specs = [(base_cell, 0.5), (base_cell / 2.0, 0.3), (base_cell / 4.0, 0.2)];
        let octaves = specs
            .iter()
            .map(|&(cell, weight)| {
                let cell = cell.max(1.0);
                let gw = ((w as f64 + 2.0 * margin) / cell).ceil() as usize + 2;
                let gh = ((h as f64 + 2.0 * margin) / cell).ceil() as usize + 2;
                let lattice = (0..gw * gh).map(|_| rng.gen_range(0.0..1.0)).collect();
                NoiseOctave {
                    cell,
                    weight,
                    gw,
                    gh,
                    lattice,
                }
            })
            .collect();
        NoiseTexture { octaves, margin }
    }

    /// Sample at continuous frame coordinates; clamps at the extended
    /// domain boundary.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for o in &self.octaves {
            let gx = ((x + self.margin) / o.cell).clamp(0.0, (o.gw - 1) as f64);
            let gy = ((y + self.margin) / o.cell).clamp(0.0, (o.gh - 1) as f64);
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let x1 = (x0 + 1).min(o.gw - 1);
            let y1 = (y0 + 1).min(o.gh - 1);
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let v00 = o.lattice[y0 * o.gw + x0];
            let v01 = o.lattice[y0 * o.gw + x1];
            let v10 = o.lattice[y1 * o.gw + x0];
            let v11 = o.lattice[y1 * o.gw + x1];
            acc += o.weight
                * ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11));
        }
        20.0 + 215.0 * acc
    }
}

/// Generated sequence: frames are rendered on demand; per-frame transforms
/// (and therefore ground-truth motion) are fixed at construction.
pub struct SynthSequence {
    spec: SynthSpec,
    textures: Vec<NoiseTexture>,
    /// `maps[t]` sends frame-t pixel coordinates into texture coordinates.
    maps: Vec<Affine>,
}

impl SynthSequence {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 || spec.frames == 0 {
            return Err(Error::arg("synthetic sequence must be non-empty".to_string()));
        }
        let total = spec.frames.saturating_sub(1) as f64;
        let motion_extent = match spec.kind {
            SynthKind::Static => 0.0,
            SynthKind::GlobalShift { dx, dy } => (dx.abs().max(dy.abs())) * total,
            SynthKind::Affine { max_translate, .. } => {
                max_translate.abs() * total + 0.25 * (spec.width.max(spec.height) as f64)
            }
            SynthKind::RotatingTexture { .. } => {
                0.5 * ((spec.width * spec.width + spec.height * spec.height) as f64).sqrt()
            }
        };
        if motion_extent > spec.width.min(spec.height) as f64 {
            return Err(Error::arg(format!(
                "total motion {motion_extent:.1}px exceeds the {}x{} frame",
                spec.width, spec.height
            )));
        }
        let margin = motion_extent + 8.0;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let textures = (0..3)
            .map(|_| NoiseTexture::build(&mut rng, spec.width, spec.height, margin, spec.cell))
            .collect();

        let cx = (spec.width as f64 - 1.0) / 2.0;
        let cy = (spec.height as f64 - 1.0) / 2.0;
        let mut maps = Vec::with_capacity(spec.frames);
        let mut cur = Affine::identity();
        maps.push(cur);
        for _t in 1..spec.frames {
            let step = match spec.kind {
                SynthKind::Static => Affine::identity(),
                SynthKind::GlobalShift { dx, dy } => Affine::translation(-dx, -dy),
                SynthKind::Affine {
                    max_translate,
                    max_rotate_deg,
                    max_scale_dev,
                } => {
                    let dx = rng.gen_range(-max_translate..=max_translate);
                    let dy = rng.gen_range(-max_translate..=max_translate);
                    let rot = rng
                        .gen_range(-max_rotate_deg..=max_rotate_deg)
                        .to_radians();
                    let scale = 1.0 + rng.gen_range(-max_scale_dev..=max_scale_dev);
                    Affine::similarity_about(cx, cy, rot, scale, dx, dy)
                }
                SynthKind::RotatingTexture { deg_per_frame } => {
                    Affine::similarity_about(cx, cy, deg_per_frame.to_radians(), 1.0, 0.0, 0.0)
                }
            };
            cur = cur.compose(&step);
            maps.push(cur);
        }
        Ok(SynthSequence {
            spec,
            textures,
            maps,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn frame_count(&self) -> usize {
        self.spec.frames
    }

    /// Render frame `t` as RGB.
    pub fn frame(&self, t: usize) -> Result<Frame> {
        if t >= self.spec.frames {
            return Err(Error::arg(format!(
                "frame {t} out of range (sequence has {})",
                self.spec.frames
            )));
        }
        let (w, h) = (self.spec.width, self.spec.height);
        let map = &self.maps[t];
        let mut planes = Vec::with_capacity(3);
        for tex in &self.textures {
            let mut data = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = map.apply(x as f64, y as f64);
                    data.push(round_u8(tex.sample(sx, sy)));
                }
            }
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

    /// Ground-truth motion from frame `t` to its reference `t-1`:
    /// per-pixel (vx, vy) such that frame_t(p) == frame_{t-1}(p + v(p)).
    pub fn gt_motion(&self, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if t == 0 || t >= self.spec.frames {
            return Err(Error::arg(format!(
                "ground-truth motion defined for 1..{}, got {t}",
                self.spec.frames
            )));
        }
        let (w, h) = (self.spec.width, self.spec.height);
        let rel = self.maps[t - 1].inverse().compose(&self.maps[t]);
        let mut vx = Vec::with_capacity(w * h);
        let mut vy = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (qx, qy) = rel.apply(x as f64, y as f64);
                vx.push(qx - x as f64);
                vy.push(qy - y as f64);
            }
        }
        Ok((vx, vy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SynthKind, frames: usize) -> SynthSpec {
        SynthSpec {
            kind,
            width: 48,
            height: 32,
            frames,
            seed: 7,
            cell: 16.0,
        }
    }

    #[test]
    fn static_sequence_repeats_frame_zero() {
        let s = SynthSequence::new(spec(SynthKind::Static, 4)).unwrap();
        let f0 = s.frame(0).unwrap();
        for t in 1..4 {
            assert_eq!(s.frame(t).unwrap(), f0);
        }
    }

    #[test]
    fn global_shift_matches_shifted_frame_zero_interior() {
        let s = SynthSequence::new(spec(SynthKind::GlobalShift { dx: 3.0, dy: 0.0 }, 4)).unwrap();
        let f0 = s.frame(0).unwrap();
        for k in 1..4usize {
            let fk = s.frame(k).unwrap();
            let shift = 3 * k;
            for c in 0..3 {
                for y in 0..32 {
                    for x in shift..48 {
                        assert_eq!(
                            fk.planes[c].data[y * 48 + x],
                            f0.planes[c].data[y * 48 + x - shift],
                            "frame {k} channel {c} at ({x},{y})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_regenerates_identically() {
        let a = SynthSequence::new(spec(
            SynthKind::Affine {
                max_translate: 1.5,
                max_rotate_deg: 1.0,
                max_scale_dev: 0.02,
            },
            5,
        ))
        .unwrap();
        let b = SynthSequence::new(spec(
            SynthKind::Affine {
                max_translate: 1.5,
                max_rotate_deg: 1.0,
                max_scale_dev: 0.02,
            },
            5,
        ))
        .unwrap();
        for t in 0..5 {
            assert_eq!(a.frame(t).unwrap(), b.frame(t).unwrap());
        }
    }

    #[test]
    fn motion_larger_than_frame_is_rejected() {
        let err = SynthSequence::new(spec(SynthKind::GlobalShift { dx: 20.0, dy: 0.0 }, 4));
        assert!(err.is_err());
    }

    #[test]
    fn gt_motion_for_global_shift_is_constant() {
        let s = SynthSequence::new(spec(SynthKind::GlobalShift { dx: 2.0, dy: 1.0 }, 5)).unwrap();
        let (vx, vy) = s.gt_motion(3).unwrap();
        // Content moves (+2, +1) per frame; the reference location of a
        // current pixel is therefore displaced by (-2, -1).
        assert!(vx.iter().all(|&v| (v + 2.0).abs() < 1e-9));
        assert!(vy.iter().all(|&v| (v + 1.0).abs() < 1e-9));
    }

    #[test]
    fn affine_inverse_compose_is_identity() {
        let t = Affine::similarity_about(10.0, 5.0, 0.3, 1.1, 2.0, -1.0);
        let id = t.inverse().compose(&t);
        let (x, y) = id.apply(3.7, -2.2);
        assert!((x - 3.7).abs() < 1e-12 && (y + 2.2).abs() < 1e-12);
    }
}
