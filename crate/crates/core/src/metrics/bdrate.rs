//! Bjøntegaard delta-rate between two RD curves.
//!
//! Monotone piecewise-cubic Hermite (PCHIP, Fritsch–Carlson derivatives)
//! interpolation of log10(rate) over quality, integrated in closed form
//! over the overlapping quality interval. Negative results mean the test
//! curve saves bits against the anchor.

use super::RDCurve;
use crate::error::{Error, Result};

/// Average rate difference in percent over the overlapping quality range.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    let a = curve_xy(anchor, "anchor")?;
    let t = curve_xy(test, "test")?;
    let lo = a.0[0].max(t.0[0]);
    let hi = a.0[a.0.len() - 1].min(t.0[t.0.len() - 1]);
    if !(hi > lo) {
        return Err(Error::arg(format!(
            "no quality overlap between curves (anchor spans {:.4}..{:.4}, test {:.4}..{:.4})",
            a.0[0],
            a.0[a.0.len() - 1],
            t.0[0],
            t.0[t.0.len() - 1]
        )));
    }
    let int_a = Pchip::fit(&a.0, &a.1).integrate(lo, hi);
    let int_t = Pchip::fit(&t.0, &t.1).integrate(lo, hi);
    let avg_log_diff = (int_t - int_a) / (hi - lo);
    Ok((10.0f64.powf(avg_log_diff) - 1.0) * 100.0)
}

/// Extract (quality, log10 bpp) with BD-specific validation.
fn curve_xy(curve: &RDCurve, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 4 {
        return Err(Error::arg(format!(
            "{name} curve has {} points; BD-rate needs at least 4",
            curve.len()
        )));
    }
    let mut x = Vec::with_capacity(curve.len());
    let mut y = Vec::with_capacity(curve.len());
    for p in curve.points() {
        x.push(p.quality);
        y.push(p.bpp.log10());
    }
    for w in x.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::arg(format!(
                "{name} curve has non-increasing quality ({} then {}); \
                 interpolation over quality needs strictly increasing points",
                w[0], w[1]
            )));
        }
    }
    Ok((x, y))
}

/// Monotone piecewise-cubic Hermite interpolant.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn fit(x: &[f64], y: &[f64]) -> Pchip {
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                d[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        d[0] = edge_derivative(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = edge_derivative(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Pchip {
            x: x.to_vec(),
            y: y.to_vec(),
            d,
        }
    }

    /// ∫ y dx over [lo, hi]; both ends must lie within the knot span.
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let n = self.x.len();
        let mut acc = 0.0;
        for i in 0..n - 1 {
            let a = self.x[i].max(lo);
            let b = self.x[i + 1].min(hi);
            if b <= a {
                continue;
            }
            let h = self.x[i + 1] - self.x[i];
            let delta = (self.y[i + 1] - self.y[i]) / h;
            let c2 = (3.0 * delta - 2.0 * self.d[i] - self.d[i + 1]) / h;
            let c3 = (self.d[i] + self.d[i + 1] - 2.0 * delta) / (h * h);
            let anti = |s: f64| -> f64 {
                self.y[i] * s
                    + self.d[i] * s * s / 2.0
                    + c2 * s * s * s / 3.0
                    + c3 * s * s * s * s / 4.0
            };
            acc += anti(b - self.x[i]) - anti(a - self.x[i]);
        }
        acc
    }
}

/// Three-point one-sided derivative with the Fritsch–Carlson shape limits.
fn edge_derivative(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RDPoint;

    fn curve(points: &[(f64, f64)], label: &str) -> RDCurve {
        RDCurve::new(
            points
                .iter()
                .map(|&(bpp, q)| RDPoint {
                    bpp,
                    quality: q,
                    label: label.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    const ANCHOR: &[(f64, f64)] = &[(0.05, 30.2), (0.1, 32.8), (0.21, 35.1), (0.45, 37.4)];

    #[test]
    fn identical_curves_give_exactly_zero() {
        let a = curve(ANCHOR, "a");
        let b = curve(ANCHOR, "b");
        assert_eq!(bd_rate(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_rate_at_equal_quality_gives_minus_fifty() {
        let a = curve(ANCHOR, "a");
        let halved: Vec<(f64, f64)> = ANCHOR.iter().map(|&(b, q)| (b / 2.0, q)).collect();
        let t = curve(&halved, "t");
        let got = bd_rate(&a, &t).unwrap();
        assert!((got + 50.0).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn uniform_rate_scaling_maps_to_percent() {
        let a = curve(ANCHOR, "a");
        for f in [0.8, 1.25, 2.0] {
            let scaled: Vec<(f64, f64)> = ANCHOR.iter().map(|&(b, q)| (b * f, q)).collect();
            let t = curve(&scaled, "t");
            let got = bd_rate(&a, &t).unwrap();
            let want = 100.0 * (f - 1.0);
            assert!((got - want).abs() < 1e-6, "factor {f}: {got} vs {want}");
        }
    }

    #[test]
    fn disjoint_quality_ranges_error_out() {
        let a = curve(ANCHOR, "a");
        let far: Vec<(f64, f64)> = ANCHOR.iter().map(|&(b, q)| (b, q + 50.0)).collect();
        let t = curve(&far, "t");
        assert!(bd_rate(&a, &t).is_err());
    }

    #[test]
    fn too_few_points_rejected() {
        let a = curve(&ANCHOR[..3], "a");
        let b = curve(ANCHOR, "b");
        assert!(bd_rate(&a, &b).is_err());
    }

    #[test]
    fn sign_convention_lower_rate_is_negative() {
        let a = curve(ANCHOR, "a");
        let better: Vec<(f64, f64)> = ANCHOR.iter().map(|&(b, q)| (b * 0.9, q + 0.3)).collect();
        let t = curve(&better, "t");
        assert!(bd_rate(&a, &t).unwrap() < 0.0);
    }
}
