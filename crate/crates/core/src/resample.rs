//! Shared bilinear resampling over f64 planes (half-pixel-center mapping,
//! edge clamped). Used by frame scaling, flow rescaling and pyramids.

/// Resize a row-major `h×w` plane to `nh×nw`. Constant planes resize
/// exactly; a target equal to the source copies the data unchanged.
pub(crate) fn resize_plane(src: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    assert_eq!(src.len(), w * h, "plane length mismatch");
    assert!(nw >= 1 && nh >= 1, "target dims must be positive");
    if nw == w && nh == h {
        return src.to_vec();
    }
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = Vec::with_capacity(nw * nh);
    for oy in 0..nh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            out.push((1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11));
        }
    }
    out
}

/// Round-half-up dimension scaling used for non-integer resize factors.
pub(crate) fn scaled_dim(dim: usize, factor: f64) -> usize {
    ((dim as f64 * factor) + 0.5).floor().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_resizes_exactly() {
        let src = vec![7.25; 12];
        let out = resize_plane(&src, 4, 3, 9, 5);
        assert!(out.iter().all(|&v| v == 7.25));
    }

    #[test]
    fn identity_resize_is_a_copy() {
        let src: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(resize_plane(&src, 5, 4, 5, 4), src);
    }

    #[test]
    fn scaled_dim_rounds_half_up() {
        assert_eq!(scaled_dim(5, 0.5), 3); // 2.5 → 3
        assert_eq!(scaled_dim(1920, 1.0 / 1.25), 1536);
        assert_eq!(scaled_dim(3, 0.1), 1); // floor at 1
    }
}
