//! Multi-reference quality-aware weight scheduling.
//!
//! A 7-entry hierarchical base pattern is modulated per frame by the
//! sigmoid-normalized PSNR change of the current and previous frame:
//!
//!   w_t = base[idx mod 7] · (1 − λ·σ(ΔQ_t)/λ_max + λ·σ(ΔQ_{t−1})/λ_max)
//!
//! The modulation term is evaluated as 1 + (λ/λ_max)·(σ(ΔQ_{t−1}) − σ(ΔQ_t))
//! so that equal deltas cancel to the base weight bit-exactly.

use crate::error::{Error, Result};

/// Hierarchical base pattern over a 7-frame dependency window.
pub const BASE_WEIGHTS: [f64; 7] = [1.8, 0.6, 0.8, 0.6, 1.4, 0.6, 0.8];

/// Rate multipliers used for PSNR-optimized training.
pub const LAMBDA_SET_PSNR: [f64; 4] = [2048.0, 1024.0, 512.0, 256.0];
/// Rate multipliers used for MS-SSIM-optimized training.
pub const LAMBDA_SET_MSSSIM: [f64; 4] = [64.0, 32.0, 16.0, 8.0];

#[derive(Clone, Debug)]
pub struct MrqaState {
    pub base_weights: [f64; 7],
    pub lambda: f64,
    pub lambda_max: f64,
    /// ΔQ of the previous step; the first P-frame starts from 0.
    pub prev_delta_q: f64,
}

impl MrqaState {
    pub fn new(lambda: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda > 0.0) || !(lambda <= lambda_max) {
            return Err(Error::arg(format!(
                "require 0 < lambda <= lambda_max, got lambda={lambda}, lambda_max={lambda_max}"
            )));
        }
        Ok(MrqaState {
            base_weights: BASE_WEIGHTS,
            lambda,
            lambda_max,
            prev_delta_q: 0.0,
        })
    }

    pub fn with_base_weights(mut self, base: [f64; 7]) -> Self {
        self.base_weights = base;
        self
    }
}

/// Frame-level PSNR variation ΔQ_t = PSNR_t − PSNR_{t−1}.
pub fn delta_q(psnr_t: f64, psnr_prev: f64) -> f64 {
    psnr_t - psnr_prev
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Modulated weight for P-frame `idx` (0-based within a rollout).
pub fn modulated_weight(idx: usize, dq_t: f64, dq_prev: f64, state: &MrqaState) -> f64 {
    let base = state.base_weights[idx % 7];
    let ratio = state.lambda / state.lambda_max;
    base * (1.0 + ratio * (sigmoid(dq_prev) - sigmoid(dq_t)))
}

/// Weights for a whole rollout. `psnr_trace[0]` belongs to the frame before
/// the first P-frame; weights are produced for trace indices 1..N-1, with
/// `state.prev_delta_q` seeding the first step.
pub fn schedule_rollout(psnr_trace: &[f64], state: &MrqaState) -> Result<Vec<f64>> {
    if psnr_trace.len() < 2 {
        return Err(Error::arg(format!(
            "rollout needs at least 2 trace entries, got {}",
            psnr_trace.len()
        )));
    }
    if psnr_trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "PSNR trace contains a non-finite value".to_string(),
        ));
    }
    let mut weights = Vec::with_capacity(psnr_trace.len() - 1);
    let mut dq_prev = state.prev_delta_q;
    for t in 1..psnr_trace.len() {
        let dq_t = delta_q(psnr_trace[t], psnr_trace[t - 1]);
        weights.push(modulated_weight(t - 1, dq_t, dq_prev, state));
        dq_prev = dq_t;
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lambda: f64, lambda_max: f64) -> MrqaState {
        MrqaState::new(lambda, lambda_max).unwrap()
    }

    #[test]
    fn delta_q_is_plain_subtraction_and_antisymmetric() {
        assert!((delta_q(34.2, 33.0) - 1.2).abs() < 1e-12);
        assert_eq!(delta_q(31.0, 31.0), 0.0);
        assert_eq!(delta_q(40.0, 35.5), -delta_q(35.5, 40.0));
    }

    #[test]
    fn equal_deltas_cancel_bit_exactly() {
        let s = state(512.0, 2048.0);
        for dq in [-3.7, -0.1, 0.0, 0.42, 10.0] {
            assert_eq!(modulated_weight(0, dq, dq, &s), 1.8);
            assert_eq!(modulated_weight(4, dq, dq, &s), 1.4);
        }
    }

    #[test]
    fn sigmoid_limits_reach_weight_bounds() {
        let s = state(2048.0, 2048.0);
        let lo = modulated_weight(0, 1e9, -1e9, &s);
        let hi = modulated_weight(0, -1e9, 1e9, &s);
        assert!((lo - 0.0).abs() < 1e-12, "lo = {lo}");
        assert!((hi - 3.6).abs() < 1e-12, "hi = {hi}");
    }

    #[test]
    fn weights_stay_in_closed_bounds() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let lambda_max = 2048.0;
            let lambda = rng.gen_range(1.0..=lambda_max);
            let s = state(lambda, lambda_max);
            let idx = rng.gen_range(0usize..21);
            let dq_t = rng.gen_range(-20.0..20.0);
            let dq_prev = rng.gen_range(-20.0..20.0);
            let w = modulated_weight(idx, dq_t, dq_prev, &s);
            let base = BASE_WEIGHTS[idx % 7];
            let r = lambda / lambda_max;
            assert!(w >= base * (1.0 - r) - 1e-12, "w={w} below bound");
            assert!(w <= base * (1.0 + r) + 1e-12, "w={w} above bound");
        }
    }

    #[test]
    fn monotone_in_both_delta_arguments() {
        let s = state(1024.0, 2048.0);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let dq_t = -5.0 + 0.2 * i as f64;
            let w = modulated_weight(2, dq_t, 0.3, &s);
            assert!(w < prev, "not strictly decreasing in dq_t");
            prev = w;
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let dq_p = -5.0 + 0.2 * i as f64;
            let w = modulated_weight(2, 0.3, dq_p, &s);
            assert!(w > prev, "not strictly increasing in dq_prev");
            prev = w;
        }
    }

    #[test]
    fn constant_trace_tiles_base_pattern_exactly() {
        let s = state(2048.0, 2048.0);
        let trace = vec![36.5; 17];
        let weights = schedule_rollout(&trace, &s).unwrap();
        assert_eq!(weights.len(), 16);
        for (i, &w) in weights.iter().enumerate() {
            assert_eq!(w, BASE_WEIGHTS[i % 7], "index {i}");
        }
    }

    #[test]
    fn rollout_matches_hand_unrolled_scalar_computation() {
        let s = state(1024.0, 2048.0);
        let trace = [33.0, 34.1, 33.4, 33.9, 35.0, 34.2, 34.2, 36.0];
        let got = schedule_rollout(&trace, &s).unwrap();

        // Hand unroll with its own sigmoid/threading arithmetic.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let r: f64 = 0.5;
        let mut want = Vec::new();
        let mut dq_prev: f64 = 0.0;
        for t in 1..trace.len() {
            let dq = trace[t] - trace[t - 1];
            want.push(BASE_WEIGHTS[(t - 1) % 7] * (1.0 + r * (sig(dq_prev) - sig(dq))));
            dq_prev = dq;
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn translation_invariance_in_psnr() {
        // Dyadic values keep the shifted sums exact, so the deltas (and
        // therefore the weights) match bit for bit.
        let s = state(256.0, 2048.0);
        let trace: Vec<f64> = vec![30.0, 31.5, 30.75, 32.0, 31.25, 31.875, 33.0, 32.25, 32.875];
        let shifted: Vec<f64> = trace.iter().map(|v| v + 7.25).collect();
        assert_eq!(
            schedule_rollout(&trace, &s).unwrap(),
            schedule_rollout(&shifted, &s).unwrap()
        );
    }

    #[test]
    fn rejects_bad_lambda_and_short_traces() {
        assert!(MrqaState::new(0.0, 2048.0).is_err());
        assert!(MrqaState::new(4096.0, 2048.0).is_err());
        let s = state(64.0, 64.0);
        assert!(schedule_rollout(&[30.0], &s).is_err());
    }
}
