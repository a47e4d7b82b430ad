//! Convolution cost accounting (one multiply-accumulate counts as one FLOP)
//! and a wall-clock forward timer.
//!
//! The timer is single-threaded; background load on the machine corrupts
//! its measurements, so its numbers are reported and never asserted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MfpError, Result};
use crate::filters::PruneMask;
use crate::model::ModelState;
use crate::tensor::Tensor;

/// Multiply-accumulates of one convolution: `N_out · N_in · K² · H_out · W_out`.
pub fn layer_flops(n_in: usize, n_out: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    (n_out as u64) * (n_in as u64) * (kernel as u64).pow(2) * (h_out as u64) * (w_out as u64)
}

/// Fraction of a layer's MACs removed when a fraction `p_in` of its input
/// channels and `p_out` of its filters are pruned: `1 − (1 − p_out)(1 − p_in)`.
pub fn theoretical_reduction(p_in: f64, p_out: f64) -> f64 {
    1.0 - (1.0 - p_out) * (1.0 - p_in)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub baseline_macs: u64,
    pub pruned_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub baseline_macs: u64,
    pub pruned_macs: u64,
    /// `1 − pruned_macs / baseline_macs`.
    pub theoretical_reduction: f64,
    /// Timing fields; machine-dependent and excluded from determinism checks.
    pub measured_ms_baseline: Option<f64>,
    pub measured_ms_pruned: Option<f64>,
}

impl FlopsReport {
    /// `1 − pruned_time / baseline_time` when both timings are present.
    pub fn realistic_reduction(&self) -> Option<f64> {
        match (self.measured_ms_baseline, self.measured_ms_pruned) {
            (Some(b), Some(p)) if b > 0.0 => Some(1.0 - p / b),
            _ => None,
        }
    }

    pub fn with_timing(mut self, baseline_ms: f64, pruned_ms: f64) -> Self {
        self.measured_ms_baseline = Some(baseline_ms);
        self.measured_ms_pruned = Some(pruned_ms);
        self
    }
}

/// MAC counts of `model` before and after removing the channels pruned by
/// `masks`. Layer `i` keeps `kept(i−1)` input channels (all input channels
/// for the first layer) and `kept(i)` filters.
pub fn model_flops(model: &ModelState, masks: &[PruneMask]) -> Result<FlopsReport> {
    let arch = model.arch();
    if masks.len() != arch.convs.len() {
        return Err(MfpError::InvalidMask(format!(
            "{} masks for {} conv layers",
            masks.len(),
            arch.convs.len()
        )));
    }
    let dims = arch.spatial_dims()?;
    let mut layers = Vec::with_capacity(dims.len());
    let mut kept_in = arch.input[0];
    for (i, ((c, &(h, w)), m)) in arch.convs.iter().zip(&dims).zip(masks).enumerate() {
        if m.len() != c.out_channels {
            return Err(MfpError::InvalidMask(format!(
                "layer {i}: mask length {} but {} filters",
                m.len(),
                c.out_channels
            )));
        }
        let kept_out = m.kept_count();
        layers.push(LayerFlops {
            layer: i,
            baseline_macs: layer_flops(c.in_channels, c.out_channels, c.kernel, h, w),
            pruned_macs: layer_flops(kept_in, kept_out, c.kernel, h, w),
        });
        kept_in = kept_out;
    }
    let baseline_macs: u64 = layers.iter().map(|l| l.baseline_macs).sum();
    let pruned_macs: u64 = layers.iter().map(|l| l.pruned_macs).sum();
    Ok(FlopsReport {
        layers,
        baseline_macs,
        pruned_macs,
        theoretical_reduction: 1.0 - pruned_macs as f64 / baseline_macs as f64,
        measured_ms_baseline: None,
        measured_ms_pruned: None,
    })
}

/// Median wall-clock time of `model.forward(batch)` in milliseconds over
/// `reps` timed runs, after `warmup` untimed runs.
pub fn timing_harness(model: &ModelState, batch: &Tensor, warmup: usize, reps: usize) -> Result<f64> {
    if reps < 3 {
        return Err(MfpError::InvalidArgument(format!(
            "need at least 3 timed repetitions, got {reps}"
        )));
    }
    for _ in 0..warmup {
        std::hint::black_box(model.forward(batch)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.forward(batch)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[reps / 2])
}
