//! Alpha-beta transfer latency and FS demand sizing.
//!
//! A transfer over an optical path takes `T = α + c·β + 𝓛` where
//! `α = km · prop_s_per_km + hops · per_hop_overhead_s`,
//! `β = 1 / (n_fs · fs_rate_bps)` and `𝓛` is the queuing penalty.
//! All numeric defaults are stand-ins; the default slot rate is 12.5 GHz at
//! 6 bit/symbol (64QAM, Nyquist, no FEC overhead).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsa::CandidatePath;
use crate::topology::LinkId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub prop_s_per_km: f64,
    pub per_hop_overhead_s: f64,
    pub fs_rate_bps: f64,
    pub intra_dc_latency_s: f64,
    pub intra_dc_rate_bps: f64,
    /// κ: extra delay per in-flight transfer sharing a link with the path.
    pub queue_penalty_per_conflict_s: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            prop_s_per_km: 5.0e-6,
            per_hop_overhead_s: 1.0e-4,
            fs_rate_bps: 7.5e10,
            intra_dc_latency_s: 5.0e-5,
            intra_dc_rate_bps: 4.0e11,
            queue_penalty_per_conflict_s: 0.0,
        }
    }
}

impl LatencyParams {
    /// Every delay term is zero: no propagation, no overheads and infinite
    /// rates.
    pub fn zero() -> Self {
        Self {
            prop_s_per_km: 0.0,
            per_hop_overhead_s: 0.0,
            fs_rate_bps: f64::INFINITY,
            intra_dc_latency_s: 0.0,
            intra_dc_rate_bps: f64::INFINITY,
            queue_penalty_per_conflict_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("latency.prop_s_per_km", self.prop_s_per_km),
            ("latency.per_hop_overhead_s", self.per_hop_overhead_s),
            ("latency.intra_dc_latency_s", self.intra_dc_latency_s),
            ("latency.queue_penalty_per_conflict_s", self.queue_penalty_per_conflict_s),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(key, format!("{v} must be finite and nonnegative")));
            }
        }
        if !(self.fs_rate_bps > 0.0) {
            return Err(Error::invalid("latency.fs_rate_bps", "must be positive"));
        }
        if !(self.intra_dc_rate_bps > 0.0) {
            return Err(Error::invalid("latency.intra_dc_rate_bps", "must be positive"));
        }
        Ok(())
    }
}

/// Propagation term α of a path.
pub fn alpha(params: &LatencyParams, path: &CandidatePath) -> f64 {
    path.length_km * params.prop_s_per_km + path.hop_count() as f64 * params.per_hop_overhead_s
}

/// Seconds per bit with `n_fs` slots.
pub fn beta(params: &LatencyParams, n_fs: usize) -> f64 {
    debug_assert!(n_fs >= 1);
    1.0 / (n_fs as f64 * params.fs_rate_bps)
}

/// Per-stage time at which the stage's egress finishes serialising its last
/// outbound transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct EgressState {
    busy_until: Vec<f64>,
}

impl EgressState {
    pub fn new(stages: usize) -> Self {
        Self {
            busy_until: vec![0.0; stages],
        }
    }

    pub fn busy_until(&self, stage: usize) -> f64 {
        self.busy_until[stage]
    }

    /// Extends the stage's busy horizon; never moves it backwards.
    pub fn occupy_until(&mut self, stage: usize, until: f64) {
        let slot = &mut self.busy_until[stage];
        *slot = slot.max(until);
    }

    pub fn reset(&mut self) {
        self.busy_until.iter_mut().for_each(|t| *t = 0.0);
    }
}

/// Number of in-flight transfers whose links intersect `path`.
pub fn count_conflicts<'a>(path: &[LinkId], inflight: impl IntoIterator<Item = &'a [LinkId]>) -> usize {
    inflight
        .into_iter()
        .filter(|other| other.iter().any(|l| path.contains(l)))
        .count()
}

/// 𝓛 = max(0, busy_until − now) + κ · conflicts.
pub fn queue_penalty(
    params: &LatencyParams,
    egress: &EgressState,
    stage: usize,
    now: f64,
    conflicts: usize,
) -> f64 {
    (egress.busy_until(stage) - now).max(0.0) + params.queue_penalty_per_conflict_s * conflicts as f64
}

/// `T = α + c·β + 𝓛` over an optical path.
pub fn transfer_time(
    params: &LatencyParams,
    path: &CandidatePath,
    n_fs: usize,
    message_bits: f64,
    penalty: f64,
) -> f64 {
    alpha(params, path) + serialization_time(params, n_fs, message_bits) + penalty
}

/// The `c·β` term.
pub fn serialization_time(params: &LatencyParams, n_fs: usize, message_bits: f64) -> f64 {
    if message_bits == 0.0 {
        0.0
    } else {
        message_bits * beta(params, n_fs)
    }
}

/// Transfer between stages hosted in the same datacenter; uses no spectrum.
pub fn intra_dc_transfer_time(params: &LatencyParams, message_bits: f64) -> f64 {
    let wire = if message_bits == 0.0 {
        0.0
    } else {
        message_bits / params.intra_dc_rate_bps
    };
    params.intra_dc_latency_s + wire
}

/// FS demand modifiers applied to one transfer request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestLabel {
    pub cb: bool,
    pub blocked: bool,
}

impl RequestLabel {
    pub const NORMAL: RequestLabel = RequestLabel {
        cb: false,
        blocked: false,
    };
}

/// Slots to request: `base` normally, `round(base·boost)` capped at
/// `fs_max` for CB requests, and `max(floor(base/2), 1)` when the request
/// blocked last iteration (checked first). Always within `[1, fs_max]`.
pub fn required_fs(base_fs: usize, label: RequestLabel, boost_factor: f64, fs_max: usize) -> usize {
    let n = if label.blocked {
        (base_fs / 2).max(1)
    } else if label.cb {
        (base_fs as f64 * boost_factor).round() as usize
    } else {
        base_fs
    };
    n.clamp(1, fs_max.max(1))
}
