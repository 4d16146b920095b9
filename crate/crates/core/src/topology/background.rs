//! Synthetic background connection requests.
//!
//! Arrivals form a Poisson process with uniformly random node pairs,
//! uniformly random slot demand and exponential holding times. The draw order
//! per arrival is fixed so a stream can be replayed from its seed:
//!
//! 1. at construction, the first inter-arrival gap `Exp(rate)`;
//! 2. per arrival: `src` uniform in `0..n`, then `dst` uniform in `0..n-1`
//!    (shifted past `src`), then the width uniform in the demand range, then
//!    the holding time `Exp(1/mean_hold_s)`, then the next gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTrafficModel {
    pub arrival_rate_per_s: f64,
    pub mean_hold_s: f64,
    pub fs_demand_min: usize,
    pub fs_demand_max: usize,
    pub rng_seed: u64,
}

impl BackgroundTrafficModel {
    /// No background traffic.
    pub fn off() -> Self {
        Self {
            arrival_rate_per_s: 0.0,
            mean_hold_s: 1.0,
            fs_demand_min: 1,
            fs_demand_max: 1,
            rng_seed: 0,
        }
    }

    /// Loaded preset for blocking experiments. On NSFNET with 80 slots per
    /// link and a 30 s warm-up, about 54% of slot-links are occupied and
    /// roughly 40% of arrivals are dropped. Connections live far longer
    /// than a single transfer.
    pub fn loaded(rng_seed: u64) -> Self {
        Self {
            arrival_rate_per_s: LOADED_ARRIVAL_RATE,
            mean_hold_s: LOADED_MEAN_HOLD_S,
            fs_demand_min: 2,
            fs_demand_max: 8,
            rng_seed,
        }
    }

    pub fn is_active(&self) -> bool {
        self.arrival_rate_per_s > 0.0
    }

    pub fn validate(&self, fs_total: usize) -> Result<()> {
        if !(self.arrival_rate_per_s >= 0.0 && self.arrival_rate_per_s.is_finite()) {
            return Err(Error::invalid(
                "background.arrival_rate_per_s",
                "must be finite and nonnegative",
            ));
        }
        if !(self.mean_hold_s > 0.0 && self.mean_hold_s.is_finite()) {
            return Err(Error::invalid("background.mean_hold_s", "must be finite and positive"));
        }
        if self.fs_demand_min < 1 || self.fs_demand_min > self.fs_demand_max {
            return Err(Error::invalid(
                "background.fs_demand_min",
                format!(
                    "demand range [{}, {}] is empty or starts below 1",
                    self.fs_demand_min, self.fs_demand_max
                ),
            ));
        }
        if self.fs_demand_max > fs_total {
            return Err(Error::invalid(
                "background.fs_demand_max",
                format!("{} exceeds the {} slots per link", self.fs_demand_max, fs_total),
            ));
        }
        Ok(())
    }
}

pub(crate) const LOADED_ARRIVAL_RATE: f64 = 40.0;
pub(crate) const LOADED_MEAN_HOLD_S: f64 = 5.0;

/// One background connection request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundArrival {
    pub time: f64,
    pub src: NodeId,
    pub dst: NodeId,
    pub width: usize,
    pub hold_s: f64,
}

/// Seeded generator of [`BackgroundArrival`]s in time order.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    model: BackgroundTrafficModel,
    rng: ChaCha8Rng,
    n_nodes: usize,
    next_time: f64,
}

impl ArrivalStream {
    pub fn new(model: BackgroundTrafficModel, n_nodes: usize, start_time: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
        let next_time = if model.is_active() && n_nodes >= 2 {
            start_time + sample_exp(&mut rng, model.arrival_rate_per_s)
        } else {
            f64::INFINITY
        };
        Self {
            model,
            rng,
            n_nodes,
            next_time,
        }
    }

    pub fn model(&self) -> &BackgroundTrafficModel {
        &self.model
    }

    /// Time of the next arrival, `INFINITY` when the stream is inactive.
    pub fn peek_time(&self) -> f64 {
        self.next_time
    }

    pub fn pop(&mut self) -> BackgroundArrival {
        debug_assert!(self.next_time.is_finite());
        let time = self.next_time;
        let src = self.rng.random_range(0..self.n_nodes);
        let mut dst = self.rng.random_range(0..self.n_nodes - 1);
        if dst >= src {
            dst += 1;
        }
        let width = self
            .rng
            .random_range(self.model.fs_demand_min..=self.model.fs_demand_max);
        let hold_s = sample_exp(&mut self.rng, 1.0 / self.model.mean_hold_s);
        self.next_time = time + sample_exp(&mut self.rng, self.model.arrival_rate_per_s);
        BackgroundArrival {
            time,
            src,
            dst,
            width,
            hold_s,
        }
    }
}

fn sample_exp(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    Exp::new(rate).expect("rate validated positive").sample(rng)
}
