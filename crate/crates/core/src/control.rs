//! Open-loop control signals.
//!
//! All signals are left-continuous: the value at a breakpoint `t_k` is the
//! value used on the interval ending there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ControlBox;

pub trait ControlSignal: Send + Sync {
    fn dim(&self) -> usize;

    /// Value at `t`, equal to the limit from the left.
    fn value(&self, t: f64) -> Vec<f64>;

    /// Times in the open interval `(t0, t1)` where the signal may jump, sorted.
    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64>;

    /// Whether `t` lies on a declared singular arc. Only the limit integrator
    /// looks at this: in contact it replaces the control by the value that
    /// keeps the wall force at zero.
    fn singular(&self, _t: f64) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantControl {
    pub u: Vec<f64>,
}

impl ConstantControl {
    pub fn new(u: Vec<f64>) -> Self {
        ConstantControl { u }
    }

    pub fn scalar(u: f64) -> Self {
        ConstantControl { u: vec![u] }
    }
}

impl ControlSignal for ConstantControl {
    fn dim(&self) -> usize {
        self.u.len()
    }

    fn value(&self, _t: f64) -> Vec<f64> {
        self.u.clone()
    }

    fn breakpoints(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// One channel of a bang-bang control: starts at `initial` and toggles
/// between `lo` and `hi` at each switch time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BangBangChannel {
    pub initial: f64,
    pub lo: f64,
    pub hi: f64,
    pub switch_times: Vec<f64>,
}

impl BangBangChannel {
    pub fn value(&self, t: f64) -> f64 {
        // Left-continuous: a switch at exactly t has not happened yet.
        let k = self.switch_times.iter().filter(|&&s| s < t).count();
        if k % 2 == 0 {
            self.initial
        } else {
            self.other(self.initial)
        }
    }

    fn other(&self, v: f64) -> f64 {
        if v == self.hi {
            self.lo
        } else {
            self.hi
        }
    }

    /// Value on each arc, in order.
    pub fn arc_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.switch_times.len() + 1);
        let mut v = self.initial;
        out.push(v);
        for _ in &self.switch_times {
            v = self.other(v);
            out.push(v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BangBangControl {
    pub channels: Vec<BangBangChannel>,
    pub horizon: f64,
    /// Intervals on which a contact arc may use the wall-holding control.
    #[serde(default)]
    pub singular_arcs: Vec<(f64, f64)>,
}

impl BangBangControl {
    pub fn new(channels: Vec<BangBangChannel>, horizon: f64) -> Result<Self> {
        let c = BangBangControl {
            channels,
            horizon,
            singular_arcs: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    /// Single-channel control starting at `initial` with the given switches.
    pub fn single(
        initial: f64,
        switch_times: Vec<f64>,
        control_box: &ControlBox,
        horizon: f64,
    ) -> Result<Self> {
        if control_box.dim() != 1 {
            return Err(Error::arg("single-channel control needs a one-dimensional box"));
        }
        BangBangControl::new(
            vec![BangBangChannel {
                initial,
                lo: control_box.lo[0],
                hi: control_box.hi[0],
                switch_times,
            }],
            horizon,
        )
    }

    pub fn with_singular_arcs(mut self, arcs: Vec<(f64, f64)>) -> Self {
        self.singular_arcs = arcs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::contract("bang-bang control has no channels"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::contract("bang-bang horizon must be positive"));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.initial != ch.lo && ch.initial != ch.hi {
                return Err(Error::contract(format!(
                    "channel {i}: initial value {} is not a box endpoint",
                    ch.initial
                )));
            }
            let mut prev = 0.0;
            for &s in &ch.switch_times {
                if !(s > prev) || s >= self.horizon || !s.is_finite() {
                    return Err(Error::contract(format!(
                        "channel {i}: switch times must increase strictly inside (0, {})",
                        self.horizon
                    )));
                }
                prev = s;
            }
        }
        Ok(())
    }

    pub fn switch_count(&self) -> usize {
        self.channels.iter().map(|c| c.switch_times.len()).sum()
    }

    /// Arc values of the first channel.
    pub fn signs(&self) -> Vec<f64> {
        self.channels[0].arc_values()
    }

    /// Same shape with switch times and singular arcs scaled by `T/horizon`.
    pub fn rescaled(&self, horizon: f64) -> Self {
        let k = horizon / self.horizon;
        let mut out = self.clone();
        out.horizon = horizon;
        for ch in &mut out.channels {
            for s in &mut ch.switch_times {
                *s *= k;
            }
        }
        for a in &mut out.singular_arcs {
            a.0 *= k;
            a.1 *= k;
        }
        out
    }

    /// Drops switches at or after `t`.
    pub fn truncated(&self, t: f64) -> Self {
        let mut out = self.clone();
        for ch in &mut out.channels {
            ch.switch_times.retain(|&s| s < t);
        }
        out
    }
}

impl ControlSignal for BangBangControl {
    fn dim(&self) -> usize {
        self.channels.len()
    }

    fn value(&self, t: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.value(t)).collect()
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .channels
            .iter()
            .flat_map(|c| c.switch_times.iter().copied())
            .chain(self.singular_arcs.iter().flat_map(|a| [a.0, a.1]))
            .filter(|&s| s > t0 && s < t1)
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    fn singular(&self, t: f64) -> bool {
        self.singular_arcs.iter().any(|&(a, b)| t > a && t <= b)
    }
}

/// Piecewise-constant control given by samples: `values[k]` is used on
/// `(times[k-1], times[k]]`, and `values[0]` at and before `times[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledControl {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl SampledControl {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::contract("sampled control needs one value per time"));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("sampled control times must be nondecreasing"));
        }
        let m = values[0].len();
        if m == 0 || values.iter().any(|v| v.len() != m) {
            return Err(Error::contract("sampled control values must share a positive dimension"));
        }
        Ok(SampledControl { times, values })
    }
}

impl ControlSignal for SampledControl {
    fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn value(&self, t: f64) -> Vec<f64> {
        // First index with times[k] >= t.
        let k = self.times.partition_point(|&s| s < t);
        self.values[k.min(self.values.len() - 1)].clone()
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.times.len().saturating_sub(1) {
            if self.values[k] != self.values[k + 1] {
                let s = self.times[k];
                if s > t0 && s < t1 && out.last() != Some(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}
