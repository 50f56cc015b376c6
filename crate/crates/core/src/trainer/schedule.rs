//! Iteration windows for bootstrapping, upscaling and densification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-scale iteration counts plus a divisor applied to all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_iters: u64,
    pub boot_start: u64,
    pub boot_end: u64,
    pub boot_interval: u64,
    pub boot_active: u64,
    pub up_start: u64,
    pub up_end: u64,
    pub up_interval: u64,
    pub up_active: u64,
    pub densify_start: u64,
    pub densify_end: u64,
    pub densify_interval: u64,
    /// Position learning rate decays over this many iterations.
    pub position_lr_steps: u64,
    pub divisor: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 40_000,
            boot_start: 20_000,
            boot_end: 38_000,
            boot_interval: 2_000,
            boot_active: 750,
            up_start: 22_000,
            up_end: 38_000,
            up_interval: 2_000,
            up_active: 1_000,
            densify_start: 500,
            densify_end: 15_000,
            densify_interval: 100,
            position_lr_steps: 30_000,
            divisor: 8,
        }
    }
}

/// A periodic window: active on `[start + k*interval, start + k*interval + active)`
/// for every `k` while below `end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: u64,
    pub end: u64,
    pub interval: u64,
    pub active: u64,
}

impl Window {
    pub fn is_active(&self, iter: u64) -> bool {
        iter >= self.start && iter < self.end && (iter - self.start) % self.interval < self.active
    }

    /// First iteration of an active stretch.
    pub fn is_refresh(&self, iter: u64) -> bool {
        iter >= self.start && iter < self.end && (iter - self.start).is_multiple_of(self.interval)
    }

    /// 0 in the first half of `[start, end)`, 1 in the second.
    pub fn stage(&self, iter: u64) -> usize {
        usize::from(iter.saturating_sub(self.start) * 2 >= self.end - self.start)
    }

    /// Index of the refresh period containing `iter`.
    pub fn period(&self, iter: u64) -> u64 {
        iter.saturating_sub(self.start) / self.interval
    }

    pub fn periods(&self) -> u64 {
        (self.end - self.start).div_ceil(self.interval)
    }
}

/// The schedule after dividing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scaled {
    pub total_iters: u64,
    pub boot: Window,
    pub up: Window,
    pub densify: Window,
    pub position_lr_steps: u64,
}

fn div(v: u64, d: u64) -> u64 {
    (v as f64 / d as f64).round() as u64
}

impl Schedule {
    pub fn scaled(&self) -> Scaled {
        let d = self.divisor.max(1);
        let w = |start, end, interval, active| Window {
            start: div(start, d),
            end: div(end, d),
            interval: div(interval, d).max(1),
            active: div(active, d).max(1),
        };
        Scaled {
            total_iters: div(self.total_iters, d),
            boot: w(self.boot_start, self.boot_end, self.boot_interval, self.boot_active),
            up: w(self.up_start, self.up_end, self.up_interval, self.up_active),
            densify: w(self.densify_start, self.densify_end, self.densify_interval, 1),
            position_lr_steps: div(self.position_lr_steps, d).max(1),
        }
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.divisor < 1 {
            out.push("schedule.divisor must be >= 1".to_string());
            return out;
        }
        let s = self.scaled();
        if s.total_iters == 0 {
            out.push("schedule.total_iters is zero after dividing".into());
        }
        for (name, w) in [("boot", s.boot), ("up", s.up)] {
            if w.start >= w.end {
                out.push(format!("schedule.{name}_start must be < {name}_end"));
            }
            if w.end > s.total_iters {
                out.push(format!("schedule.{name}_end must be <= total_iters"));
            }
            if w.active > w.interval {
                out.push(format!("schedule.{name}_active must be <= {name}_interval"));
            }
        }
        if s.densify.start > s.densify.end {
            out.push("schedule.densify_start must be <= densify_end".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plain,
    BootstrapActive,
    UpscaleActive,
    Both,
}

impl Phase {
    pub fn bootstrap(self) -> bool {
        matches!(self, Phase::BootstrapActive | Phase::Both)
    }

    pub fn upscale(self) -> bool {
        matches!(self, Phase::UpscaleActive | Phase::Both)
    }
}

pub fn phase_of(iter: u64, schedule: &Schedule) -> Phase {
    let s = schedule.scaled();
    match (s.boot.is_active(iter), s.up.is_active(iter)) {
        (false, false) => Phase::Plain,
        (true, false) => Phase::BootstrapActive,
        (false, true) => Phase::UpscaleActive,
        (true, true) => Phase::Both,
    }
}
