//! Dual-rate execution: a per-frame fast path fusing memory with encoder
//! observations, a slow path refreshing the memory, and the cache between them.
//!
//! Sync replay refreshes on a fixed schedule in one thread. Async mode runs the
//! slow path concurrently, either on a deterministic virtual clock or on real
//! threads against the wall clock.

mod asynchronous;
pub mod cache;
mod pipeline;
mod sync;

use std::borrow::Cow;
use std::fmt::Write as _;

pub use asynchronous::{adoption_stats, run_async, AdoptionStats, AsyncReport, PublishRecord};
pub use cache::{feature_cache, CacheReader, CacheWriter, Snapshot};
pub use pipeline::{FastPath, FastState, Pipeline, PipelineConfig};
pub use sync::{refresh_schedule, run_schedule, run_sync, sync_schedule};

use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, fmt_g6, LagProfile};
use crate::synthworld::{FrameBundle, World};
use crate::tensor::DepthMap;

/// Output of one fast-path frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    /// Frames since the memory's source frame.
    pub lag: usize,
    pub prediction: DepthMap,
    /// Mean layer-1 trust used for fusion.
    pub mean_t: f64,
    /// Mean layer-1 trust before temporal smoothing.
    pub mean_t_raw: f64,
    /// Percentage of layer-1 pixels below the encoder-domination threshold.
    pub fastpath_pct: f64,
    pub cache_version: u64,
    /// Source frame of a refresh adopted right before this frame.
    pub refreshed_from: Option<usize>,
    pub start_us: u64,
    pub end_us: u64,
}

/// Random-access frame provider shared by both paths.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn frame(&self, t: usize) -> Result<Cow<'_, FrameBundle>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [FrameBundle] {
    fn len(&self) -> usize {
        <[FrameBundle]>::len(self)
    }

    fn frame(&self, t: usize) -> Result<Cow<'_, FrameBundle>> {
        let f = self.get(t).ok_or_else(|| invalid(format!("frame {t} outside sequence of {}", self.len())))?;
        if f.t != t {
            return Err(invalid(format!("sequence position {t} holds frame {}", f.t)));
        }
        Ok(Cow::Borrowed(f))
    }
}

impl FrameSource for Vec<FrameBundle> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, t: usize) -> Result<Cow<'_, FrameBundle>> {
        self.as_slice().frame(t)
    }
}

/// Frames generated on demand from a world.
#[derive(Debug, Clone)]
pub struct WorldSource {
    pub world: World,
    pub frames: usize,
}

impl FrameSource for WorldSource {
    fn len(&self) -> usize {
        self.frames
    }

    fn frame(&self, t: usize) -> Result<Cow<'_, FrameBundle>> {
        if t >= self.frames {
            return Err(invalid(format!("frame {t} outside sequence of {}", self.frames)));
        }
        Ok(Cow::Owned(self.world.frame(t)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SyncReplay,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// Deterministic discrete-event simulation in integer microseconds.
    Virtual,
    /// Two real threads; timings are measured, not simulated.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Refresh interval in frames (sync mode).
    pub n: usize,
    pub l_slow_ms: f64,
    pub l_fast_ms: f64,
    pub clock: Clock,
    /// Slow path idles this many frame periods after the initial publish.
    pub stall_frames: usize,
    /// Slow path stops after the initial publish.
    pub single_refresh: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SyncReplay,
            n: 10,
            l_slow_ms: 16.6,
            l_fast_ms: 4.2,
            clock: Clock::Virtual,
            stall_frames: 0,
            single_refresh: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("refresh interval N must be at least 1"));
        }
        for (name, v) in [("slow", self.l_slow_ms), ("fast", self.l_fast_ms)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} latency {v} ms must be positive")));
            }
        }
        if us(self.l_fast_ms) == 0 || us(self.l_slow_ms) == 0 {
            return Err(invalid("latencies must be at least 1 microsecond"));
        }
        Ok(())
    }
}

pub(crate) fn us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

/// `fast_rate / slow_rate`: fast frames per slow refresh.
pub fn effective_interval(fast_rate: f64, slow_rate: f64) -> Result<f64> {
    if !(fast_rate > 0.0 && slow_rate > 0.0 && fast_rate.is_finite() && slow_rate.is_finite()) {
        return Err(invalid(format!("rates must be positive, got fast {fast_rate} Hz, slow {slow_rate} Hz")));
    }
    Ok(fast_rate / slow_rate)
}

/// Checks the bookkeeping invariants of a run.
pub fn check_results(results: &[FrameResult]) -> Result<()> {
    let mut last_version = 0;
    for r in results {
        if r.cache_version < last_version {
            return Err(Error::Invariant(format!("frame {}: cache version went back to {}", r.frame, r.cache_version)));
        }
        last_version = r.cache_version;
        if !(0.0..=1.0).contains(&r.mean_t) || !(0.0..=100.0).contains(&r.fastpath_pct) {
            return Err(Error::Invariant(format!("frame {}: trust statistics out of range", r.frame)));
        }
        if r.refreshed_from.is_some_and(|s| r.frame - r.lag != s) {
            return Err(Error::Invariant(format!("frame {}: lag disagrees with adopted refresh", r.frame)));
        }
        if r.end_us < r.start_us {
            return Err(Error::Invariant(format!("frame {}: ends before it starts", r.frame)));
        }
        if !r.prediction.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Invariant(format!("frame {}: non-finite prediction", r.frame)));
        }
    }
    Ok(())
}

/// Scores every result against its frame's ground truth, binned by lag.
/// Results with `lag >= bins` are skipped.
pub fn lag_profile(results: &[FrameResult], source: &dyn FrameSource, bins: usize) -> Result<LagProfile> {
    let mut profile = LagProfile::new(bins)?;
    for r in results.iter().filter(|r| r.lag < bins) {
        let f = source.frame(r.frame)?;
        profile.accumulate(r.lag, &r.prediction, &f.depth, r.mean_t, r.fastpath_pct)?;
    }
    Ok(profile)
}

pub const RUN_LOG_HEADER: &str = "frame,lag,cache_version,refreshed_from,mean_t,fastpath_pct,start_us,end_us,absrel,rmse,delta1";

/// One line per frame; metric columns are empty without ground truth.
pub fn run_log(results: &[FrameResult], source: Option<&dyn FrameSource>) -> Result<String> {
    let mut out = String::from(RUN_LOG_HEADER);
    out.push('\n');
    for r in results {
        let metrics = match source {
            Some(s) => {
                let m = evaluate(&r.prediction, &s.frame(r.frame)?.depth)?;
                format!("{},{},{}", fmt_g6(m.absrel), fmt_g6(m.rmse), fmt_g6(m.delta1))
            }
            None => ",,".into(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{metrics}",
            r.frame,
            r.lag,
            r.cache_version,
            r.refreshed_from.map_or_else(String::new, |s| s.to_string()),
            fmt_g6(r.mean_t),
            fmt_g6(r.fastpath_pct),
            r.start_us,
            r.end_us
        );
    }
    Ok(out)
}
