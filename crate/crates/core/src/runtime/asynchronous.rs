use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{invalid, Error, Result};

use super::cache::{feature_cache, layout_of, CacheReader, CacheWriter};
use super::{us, Clock, FastPath, FrameResult, FrameSource, Mode, Pipeline, RunConfig};

/// One slow-path publication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishRecord {
    pub version: u64,
    pub source_frame: usize,
    pub time_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncReport {
    pub results: Vec<FrameResult>,
    pub publishes: Vec<PublishRecord>,
    /// Frame boundaries at which the cache was still empty.
    pub empty_reads: usize,
}

/// Refresh adoption after the initial one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdoptionStats {
    pub count: usize,
    /// Mean of `t - source_frame` at the adopting frame.
    pub mean_lag: f64,
    /// Mean number of frames between consecutive adoptions; NaN with fewer than two.
    pub mean_interval: f64,
}

pub fn adoption_stats(results: &[FrameResult]) -> Option<AdoptionStats> {
    let frames: Vec<&FrameResult> = results.iter().filter(|r| r.refreshed_from.is_some()).collect();
    let later: Vec<&&FrameResult> = frames.iter().skip(1).collect();
    if later.is_empty() {
        return None;
    }
    let mean_lag = later.iter().map(|r| r.lag as f64).sum::<f64>() / later.len() as f64;
    let mean_interval = if later.len() > 1 {
        (later[later.len() - 1].frame - later[0].frame) as f64 / (later.len() - 1) as f64
    } else {
        f64::NAN
    };
    Some(AdoptionStats { count: later.len(), mean_lag, mean_interval })
}

/// Fast path at a frame boundary: adopt a newer snapshot if one exists, then step.
fn fast_frame(fast: &mut FastPath, reader: &CacheReader, source: &dyn FrameSource, t: usize, empty: &mut usize) -> Result<FrameResult> {
    let mut adopted = None;
    let latest = reader.latest_version();
    if latest == 0 {
        *empty += 1;
    } else if latest != fast.version() {
        let snap = reader.read_latest().ok_or_else(|| Error::State("cache emptied after publish".into()))?;
        if snap.version < fast.version() {
            return Err(Error::Invariant(format!("cache version went back from {} to {}", fast.version(), snap.version)));
        }
        let src = source.frame(snap.source_frame)?;
        fast.adopt(snap.levels, &src, snap.version)?;
        adopted = Some(snap.source_frame);
    }
    let frame = source.frame(t)?;
    let mut r = fast.step(&frame)?;
    r.refreshed_from = adopted;
    Ok(r)
}

/// Runs the slow and fast paths concurrently. Frame `t` is captured at
/// `t * L_fast`; the slow path always takes the newest captured frame it has
/// not processed yet and publishes `L_slow` later; the fast path adopts new
/// versions at frame boundaries. Frame 0 is published before the clock starts.
pub fn run_async(pipeline: &Pipeline, source: &dyn FrameSource, cfg: &RunConfig) -> Result<AsyncReport> {
    cfg.validate()?;
    if cfg.mode != Mode::Async {
        return Err(invalid("run_async needs async mode"));
    }
    if source.is_empty() {
        return Err(invalid("empty sequence"));
    }
    let first = source.frame(0)?;
    let (mut writer, reader) = feature_cache(layout_of(&first.foundation))?;
    writer.publish(&first.foundation, 0)?;
    let init = PublishRecord { version: 1, source_frame: 0, time_us: 0 };
    match cfg.clock {
        Clock::Virtual => run_virtual(pipeline, source, cfg, writer, reader, init),
        Clock::Wall => run_wall(pipeline, source, cfg, writer, reader, init),
    }
}

fn run_virtual(
    pipeline: &Pipeline,
    source: &dyn FrameSource,
    cfg: &RunConfig,
    mut writer: CacheWriter,
    reader: CacheReader,
    init: PublishRecord,
) -> Result<AsyncReport> {
    let (lf, ls) = (us(cfg.l_fast_ms), us(cfg.l_slow_ms));
    let len = source.len();
    let mut fast = FastPath::new(pipeline.clone());
    let mut publishes = vec![init];
    let mut results = Vec::with_capacity(len);
    let mut empty = 0;

    let mut slow_free = cfg.stall_frames as u64 * lf;
    let mut slow_last = 0usize;
    let mut slow_done = cfg.single_refresh;
    let mut pending: Option<(u64, usize)> = None;

    for t in 0..len {
        let boundary = t as u64 * lf;
        loop {
            if let Some((at, s)) = pending {
                if at > boundary {
                    break;
                }
                let f = source.frame(s)?;
                let version = writer.publish(&f.foundation, s)?;
                publishes.push(PublishRecord { version, source_frame: s, time_us: at });
                pending = None;
                slow_free = at;
            }
            if slow_done {
                break;
            }
            let newest = ((slow_free / lf) as usize).min(len - 1);
            let (s, start) = if newest > slow_last {
                (newest, slow_free)
            } else if slow_last + 1 < len {
                (slow_last + 1, slow_free.max((slow_last as u64 + 1) * lf))
            } else {
                slow_done = true;
                break;
            };
            slow_last = s;
            pending = Some((start + ls, s));
        }
        let mut r = fast_frame(&mut fast, &reader, source, t, &mut empty)?;
        r.start_us = boundary;
        r.end_us = boundary + lf;
        results.push(r);
    }
    Ok(AsyncReport { results, publishes, empty_reads: empty })
}

fn sleep_until(t0: Instant, at_us: u64) {
    let target = t0 + Duration::from_micros(at_us);
    let now = Instant::now();
    if target > now {
        thread::sleep(target - now);
    }
}

fn run_wall(
    pipeline: &Pipeline,
    source: &dyn FrameSource,
    cfg: &RunConfig,
    mut writer: CacheWriter,
    reader: CacheReader,
    init: PublishRecord,
) -> Result<AsyncReport> {
    let (lf, ls) = (us(cfg.l_fast_ms), us(cfg.l_slow_ms));
    let len = source.len();
    let stop = AtomicBool::new(false);
    let t0 = Instant::now();

    thread::scope(|scope| {
        let stop_flag = &stop;
        let slow = scope.spawn(move || -> Result<Vec<PublishRecord>> {
            let mut publishes = vec![init];
            if cfg.single_refresh {
                return Ok(publishes);
            }
            sleep_until(t0, cfg.stall_frames as u64 * lf);
            let mut last = 0usize;
            while !stop_flag.load(Ordering::Acquire) {
                let now = t0.elapsed().as_micros() as u64;
                let newest = ((now / lf) as usize).min(len - 1);
                if newest <= last {
                    if last + 1 >= len {
                        break;
                    }
                    sleep_until(t0, (last as u64 + 1) * lf);
                    continue;
                }
                let started = t0.elapsed().as_micros() as u64;
                let feats = source.frame(newest)?.foundation.clone();
                sleep_until(t0, started + ls);
                let version = writer.publish(&feats, newest)?;
                let at = t0.elapsed().as_micros() as u64;
                publishes.push(PublishRecord { version, source_frame: newest, time_us: at });
                last = newest;
            }
            Ok(publishes)
        });

        let mut fast = FastPath::new(pipeline.clone());
        let mut empty = 0;
        let mut results = Vec::with_capacity(len);
        let mut outcome = Ok(());
        for t in 0..len {
            sleep_until(t0, t as u64 * lf);
            let start = t0.elapsed().as_micros() as u64;
            match fast_frame(&mut fast, &reader, source, t, &mut empty) {
                Ok(mut r) => {
                    r.start_us = start;
                    r.end_us = t0.elapsed().as_micros() as u64;
                    results.push(r);
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        stop.store(true, Ordering::Release);
        let slow_outcome = slow.join().map_err(|_| Error::State("slow path panicked".into()))?;
        outcome?;
        Ok(AsyncReport { results, publishes: slow_outcome?, empty_reads: empty })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{refresh_schedule, run_schedule, run_sync, PipelineConfig, WorldSource};
    use crate::synthworld::{SceneConfig, World};

    fn setup(len: usize) -> (Pipeline, WorldSource) {
        let cfg = SceneConfig { height: 32, width: 32, object_size: 8, ..SceneConfig::default() };
        let world = World::new(cfg).unwrap();
        (Pipeline::for_world(&world, PipelineConfig::default()).unwrap(), WorldSource { world, frames: len })
    }

    fn async_cfg(l_slow_ms: f64, l_fast_ms: f64) -> RunConfig {
        RunConfig { mode: Mode::Async, l_slow_ms, l_fast_ms, ..RunConfig::default() }
    }

    #[test]
    fn default_rates_adopt_about_every_four_frames() {
        let (p, src) = setup(200);
        let rep = run_async(&p, &src, &async_cfg(16.6, 4.2)).unwrap();
        let st = adoption_stats(&rep.results).unwrap();
        assert!((st.mean_lag - 4.0).abs() <= 1.0, "{st:?}");
        assert!((st.mean_interval - 16.6 / 4.2).abs() < 0.1, "{st:?}");
        assert_eq!(rep.empty_reads, 0);
    }

    #[test]
    fn equal_rates_adopt_every_frame() {
        let (p, src) = setup(50);
        let st = adoption_stats(&run_async(&p, &src, &async_cfg(5.0, 5.0)).unwrap().results).unwrap();
        assert!((st.mean_lag - 1.0).abs() <= 1.0);
        assert!((st.mean_interval - 1.0).abs() < 1e-9);
    }

    #[test]
    fn versions_never_decrease() {
        let (p, src) = setup(60);
        let rep = run_async(&p, &src, &async_cfg(9.0, 2.0)).unwrap();
        assert!(rep.results.windows(2).all(|w| w[0].cache_version <= w[1].cache_version));
        assert!(rep.publishes.windows(2).all(|w| w[0].version < w[1].version && w[0].time_us <= w[1].time_us));
        crate::runtime::check_results(&rep.results).unwrap();
    }

    #[test]
    fn replay_matches_async() {
        let (p, src) = setup(40);
        let rep = run_async(&p, &src, &async_cfg(16.6, 4.2)).unwrap();
        let replay = run_schedule(&p, &src, &refresh_schedule(&rep.results)).unwrap();
        for (a, b) in rep.results.iter().zip(&replay) {
            assert_eq!(a.prediction, b.prediction);
            assert_eq!(a.lag, b.lag);
        }
    }

    #[test]
    fn single_refresh_equals_sync_with_one_refresh() {
        let (p, src) = setup(15);
        let cfg = RunConfig { single_refresh: true, ..async_cfg(16.6, 4.2) };
        let rep = run_async(&p, &src, &cfg).unwrap();
        let sync = run_sync(&p, &src, 100).unwrap();
        for (a, b) in rep.results.iter().zip(&sync) {
            assert_eq!((a.prediction.clone(), a.lag), (b.prediction.clone(), b.lag));
        }
    }

    #[test]
    fn stalled_writer_does_not_stall_reader() {
        let (p, src) = setup(30);
        let cfg = RunConfig { stall_frames: 20, ..async_cfg(16.6, 4.2) };
        let rep = run_async(&p, &src, &cfg).unwrap();
        assert_eq!(rep.results.len(), 30);
        for (t, r) in rep.results.iter().enumerate() {
            assert_eq!(r.start_us, t as u64 * 4200);
            assert!(r.end_us - r.start_us <= 2 * 4200);
            if (1..20).contains(&t) {
                assert_eq!(r.cache_version, 1);
            }
        }
    }

    #[test]
    fn virtual_runs_are_deterministic() {
        let (p, src) = setup(25);
        let a = run_async(&p, &src, &async_cfg(13.0, 3.0)).unwrap();
        let b = run_async(&p, &src, &async_cfg(13.0, 3.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wall_clock_run_completes() {
        let (p, src) = setup(12);
        let cfg = RunConfig { clock: Clock::Wall, ..async_cfg(6.0, 2.0) };
        let rep = run_async(&p, &src, &cfg).unwrap();
        assert_eq!(rep.results.len(), 12);
        assert!(rep.results.windows(2).all(|w| w[0].cache_version <= w[1].cache_version));
        let replay = run_schedule(&p, &src, &refresh_schedule(&rep.results)).unwrap();
        assert!(rep.results.iter().zip(&replay).all(|(a, b)| a.prediction == b.prediction));
    }

    #[test]
    fn rejects_sync_mode_and_bad_latency() {
        let (p, src) = setup(5);
        assert!(run_async(&p, &src, &RunConfig::default()).is_err());
        assert!(run_async(&p, &src, &async_cfg(0.0, 4.2)).is_err());
    }
}
