//! Feature-cache throughput and torn-read check.

use std::fmt::Write as _;
use std::thread;
use std::time::{Duration, Instant};

use amde::runtime::cache::{feature_cache, layout_of, CacheReader, LevelLayout};
use amde::tensor::FeatureMap;

use crate::config::{BenchMode, BenchSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub publishes: u64,
    pub reads: u64,
    pub empty_reads: u64,
    pub torn_reads: u64,
    pub retries: u64,
    pub publish_time: Duration,
    pub read_time: Duration,
    pub worst_read: Duration,
}

/// Payload whose every value is a function of the version.
fn payload(layout: &[LevelLayout], version: u64) -> Vec<FeatureMap> {
    layout
        .iter()
        .map(|&(l, c, h, w)| {
            FeatureMap::from_fn(l, c, h, w, |c, y, x| version as f64 * 0.25 + (c * 4096 + y * 64 + x) as f64).unwrap()
        })
        .collect()
}

fn layout(cfg: &BenchSettings) -> Vec<LevelLayout> {
    (0..4u8).map(|i| (i + 1, cfg.channels, cfg.side >> i, cfg.side >> i)).collect()
}

struct ReadTally {
    reads: u64,
    empty: u64,
    torn: u64,
    retries: u64,
    time: Duration,
    worst: Duration,
}

impl ReadTally {
    fn new() -> Self {
        Self { reads: 0, empty: 0, torn: 0, retries: 0, time: Duration::ZERO, worst: Duration::ZERO }
    }

    fn read(&mut self, reader: &CacheReader, layout: &[LevelLayout], last: &mut u64) {
        let start = Instant::now();
        let got = reader.read_with_retries();
        let took = start.elapsed();
        self.reads += 1;
        self.time += took;
        self.worst = self.worst.max(took);
        match got {
            None => self.empty += 1,
            Some((snap, retries)) => {
                self.retries += u64::from(retries);
                let intact = snap.verify()
                    && snap.version >= *last
                    && snap.source_frame as u64 == snap.version
                    && snap.levels == payload(layout, snap.version);
                if !intact {
                    self.torn += 1;
                }
                *last = snap.version;
            }
        }
    }
}

pub fn bench_cache(cfg: &BenchSettings) -> BenchReport {
    let layout = layout(cfg);
    let publishes = cfg.publishes.unwrap_or(cfg.iterations);
    let (mut writer, reader) = feature_cache(layout.clone()).expect("validated layout");
    debug_assert_eq!(layout_of(&payload(&layout, 0)), layout);

    let mut tally = ReadTally::new();
    let mut publish_time = Duration::ZERO;
    match cfg.mode {
        BenchMode::Single => {
            let mut last = 0;
            for i in 0..cfg.iterations.max(publishes) {
                if i < publishes {
                    let p = payload(&layout, i + 1);
                    let start = Instant::now();
                    writer.publish(&p, i as usize + 1).expect("layout matches");
                    publish_time += start.elapsed();
                }
                if i < cfg.iterations {
                    tally.read(&reader, &layout, &mut last);
                }
            }
        }
        BenchMode::Stress => {
            let (t, pt) = thread::scope(|s| {
                let h = s.spawn(|| {
                    let mut t = ReadTally::new();
                    let mut last = 0;
                    for _ in 0..cfg.iterations {
                        t.read(&reader, &layout, &mut last);
                    }
                    t
                });
                let mut pt = Duration::ZERO;
                for v in 1..=publishes {
                    let p = payload(&layout, v);
                    let start = Instant::now();
                    writer.publish(&p, v as usize).expect("layout matches");
                    pt += start.elapsed();
                }
                (h.join().expect("reader thread panicked"), pt)
            });
            tally = t;
            publish_time = pt;
        }
    }
    BenchReport {
        mode: cfg.mode,
        publishes,
        reads: tally.reads,
        empty_reads: tally.empty,
        torn_reads: tally.torn,
        retries: tally.retries,
        publish_time,
        read_time: tally.time,
        worst_read: tally.worst,
    }
}

fn rate(ops: u64, d: Duration) -> String {
    if ops == 0 || d.is_zero() {
        "n/a".into()
    } else {
        format!("{:.0}", ops as f64 / d.as_secs_f64())
    }
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            BenchMode::Single => "single",
            BenchMode::Stress => "stress",
        };
        let _ = writeln!(out, "mode = {mode}");
        let _ = writeln!(out, "publishes = {}", self.publishes);
        let _ = writeln!(out, "reads = {}", self.reads);
        let _ = writeln!(out, "empty_reads = {}", self.empty_reads);
        let _ = writeln!(out, "read_retries = {}", self.retries);
        let _ = writeln!(out, "publish_per_s = {}", rate(self.publishes, self.publish_time));
        let _ = writeln!(out, "read_per_s = {}", rate(self.reads, self.read_time));
        let _ = writeln!(out, "worst_read_us = {:.3}", self.worst_read.as_secs_f64() * 1e6);
        let _ = writeln!(out, "torn_reads = {}", self.torn_reads);
        let _ = writeln!(out, "torn_read_check = {}", if self.torn_reads == 0 { "pass" } else { "fail" });
        out
    }
}
