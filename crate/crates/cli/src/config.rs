//! Layered settings: built-in defaults, then a TOML file, then `--set` pairs,
//! then dedicated flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use amde::modulator::ModulatorConfig;
use amde::runtime::{Clock, Mode, PipelineConfig, RunConfig};
use amde::synthworld::SceneConfig;
use toml::{Table, Value};

/// A user-facing configuration problem; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Res<T> {
    Err(ConfigError(msg.into()))
}

/// Every accepted key with its documentation.
pub const KEYS: &[(&str, &str)] = &[
    ("scene.height", "frame height in pixels, multiple of 32 [128]"),
    ("scene.width", "frame width in pixels, multiple of 32 [128]"),
    ("scene.seed", "world seed; the first seed of a sweep [0]"),
    ("scene.drift_y", "camera drift along y, pixels per frame [0]"),
    ("scene.drift_x", "camera drift along x, pixels per frame [0.45]"),
    ("scene.objects", "number of moving square objects [3]"),
    ("scene.object_size", "object side length in pixels [24]"),
    ("scene.object_speed", "object speed, pixels per frame [1]"),
    ("scene.object_depth", "inverse-depth offset inside objects [0.5]"),
    ("scene.sigma_b", "foundation feature noise [0.02]"),
    ("scene.sigma_s", "encoder feature noise [0.1]"),
    ("scene.channels", "feature channels [8]"),
    ("scene.terrain_base", "mean terrain inverse depth [1]"),
    ("scene.terrain_amplitude", "total terrain wave amplitude [0.4]"),
    ("scene.terrain_waves", "number of terrain sinusoids [6]"),
    ("scene.terrain_cycles", "largest terrain frequency, cycles per frame [3]"),
    ("modulator.k", "semantic gate temperature [4]"),
    ("modulator.beta", "temporal smoothing weight [0.5]"),
    ("modulator.fastpath_threshold", "trust below this counts as encoder-dominated [0.5]"),
    ("modulator.trust_override", "constant trust in [0, 1] bypassing the modulator, or \"none\" [none]"),
    ("run.mode", "sync or async [sync]"),
    ("run.n", "refresh interval and number of lag bins [10]"),
    ("run.frames", "frames to process [200]"),
    ("run.clock", "async clock: wall or virtual [wall]"),
    ("run.l_slow_ms", "slow path latency in ms [16.6]"),
    ("run.l_fast_ms", "fast path frame period in ms [4.2]"),
    ("run.stall_frames", "frame periods the slow path idles after the first publish [0]"),
    ("run.single_refresh", "publish only the initial refresh [false]"),
    ("run.input", "directory written by `generate` to read frames from instead of the scene [none]"),
    ("sweep.seeds", "number of consecutive seeds, starting at scene.seed [20]"),
    ("bench.iterations", "cache reads to perform [100000]"),
    ("bench.publishes", "cache publishes to perform [same as iterations]"),
    ("bench.mode", "stress (concurrent writer) or single (one thread) [stress]"),
    ("bench.side", "finest cached level side length, multiple of 8 [32]"),
    ("bench.channels", "cached feature channels [8]"),
];

pub fn key_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (TOML sections or --set section.key=value):\n");
    for (k, doc) in KEYS {
        let _ = writeln!(out, "  {k:<width$}  {doc}");
    }
    out
}

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Single,
    Stress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub iterations: u64,
    pub publishes: Option<u64>,
    pub mode: BenchMode,
    pub side: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
    pub run: RunConfig,
    pub frames: usize,
    pub input: Option<PathBuf>,
    pub seeds: usize,
    pub bench: BenchSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pipeline: PipelineConfig { modulator: ModulatorConfig::default(), ..PipelineConfig::default() },
            run: RunConfig { clock: Clock::Wall, ..RunConfig::default() },
            frames: 200,
            input: None,
            seeds: 20,
            bench: BenchSettings { iterations: 100_000, publishes: None, mode: BenchMode::Stress, side: 32, channels: 8 },
        }
    }
}

fn float(key: &str, v: &Value) -> Res<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => err(format!("`{key}` expects a number, got {v}")),
    }
}

fn uint(key: &str, v: &Value) -> Res<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => err(format!("`{key}` expects a non-negative integer, got {v}")),
    }
}

fn size(key: &str, v: &Value) -> Res<usize> {
    uint(key, v).map(|u| u as usize)
}

fn boolean(key: &str, v: &Value) -> Res<bool> {
    v.as_bool().map_or_else(|| err(format!("`{key}` expects true or false, got {v}")), Ok)
}

fn string<'a>(key: &str, v: &'a Value) -> Res<&'a str> {
    v.as_str().map_or_else(|| err(format!("`{key}` expects a string, got {v}")), Ok)
}

pub fn parse_mode(s: &str) -> Res<Mode> {
    match s {
        "sync" => Ok(Mode::SyncReplay),
        "async" => Ok(Mode::Async),
        _ => err(format!("mode `{s}` is not one of sync, async")),
    }
}

impl Settings {
    /// Applies one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Res<()> {
        let s = &mut self.scene;
        match key {
            "scene.height" => s.height = size(key, v)?,
            "scene.width" => s.width = size(key, v)?,
            "scene.seed" => s.seed = uint(key, v)?,
            "scene.drift_y" => s.drift.0 = float(key, v)?,
            "scene.drift_x" => s.drift.1 = float(key, v)?,
            "scene.objects" => s.objects = size(key, v)?,
            "scene.object_size" => s.object_size = size(key, v)?,
            "scene.object_speed" => s.object_speed = float(key, v)?,
            "scene.object_depth" => s.object_depth = float(key, v)?,
            "scene.sigma_b" => s.sigma_b = float(key, v)?,
            "scene.sigma_s" => s.sigma_s = float(key, v)?,
            "scene.channels" => s.channels = size(key, v)?,
            "scene.terrain_base" => s.terrain_base = float(key, v)?,
            "scene.terrain_amplitude" => s.terrain_amplitude = float(key, v)?,
            "scene.terrain_waves" => s.terrain_waves = size(key, v)?,
            "scene.terrain_cycles" => {
                s.terrain_cycles = u32::try_from(uint(key, v)?).map_err(|_| ConfigError(format!("`{key}` is too large")))?
            }
            "modulator.k" => self.pipeline.modulator.k = float(key, v)?,
            "modulator.beta" => self.pipeline.modulator.beta = float(key, v)?,
            "modulator.fastpath_threshold" => self.pipeline.fastpath_threshold = float(key, v)?,
            "modulator.trust_override" => {
                self.pipeline.trust_override = match v {
                    Value::String(s) if s == "none" => None,
                    _ => Some(float(key, v)?),
                }
            }
            "run.mode" => self.run.mode = parse_mode(string(key, v)?)?,
            "run.n" => self.run.n = size(key, v)?,
            "run.frames" => self.frames = size(key, v)?,
            "run.clock" => {
                self.run.clock = match string(key, v)? {
                    "wall" => Clock::Wall,
                    "virtual" => Clock::Virtual,
                    other => return err(format!("clock `{other}` is not one of wall, virtual")),
                }
            }
            "run.l_slow_ms" => self.run.l_slow_ms = float(key, v)?,
            "run.l_fast_ms" => self.run.l_fast_ms = float(key, v)?,
            "run.stall_frames" => self.run.stall_frames = size(key, v)?,
            "run.single_refresh" => self.run.single_refresh = boolean(key, v)?,
            "run.input" => {
                let p = string(key, v)?;
                self.input = (p != "none").then(|| PathBuf::from(p));
            }
            "sweep.seeds" => self.seeds = size(key, v)?,
            "bench.iterations" => self.bench.iterations = uint(key, v)?,
            "bench.publishes" => self.bench.publishes = Some(uint(key, v)?),
            "bench.mode" => {
                self.bench.mode = match string(key, v)? {
                    "single" => BenchMode::Single,
                    "stress" => BenchMode::Stress,
                    other => return err(format!("bench mode `{other}` is not one of single, stress")),
                }
            }
            "bench.side" => self.bench.side = size(key, v)?,
            "bench.channels" => self.bench.channels = size(key, v)?,
            _ => return err(format!("unknown key `{key}`; valid keys: {}", valid_keys())),
        }
        Ok(())
    }

    /// Applies a parsed TOML document made of `[section]` tables.
    pub fn apply_table(&mut self, table: &Table) -> Res<()> {
        for (section, body) in table {
            let Value::Table(body) = body else {
                return err(format!("top-level key `{section}` must be a [section]; valid keys: {}", valid_keys()));
            };
            for (k, v) in body {
                self.set(&format!("{section}.{k}"), v)?;
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), anyhow::Error> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
        let table: Table = text.parse().map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.apply_table(&table)?;
        Ok(())
    }

    /// `key=value` where the value is a TOML literal; bare words are taken as strings.
    pub fn apply_override(&mut self, pair: &str) -> Res<()> {
        let Some((key, raw)) = pair.split_once('=') else {
            return err(format!("override `{pair}` is not key=value"));
        };
        let (key, raw) = (key.trim(), raw.trim());
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        self.set(key, &value)
    }

    /// Checks everything that can be checked without touching the filesystem.
    pub fn validate(&self) -> Result<(), anyhow::Error> {
        if self.input.is_none() {
            self.scene.validate()?;
        }
        self.run.validate()?;
        self.pipeline.modulator.validate(self.scene.channels)?;
        if !(self.pipeline.fastpath_threshold > 0.0 && self.pipeline.fastpath_threshold < 1.0) {
            return Err(ConfigError(format!("modulator.fastpath_threshold {} outside (0, 1)", self.pipeline.fastpath_threshold)).into());
        }
        if let Some(t) = self.pipeline.trust_override {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError(format!("modulator.trust_override {t} outside [0, 1]")).into());
            }
        }
        if self.frames == 0 {
            return Err(ConfigError("run.frames must be at least 1".into()).into());
        }
        if self.seeds == 0 {
            return Err(ConfigError("sweep.seeds must be at least 1".into()).into());
        }
        if self.bench.side < 8 || self.bench.side % 8 != 0 || self.bench.channels == 0 {
            return Err(ConfigError(format!(
                "bench.side {} must be a positive multiple of 8 and bench.channels {} positive",
                self.bench.side, self.bench.channels
            ))
            .into());
        }
        Ok(())
    }
}
