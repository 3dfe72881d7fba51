//! Deterministic synthetic scenes: inverse-depth video with drifting terrain
//! and moving rectangles, two noisy linear feature streams, and the linear
//! readout that inverts them.
//!
//! Feature level `l` pools the frame by `2^(l+1)`; each cell's descriptor is the
//! four quadrant means of its patch, and features are `E * descriptor + noise`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, Error, Result};
use crate::io::{read_depth, read_feature, read_raw, write_depth, write_feature, write_raw, RawTensor};
use crate::projector::{pyramid_sizes, LevelSizes};
use crate::tensor::{bilinear_resize, DepthMap, FeatureMap, LEVELS};

/// Quadrant descriptor length.
pub const DESCRIPTOR: usize = 4;

/// Per-level blend weights of the readout, finest first.
pub const DEFAULT_READOUT: [f64; LEVELS] = [0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Camera drift in pixels per frame along `(y, x)`.
    pub drift: (f64, f64),
    pub objects: usize,
    /// Side length of each square object in pixels.
    pub object_size: usize,
    /// Object speed in pixels per frame; directions are drawn from the seed.
    pub object_speed: f64,
    /// Inverse-depth offset added inside objects.
    pub object_depth: f64,
    pub sigma_b: f64,
    pub sigma_s: f64,
    pub channels: usize,
    /// Mean inverse depth of the terrain.
    pub terrain_base: f64,
    /// Sum of the terrain wave amplitudes.
    pub terrain_amplitude: f64,
    pub terrain_waves: usize,
    /// Largest spatial frequency, in cycles per frame width.
    pub terrain_cycles: u32,
    /// `channels x 4` row-major encoding matrix; `None` selects orthonormal cosine columns.
    pub encoding: Option<Vec<f64>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            seed: 0,
            drift: (0.0, 0.45),
            objects: 3,
            object_size: 24,
            object_speed: 1.0,
            object_depth: 0.5,
            sigma_b: 0.02,
            sigma_s: 0.1,
            channels: 8,
            terrain_base: 1.0,
            terrain_amplitude: 0.4,
            terrain_waves: 6,
            terrain_cycles: 3,
            encoding: None,
        }
    }
}

impl SceneConfig {
    /// No drift, no objects, no noise.
    pub fn static_world() -> Self {
        Self { drift: (0.0, 0.0), objects: 0, sigma_b: 0.0, sigma_s: 0.0, ..Self::default() }
    }

    pub fn sizes(&self) -> Result<LevelSizes> {
        pyramid_sizes(self.height, self.width)
    }

    /// `E` as a `channels x 4` matrix.
    pub fn encoding_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.encoding {
            Some(e) => {
                if e.len() != self.channels * DESCRIPTOR {
                    return Err(Error::Config(format!(
                        "encoding has {} entries, expected {} x {DESCRIPTOR}",
                        e.len(),
                        self.channels
                    )));
                }
                Ok(DMatrix::from_row_slice(self.channels, DESCRIPTOR, e))
            }
            None => Ok(cosine_encoding(self.channels)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sizes()?;
        let noiseless = self.sigma_b == 0.0 && self.sigma_s == 0.0;
        if !(self.sigma_b >= 0.0 && (self.sigma_b < self.sigma_s || noiseless)) {
            return Err(invalid(format!(
                "need 0 <= sigma_b < sigma_s (or both zero), got sigma_b = {}, sigma_s = {}",
                self.sigma_b, self.sigma_s
            )));
        }
        if self.channels < DESCRIPTOR {
            return Err(Error::Config(format!("{} channels cannot encode a {DESCRIPTOR}-entry descriptor", self.channels)));
        }
        if !(self.drift.0.is_finite() && self.drift.1.is_finite() && self.object_speed.is_finite() && self.object_speed >= 0.0) {
            return Err(invalid("drift and object speed must be finite, speed non-negative"));
        }
        if self.objects > 0 && (self.object_size == 0 || self.object_size > self.height.min(self.width)) {
            return Err(invalid(format!("object size {} does not fit the frame", self.object_size)));
        }
        if self.terrain_amplitude < 0.0 || self.terrain_base - self.terrain_amplitude <= 0.0 {
            return Err(invalid("terrain must keep inverse depth positive: need base > amplitude >= 0"));
        }
        if self.objects > 0 && self.terrain_base - self.terrain_amplitude + self.object_depth.min(0.0) <= 0.0 {
            return Err(invalid("object depth offset makes inverse depth non-positive"));
        }
        if self.terrain_waves > 0 && self.terrain_cycles == 0 {
            return Err(invalid("terrain waves need at least one cycle"));
        }
        left_inverse(&self.encoding_matrix()?)?;
        Ok(())
    }
}

/// Orthonormal cosine columns `k = 0..4` of length `channels`.
pub fn cosine_encoding(channels: usize) -> DMatrix<f64> {
    let c = channels as f64;
    DMatrix::from_fn(channels, DESCRIPTOR, |i, k| {
        let norm = if k == 0 { (1.0 / c).sqrt() } else { (2.0 / c).sqrt() };
        norm * (PI * (i as f64 + 0.5) * k as f64 / c).cos()
    })
}

/// `(E^T E)^-1 E^T`; rank-deficient `E` is a configuration error.
pub fn left_inverse(e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.ncols() != DESCRIPTOR || e.nrows() < DESCRIPTOR {
        return Err(Error::Config(format!("encoding must be C x {DESCRIPTOR} with C >= {DESCRIPTOR}, got {}x{}", e.nrows(), e.ncols())));
    }
    let sv = e.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(min > 1e-10 * max) {
        return Err(Error::Config(format!("encoding matrix is rank-deficient (singular values {max:e} .. {min:e})")));
    }
    let gram = e.transpose() * e;
    let inv = gram.try_inverse().ok_or_else(|| Error::Config("encoding Gram matrix is singular".into()))?;
    Ok(inv * e.transpose())
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    ky: f64,
    kx: f64,
    phase: f64,
}

#[derive(Debug, Clone, Copy)]
struct Object {
    y0: f64,
    x0: f64,
    vy: f64,
    vx: f64,
}

/// One frame: ground truth plus both feature pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub t: usize,
    pub depth: DepthMap,
    pub foundation: Vec<FeatureMap>,
    pub encoder: Vec<FeatureMap>,
}

/// Random-access frame generator for one scene.
#[derive(Debug, Clone)]
pub struct World {
    cfg: SceneConfig,
    e: DMatrix<f64>,
    waves: Vec<Wave>,
    objects: Vec<Object>,
    sizes: LevelSizes,
}

const STREAM_FOUNDATION: u64 = 0;
const STREAM_ENCODER: u64 = 1;

impl World {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.encoding_matrix()?;
        let sizes = cfg.sizes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let weights: Vec<f64> = (0..cfg.terrain_waves).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let m = cfg.terrain_cycles as i64;
        let waves = weights
            .iter()
            .map(|w| {
                let (mut cy, mut cx) = (0, 0);
                while cy == 0 && cx == 0 {
                    cy = rng.random_range(-m..=m);
                    cx = rng.random_range(-m..=m);
                }
                Wave {
                    amp: cfg.terrain_amplitude * w / total,
                    ky: 2.0 * PI * cy as f64 / cfg.height as f64,
                    kx: 2.0 * PI * cx as f64 / cfg.width as f64,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        let objects = (0..cfg.objects)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..2.0 * PI);
                Object {
                    y0: rng.random_range(0.0..cfg.height as f64),
                    x0: rng.random_range(0.0..cfg.width as f64),
                    vy: cfg.object_speed * angle.sin(),
                    vx: cfg.object_speed * angle.cos(),
                }
            })
            .collect();
        Ok(Self { cfg, e, waves, objects, sizes })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn sizes(&self) -> &LevelSizes {
        &self.sizes
    }

    pub fn encoding(&self) -> &DMatrix<f64> {
        &self.e
    }

    /// Terrain inverse depth at continuous position `(y, x)`.
    fn terrain(&self, y: f64, x: f64) -> f64 {
        self.cfg.terrain_base + self.waves.iter().map(|w| w.amp * (w.ky * y + w.kx * x + w.phase).cos()).sum::<f64>()
    }

    /// Whether pixel `(y, x)` is covered by any object at frame `t`.
    pub fn object_mask(&self, t: usize) -> Vec<bool> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut mask = vec![false; h * w];
        let size = self.cfg.object_size as f64;
        for o in &self.objects {
            let oy = (o.y0 + o.vy * t as f64).rem_euclid(h as f64);
            let ox = (o.x0 + o.vx * t as f64).rem_euclid(w as f64);
            for y in 0..h {
                if (y as f64 - oy).rem_euclid(h as f64) >= size {
                    continue;
                }
                for x in 0..w {
                    if (x as f64 - ox).rem_euclid(w as f64) < size {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        mask
    }

    pub fn depth(&self, t: usize) -> DepthMap {
        let (dy, dx) = (self.cfg.drift.0 * t as f64, self.cfg.drift.1 * t as f64);
        let mask = self.object_mask(t);
        let w = self.cfg.width;
        DepthMap::from_fn(self.cfg.height, w, |y, x| {
            let base = self.terrain(y as f64 + dy, x as f64 + dx);
            if mask[y * w + x] {
                base + self.cfg.object_depth
            } else {
                base
            }
        })
        .expect("validated frame size")
    }

    /// Noise-free features of a depth map: `E * quadrant_means` per cell and level.
    pub fn encode(&self, depth: &DepthMap) -> Result<Vec<FeatureMap>> {
        let subcells = subcell_pyramid(depth)?;
        subcells.iter().enumerate().map(|(l, sub)| encode_level(&self.e, l as u8 + 1, sub)).collect()
    }

    pub fn frame(&self, t: usize) -> Result<FrameBundle> {
        let depth = self.depth(t);
        let clean = self.encode(&depth)?;
        let noisy = |sigma: f64, stream: u64| -> Result<Vec<FeatureMap>> {
            clean
                .iter()
                .map(|f| {
                    if sigma == 0.0 {
                        return Ok(f.clone());
                    }
                    let mut rng = noise_rng(self.cfg.seed, t, f.level(), stream);
                    let data = f.data().iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                    FeatureMap::new(f.level(), f.channels(), f.height(), f.width(), data)
                })
                .collect()
        };
        Ok(FrameBundle {
            t,
            foundation: noisy(self.cfg.sigma_b, STREAM_FOUNDATION)?,
            encoder: noisy(self.cfg.sigma_s, STREAM_ENCODER)?,
            depth,
        })
    }
}

/// Counter-based stream: independent per `(seed, t, level, stream)` and random access.
fn noise_rng(seed: u64, t: usize, level: u8, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 8) | (u64::from(level) << 1) | stream);
    rng
}

/// Average pooling of the depth map by `2^l` for `l = 1..=4`, i.e. the
/// quadrant grids of levels 1..4.
fn subcell_pyramid(depth: &DepthMap) -> Result<Vec<FeatureMap>> {
    let mut cur = depth.to_feature(1)?;
    let mut out = Vec::with_capacity(LEVELS);
    for l in 1..=LEVELS as u8 {
        cur = pool2(&cur, l)?;
        out.push(cur.clone());
    }
    Ok(out)
}

fn pool2(src: &FeatureMap, level: u8) -> Result<FeatureMap> {
    let (h, w) = (src.height() / 2, src.width() / 2);
    let sw = src.width();
    let p = src.plane(0);
    FeatureMap::from_fn(level, 1, h, w, |_, y, x| {
        let i = 2 * y * sw + 2 * x;
        (p[i] + p[i + 1] + p[i + sw] + p[i + sw + 1]) / 4.0
    })
}

fn encode_level(e: &DMatrix<f64>, level: u8, sub: &FeatureMap) -> Result<FeatureMap> {
    let (h, w) = (sub.height() / 2, sub.width() / 2);
    let sw = sub.width();
    let s = sub.plane(0);
    let c = e.nrows();
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * sw + 2 * x;
            let d = [s[i], s[i + 1], s[i + sw], s[i + sw + 1]];
            for ch in 0..c {
                data[ch * h * w + y * w + x] = (0..DESCRIPTOR).map(|k| e[(ch, k)] * d[k]).sum();
            }
        }
    }
    FeatureMap::new(level, c, h, w, data)
}

pub fn generate_sequence(cfg: &SceneConfig, length: usize) -> Result<Vec<FrameBundle>> {
    if length == 0 {
        return Err(invalid("sequence length must be at least 1"));
    }
    let world = World::new(cfg.clone())?;
    (0..length).map(|t| world.frame(t)).collect()
}

/// Linear readout: left-inverse of `E` per cell, quadrant grid resized to the
/// frame, fixed blend across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pinv: DMatrix<f64>,
    weights: [f64; LEVELS],
    height: usize,
    width: usize,
}

impl Decoder {
    pub fn new(e: &DMatrix<f64>, weights: [f64; LEVELS], height: usize, width: usize) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("readout weights {weights:?} must be non-negative and sum to 1")));
        }
        pyramid_sizes(height, width)?;
        Ok(Self { pinv: left_inverse(e)?, weights, height, width })
    }

    pub fn for_world(world: &World) -> Result<Self> {
        Self::new(world.encoding(), DEFAULT_READOUT, world.cfg.height, world.cfg.width)
    }

    pub fn channels(&self) -> usize {
        self.pinv.ncols()
    }

    /// Recovers the quadrant grid (`2h x 2w`, one channel) of one level.
    pub fn descriptors(&self, f: &FeatureMap) -> Result<FeatureMap> {
        if f.channels() != self.channels() {
            return Err(shape(format!("decoder expects {} channels, got {}", self.channels(), f.channels())));
        }
        let (h, w) = (f.height(), f.width());
        let n = h * w;
        let mut out = vec![0.0; 4 * n];
        let ow = 2 * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for k in 0..DESCRIPTOR {
                    let v: f64 = (0..self.channels()).map(|c| self.pinv[(k, c)] * f.data()[c * n + i]).sum();
                    let (qy, qx) = (k / 2, k % 2);
                    out[(2 * y + qy) * ow + 2 * x + qx] = v;
                }
            }
        }
        FeatureMap::new(f.level(), 1, 2 * h, 2 * w, out)
    }

    pub fn decode(&self, fused: &[FeatureMap]) -> Result<DepthMap> {
        if fused.len() != LEVELS {
            return Err(invalid(format!("decoder needs {LEVELS} levels, got {}", fused.len())));
        }
        let mut acc = vec![0.0; self.height * self.width];
        for (f, &wt) in fused.iter().zip(&self.weights) {
            if wt == 0.0 {
                continue;
            }
            let up = bilinear_resize(&self.descriptors(f)?, self.height, self.width)?;
            for (a, &v) in acc.iter_mut().zip(up.data()) {
                *a += wt * v;
            }
        }
        DepthMap::new(self.height, self.width, acc)
    }
}

pub fn linear_decode(fused: &[FeatureMap], decoder: &Decoder) -> Result<DepthMap> {
    decoder.decode(fused)
}

const MANIFEST: &str = "manifest.txt";

fn frame_file(t: usize, what: &str) -> String {
    format!("frame_{t:05}_{what}.amde")
}

/// Writes frames plus a `key = value` manifest and the encoding matrix.
pub fn export_sequence(dir: impl AsRef<Path>, cfg: &SceneConfig, frames: &[FrameBundle]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let e = cfg.encoding_matrix()?;
    let rows: Vec<f32> = (0..e.nrows()).flat_map(|i| (0..DESCRIPTOR).map(move |k| (i, k))).map(|(i, k)| e[(i, k)] as f32).collect();
    write_raw(dir.join("encoding.amde"), &RawTensor::new(vec![e.nrows(), DESCRIPTOR], rows)?)?;
    for f in frames {
        write_depth(dir.join(frame_file(f.t, "depth")), &f.depth)?;
        for (l, (b, s)) in f.foundation.iter().zip(&f.encoder).enumerate() {
            write_feature(dir.join(frame_file(f.t, &format!("foundation_l{}", l + 1))), b)?;
            write_feature(dir.join(frame_file(f.t, &format!("encoder_l{}", l + 1))), s)?;
        }
    }
    let first = frames.first().map_or(0, |f| f.t);
    let manifest = format!(
        "frames = {}\nfirst_frame = {first}\nheight = {}\nwidth = {}\nchannels = {}\nseed = {}\nsigma_b = {}\nsigma_s = {}\ndrift_y = {}\ndrift_x = {}\nobjects = {}\n",
        frames.len(),
        cfg.height,
        cfg.width,
        cfg.channels,
        cfg.seed,
        cfg.sigma_b,
        cfg.sigma_s,
        cfg.drift.0,
        cfg.drift.1,
        cfg.objects
    );
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Header of an exported sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub frames: usize,
    pub first_frame: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub sigma_b: f64,
    pub sigma_s: f64,
}

fn manifest_value<T: std::str::FromStr>(text: &str, key: &str) -> Result<T> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))?
        .1
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("manifest value for `{key}` is malformed")))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(Manifest {
        frames: manifest_value(&text, "frames")?,
        first_frame: manifest_value(&text, "first_frame")?,
        height: manifest_value(&text, "height")?,
        width: manifest_value(&text, "width")?,
        channels: manifest_value(&text, "channels")?,
        seed: manifest_value(&text, "seed")?,
        sigma_b: manifest_value(&text, "sigma_b")?,
        sigma_s: manifest_value(&text, "sigma_s")?,
    })
}

/// Loads an exported sequence and its encoding matrix.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<(Manifest, DMatrix<f64>, Vec<FrameBundle>)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let raw = read_raw(dir.join("encoding.amde"))?;
    if raw.dims != [m.channels, DESCRIPTOR] {
        return Err(Error::Format(format!("encoding dims {:?} disagree with manifest", raw.dims)));
    }
    let e = DMatrix::from_row_iterator(m.channels, DESCRIPTOR, raw.data.iter().map(|&v| f64::from(v)));
    let sizes = pyramid_sizes(m.height, m.width)?;
    let mut frames = Vec::with_capacity(m.frames);
    for t in m.first_frame..m.first_frame + m.frames {
        let depth = read_depth(dir.join(frame_file(t, "depth")))?;
        let mut foundation = Vec::with_capacity(LEVELS);
        let mut encoder = Vec::with_capacity(LEVELS);
        for l in 1..=LEVELS as u8 {
            let b = read_feature(dir.join(frame_file(t, &format!("foundation_l{l}"))), l)?;
            let s = read_feature(dir.join(frame_file(t, &format!("encoder_l{l}"))), l)?;
            let (h, w) = sizes[l as usize - 1];
            for f in [&b, &s] {
                if (f.height(), f.width(), f.channels()) != (h, w, m.channels) {
                    return Err(shape(format!("frame {t} level {l} is {}, expected {}x{h}x{w}", f.shape_str(), m.channels)));
                }
            }
            foundation.push(b);
            encoder.push(s);
        }
        frames.push(FrameBundle { t, depth, foundation, encoder });
    }
    Ok((m, e, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::absrel;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig { height: 64, width: 64, seed, object_size: 12, ..SceneConfig::default() }
    }

    #[test]
    fn static_world_is_constant_and_streams_agree() {
        let frames = generate_sequence(&SceneConfig { height: 64, width: 64, ..SceneConfig::static_world() }, 4).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.depth, frames[0].depth);
            assert_eq!(f.foundation, frames[0].foundation);
        }
        for f in &frames {
            assert_eq!(f.foundation, f.encoder);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_sequence(&small(7), 3).unwrap();
        let b = generate_sequence(&small(7), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&small(8), 3).unwrap();
        assert_ne!(a[0].depth, c[0].depth);
    }

    #[test]
    fn random_access_matches_sequential() {
        let w = World::new(small(3)).unwrap();
        let seq = generate_sequence(&small(3), 6).unwrap();
        assert_eq!(w.frame(5).unwrap(), seq[5]);
    }

    #[test]
    fn drift_shifts_background() {
        let cfg = SceneConfig { drift: (0.0, 2.0), objects: 0, ..small(4) };
        let w = World::new(cfg).unwrap();
        let d0 = w.depth(0);
        for t in [1usize, 3, 10] {
            let dt = w.depth(t);
            for y in 0..64 {
                for x in 0..64 {
                    let src = (x + 2 * t) % 64;
                    assert!((dt.get(y, x) - d0.get(y, src)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn drift_shift_holds_away_from_objects() {
        let cfg = SceneConfig { drift: (0.0, 2.0), object_speed: 1.0, ..small(5) };
        let w = World::new(cfg).unwrap();
        let d0 = w.depth(0);
        let m0 = w.object_mask(0);
        let t = 4;
        let (dt, mt) = (w.depth(t), w.object_mask(t));
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let src = (x + 2 * t) % 64;
                if !mt[y * 64 + x] && !m0[y * 64 + src] {
                    assert!((dt.get(y, x) - d0.get(y, src)).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 64 * 64 / 2);
    }

    #[test]
    fn feature_geometry() {
        let f = World::new(small(1)).unwrap().frame(0).unwrap();
        let sizes = [(16, 16), (8, 8), (4, 4), (2, 2)];
        for (l, (b, s)) in f.foundation.iter().zip(&f.encoder).enumerate() {
            assert_eq!((b.height(), b.width(), b.channels(), b.level() as usize), (sizes[l].0, sizes[l].1, 8, l + 1));
            assert!(b.same_shape(s));
        }
    }

    #[test]
    fn descriptors_recover_exactly() {
        let w = World::new(SceneConfig { sigma_b: 0.0, sigma_s: 0.0, ..small(2) }).unwrap();
        let depth = w.depth(0);
        let dec = Decoder::for_world(&w).unwrap();
        let feats = w.encode(&depth).unwrap();
        let subs = subcell_pyramid(&depth).unwrap();
        for (f, s) in feats.iter().zip(&subs) {
            assert!(dec.descriptors(f).unwrap().max_abs_diff(&s.clone()) < 1e-12);
        }
    }

    #[test]
    fn non_orthogonal_encoding_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = SceneConfig { channels: 6, encoding: Some(e), sigma_b: 0.0, sigma_s: 0.0, ..small(2) };
        let w = World::new(cfg).unwrap();
        let dec = Decoder::for_world(&w).unwrap();
        let depth = w.depth(0);
        let subs = subcell_pyramid(&depth).unwrap();
        for (f, s) in w.encode(&depth).unwrap().iter().zip(&subs) {
            assert!(dec.descriptors(f).unwrap().max_abs_diff(s) < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_encoding_rejected() {
        let mut e = vec![0.0; 8 * 4];
        for i in 0..8 {
            e[i * 4] = 1.0;
            e[i * 4 + 1] = 2.0;
            e[i * 4 + 2] = (i as f64).sin();
            e[i * 4 + 3] = (i as f64).cos();
        }
        let cfg = SceneConfig { encoding: Some(e), ..small(0) };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(World::new(SceneConfig { channels: 3, ..small(0) }), Err(Error::Config(_))));
    }

    #[test]
    fn decode_is_linear() {
        let w = World::new(small(6)).unwrap();
        let dec = Decoder::for_world(&w).unwrap();
        let f = w.frame(2).unwrap();
        let once = dec.decode(&f.encoder).unwrap();
        let doubled: Vec<FeatureMap> = f.encoder.iter().map(|m| m.map(|v| 2.0 * v)).collect();
        let twice = dec.decode(&doubled).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn foundation_decodes_better_than_encoder() {
        let (mut fb, mut fs) = (0.0, 0.0);
        for seed in 0..20 {
            let w = World::new(small(seed)).unwrap();
            let dec = Decoder::for_world(&w).unwrap();
            let f = w.frame(1).unwrap();
            fb += absrel(&dec.decode(&f.foundation).unwrap(), &f.depth).unwrap();
            fs += absrel(&dec.decode(&f.encoder).unwrap(), &f.depth).unwrap();
        }
        assert!(fb < fs);
    }

    #[test]
    fn invalid_configs() {
        assert!(SceneConfig { height: 100, ..small(0) }.validate().is_err());
        assert!(SceneConfig { sigma_b: 0.2, sigma_s: 0.1, ..small(0) }.validate().is_err());
        assert!(SceneConfig { sigma_b: 0.1, sigma_s: 0.1, ..small(0) }.validate().is_err());
        assert!(SceneConfig { terrain_amplitude: 1.5, ..small(0) }.validate().is_err());
        assert!(generate_sequence(&small(0), 0).is_err());
        assert!(Decoder::new(&cosine_encoding(8), [0.5, 0.5, 0.5, 0.0], 64, 64).is_err());
    }

    #[test]
    fn export_round_trip() {
        let cfg = small(11);
        let frames = generate_sequence(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_sequence(dir.path(), &cfg, &frames).unwrap();
        let (m, e, back) = load_sequence(dir.path()).unwrap();
        assert_eq!((m.frames, m.height, m.width, m.channels, m.seed), (3, 64, 64, 8, 11));
        assert!((e - cfg.encoding_matrix().unwrap()).abs().max() < 1e-6);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            for (x, y) in a.depth.data().iter().zip(b.depth.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
            for (x, y) in a.encoder.iter().zip(&b.encoder) {
                assert!(x.max_abs_diff(y) < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn encoding_is_linear_in_depth(seed in any::<u64>(), a in -2.0f64..2.0) {
            let w = World::new(SceneConfig { height: 32, width: 32, object_size: 8, ..small(seed % 1000) }).unwrap();
            let (d0, d1) = (w.depth(0), w.depth(3));
            let mix = DepthMap::new(32, 32, d0.data().iter().zip(d1.data()).map(|(x, y)| a * x + y).collect()).unwrap();
            let (f0, f1, fm) = (w.encode(&d0).unwrap(), w.encode(&d1).unwrap(), w.encode(&mix).unwrap());
            for l in 0..LEVELS {
                prop_assert!(f0[l].axpby(a, &f1[l], 1.0).unwrap().max_abs_diff(&fm[l]) < 1e-12);
            }
        }
    }
}
