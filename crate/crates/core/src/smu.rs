//! Spatial memory: complementary fusion, autoregressive update and refresh,
//! plus the decay and occupancy diagnostics.

use std::path::Path;

use crate::error::{invalid, shape, Error, Result};
use crate::io::{read_feature, write_feature};
use crate::modulator::ModulationField;
use crate::projector::LevelSizes;
use crate::tensor::{lerp, FeatureMap, LEVELS};

/// Where the current memory contents came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Written wholesale from slow-path features.
    FoundationRefresh,
    /// Written back from a fused output.
    Autoregressive,
}

/// The four memory levels `M^(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPyramid {
    levels: Vec<FeatureMap>,
    /// Updates applied since the last refresh.
    t: u64,
    /// Frame whose slow-path features seeded this memory.
    source_frame: usize,
    origin: Origin,
}

fn check_pyramid(levels: &[FeatureMap]) -> Result<()> {
    if levels.len() != LEVELS {
        return Err(invalid(format!("memory needs {LEVELS} levels, got {}", levels.len())));
    }
    let c = levels[0].channels();
    for (i, m) in levels.iter().enumerate() {
        if m.channels() != c {
            return Err(shape(format!("level {} has {} channels, level 1 has {c}", i + 1, m.channels())));
        }
        if !m.is_finite() {
            return Err(invalid(format!("level {} contains non-finite values", i + 1)));
        }
    }
    Ok(())
}

fn check_same_layout(a: &[FeatureMap], b: &[FeatureMap], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("{what}: {} levels vs {}", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.same_shape(y) {
            return Err(shape(format!("{what}: level {} is {} vs {}", i + 1, x.shape_str(), y.shape_str())));
        }
    }
    Ok(())
}

impl MemoryPyramid {
    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, level: u8) -> &FeatureMap {
        &self.levels[level as usize - 1]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    pub fn source_frame(&self) -> usize {
        self.source_frame
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn sizes(&self) -> LevelSizes {
        std::array::from_fn(|i| (self.levels[i].height(), self.levels[i].width()))
    }

    /// Checks the pyramid against an expected geometry.
    pub fn check_geometry(&self, sizes: &LevelSizes, channels: usize) -> Result<()> {
        for (i, m) in self.levels.iter().enumerate() {
            if (m.height(), m.width()) != sizes[i] || m.channels() != channels {
                return Err(shape(format!(
                    "memory level {} is {}, expected {channels}x{}x{}",
                    i + 1,
                    m.shape_str(),
                    sizes[i].0,
                    sizes[i].1
                )));
            }
        }
        Ok(())
    }

    /// Total number of stored values.
    pub fn len(&self) -> usize {
        self.levels.iter().map(|m| m.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (i, m) in self.levels.iter().enumerate() {
            write_feature(dir.as_ref().join(format!("memory_l{}.amde", i + 1)), m)?;
        }
        Ok(())
    }

    /// Loads a saved snapshot as a fresh foundation refresh of `source_frame`.
    pub fn load(dir: impl AsRef<Path>, source_frame: usize) -> Result<Self> {
        let levels = (1..=LEVELS as u8)
            .map(|l| read_feature(dir.as_ref().join(format!("memory_l{l}.amde")), l))
            .collect::<Result<Vec<_>>>()?;
        let mut m = init_memory(levels)?;
        m.source_frame = source_frame;
        Ok(m)
    }
}

/// `M_0 = F_B,0`.
pub fn init_memory(features: Vec<FeatureMap>) -> Result<MemoryPyramid> {
    check_pyramid(&features)?;
    Ok(MemoryPyramid { levels: features, t: 0, source_frame: 0, origin: Origin::FoundationRefresh })
}

/// `O = T * M + (1 - T) * obs` per pixel; `T` has one channel and broadcasts over features.
pub fn fuse(mem: &MemoryPyramid, obs: &[FeatureMap], trust: &ModulationField) -> Result<Vec<FeatureMap>> {
    check_same_layout(&mem.levels, obs, "fuse observation")?;
    let mut out = Vec::with_capacity(LEVELS);
    for ((m, o), t) in mem.levels.iter().zip(obs).zip(trust.levels()) {
        if (t.height(), t.width()) != (m.height(), m.width()) {
            return Err(shape(format!(
                "trust level {} is {}x{}, memory is {}",
                m.level(),
                t.height(),
                t.width(),
                m.shape_str()
            )));
        }
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("trust value {bad} outside [0, 1]")));
        }
        let n = m.plane_len();
        let mut data = Vec::with_capacity(m.data().len());
        for c in 0..m.channels() {
            let (mp, op) = (m.plane(c), o.plane(c));
            data.extend((0..n).map(|i| lerp(op[i], mp[i], t.data()[i])));
        }
        out.push(FeatureMap::new(m.level(), m.channels(), m.height(), m.width(), data)?);
    }
    Ok(out)
}

/// `M_{t+1} = O_t`.
pub fn commit(mem: &MemoryPyramid, fused: Vec<FeatureMap>) -> Result<MemoryPyramid> {
    check_same_layout(&mem.levels, &fused, "commit")?;
    check_pyramid(&fused)?;
    Ok(MemoryPyramid { levels: fused, t: mem.t + 1, source_frame: mem.source_frame, origin: Origin::Autoregressive })
}

/// Overwrites the whole memory with slow-path features of `source_frame`.
pub fn refresh(mem: &MemoryPyramid, foundation: Vec<FeatureMap>, source_frame: usize) -> Result<MemoryPyramid> {
    check_same_layout(&mem.levels, &foundation, "refresh")?;
    check_pyramid(&foundation)?;
    Ok(MemoryPyramid { levels: foundation, t: 0, source_frame, origin: Origin::FoundationRefresh })
}

/// Weight of the initial memory after the given frames: `prod_s T_s` per pixel.
pub fn decay_weight(history: &[ModulationField], level: u8) -> Result<FeatureMap> {
    if !(1..=LEVELS as u8).contains(&level) {
        return Err(invalid(format!("unknown pyramid level {level}")));
    }
    let (first, rest) = history.split_first().ok_or_else(|| invalid("empty trust history"))?;
    let mut acc = first.level(level).clone();
    for field in rest {
        let t = field.level(level);
        if !t.same_shape(&acc) {
            return Err(shape(format!("trust history mixes {} and {}", acc.shape_str(), t.shape_str())));
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a *= v;
        }
    }
    Ok(acc)
}

/// Fraction of layer-1 pixels whose trust is below `threshold` (encoder-dominated).
pub fn fastpath_fraction(trust: &ModulationField, threshold: f64) -> f64 {
    let t = trust.finest().data();
    t.iter().filter(|&&v| v < threshold).count() as f64 / t.len() as f64
}

impl From<MemoryPyramid> for Vec<FeatureMap> {
    fn from(m: MemoryPyramid) -> Self {
        m.levels
    }
}

/// Memory built from arbitrary levels, for tests and replay tools.
pub fn memory_with_source(levels: Vec<FeatureMap>, source_frame: usize) -> Result<MemoryPyramid> {
    let mut m = init_memory(levels)?;
    m.source_frame = source_frame;
    Ok(m)
}

impl TryFrom<Vec<FeatureMap>> for MemoryPyramid {
    type Error = Error;

    fn try_from(levels: Vec<FeatureMap>) -> Result<Self> {
        init_memory(levels)
    }
}
