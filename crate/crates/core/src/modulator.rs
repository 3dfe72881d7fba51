//! Per-pixel trust field `T`: how much of the memory to keep at each pixel.
//!
//! Two single-scale estimates (layer 1 and layer 4) are combined by a semantic
//! gate, distributed to every pyramid level, and smoothed over time.

use crate::error::{invalid, shape, Result};
use crate::projector::LevelSizes;
use crate::tensor::{bilinear_resize, concat_channels, conv2d_small, lerp, sigmoid, sigmoid_map, Conv3x3, FeatureMap, LEVELS};

/// How the single-scale trust maps are produced from previous/current features.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleTrust {
    /// `sigma(conv3x3([prev; curr]))` with separate kernels for layers 1 and 4.
    Learned { h1: Conv3x3, h4: Conv3x3 },
    /// `sigma(a - b * |prev - curr|^2)` per pixel.
    Reference { a: f64, b: f64 },
}

impl Default for ScaleTrust {
    fn default() -> Self {
        ScaleTrust::Reference { a: 3.0, b: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatorConfig {
    /// Gate temperature.
    pub k: f64,
    /// Temporal smoothing weight on the newest field.
    pub beta: f64,
    pub scale_trust: ScaleTrust,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        Self { k: 4.0, beta: 0.5, scale_trust: ScaleTrust::default() }
    }
}

impl ModulatorConfig {
    pub fn validate(&self, memory_channels: usize) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(invalid(format!("gate temperature k = {} must be positive", self.k)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid(format!("smoothing beta = {} outside (0, 1]", self.beta)));
        }
        if let ScaleTrust::Learned { h1, h4 } = &self.scale_trust {
            for (name, h) in [("h1", h1), ("h4", h4)] {
                if h.c_out != 1 || h.c_in != 2 * memory_channels {
                    return Err(shape(format!(
                        "{name} must map {} channels to 1, has {}x{}",
                        2 * memory_channels,
                        h.c_in,
                        h.c_out
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Trust maps `1 x H_l x W_l` for the four levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationField {
    levels: Vec<FeatureMap>,
}

impl ModulationField {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(invalid(format!("trust field needs {LEVELS} levels, got {}", levels.len())));
        }
        if let Some(l) = levels.iter().position(|m| m.channels() != 1) {
            return Err(shape(format!("trust level {} has {} channels", l + 1, levels[l].channels())));
        }
        Ok(Self { levels })
    }

    /// The same value at every pixel of every level.
    pub fn constant(value: f64, sizes: &LevelSizes) -> Self {
        let levels = sizes
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| FeatureMap::filled(i as u8 + 1, 1, h, w, value).expect("non-empty sizes"))
            .collect();
        Self { levels }
    }

    pub fn level(&self, level: u8) -> &FeatureMap {
        &self.levels[level as usize - 1]
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    /// Layer-1 field.
    pub fn finest(&self) -> &FeatureMap {
        &self.levels[0]
    }

    /// Whether every value lies in the closed unit interval.
    pub fn in_unit_interval(&self) -> bool {
        self.levels.iter().all(|m| m.data().iter().all(|&t| (0.0..=1.0).contains(&t)))
    }
}

/// Previous smoothed field, absent before the first frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmoothingState {
    prev: Option<ModulationField>,
}

impl SmoothingState {
    pub fn previous(&self) -> Option<&ModulationField> {
        self.prev.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}

/// `sigma(h([prev; curr]))` with a single output channel.
pub fn scale_trust(prev: &FeatureMap, curr: &FeatureMap, h: &Conv3x3) -> Result<FeatureMap> {
    if !prev.same_shape(curr) {
        return Err(shape(format!("previous {} vs current {}", prev.shape_str(), curr.shape_str())));
    }
    if h.c_out != 1 {
        return Err(shape(format!("trust network must emit 1 channel, emits {}", h.c_out)));
    }
    let stacked = concat_channels(prev, curr)?;
    Ok(sigmoid_map(&conv2d_small(&stacked, h)?))
}

/// `T = sigma(a - b * |prev - curr|^2)` per pixel, over channels.
pub fn reference_modulator(prev: &FeatureMap, curr: &FeatureMap, a: f64, b: f64) -> Result<FeatureMap> {
    if !prev.same_shape(curr) {
        return Err(shape(format!("previous {} vs current {}", prev.shape_str(), curr.shape_str())));
    }
    let n = prev.plane_len();
    let mut dist = vec![0.0; n];
    for c in 0..prev.channels() {
        for ((d, &p), &q) in dist.iter_mut().zip(prev.plane(c)).zip(curr.plane(c)) {
            *d += (p - q) * (p - q);
        }
    }
    let data = dist.into_iter().map(|d| sigmoid(a - b * d)).collect();
    FeatureMap::new(prev.level(), 1, prev.height(), prev.width(), data)
}

/// Combines fine (layer 1) and coarse (layer 4) trust through the gate
/// `g = sigma(k (T4_up - 0.5))`: `g * T1 + (1 - g) * T4_up`.
pub fn semantic_gate(t_l1: &FeatureMap, t_l4: &FeatureMap, k: f64) -> Result<FeatureMap> {
    if t_l1.channels() != 1 || t_l4.channels() != 1 {
        return Err(shape("trust maps must be single-channel"));
    }
    let up = bilinear_resize(t_l4, t_l1.height(), t_l1.width())?;
    let data = t_l1
        .data()
        .iter()
        .zip(up.data())
        .map(|(&fine, &coarse)| {
            let g = sigmoid(k * (coarse - 0.5));
            // g*fine + (1-g)*coarse
            lerp(coarse, fine, g)
        })
        .collect();
    FeatureMap::new(1, 1, t_l1.height(), t_l1.width(), data)
}

/// Level 1 is `t_final` itself; the others are resized copies.
pub fn distribute(t_final: &FeatureMap, sizes: &LevelSizes) -> Result<ModulationField> {
    if (t_final.height(), t_final.width()) != sizes[0] {
        return Err(shape(format!(
            "final trust is {}x{}, layer-1 memory is {:?}",
            t_final.height(),
            t_final.width(),
            sizes[0]
        )));
    }
    let mut levels = Vec::with_capacity(LEVELS);
    levels.push(t_final.clone().with_level(1)?);
    for (i, &(h, w)) in sizes.iter().enumerate().skip(1) {
        levels.push(bilinear_resize(t_final, h, w)?.with_level(i as u8 + 1)?);
    }
    ModulationField::new(levels)
}

/// `T'_t = beta * T_t + (1 - beta) * T'_{t-1}` per level; the first call passes `raw` through.
pub fn smooth(raw: &ModulationField, state: &mut SmoothingState, beta: f64) -> Result<ModulationField> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!("smoothing beta = {beta} outside (0, 1]")));
    }
    let out = match &state.prev {
        None => raw.clone(),
        Some(prev) => {
            if prev.levels.len() != raw.levels.len() {
                return Err(invalid(format!(
                    "smoothing state has {} levels, field has {}",
                    prev.levels.len(),
                    raw.levels.len()
                )));
            }
            let mut levels = Vec::with_capacity(LEVELS);
            for (p, r) in prev.levels.iter().zip(&raw.levels) {
                if !p.same_shape(r) {
                    return Err(shape(format!("smoothing state {} vs field {}", p.shape_str(), r.shape_str())));
                }
                let data = p.data().iter().zip(r.data()).map(|(&old, &new)| lerp(old, new, beta)).collect();
                levels.push(FeatureMap::new(r.level(), 1, r.height(), r.width(), data)?);
            }
            ModulationField { levels }
        }
    };
    state.prev = Some(out.clone());
    Ok(out)
}

/// Everything the modulator produced for one frame.
#[derive(Debug, Clone)]
pub struct Modulation {
    /// Distributed field before smoothing.
    pub raw: ModulationField,
    /// Field used for fusion.
    pub smoothed: ModulationField,
}

/// Runs the whole modulator on projected layer-1 and layer-4 features.
pub fn modulate(
    cfg: &ModulatorConfig,
    prev: &[FeatureMap],
    curr: &[FeatureMap],
    sizes: &LevelSizes,
    state: &mut SmoothingState,
) -> Result<Modulation> {
    if prev.len() != LEVELS || curr.len() != LEVELS {
        return Err(invalid("modulator needs full previous and current pyramids"));
    }
    let (t_l1, t_l4) = match &cfg.scale_trust {
        ScaleTrust::Learned { h1, h4 } => (scale_trust(&prev[0], &curr[0], h1)?, scale_trust(&prev[3], &curr[3], h4)?),
        ScaleTrust::Reference { a, b } => (
            reference_modulator(&prev[0], &curr[0], *a, *b)?,
            reference_modulator(&prev[3], &curr[3], *a, *b)?,
        ),
    };
    let t_final = semantic_gate(&t_l1, &t_l4, cfg.k)?;
    let raw = distribute(&t_final, sizes)?;
    let smoothed = smooth(&raw, state, cfg.beta)?;
    Ok(Modulation { raw, smoothed })
}
