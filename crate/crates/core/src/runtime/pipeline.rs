use crate::error::{invalid, Error, Result};
use crate::modulator::{modulate, ModulationField, ModulatorConfig, SmoothingState};
use crate::projector::{project_all, LevelSizes, ProjectorParams};
use crate::smu::{commit, fastpath_fraction, fuse, memory_with_source, MemoryPyramid};
use crate::synthworld::{Decoder, FrameBundle, World};
use crate::tensor::{DepthMap, FeatureMap};

use super::FrameResult;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub modulator: ModulatorConfig,
    /// Layer-1 trust below this counts as encoder-dominated.
    pub fastpath_threshold: f64,
    /// Constant trust that bypasses the modulator; `Some(0.0)` gives encoder-only output.
    pub trust_override: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { modulator: ModulatorConfig::default(), fastpath_threshold: 0.5, trust_override: None }
    }
}

/// Modulator and temporal state carried between fast-path frames.
#[derive(Debug, Clone, Default)]
pub struct FastState {
    pub smoothing: SmoothingState,
    /// Projected observations the modulator compares against.
    pub prev_obs: Option<Vec<FeatureMap>>,
}

/// Fixed components of the fast path: projector, modulator settings and readout.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    projector: ProjectorParams,
    decoder: Decoder,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, projector: ProjectorParams, decoder: Decoder) -> Result<Self> {
        cfg.modulator.validate(projector.memory_channels())?;
        if !(cfg.fastpath_threshold > 0.0 && cfg.fastpath_threshold < 1.0) {
            return Err(invalid(format!("fast-path threshold {} outside (0, 1)", cfg.fastpath_threshold)));
        }
        if let Some(t) = cfg.trust_override {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("trust override {t} outside [0, 1]")));
            }
        }
        if decoder.channels() != projector.memory_channels() {
            return Err(Error::Config(format!(
                "decoder reads {} channels, memory has {}",
                decoder.channels(),
                projector.memory_channels()
            )));
        }
        Ok(Self { cfg, projector, decoder })
    }

    /// Identity projector and the world's own readout.
    pub fn for_world(world: &World, cfg: PipelineConfig) -> Result<Self> {
        let projector = ProjectorParams::identity(world.config().channels, *world.sizes());
        Self::new(cfg, projector, Decoder::for_world(world)?)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn sizes(&self) -> &LevelSizes {
        self.projector.sizes()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Same pipeline with a different trust override.
    pub fn with_override(&self, trust: Option<f64>) -> Result<Self> {
        Self::new(PipelineConfig { trust_override: trust, ..self.cfg.clone() }, self.projector.clone(), self.decoder.clone())
    }

    pub fn project(&self, encoder: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        project_all(encoder, &self.projector)
    }

    /// Decoded projected encoder features alone.
    pub fn encoder_only(&self, frame: &FrameBundle) -> Result<DepthMap> {
        self.decoder.decode(&self.project(&frame.encoder)?)
    }

    /// Overwrites memory with `levels` (slow-path features of `source`) and
    /// points the modulator at the source frame's projected observations.
    /// Smoothing state is kept.
    pub fn adopt(&self, levels: Vec<FeatureMap>, source: &FrameBundle, state: &mut FastState) -> Result<MemoryPyramid> {
        let mem = memory_with_source(levels, source.t)?;
        mem.check_geometry(self.sizes(), self.projector.memory_channels())?;
        state.prev_obs = Some(self.project(&source.encoder)?);
        Ok(mem)
    }

    /// Refresh from a frame's own foundation features.
    pub fn refresh(&self, source: &FrameBundle, state: &mut FastState) -> Result<MemoryPyramid> {
        self.adopt(source.foundation.clone(), source, state)
    }

    /// project, modulate, smooth, fuse, decode, and write the fused pyramid back.
    pub fn step_fast(&self, frame: &FrameBundle, mem: &MemoryPyramid, state: &mut FastState) -> Result<(FrameResult, MemoryPyramid)> {
        let lag = frame.t.checked_sub(mem.source_frame()).ok_or_else(|| {
            Error::State(format!("memory from frame {} is newer than frame {}", mem.source_frame(), frame.t))
        })?;
        let obs = self.project(&frame.encoder)?;
        let (raw, trust) = match self.cfg.trust_override {
            Some(v) => {
                let f = ModulationField::constant(v, self.sizes());
                (f.clone(), f)
            }
            None => {
                let prev = state.prev_obs.as_ref().ok_or_else(|| Error::State("modulator has no previous observation".into()))?;
                let m = modulate(&self.cfg.modulator, prev, &obs, self.sizes(), &mut state.smoothing)?;
                (m.raw, m.smoothed)
            }
        };
        let fused = fuse(mem, &obs, &trust)?;
        let prediction = self.decoder.decode(&fused)?;
        let next = commit(mem, fused)?;
        state.prev_obs = Some(obs);
        let result = FrameResult {
            frame: frame.t,
            lag,
            prediction,
            mean_t: trust.finest().mean(),
            mean_t_raw: raw.finest().mean(),
            fastpath_pct: 100.0 * fastpath_fraction(&trust, self.cfg.fastpath_threshold),
            cache_version: 0,
            refreshed_from: None,
            start_us: 0,
            end_us: 0,
        };
        Ok((result, next))
    }
}

/// Fast-path owner: pipeline, working memory and temporal state.
#[derive(Debug, Clone)]
pub struct FastPath {
    pipeline: Pipeline,
    state: FastState,
    memory: Option<MemoryPyramid>,
    version: u64,
}

impl FastPath {
    pub fn new(pipeline: Pipeline) -> Self {
        Self { pipeline, state: FastState::default(), memory: None, version: 0 }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn memory(&self) -> Option<&MemoryPyramid> {
        self.memory.as_ref()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn adopt(&mut self, levels: Vec<FeatureMap>, source: &FrameBundle, version: u64) -> Result<()> {
        self.memory = Some(self.pipeline.adopt(levels, source, &mut self.state)?);
        self.version = version;
        Ok(())
    }

    pub fn step(&mut self, frame: &FrameBundle) -> Result<FrameResult> {
        let mem = self.memory.as_ref().ok_or_else(|| Error::State("fast path memory is not initialized".into()))?;
        let (mut result, next) = self.pipeline.step_fast(frame, mem, &mut self.state)?;
        result.cache_version = self.version;
        self.memory = Some(next);
        Ok(result)
    }
}
