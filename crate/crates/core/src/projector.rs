//! Channel and spatial alignment of encoder observations to memory geometry:
//! a 1x1 channel map followed by a bilinear resize to the level's memory size.

use std::path::Path;

use crate::error::{invalid, shape, Result};
use crate::io::{read_raw, write_raw, RawTensor};
use crate::tensor::{bilinear_resize, pointwise_linear, FeatureMap, Pointwise, LEVELS};

/// Spatial size `(height, width)` of each memory level.
pub type LevelSizes = [(usize, usize); LEVELS];

/// Memory sizes for an `H x W` frame: 4x, 8x, 16x and 32x downsampling.
pub fn pyramid_sizes(height: usize, width: usize) -> Result<LevelSizes> {
    if height % 32 != 0 || width % 32 != 0 || height == 0 || width == 0 {
        return Err(invalid(format!("frame {height}x{width} must be a non-zero multiple of 32 on both axes")));
    }
    Ok(std::array::from_fn(|l| (height >> (l + 2), width >> (l + 2))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    maps: Vec<Pointwise>,
    sizes: LevelSizes,
    channels: usize,
}

impl ProjectorParams {
    pub fn new(maps: Vec<Pointwise>, sizes: LevelSizes) -> Result<Self> {
        if maps.len() != LEVELS {
            return Err(invalid(format!("projector needs {LEVELS} levels, got {}", maps.len())));
        }
        let channels = maps[0].c_out;
        if let Some(bad) = maps.iter().position(|m| m.c_out != channels) {
            return Err(shape(format!(
                "level {} projects to {} channels, level 1 to {channels}",
                bad + 1,
                maps[bad].c_out
            )));
        }
        if sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(invalid(format!("empty memory size in {sizes:?}")));
        }
        Ok(Self { maps, sizes, channels })
    }

    /// Identity channel maps: encoder features already live in memory channel space.
    pub fn identity(channels: usize, sizes: LevelSizes) -> Self {
        Self { maps: vec![Pointwise::identity(channels); LEVELS], sizes, channels }
    }

    pub fn memory_channels(&self) -> usize {
        self.channels
    }

    pub fn sizes(&self) -> &LevelSizes {
        &self.sizes
    }

    pub fn level_map(&self, level: u8) -> Result<&Pointwise> {
        level_index(level).map(|i| &self.maps[i])
    }

    /// Writes `weights-then-bias` files, one per level, as `C_out x (C_in + 1)`
    /// matrices whose last column is the bias.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (l, m) in self.maps.iter().enumerate() {
            let mut data = Vec::with_capacity(m.c_out * (m.c_in + 1));
            for o in 0..m.c_out {
                data.extend(m.weight[o * m.c_in..(o + 1) * m.c_in].iter().map(|&v| v as f32));
                data.push(m.bias[o] as f32);
            }
            write_raw(dir.as_ref().join(level_file(l + 1)), &RawTensor::new(vec![m.c_out, m.c_in + 1], data)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, sizes: LevelSizes) -> Result<Self> {
        let mut maps = Vec::with_capacity(LEVELS);
        for l in 1..=LEVELS {
            let raw = read_raw(dir.as_ref().join(level_file(l)))?;
            if raw.dims.len() != 2 || raw.dims[1] < 2 {
                return Err(shape(format!("projector level {l} file has dims {:?}", raw.dims)));
            }
            let (c_out, cols) = (raw.dims[0], raw.dims[1]);
            let c_in = cols - 1;
            let mut weight = Vec::with_capacity(c_out * c_in);
            let mut bias = Vec::with_capacity(c_out);
            for row in raw.data.chunks_exact(cols) {
                weight.extend(row[..c_in].iter().map(|&v| f64::from(v)));
                bias.push(f64::from(row[c_in]));
            }
            maps.push(Pointwise::new(c_out, c_in, weight, bias)?);
        }
        Self::new(maps, sizes)
    }
}

fn level_file(level: usize) -> String {
    format!("projector_l{level}.amde")
}

pub(crate) fn level_index(level: u8) -> Result<usize> {
    if (1..=LEVELS as u8).contains(&level) {
        Ok(level as usize - 1)
    } else {
        Err(invalid(format!("unknown pyramid level {level}")))
    }
}

/// `resize(pointwise(obs), s_level)`.
pub fn project(level: u8, obs: &FeatureMap, params: &ProjectorParams) -> Result<FeatureMap> {
    let i = level_index(level)?;
    let aligned = pointwise_linear(obs, &params.maps[i])?;
    let (h, w) = params.sizes[i];
    bilinear_resize(&aligned, h, w)?.with_level(level)
}

/// Projects all four levels of an observation pyramid.
pub fn project_all(obs: &[FeatureMap], params: &ProjectorParams) -> Result<Vec<FeatureMap>> {
    if obs.len() != LEVELS {
        return Err(invalid(format!("observation pyramid has {} levels", obs.len())));
    }
    obs.iter().enumerate().map(|(i, o)| project(i as u8 + 1, o, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SIZES: LevelSizes = [(8, 8), (4, 4), (2, 2), (1, 1)];

    fn random_params(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, zero_bias: bool) -> ProjectorParams {
        let maps = (0..LEVELS)
            .map(|_| {
                let w = (0..c_out * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = (0..c_out).map(|_| if zero_bias { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
                Pointwise::new(c_out, c_in, w, b).unwrap()
            })
            .collect();
        ProjectorParams::new(maps, SIZES).unwrap()
    }

    #[test]
    fn identity_at_memory_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = FeatureMap::from_fn(2, 3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let p = ProjectorParams::identity(3, SIZES);
        assert_eq!(project(2, &obs, &p).unwrap(), obs);
    }

    #[test]
    fn constant_observation_maps_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 2, 3, false);
        let obs = FeatureMap::filled(1, 2, 5, 3, 0.75).unwrap();
        let out = project(1, &obs, &p).unwrap();
        assert_eq!((out.height(), out.width()), SIZES[0]);
        let m = p.level_map(1).unwrap();
        for c in 0..3 {
            let expect = m.bias[c] + 0.75 * (m.weight[c * 2] + m.weight[c * 2 + 1]);
            assert!(out.plane(c).iter().all(|&v| (v - expect).abs() < 1e-14));
        }
    }

    #[test]
    fn composition_of_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 4, 3, false);
        let obs = FeatureMap::from_fn(3, 4, 5, 7, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let out = project(3, &obs, &p).unwrap();
        let expect = bilinear_resize(&pointwise_linear(&obs, p.level_map(3).unwrap()).unwrap(), 2, 2).unwrap();
        assert_eq!(out.data(), expect.data());
        assert_eq!(out.level(), 3);
    }

    #[test]
    fn unknown_level_rejected() {
        let p = ProjectorParams::identity(1, SIZES);
        let obs = FeatureMap::filled(1, 1, 2, 2, 0.0).unwrap();
        assert!(project(0, &obs, &p).is_err());
        assert!(project(5, &obs, &p).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = ProjectorParams::identity(3, SIZES);
        let obs = FeatureMap::filled(1, 2, 8, 8, 0.0).unwrap();
        assert!(project(1, &obs, &p).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 3, 2, false);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let back = ProjectorParams::load(dir.path(), SIZES).unwrap();
        for l in 1..=4 {
            let (a, b) = (p.level_map(l).unwrap(), back.level_map(l).unwrap());
            for (x, y) in a.weight.iter().zip(&b.weight).chain(a.bias.iter().zip(&b.bias)) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn pyramid_sizes_downsample() {
        assert_eq!(pyramid_sizes(128, 64).unwrap(), [(32, 16), (16, 8), (8, 4), (4, 2)]);
        assert!(pyramid_sizes(100, 128).is_err());
    }

    proptest! {
        #[test]
        fn linear_and_sized(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 2, 3, true);
            let x = FeatureMap::from_fn(1, 2, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
            let y = FeatureMap::from_fn(1, 2, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
            for level in 1..=4u8 {
                let lhs = project(level, &x.axpby(a, &y, 1.0).unwrap(), &p).unwrap();
                let rhs = project(level, &x, &p).unwrap().axpby(a, &project(level, &y, &p).unwrap(), 1.0).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
                prop_assert_eq!((lhs.height(), lhs.width()), SIZES[level as usize - 1]);
                prop_assert_eq!(lhs.channels(), 3);
            }
        }
    }
}
