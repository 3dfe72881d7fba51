//! Dense tensor types and the small set of kernels the pipeline is built from.
//!
//! Everything here computes in `f64`. The on-disk format (see [`crate::io`])
//! narrows to `f32`.

use crate::error::{invalid, shape, Result};

/// Number of pyramid levels carried by memory, projections and trust fields.
pub const LEVELS: usize = 4;

/// A `C x H x W` grid of reals at one pyramid level, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    level: u8,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(level: u8, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if !(1..=LEVELS as u8).contains(&level) {
            return Err(invalid(format!("pyramid level {level} outside 1..=4")));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid(format!("empty feature map {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { level, channels, height, width, data })
    }

    pub fn filled(level: u8, channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(level, channels, height, width, vec![value; channels * height * width])
    }

    /// Builds a map by evaluating `f(c, y, x)` at every element.
    pub fn from_fn(
        level: u8,
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(level, channels, height, width, data)
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn with_level(mut self, level: u8) -> Result<Self> {
        if !(1..=LEVELS as u8).contains(&level) {
            return Err(invalid(format!("pyramid level {level} outside 1..=4")));
        }
        self.level = level;
        Ok(self)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a contiguous `H*W` slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Compensated mean; exact for constant maps with a power-of-two size.
    pub fn mean(&self) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &v in &self.data {
            let t = sum + v;
            comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
            sum = t;
        }
        (sum + comp) / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Elementwise `a*self + b*other`.
    pub fn axpby(&self, a: f64, other: &FeatureMap, b: f64) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(shape(format!("{} vs {}", self.shape_str(), other.shape_str())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(FeatureMap { data, ..self.clone() })
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A single-channel `H x W` map of inverse depth with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("empty depth map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(shape(format!("{} values for a {height}x{width} depth map", data.len())));
        }
        Ok(Self { height, width, data, valid: None })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn with_mask(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.data.len() {
            return Err(shape(format!(
                "mask of {} entries for a {}x{} depth map",
                valid.len(),
                self.height,
                self.width
            )));
        }
        self.valid = Some(valid);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().map_or(true, |m| m[i])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Number of pixels counted by statistics.
    pub fn valid_count(&self) -> usize {
        match &self.valid {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.data.len(),
        }
    }

    /// Pixels valid in both maps.
    pub fn joint_mask(&self, other: &DepthMap) -> Vec<bool> {
        (0..self.data.len()).map(|i| self.is_valid(i) && other.is_valid(i)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DepthMap {
        DepthMap { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Views the map as a one-channel feature map at `level`.
    pub fn to_feature(&self, level: u8) -> Result<FeatureMap> {
        FeatureMap::new(level, 1, self.height, self.width, self.data.clone())
    }
}

/// A `C_out x C_in` channel map plus bias, applied independently at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub c_out: usize,
    pub c_in: usize,
    /// Row-major `c_out x c_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Pointwise {
    pub fn new(c_out: usize, c_in: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(invalid("pointwise map with zero channels"));
        }
        if weight.len() != c_out * c_in || bias.len() != c_out {
            return Err(shape(format!(
                "pointwise {c_out}x{c_in} needs {} weights and {c_out} biases, got {} and {}",
                c_out * c_in,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { c_out, c_in, weight, bias })
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        Self { c_out: channels, c_in: channels, weight, bias: vec![0.0; channels] }
    }
}

/// A `C_out x C_in x 3 x 3` convolution kernel plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub c_out: usize,
    pub c_in: usize,
    /// Layout `[c_out][c_in][ky][kx]`.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn new(c_out: usize, c_in: usize, kernel: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(invalid("convolution with zero channels"));
        }
        if kernel.len() != c_out * c_in * 9 || bias.len() != c_out {
            return Err(shape(format!(
                "3x3 conv {c_out}x{c_in} needs {} taps and {c_out} biases, got {} and {}",
                c_out * c_in * 9,
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self { c_out, c_in, kernel, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self { c_out, c_in, kernel: vec![0.0; c_out * c_in * 9], bias: vec![0.0; c_out] }
    }

    #[inline]
    pub fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.kernel[((o * self.c_in + i) * 3 + ky) * 3 + kx]
    }
}

/// `a + t*(b - a)` for `t` in `[0, 1]`, clamped so rounding never leaves `[min(a,b), max(a,b)]`.
/// Exact at `t = 0` and when `a == b`.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    if t == 1.0 {
        return b;
    }
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Source index pair and blend weight for one output coordinate along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|t| {
            let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping, separable in x then y.
pub fn bilinear_resize(src: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0 || target_w == 0 {
        return Err(invalid(format!("resize target {target_h}x{target_w} is empty")));
    }
    if target_h == src.height && target_w == src.width {
        return Ok(src.clone());
    }
    let (sh, sw) = (src.height, src.width);
    let xs = axis_taps(sw, target_w);
    let ys = axis_taps(sh, target_h);

    let mut out = Vec::with_capacity(src.channels * target_h * target_w);
    let mut row = vec![0.0; target_w];
    let mut rows = vec![0.0; sh * target_w];
    for c in 0..src.channels {
        let plane = src.plane(c);
        for y in 0..sh {
            let line = &plane[y * sw..(y + 1) * sw];
            for (x, &(i0, i1, f)) in xs.iter().enumerate() {
                rows[y * target_w + x] = lerp(line[i0], line[i1], f);
            }
        }
        for &(j0, j1, f) in &ys {
            let (r0, r1) = (&rows[j0 * target_w..(j0 + 1) * target_w], &rows[j1 * target_w..(j1 + 1) * target_w]);
            for x in 0..target_w {
                row[x] = lerp(r0[x], r1[x], f);
            }
            out.extend_from_slice(&row);
        }
    }
    FeatureMap::new(src.level, src.channels, target_h, target_w, out)
}

/// Per-pixel `out[c] = sum_k W[c,k] in[k] + b[c]`.
pub fn pointwise_linear(src: &FeatureMap, map: &Pointwise) -> Result<FeatureMap> {
    if map.c_in != src.channels {
        return Err(invalid(format!(
            "pointwise map expects {} input channels, map has {}",
            map.c_in, src.channels
        )));
    }
    let n = src.plane_len();
    let mut out = vec![0.0; map.c_out * n];
    for o in 0..map.c_out {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(map.bias[o]);
        for k in 0..map.c_in {
            let w = map.weight[o * map.c_in + k];
            if w == 0.0 {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(src.plane(k)) {
                *d += w * s;
            }
        }
    }
    FeatureMap::new(src.level, map.c_out, src.height, src.width, out)
}

/// Direct 3x3 convolution, stride 1, zero padding 1.
pub fn conv2d_small(src: &FeatureMap, conv: &Conv3x3) -> Result<FeatureMap> {
    if conv.c_in != src.channels {
        return Err(invalid(format!(
            "3x3 conv expects {} input channels, map has {}",
            conv.c_in, src.channels
        )));
    }
    let (h, w) = (src.height, src.width);
    let n = h * w;
    let mut out = vec![0.0; conv.c_out * n];
    for o in 0..conv.c_out {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(conv.bias[o]);
        for i in 0..conv.c_in {
            let plane = src.plane(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = conv.tap(o, i, ky, kx);
                    if tap == 0.0 {
                        continue;
                    }
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let src_row = &plane[sy * w..(sy + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        for x in x_lo..x_hi {
                            dst_row[x] += tap * src_row[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    FeatureMap::new(src.level, conv.c_out, h, w, out)
}

const SIGMOID_LO: f64 = f64::EPSILON / 2.0;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept inside the open unit interval even where `f64` would round to 0 or 1.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_LO, SIGMOID_HI)
}

pub fn sigmoid_map(src: &FeatureMap) -> FeatureMap {
    src.map(sigmoid)
}

/// Stacks the channels of `a` then `b`.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.height != b.height || a.width != b.width {
        return Err(shape(format!("cannot concatenate {} and {}", a.shape_str(), b.shape_str())));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::new(a.level, a.channels + b.channels, a.height, a.width, data)
}
