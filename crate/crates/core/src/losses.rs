//! Training objective: scale/shift-invariant MSE, multi-scale gradient
//! matching, and a hinge that keeps mean layer-1 trust above `tau`.
//!
//! Gradients are exact with respect to the predicted depth map (and the trust
//! field for the hinge). Statistics run over pixels valid in both maps.

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{DepthMap, FeatureMap};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub ssi_weight: f64,
    pub grad_weight: f64,
    pub mem_weight: f64,
    /// Lower bound on mean layer-1 trust.
    pub tau: f64,
    /// Number of gradient-matching scales; scale `s` is pooled by `2^(s-1)`.
    pub scales: usize,
    /// Standard deviation below which a map counts as constant.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ssi_weight: 1.0, grad_weight: 0.5, mem_weight: 0.1, tau: 0.4, scales: 4, eps: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.ssi_weight, self.grad_weight, self.mem_weight].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid(format!("tau = {} outside (0, 1)", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        if self.scales == 0 {
            return Err(invalid("at least one gradient scale is required"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: DepthMap,
}

/// `(x - mean) / std` over valid pixels; invalid pixels are left at zero.
#[derive(Debug, Clone)]
struct Normalized {
    values: Vec<f64>,
    mask: Vec<bool>,
    std: f64,
    n: usize,
}

fn normalize(m: &DepthMap, mask: &[bool], eps: f64, name: &str) -> Result<Normalized> {
    let n = mask.iter().filter(|&&v| v).count();
    if n < 2 {
        return Err(Error::Degenerate(format!("{name} has {n} valid pixels, need at least 2")));
    }
    let valid = || m.data().iter().zip(mask).filter(|(_, &v)| v).map(|(&x, _)| x);
    let mean = valid().sum::<f64>() / n as f64;
    let var = valid().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > eps) {
        return Err(Error::Degenerate(format!("{name} is constant (std {std:e} <= {eps:e})")));
    }
    let values = m.data().iter().zip(mask).map(|(&x, &v)| if v { (x - mean) / std } else { 0.0 }).collect();
    Ok(Normalized { values, mask: mask.to_vec(), std, n })
}

/// Pulls `dL/d normalized` back to `dL/d raw`:
/// `(u - mean(u) - z * mean(u z)) / std` on valid pixels.
fn normalize_backward(norm: &Normalized, upstream: &[f64]) -> Vec<f64> {
    let n = norm.n as f64;
    let (mut mu, mut muz) = (0.0, 0.0);
    for ((&u, &z), &v) in upstream.iter().zip(&norm.values).zip(&norm.mask) {
        if v {
            mu += u;
            muz += u * z;
        }
    }
    mu /= n;
    muz /= n;
    upstream
        .iter()
        .zip(&norm.values)
        .zip(&norm.mask)
        .map(|((&u, &z), &v)| if v { (u - mu - z * muz) / norm.std } else { 0.0 })
        .collect()
}

fn check_pair(p: &DepthMap, g: &DepthMap) -> Result<()> {
    if !p.same_shape(g) {
        return Err(shape(format!("prediction {}x{} vs target {}x{}", p.height(), p.width(), g.height(), g.width())));
    }
    Ok(())
}

fn grad_map(like: &DepthMap, data: Vec<f64>) -> Result<DepthMap> {
    let g = DepthMap::new(like.height(), like.width(), data)?;
    match like.mask() {
        Some(m) => g.with_mask(m.to_vec()),
        None => Ok(g),
    }
}

/// Mean squared error between the standardized prediction and target.
pub fn ssi_loss(p: &DepthMap, g: &DepthMap, eps: f64) -> Result<LossGrad> {
    check_pair(p, g)?;
    let mask = p.joint_mask(g);
    let pn = normalize(p, &mask, eps, "prediction")?;
    let gn = normalize(g, &mask, eps, "target")?;
    let (value, upstream) = ssi_from_normalized(&pn, &gn);
    Ok(LossGrad { value, grad: grad_map(p, normalize_backward(&pn, &upstream))? })
}

fn ssi_from_normalized(pn: &Normalized, gn: &Normalized) -> (f64, Vec<f64>) {
    let n = pn.n as f64;
    let mut value = 0.0;
    let upstream = pn
        .values
        .iter()
        .zip(&gn.values)
        .zip(&pn.mask)
        .map(|((&a, &b), &v)| {
            if v {
                value += (a - b) * (a - b);
                2.0 * (a - b) / n
            } else {
                0.0
            }
        })
        .collect();
    (value / n, upstream)
}

/// One level of the difference pyramid.
struct Level {
    h: usize,
    w: usize,
    d: Vec<f64>,
    valid: Vec<bool>,
}

fn pool(l: &Level) -> Level {
    let (h, w) = (l.h / 2, l.w / 2);
    let mut d = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let idx = [(2 * y) * l.w + 2 * x, (2 * y) * l.w + 2 * x + 1, (2 * y + 1) * l.w + 2 * x, (2 * y + 1) * l.w + 2 * x + 1];
            if idx.iter().all(|&i| l.valid[i]) {
                d[y * w + x] = idx.iter().map(|&i| l.d[i]).sum::<f64>() / 4.0;
                valid[y * w + x] = true;
            }
        }
    }
    Level { h, w, d, valid }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Smallest side accepted by [`grad_loss`] for the given scale count.
pub fn grad_loss_min_side(scales: usize) -> usize {
    2 << (scales - 1)
}

/// `sum_s 1/s^2 * mean(|dx P_s - dx G_s| + |dy P_s - dy G_s|)` with 2x2 average
/// pooling between scales and forward differences on the `(H-1) x (W-1)` interior.
pub fn grad_loss(p: &DepthMap, g: &DepthMap, scales: usize) -> Result<LossGrad> {
    check_pair(p, g)?;
    if scales == 0 {
        return Err(invalid("at least one gradient scale is required"));
    }
    let min = grad_loss_min_side(scales);
    if p.height() < min || p.width() < min {
        return Err(invalid(format!(
            "{}x{} map is too small for {scales} scales; minimum size is {min}x{min}",
            p.height(),
            p.width()
        )));
    }
    let mask = p.joint_mask(g);
    let diff = p
        .data()
        .iter()
        .zip(g.data())
        .zip(&mask)
        .map(|((&a, &b), &v)| if v { a - b } else { 0.0 })
        .collect();
    let mut levels = vec![Level { h: p.height(), w: p.width(), d: diff, valid: mask }];
    for _ in 1..scales {
        let next = pool(levels.last().unwrap());
        levels.push(next);
    }

    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.h * l.w]).collect();
    for (s, l) in levels.iter().enumerate() {
        let weight = 1.0 / ((s + 1) * (s + 1)) as f64;
        let (mut sum, mut count) = (0.0, 0usize);
        let mut terms = Vec::new();
        for y in 0..l.h - 1 {
            for x in 0..l.w - 1 {
                let i = y * l.w + x;
                let mut any = false;
                if l.valid[i] && l.valid[i + 1] {
                    let dx = l.d[i + 1] - l.d[i];
                    sum += dx.abs();
                    terms.push((i, i + 1, sign(dx)));
                    any = true;
                }
                if l.valid[i] && l.valid[i + l.w] {
                    let dy = l.d[i + l.w] - l.d[i];
                    sum += dy.abs();
                    terms.push((i, i + l.w, sign(dy)));
                    any = true;
                }
                count += usize::from(any);
            }
        }
        if count == 0 {
            continue;
        }
        value += weight * sum / count as f64;
        let scale = weight / count as f64;
        for (from, to, sgn) in terms {
            grads[s][to] += scale * sgn;
            grads[s][from] -= scale * sgn;
        }
    }

    // back through the pooling chain, coarsest first
    for s in (1..levels.len()).rev() {
        let (fine, coarse) = (&levels[s - 1], &levels[s]);
        let (upper, lower) = grads.split_at_mut(s);
        let (gf, gc) = (&mut upper[s - 1], &lower[0]);
        for y in 0..coarse.h {
            for x in 0..coarse.w {
                let c = y * coarse.w + x;
                if !coarse.valid[c] || gc[c] == 0.0 {
                    continue;
                }
                let share = gc[c] / 4.0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gf[(2 * y + dy) * fine.w + 2 * x + dx] += share;
                }
            }
        }
    }
    let grad = grads.swap_remove(0);
    Ok(LossGrad { value, grad: grad_map(p, grad)? })
}

/// `max(0, tau - mean(T))`; the hinge is inactive at equality.
pub fn mem_loss(t_layer1: &FeatureMap, tau: f64) -> (f64, FeatureMap) {
    let n = t_layer1.data().len() as f64;
    let mean = t_layer1.mean();
    if mean < tau {
        (tau - mean, t_layer1.map(|_| -1.0 / n))
    } else {
        (0.0, t_layer1.map(|_| 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub ssi: f64,
    pub grad: f64,
    pub mem: f64,
    pub grad_p: DepthMap,
    pub grad_t: FeatureMap,
}

/// Weighted sum of the three terms. The prediction and target are
/// standardized once and both the SSI and gradient terms see the standardized maps.
pub fn total_loss(p: &DepthMap, g: &DepthMap, t_layer1: &FeatureMap, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    check_pair(p, g)?;
    let mask = p.joint_mask(g);
    let pn = normalize(p, &mask, cfg.eps, "prediction")?;
    let gn = normalize(g, &mask, cfg.eps, "target")?;
    let (ssi, ssi_up) = ssi_from_normalized(&pn, &gn);

    let as_map = |n: &Normalized| DepthMap::new(p.height(), p.width(), n.values.clone())?.with_mask(mask.clone());
    let gl = grad_loss(&as_map(&pn)?, &as_map(&gn)?, cfg.scales)?;

    let upstream: Vec<f64> = ssi_up
        .iter()
        .zip(gl.grad.data())
        .map(|(&a, &b)| cfg.ssi_weight * a + cfg.grad_weight * b)
        .collect();
    let grad_p = grad_map(p, normalize_backward(&pn, &upstream))?;

    let (mem, mem_grad) = mem_loss(t_layer1, cfg.tau);
    let grad_t = mem_grad.map(|v| cfg.mem_weight * v);

    Ok(TotalLoss {
        value: cfg.ssi_weight * ssi + cfg.grad_weight * gl.value + cfg.mem_weight * mem,
        ssi,
        grad: gl.value,
        mem,
        grad_p,
        grad_t,
    })
}
