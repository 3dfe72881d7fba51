//! Depth accuracy after per-frame affine alignment, and lag-binned aggregation.
//!
//! All statistics run over pixels valid in both maps. Ratio tests clamp the
//! prediction to [`RATIO_FLOOR`] before dividing.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::DepthMap;

pub const RATIO_FLOOR: f64 = 1e-6;
pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const CSV_HEADER: &str = "lag,count,absrel,rmse,delta1,mean_t,fastpath_pct";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
}

fn pairs<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if !pred.same_shape(gt) {
        return Err(shape(format!("prediction {}x{} vs target {}x{}", pred.height(), pred.width(), gt.height(), gt.width())));
    }
    let mask = pred.joint_mask(gt);
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptyInput);
    }
    Ok(pred.data().iter().zip(gt.data()).zip(mask).filter(|(_, v)| *v).map(|((&p, &g), _)| (p, g)))
}

/// Closed-form `argmin_{a,b} sum (a p + b - g)^2`.
pub fn fit_lsq(pred: &DepthMap, gt: &DepthMap) -> Result<Alignment> {
    let it = pairs(pred, gt)?;
    let n = it.clone().count();
    if n < 2 {
        return Err(Error::Degenerate(format!("alignment needs at least 2 valid pixels, got {n}")));
    }
    let nf = n as f64;
    let (sp, sg) = it.clone().fold((0.0, 0.0), |(a, b), (p, g)| (a + p, b + g));
    let (mp, mg) = (sp / nf, sg / nf);
    let (var, cov, sq) = it.fold((0.0, 0.0, 0.0), |(v, c, s), (p, g)| {
        (v + (p - mp) * (p - mp), c + (p - mp) * (g - mg), s + p * p)
    });
    if !(var > f64::EPSILON * f64::EPSILON * sq) || var == 0.0 {
        return Err(Error::Degenerate("prediction is constant; alignment is undetermined".into()));
    }
    let scale = cov / var;
    Ok(Alignment { scale, shift: mg - scale * mp })
}

/// `a * pred + b` with the least-squares `(a, b)`; keeps the prediction's mask.
pub fn align_lsq(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMap> {
    let Alignment { scale, shift } = fit_lsq(pred, gt)?;
    Ok(pred.map(|p| scale * p + shift))
}

fn positive_gt(it: impl Iterator<Item = (f64, f64)>) -> Result<()> {
    for (_, g) in it {
        if !(g > 0.0) {
            return Err(invalid(format!("ground truth must be positive on valid pixels, found {g}")));
        }
    }
    Ok(())
}

/// `mean(|pred - gt| / gt)`.
pub fn absrel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let it = pairs(pred, gt)?;
    positive_gt(it.clone())?;
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), (p, g)| (s + (p - g).abs() / g, n + 1));
    Ok(sum / n as f64)
}

/// `sqrt(mean((pred - gt)^2))`.
pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sum, n) = pairs(pred, gt)?.fold((0.0, 0usize), |(s, n), (p, g)| (s + (p - g) * (p - g), n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Fraction of pixels with `max(gt / pred, pred / gt) < 1.25`.
pub fn delta1(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let it = pairs(pred, gt)?;
    positive_gt(it.clone())?;
    let (hits, n) = it.fold((0usize, 0usize), |(h, n), (p, g)| {
        let p = p.max(RATIO_FLOOR);
        (h + usize::from((g / p).max(p / g) < DELTA1_THRESHOLD), n + 1)
    });
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub rmse: f64,
    pub delta1: f64,
}

/// Aligns `pred` to `gt`, then computes all three metrics.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    let aligned = align_lsq(pred, gt)?;
    Ok(DepthMetrics { absrel: absrel(&aligned, gt)?, rmse: rmse(&aligned, gt)?, delta1: delta1(&aligned, gt)? })
}

/// One line of a lag summary. `lag` is `None` for the cycle-average row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagRow {
    pub lag: Option<usize>,
    pub count: usize,
    pub absrel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub mean_t: f64,
    pub fastpath_pct: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Bin {
    count: usize,
    absrel: f64,
    rmse: f64,
    delta1: f64,
    mean_t: f64,
    fastpath_pct: f64,
}

impl Bin {
    fn add(&mut self, o: &Bin) {
        self.count += o.count;
        self.absrel += o.absrel;
        self.rmse += o.rmse;
        self.delta1 += o.delta1;
        self.mean_t += o.mean_t;
        self.fastpath_pct += o.fastpath_pct;
    }

    fn row(&self, lag: Option<usize>) -> LagRow {
        let n = self.count as f64;
        LagRow {
            lag,
            count: self.count,
            absrel: self.absrel / n,
            rmse: self.rmse / n,
            delta1: self.delta1 / n,
            mean_t: self.mean_t / n,
            fastpath_pct: self.fastpath_pct / n,
        }
    }
}

/// Running sums per lag `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagProfile {
    bins: Vec<Bin>,
}

impl LagProfile {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("lag profile needs at least one bin"));
        }
        Ok(Self { bins: vec![Bin::default(); n] })
    }

    pub fn bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Adds already computed metrics to bin `lag`.
    pub fn add(&mut self, lag: usize, m: &DepthMetrics, mean_t: f64, fastpath_pct: f64) -> Result<()> {
        let n = self.bins.len();
        let bin = self.bins.get_mut(lag).ok_or_else(|| invalid(format!("lag {lag} outside 0..{n}")))?;
        bin.add(&Bin { count: 1, absrel: m.absrel, rmse: m.rmse, delta1: m.delta1, mean_t, fastpath_pct });
        Ok(())
    }

    /// Aligns and scores `pred` against `gt`, then adds it to bin `lag`.
    pub fn accumulate(&mut self, lag: usize, pred: &DepthMap, gt: &DepthMap, mean_t: f64, fastpath_pct: f64) -> Result<DepthMetrics> {
        if lag >= self.bins.len() {
            return Err(invalid(format!("lag {lag} outside 0..{}", self.bins.len())));
        }
        let m = evaluate(pred, gt)?;
        self.add(lag, &m, mean_t, fastpath_pct)?;
        Ok(m)
    }

    /// Per-lag rows for non-empty bins plus the count-weighted mean;
    /// `None` when nothing was accumulated.
    pub fn cycle_average(&self) -> Option<Summary> {
        let mut all = Bin::default();
        let mut rows = Vec::new();
        for (lag, b) in self.bins.iter().enumerate() {
            if b.count > 0 {
                rows.push(b.row(Some(lag)));
                all.add(b);
            }
        }
        (all.count > 0).then(|| Summary { rows, cycle: all.row(None) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<LagRow>,
    pub cycle: LagRow,
}

impl Summary {
    pub fn row(&self, lag: usize) -> Option<&LagRow> {
        self.rows.iter().find(|r| r.lag == Some(lag))
    }

    /// Equal-weight mean of several summaries, lag by lag. Counts are summed.
    pub fn mean_of(summaries: &[Summary]) -> Option<Summary> {
        let first = summaries.first()?;
        let k = summaries.len() as f64;
        let avg = |rows: Vec<&LagRow>, lag| {
            let mut r = LagRow { lag, count: 0, absrel: 0.0, rmse: 0.0, delta1: 0.0, mean_t: 0.0, fastpath_pct: 0.0 };
            for x in rows {
                r.count += x.count;
                r.absrel += x.absrel / k;
                r.rmse += x.rmse / k;
                r.delta1 += x.delta1 / k;
                r.mean_t += x.mean_t / k;
                r.fastpath_pct += x.fastpath_pct / k;
            }
            r
        };
        let mut rows = Vec::new();
        for row in &first.rows {
            let lag = row.lag?;
            let matched: Option<Vec<&LagRow>> = summaries.iter().map(|s| s.row(lag)).collect();
            rows.push(avg(matched?, Some(lag)));
        }
        let cycle = avg(summaries.iter().map(|s| &s.cycle).collect(), None);
        Some(Summary { rows, cycle })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.cycle)) {
            let lag = r.lag.map_or_else(|| "cycle_avg".to_string(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{lag},{},{},{},{},{},{}",
                r.count,
                fmt_g6(r.absrel),
                fmt_g6(r.rmse),
                fmt_g6(r.delta1),
                fmt_g6(r.mean_t),
                fmt_g6(r.fastpath_pct)
            );
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// C-style `%g` with 6 significant digits.
pub fn fmt_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    strip_zeros(&format!("{v:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
        DepthMap::from_fn(h, w, |_, _| rng.random_range(0.2..3.0)).unwrap()
    }

    fn one(v: f64) -> DepthMap {
        DepthMap::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn identical_maps_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random(&mut rng, 8, 8);
        let a = fit_lsq(&g, &g).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12 && a.shift.abs() < 1e-12);
        assert_eq!(absrel(&g, &g).unwrap(), 0.0);
        assert_eq!(rmse(&g, &g).unwrap(), 0.0);
        assert_eq!(delta1(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn inverts_affine_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random(&mut rng, 8, 8);
        let p = g.map(|v| (v - 3.0) / 2.0);
        let a = fit_lsq(&p, &g).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12 && (a.shift - 3.0).abs() < 1e-12);
        assert!(rmse(&align_lsq(&p, &g).unwrap(), &g).unwrap() < 1e-12);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (p, g) = (random(&mut rng, 6, 7), random(&mut rng, 6, 7));
            let (mut spp, mut sp, mut spg, mut sg) = (0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in p.data().iter().zip(g.data()) {
                spp += x * x;
                sp += x;
                spg += x * y;
                sg += y;
            }
            let a = Matrix2::new(spp, sp, sp, p.len() as f64);
            let sol = a.lu().solve(&Vector2::new(spg, sg)).unwrap();
            let fit = fit_lsq(&p, &g).unwrap();
            assert!((fit.scale - sol[0]).abs() < 1e-9 && (fit.shift - sol[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random(&mut rng, 4, 4);
        let p = DepthMap::new(4, 4, vec![2.0; 16]).unwrap();
        assert!(matches!(fit_lsq(&p, &g), Err(Error::Degenerate(_))));
    }

    #[test]
    fn delta1_threshold_cases() {
        assert_eq!(delta1(&one(1.2), &one(1.0)).unwrap(), 1.0);
        assert_eq!(delta1(&one(1.3), &one(1.0)).unwrap(), 0.0);
        assert_eq!(delta1(&one(1.0), &one(1.25)).unwrap(), 0.0);
        assert_eq!(delta1(&one(-4.0), &one(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let m = DepthMap::new(1, 2, vec![1.0, 2.0]).unwrap().with_mask(vec![false, false]).unwrap();
        assert!(matches!(absrel(&m, &m), Err(Error::EmptyInput)));
        assert!(absrel(&one(1.0), &one(0.0)).is_err());
        assert!(rmse(&one(1.0), &DepthMap::new(1, 2, vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn invalid_pixel_values_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, g) = (random(&mut rng, 5, 5), random(&mut rng, 5, 5));
        let mask: Vec<bool> = (0..25).map(|i| i % 3 != 0).collect();
        let mut p2 = p.clone();
        for (i, v) in p2.data_mut().iter_mut().enumerate() {
            if !mask[i] {
                *v = -1e9;
            }
        }
        let a = evaluate(&p.with_mask(mask.clone()).unwrap(), &g).unwrap();
        let b = evaluate(&p2.with_mask(mask).unwrap(), &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cycle_average_of_ramp() {
        let n = 10;
        let mut prof = LagProfile::new(n).unwrap();
        assert!(prof.cycle_average().is_none());
        for lag in 0..n {
            let v = lag as f64;
            prof.add(lag, &DepthMetrics { absrel: v, rmse: v, delta1: v }, v, v).unwrap();
        }
        let s = prof.cycle_average().unwrap();
        assert_eq!(s.rows.len(), n);
        assert!((s.cycle.absrel - 4.5).abs() < 1e-12);
        assert_eq!(s.cycle.count, n);
        assert!(prof.add(n, &DepthMetrics { absrel: 0.0, rmse: 0.0, delta1: 0.0 }, 0.0, 0.0).is_err());
    }

    #[test]
    fn cycle_average_is_count_weighted() {
        let mut prof = LagProfile::new(3).unwrap();
        let m = |v| DepthMetrics { absrel: v, rmse: 0.0, delta1: 0.0 };
        prof.add(0, &m(1.0), 0.0, 0.0).unwrap();
        for _ in 0..3 {
            prof.add(2, &m(5.0), 0.0, 0.0).unwrap();
        }
        let s = prof.cycle_average().unwrap();
        assert_eq!(s.rows.len(), 2);
        assert!((s.cycle.absrel - 16.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let mut prof = LagProfile::new(2).unwrap();
        prof.add(0, &DepthMetrics { absrel: 0.1, rmse: 0.25, delta1: 1.0 }, 0.953, 0.0).unwrap();
        prof.add(1, &DepthMetrics { absrel: 0.2, rmse: 0.5, delta1: 0.5 }, 0.5, 12.5).unwrap();
        let csv = prof.cycle_average().unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "0,1,0.1,0.25,1,0.953,0");
        assert_eq!(lines[2], "1,1,0.2,0.5,0.5,0.5,12.5");
        assert_eq!(lines[3], "cycle_avg,2,0.15,0.375,0.75,0.7265,6.25");
    }

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(0.0), "0");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(2.71234567), "2.71235");
        assert_eq!(fmt_g6(123456.7), "123457");
        assert_eq!(fmt_g6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g6(0.0001), "0.0001");
        assert_eq!(fmt_g6(0.00001234), "1.234e-05");
        assert_eq!(fmt_g6(-2.5), "-2.5");
        assert_eq!(fmt_g6(999999.5), "1e+06");
    }

    #[test]
    fn mean_of_summaries() {
        let mk = |v: f64| {
            let mut p = LagProfile::new(2).unwrap();
            p.add(0, &DepthMetrics { absrel: v, rmse: v, delta1: v }, v, v).unwrap();
            p.add(1, &DepthMetrics { absrel: 2.0 * v, rmse: v, delta1: v }, v, v).unwrap();
            p.cycle_average().unwrap()
        };
        let m = Summary::mean_of(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(m.row(1).unwrap().absrel, 4.0);
        assert_eq!(m.row(0).unwrap().count, 2);
        assert!(Summary::mean_of(&[]).is_none());
    }

    proptest! {
        #[test]
        fn alignment_beats_candidates(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (random(&mut rng, 5, 5), random(&mut rng, 5, 5));
            let best = align_lsq(&p, &g).unwrap();
            let res = |m: &DepthMap| m.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let r0 = res(&best);
            for _ in 0..100 {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                prop_assert!(r0 <= res(&p.map(|v| a * v + b)) + 1e-12);
            }
        }

        #[test]
        fn delta1_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4));
            prop_assert_eq!(delta1(&p, &g).unwrap(), delta1(&g, &p).unwrap());
        }

        #[test]
        fn zero_iff_equal(seed in any::<u64>(), i in 0usize..16, d in 1e-6f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random(&mut rng, 4, 4);
            let mut p = g.clone();
            p.data_mut()[i] += d;
            prop_assert!(absrel(&p, &g).unwrap() > 0.0);
            prop_assert!(rmse(&p, &g).unwrap() > 0.0);
            prop_assert_eq!(absrel(&g, &g).unwrap(), 0.0);
        }
    }
}
