//! Strictly decreasing paths between two parameter vectors: follow any path
//! from `W0` to `W1` and rescale the output layer so the objective tracks a
//! strictly decreasing schedule, then rescale back to `W1`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::{sample_deep, InitDistribution};
use crate::montecarlo::{run_trials, Direction, MCReport};
use crate::nets::{
    objective, objective_at_scale, objective_scale_derivative, Dataset, LossKind, NetParams, PredictionMatrix,
    Targets,
};

pub const DEFAULT_GRID: usize = 1000;
pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_C_MAX: f64 = 1e8;

/// `(1 - lambda/3) L0 + (lambda/3) max(Lzero, L1)`.
pub fn v_schedule(lambda: f64, l0: f64, l_zero: f64, l1: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda = {lambda} is outside [0, 1]")));
    }
    let floor = l_zero.max(l1);
    if !(l0 > floor) {
        return Err(Error::Invalid(format!(
            "schedule needs L0 > max(L(0), L1), got L0 = {l0}, max = {floor}"
        )));
    }
    Ok((1.0 - lambda / 3.0) * l0 + (lambda / 3.0) * floor)
}

/// Smallest `c` in `1, 2, 4, ...` up to `c_max` with `L(c P) >= L0 + eps`.
pub fn condition1_margin(
    loss: LossKind,
    p: &PredictionMatrix,
    targets: &Targets,
    l0: f64,
    eps: f64,
    c_max: f64,
) -> Option<f64> {
    let goal = l0 + eps;
    let mut c = 1.0;
    while c <= c_max {
        match objective_at_scale(loss, p, targets, c) {
            Ok(v) if v >= goal => return Some(c),
            Ok(_) => {}
            Err(_) => return None,
        }
        c *= 2.0;
    }
    None
}

/// Minimizer of a convex function on `[lo, hi]` by ternary search.
fn convex_argmin(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Root of `f(c) = v` on the increasing branch `[c_min, hi]` of a convex `f`.
fn increasing_root(f: &dyn Fn(f64) -> f64, v: f64, hi: f64) -> Result<f64> {
    let f_hi = f(hi);
    if !(f_hi > v) {
        return Err(Error::Bracket(format!("L(c_hi P) > v fails: L({hi} P) = {f_hi}, v = {v}")));
    }
    let c_min = convex_argmin(f, 0.0, hi);
    let f_min = f(c_min).min(f(0.0));
    if !(f_min < v) {
        return Err(Error::Bracket(format!(
            "min_c L(c P) < v fails: minimum {f_min} at c = {c_min}, v = {v}"
        )));
    }
    let (mut lo, mut hi) = if f(c_min) < v { (c_min, hi) } else { (0.0, hi) };
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if (f(lo) - v).abs() <= (f(hi) - v).abs() { lo } else { hi })
}

/// Solves `L(c P) = v` for `c` in `(0, c_hi)` on the branch where `c -> L(c P)`
/// increases.
pub fn rescale_root_find(
    loss: LossKind,
    p: &PredictionMatrix,
    targets: &Targets,
    v: f64,
    c_hi: f64,
) -> Result<f64> {
    if !(c_hi > 0.0) || !c_hi.is_finite() {
        return Err(Error::Invalid(format!("c_hi must be positive and finite, got {c_hi}")));
    }
    objective(loss, p, targets)?;
    let f = |c: f64| objective_at_scale(loss, p, targets, c).unwrap_or(f64::INFINITY);
    increasing_root(&f, v, c_hi)
}

#[derive(Debug, Clone)]
pub struct PathSpec {
    pub start: NetParams,
    pub end: NetParams,
    /// Parameters at `lambda = i / grid`, `i = 0..=grid`; straight-line
    /// interpolation when absent.
    pub waypoints: Option<Vec<NetParams>>,
    pub grid: usize,
    pub eps: f64,
}

impl PathSpec {
    pub fn straight(start: NetParams, end: NetParams) -> Self {
        PathSpec {
            start,
            end,
            waypoints: None,
            grid: DEFAULT_GRID,
            eps: DEFAULT_EPS,
        }
    }

    fn params_at(&self, i: usize) -> Result<NetParams> {
        match &self.waypoints {
            Some(w) => Ok(w[i].clone()),
            None if i == self.grid => Ok(self.end.clone()),
            None => self.start.lerp(&self.end, i as f64 / self.grid as f64),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSample {
    pub lambda: f64,
    pub c_tilde: f64,
    pub target: f64,
    pub objective: f64,
    #[serde(skip)]
    pub params: NetParams,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FinalSample {
    pub c: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonePathResult {
    pub samples: Vec<PathSample>,
    pub final_segment: Vec<FinalSample>,
    pub l0: f64,
    pub l_zero: f64,
    pub l1: f64,
    /// Scale at which the closing segment stops; 1 unless `c -> L(c P(W1))`
    /// still decreases at `c = 1`.
    pub final_scale: f64,
    pub monotone: bool,
    /// Largest increase between consecutive objective values (negative when
    /// strictly decreasing).
    pub max_violation: f64,
}

impl MonotonePathResult {
    /// All objective values in path order.
    pub fn objectives(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.objective)
            .chain(self.final_segment.iter().map(|s| s.objective))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,lambda,c,target,objective\n");
        for s in &self.samples {
            out.push_str(&format!("path,{:?},{:?},{:?},{:?}\n", s.lambda, s.c_tilde, s.target, s.objective));
        }
        for s in &self.final_segment {
            out.push_str(&format!("rescale,1.0,{:?},,{:?}\n", s.c, s.objective));
        }
        out
    }
}

pub fn build_monotone_path(spec: &PathSpec, loss: LossKind, data: &Dataset) -> Result<MonotonePathResult> {
    if spec.grid == 0 {
        return Err(Error::Invalid("grid resolution must be at least 1".into()));
    }
    if !(spec.eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {}", spec.eps)));
    }
    if let Some(w) = &spec.waypoints {
        if w.len() != spec.grid + 1 {
            return Err(Error::Dimension(format!(
                "{} waypoints for a grid of {} steps",
                w.len(),
                spec.grid
            )));
        }
    }
    let targets = data.targets();
    let p0 = spec.start.predictions(data)?;
    let p1 = spec.end.predictions(data)?;
    let l0 = objective(loss, &p0, targets)?;
    let l1 = objective(loss, &p1, targets)?;
    let l_zero = objective(loss, &PredictionMatrix::zeros(data.m(), p0.0.ncols()), targets)?;
    if !(l0 > l_zero) {
        return Err(Error::Condition2 { l0, l_zero });
    }
    if !(l1 < l0) {
        return Err(Error::NoImprovement { l0, l1 });
    }

    let samples: Vec<PathSample> = (0..=spec.grid)
        .into_par_iter()
        .map(|i| {
            let lambda = i as f64 / spec.grid as f64;
            let params = spec.params_at(i)?;
            let target = v_schedule(lambda, l0, l_zero, l1)?;
            if i == 0 {
                return Ok(PathSample {
                    lambda,
                    c_tilde: 1.0,
                    target,
                    objective: l0,
                    params,
                });
            }
            let p = params.predictions(data)?;
            let c_hi = condition1_margin(loss, &p, targets, l0, spec.eps, DEFAULT_C_MAX).ok_or(
                Error::Condition1 {
                    lambda,
                    c_max: DEFAULT_C_MAX,
                },
            )?;
            let c_tilde = rescale_root_find(loss, &p, targets, target, c_hi)?;
            let rescaled = params.scale_output(c_tilde);
            let obj = objective(loss, &rescaled.predictions(data)?, targets)?;
            Ok(PathSample {
                lambda,
                c_tilde,
                target,
                objective: obj,
                params: rescaled,
            })
        })
        .collect::<Result<_>>()?;

    let c_last = samples.last().map(|s| s.c_tilde).unwrap_or(1.0);
    let final_scale = if objective_scale_derivative(loss, &p1, targets, 1.0)? >= 0.0 {
        1.0
    } else {
        let f = |c: f64| objective_at_scale(loss, &p1, targets, c).unwrap_or(f64::INFINITY);
        increasing_root(&f, l1, c_last)?
    };
    let mut final_segment = Vec::with_capacity(spec.grid);
    for j in 1..=spec.grid {
        let t = j as f64 / spec.grid as f64;
        let c = if j == spec.grid {
            final_scale
        } else {
            (1.0 - t) * c_last + t * final_scale
        };
        final_segment.push(FinalSample {
            c,
            objective: objective_at_scale(loss, &p1, targets, c)?,
        });
    }

    let mut result = MonotonePathResult {
        samples,
        final_segment,
        l0,
        l_zero,
        l1,
        final_scale,
        monotone: false,
        max_violation: f64::NEG_INFINITY,
    };
    let obj = result.objectives();
    result.max_violation = obj.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    result.monotone = result.max_violation < 0.0;
    Ok(result)
}

/// `1/2 (1 - 2^{-n})` for last hidden width `n`.
pub fn condition2_bound(last_hidden_width: usize) -> f64 {
    0.5 * (1.0 - 0.5f64.powi(last_hidden_width as i32))
}

/// Monte Carlo estimate of `P[L(P(W0)) > L(0)]` for deep nets with the given
/// layer widths `[d, n_1, ..., n_{h-1}, k]`.
pub fn check_condition2_probability(
    layer_sizes: &[usize],
    dist: &InitDistribution,
    loss: LossKind,
    data: &Dataset,
    trials: u64,
    workers: usize,
) -> Result<MCReport> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    if layer_sizes.len() < 3 {
        return Err(Error::Invalid("need at least one hidden layer".into()));
    }
    let k = *layer_sizes.last().unwrap();
    let targets = data.targets();
    let l_zero = objective(loss, &PredictionMatrix::zeros(data.m(), k), targets)?;
    let outcomes = run_trials(trials, workers, |i| {
        let params = NetParams::Deep(sample_deep(dist, layer_sizes, i)?);
        let p = params.predictions(data)?;
        let l = objective(loss, &p, targets)?;
        Ok((l > l_zero, format!("L0={l:?};nonzero={}", !p.is_zero())))
    })?;
    let nonzero = outcomes.iter().filter(|o| o.detail.ends_with("nonzero=true")).count();
    let bound = condition2_bound(layer_sizes[layer_sizes.len() - 2]);
    let mut report = MCReport::from_outcomes("prop1", bound, Direction::Lower, dist.seed, &outcomes);
    report.extra.insert("loss".into(), loss.name().into());
    report.extra.insert("L_zero".into(), l_zero.into());
    report
        .extra
        .insert("nonzero_fraction".into(), (nonzero as f64 / trials as f64).into());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::TwoLayerParams;
    use nalgebra::DMatrix;

    #[test]
    fn schedule_values() {
        assert_eq!(v_schedule(0.0, 4.0, 1.0, 0.0).unwrap(), 4.0);
        assert!((v_schedule(1.0, 4.0, 1.0, 0.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(v_schedule(0.5, 1.0, 1.0, 0.0).is_err());
        assert!(v_schedule(1.5, 4.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn margin_examples() {
        let p = PredictionMatrix(DMatrix::from_element(1, 1, 1.0));
        let y = Targets::Scalar(vec![0.0]);
        assert_eq!(condition1_margin(LossKind::Squared, &p, &y, 0.5, 0.1, 1e8), Some(1.0));
        let zero = PredictionMatrix::zeros(1, 1);
        let y1 = Targets::Scalar(vec![1.0]);
        assert_eq!(condition1_margin(LossKind::Squared, &zero, &y1, 1.0, 0.1, 1e8), None);
        // Argmax on the wrong class: scaling up makes the loss grow without bound.
        let wrong = PredictionMatrix(DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 1.0]));
        let labels = Targets::Classes { labels: vec![1], classes: 3 };
        let c = condition1_margin(LossKind::CrossEntropy, &wrong, &labels, 5.0, 0.1, 1e8).unwrap();
        assert!(c > 1.0 && c.is_finite());
    }

    #[test]
    fn root_on_increasing_branch() {
        let p = PredictionMatrix(DMatrix::from_element(1, 1, 1.0));
        let y = Targets::Scalar(vec![2.0]);
        let c = rescale_root_find(LossKind::Squared, &p, &y, 1.0, 10.0).unwrap();
        assert!((c - 3.0).abs() < 1e-12);
        assert!(matches!(
            rescale_root_find(LossKind::Squared, &p, &y, 100.0, 10.0),
            Err(Error::Bracket(_))
        ));
        assert!(matches!(
            rescale_root_find(LossKind::Squared, &p, &y, -1.0, 10.0),
            Err(Error::Bracket(_))
        ));
    }

    #[test]
    fn root_reproduces_unit_scale() {
        let p = PredictionMatrix(DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]));
        let y = Targets::Scalar(vec![0.2, 0.3, -0.1]);
        let v = objective(LossKind::Squared, &p, &y).unwrap();
        let c = rescale_root_find(LossKind::Squared, &p, &y, v, 10.0).unwrap();
        assert!((c - 1.0).abs() < 1e-10);
    }

    fn single_point() -> Dataset {
        Dataset::scalar(DMatrix::from_element(1, 1, 1.0), vec![1.0]).unwrap()
    }

    #[test]
    fn width_one_path_matches_closed_form() {
        let data = single_point();
        let start = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[3.0]).unwrap());
        let end = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[1.5]).unwrap());
        let spec = PathSpec {
            grid: 50,
            ..PathSpec::straight(start, end)
        };
        let r = build_monotone_path(&spec, LossKind::Squared, &data).unwrap();
        assert!(r.monotone, "{}", r.max_violation);
        assert_eq!(r.samples[0].c_tilde, 1.0);
        for s in &r.samples[1..] {
            // Output before rescaling is 3 - 1.5 lambda; L(c P) = (c p - 1)^2.
            let p = 3.0 - 1.5 * s.lambda;
            let c = (1.0 + s.target.sqrt()) / p;
            assert!((s.c_tilde - c).abs() < 1e-8);
        }
        let last = r.final_segment.last().unwrap();
        assert_eq!(last.c, 1.0);
        assert!((last.objective - 0.25).abs() < 1e-15);
    }

    #[test]
    fn closing_segment_stops_on_increasing_branch() {
        let data = single_point();
        let start = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[3.0]).unwrap());
        // L(c * 0.5) = (0.5 c - 1)^2 still decreases at c = 1.
        let end = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[0.5]).unwrap());
        let r = build_monotone_path(&PathSpec { grid: 100, ..PathSpec::straight(start, end) }, LossKind::Squared, &data).unwrap();
        assert!(r.monotone);
        assert!((r.final_scale - 3.0).abs() < 1e-12);
        assert!((r.final_segment.last().unwrap().objective - r.l1).abs() < 1e-12);
    }

    #[test]
    fn path_errors() {
        let data = single_point();
        let good = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[1.0]).unwrap());
        let bad = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[3.0]).unwrap());
        let flipped = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[-1.0]).unwrap());
        assert!(matches!(
            build_monotone_path(&PathSpec::straight(bad.clone(), flipped), LossKind::Squared, &data),
            Err(Error::NoImprovement { .. })
        ));
        let half = NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[0.5]).unwrap());
        assert!(matches!(
            build_monotone_path(&PathSpec::straight(half, good.clone()), LossKind::Squared, &data),
            Err(Error::Condition2 { .. })
        ));
        // Passing through zero output fails condition 1 at lambda = 3/4.
        let spec = PathSpec {
            grid: 4,
            ..PathSpec::straight(bad, NetParams::TwoLayer(TwoLayerParams::from_rows(&[vec![1.0]], &[-1.0]).unwrap()))
        };
        let data2 = Dataset::scalar(DMatrix::from_element(1, 1, 1.0), vec![-0.9]).unwrap();
        match build_monotone_path(&spec, LossKind::Squared, &data2) {
            Err(Error::Condition1 { lambda, .. }) => assert_eq!(lambda, 0.75),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn condition2_bounds() {
        assert_eq!(condition2_bound(1), 0.25);
        assert!((condition2_bound(6) - 0.4921875).abs() < 1e-15);
        assert_eq!(condition2_bound(3), 0.4375);
    }
}
