//! Exact basin values on singleton data (every instance has one nonzero
//! coordinate). The objective splits over groups `(j, side)` of instances
//! sharing a coordinate and sign; within a group each neuron is either on or
//! off, so the group prediction is `|x_tj| * q` with `q` ranging over the cone
//! generated by the output signs of the neurons that are on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::{Dataset, LossKind};

use super::SignPattern;

/// A loss `l(p, y)` convex in the prediction `p`.
pub trait ScalarLoss: Sync {
    fn loss(&self, p: f64, y: f64) -> f64;

    /// Unconstrained minimizer of `sum_t l(s_t q, y_t)` over `q`, if known.
    fn closed_form(&self, _scales: &[f64], _targets: &[f64]) -> Option<f64> {
        None
    }
}

pub struct SquaredScalar;

impl ScalarLoss for SquaredScalar {
    fn loss(&self, p: f64, y: f64) -> f64 {
        (p - y) * (p - y)
    }

    fn closed_form(&self, scales: &[f64], targets: &[f64]) -> Option<f64> {
        let num: f64 = scales.iter().zip(targets).map(|(s, y)| s * y).sum();
        let den: f64 = scales.iter().map(|s| s * s).sum();
        Some(num / den)
    }
}

/// Absolute loss; minimized by ternary search.
pub struct AbsoluteScalar;

impl ScalarLoss for AbsoluteScalar {
    fn loss(&self, p: f64, y: f64) -> f64 {
        (p - y).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reach {
    Zero,
    NonNegative,
    NonPositive,
    All,
}

impl Reach {
    fn from_signs(pos: bool, neg: bool) -> Self {
        match (pos, neg) {
            (false, false) => Reach::Zero,
            (true, false) => Reach::NonNegative,
            (false, true) => Reach::NonPositive,
            (true, true) => Reach::All,
        }
    }

    fn bounds(self) -> (f64, f64) {
        match self {
            Reach::Zero => (0.0, 0.0),
            Reach::NonNegative => (0.0, f64::INFINITY),
            Reach::NonPositive => (f64::NEG_INFINITY, 0.0),
            Reach::All => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

pub fn is_singleton_dataset(data: &Dataset) -> bool {
    data.x()
        .row_iter()
        .all(|r| r.iter().filter(|&&v| v != 0.0).count() == 1)
}

/// Instances grouped by `(coordinate, positive side)`, with their scales `|x_tj|`.
fn groups(data: &Dataset) -> Result<BTreeMap<(usize, bool), Vec<usize>>> {
    let mut out: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for (t, row) in data.x().row_iter().enumerate() {
        let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
        if nz.len() != 1 {
            return Err(Error::Invalid(format!(
                "instance {t} has {} nonzero coordinates; the exact oracle needs singletons",
                nz.len()
            )));
        }
        let j = nz[0];
        out.entry((j, row[j] > 0.0)).or_default().push(t);
    }
    Ok(out)
}

/// Minimizes a convex function of one variable on `[lo, hi]` (either end may
/// be infinite) by bracketing then ternary search.
fn minimize_convex(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let mut a = lo;
    let mut b = hi;
    if a.is_infinite() || b.is_infinite() {
        let centre = if a.is_finite() {
            a
        } else if b.is_finite() {
            b
        } else {
            0.0
        };
        let mut step = 1.0;
        if b.is_infinite() {
            let mut prev = f(centre);
            loop {
                let x = centre + step;
                let fx = f(x);
                if fx > prev || step > 1e300 {
                    b = x;
                    break;
                }
                prev = fx;
                step *= 2.0;
            }
        }
        step = 1.0;
        if a.is_infinite() {
            let mut prev = f(centre);
            loop {
                let x = centre - step;
                let fx = f(x);
                if fx > prev || step > 1e300 {
                    a = x;
                    break;
                }
                prev = fx;
                step *= 2.0;
            }
        }
    }
    for _ in 0..400 {
        if b - a <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) <= f(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let x = 0.5 * (a + b);
    f(x).min(f(lo.max(a))).min(f(hi.min(b)))
}

fn group_minimum(loss: &dyn ScalarLoss, scales: &[f64], targets: &[f64], reach: Reach) -> f64 {
    let eval = |q: f64| -> f64 {
        scales
            .iter()
            .zip(targets)
            .map(|(s, y)| loss.loss(s * q, *y))
            .sum()
    };
    let (lo, hi) = reach.bounds();
    if reach == Reach::Zero {
        return eval(0.0);
    }
    match loss.closed_form(scales, targets) {
        Some(q) => eval(q.clamp(lo, hi)),
        None => minimize_convex(eval, lo, hi),
    }
}

/// Exact basin value for a squared-loss singleton dataset.
pub fn singleton_basin_oracle(pattern: &SignPattern, data: &Dataset, loss: LossKind) -> Result<f64> {
    match loss {
        LossKind::Squared => singleton_basin_oracle_with(pattern, data, &SquaredScalar),
        LossKind::CrossEntropy => Err(Error::UnsupportedLoss {
            loss: loss.name(),
            context: "singleton oracle: two-layer nets have scalar outputs".into(),
        }),
    }
}

/// Exact basin value for any convex scalar loss.
///
/// A neuron is on for a group when its pattern row is `+1` on every instance of
/// the group; neurons with `b_i = 0` contribute nothing.
pub fn singleton_basin_oracle_with(pattern: &SignPattern, data: &Dataset, loss: &dyn ScalarLoss) -> Result<f64> {
    if pattern.m() != data.m() {
        return Err(Error::Dimension(format!(
            "pattern covers {} instances but the dataset has {}",
            pattern.m(),
            data.m()
        )));
    }
    let y = data.scalar_targets("singleton oracle")?;
    let mut total = 0.0;
    for ((j, _), ts) in groups(data)? {
        let mut pos = false;
        let mut neg = false;
        for i in 0..pattern.n() {
            if ts.iter().all(|&t| pattern.a(i, t) == 1) {
                match pattern.b(i) {
                    1 => pos = true,
                    -1 => neg = true,
                    _ => {}
                }
            }
        }
        let scales: Vec<f64> = ts.iter().map(|&t| data.x()[(t, j)].abs()).collect();
        let targets: Vec<f64> = ts.iter().map(|&t| y[t]).collect();
        total += group_minimum(loss, &scales, &targets, Reach::from_signs(pos, neg));
    }
    Ok(total / data.m() as f64)
}

/// Smallest basin value over all width-`n` two-layer nets on singleton data
/// under the squared loss.
///
/// For a fixed output-sign vector the coordinates decouple, since each neuron
/// picks the side of every coordinate independently; we enumerate sign
/// vectors up to symmetry and, per coordinate, every side assignment.
pub fn singleton_alpha(data: &Dataset, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("width must be at least 1".into()));
    }
    let y = data.scalar_targets("singleton alpha")?;
    let grouped = groups(data)?;
    let group_value = |j: usize, side: bool, reach: Reach| -> f64 {
        match grouped.get(&(j, side)) {
            None => 0.0,
            Some(ts) => {
                let scales: Vec<f64> = ts.iter().map(|&t| data.x()[(t, j)].abs()).collect();
                let targets: Vec<f64> = ts.iter().map(|&t| y[t]).collect();
                group_minimum(&SquaredScalar, &scales, &targets, reach)
            }
        }
    };
    // Only the counts of positive and negative output signs matter.
    let mut best = f64::INFINITY;
    for n_pos in 0..=n {
        let n_neg = n - n_pos;
        let mut total = 0.0;
        for j in 0..data.d() {
            let mut coord_best = f64::INFINITY;
            for plus_pos in [false, true] {
                for minus_pos in [false, true] {
                    for plus_neg in [false, true] {
                        for minus_neg in [false, true] {
                            // plus_pos: some b = +1 neuron is on for the + side, etc.
                            let pos_needed = plus_pos as usize + minus_pos as usize;
                            let neg_needed = plus_neg as usize + minus_neg as usize;
                            // Each neuron covers exactly one side of coordinate j.
                            let pos_ok = if n_pos == 0 {
                                pos_needed == 0
                            } else {
                                (1..=n_pos).contains(&pos_needed)
                            };
                            let neg_ok = if n_neg == 0 {
                                neg_needed == 0
                            } else {
                                (1..=n_neg).contains(&neg_needed)
                            };
                            if !pos_ok || !neg_ok {
                                continue;
                            }
                            let v = group_value(j, true, Reach::from_signs(plus_pos, plus_neg))
                                + group_value(j, false, Reach::from_signs(minus_pos, minus_neg));
                            coord_best = coord_best.min(v);
                        }
                    }
                }
            }
            total += coord_best;
        }
        best = best.min(total);
    }
    Ok(best / data.m() as f64)
}
