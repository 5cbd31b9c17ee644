//! Sign patterns, the convex z-space form of a basin and basin-value solvers.

mod cone;
mod singleton;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{nnls, null_space};
use crate::nets::{objective, Dataset, LossKind, PredictionMatrix, TwoLayerParams};

use cone::{ConeBlock, ConeOptions, ConeProblem};
pub use singleton::{
    is_singleton_dataset, singleton_alpha, singleton_basin_oracle, singleton_basin_oracle_with,
    AbsoluteScalar, ScalarLoss, SquaredScalar,
};

/// Relative threshold under which a pre-activation counts as zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;
/// Stopping tolerance on the duality gap used when callers have no preference.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Feasibility a successful solve must reach.
pub const FEASIBILITY_TOL: f64 = 1e-10;

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// The `(A, b)` pair fixing `sign<w_j, x_t>` and `sign v_j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignPattern {
    n: usize,
    m: usize,
    a: Vec<i8>,
    b: Vec<i8>,
}

impl SignPattern {
    pub fn new(a: Vec<Vec<i8>>, b: Vec<i8>) -> Result<Self> {
        let n = a.len();
        if n == 0 || n != b.len() {
            return Err(Error::Dimension(format!(
                "pattern has {n} rows of A but {} entries of b",
                b.len()
            )));
        }
        let m = a[0].len();
        if m == 0 || a.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("ragged or empty rows in A".into()));
        }
        let flat: Vec<i8> = a.into_iter().flatten().collect();
        if flat.iter().chain(&b).any(|s| !(-1..=1).contains(s)) {
            return Err(Error::Invalid("pattern entries must lie in {-1, 0, +1}".into()));
        }
        Ok(SignPattern { n, m, a: flat, b })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self, i: usize, t: usize) -> i8 {
        self.a[i * self.m + t]
    }

    pub fn b(&self, i: usize) -> i8 {
        self.b[i]
    }

    pub fn a_rows(&self) -> Vec<Vec<i8>> {
        self.a.chunks(self.m).map(|c| c.to_vec()).collect()
    }

    pub fn b_vec(&self) -> &[i8] {
        &self.b
    }

    /// True when some entry of `A` or `b` is zero.
    pub fn boundary(&self) -> bool {
        self.a.iter().chain(&self.b).any(|&s| s == 0)
    }

    /// Canonical 64-bit digest of `(n, m, A, b)`.
    pub fn hash64(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.m as u64).to_le_bytes());
        h.update(self.a.iter().map(|&s| s as u8).collect::<Vec<u8>>());
        h.update(self.b.iter().map(|&s| s as u8).collect::<Vec<u8>>());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Pattern of the sub-network formed by the neurons in `subset`.
    pub fn restrict(&self, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() || subset.iter().any(|&i| i >= self.n) {
            return Err(Error::Invalid(format!(
                "subset {subset:?} is empty or out of range for {} neurons",
                self.n
            )));
        }
        let a = subset
            .iter()
            .map(|&i| self.a[i * self.m..(i + 1) * self.m].to_vec())
            .collect();
        let b = subset.iter().map(|&i| self.b[i]).collect();
        Self::new(a, b)
    }
}

pub fn extract_sign_pattern(params: &TwoLayerParams, data: &Dataset) -> Result<SignPattern> {
    if params.input_dim() != data.d() {
        return Err(Error::Dimension(format!(
            "W is {}x{} but instances have dimension {}",
            params.width(),
            params.input_dim(),
            data.d()
        )));
    }
    let pre = data.x() * params.w.transpose();
    let xnorm: Vec<f64> = data.x().row_iter().map(|r| r.norm()).collect();
    let a = (0..params.width())
        .map(|i| {
            let wn = params.w.row(i).norm();
            (0..data.m())
                .map(|t| {
                    let z = pre[(t, i)];
                    if z.abs() < ZERO_THRESHOLD * wn * xnorm[t] || z == 0.0 {
                        0
                    } else {
                        sign_of(z)
                    }
                })
                .collect()
        })
        .collect();
    let b = params.v.iter().map(|&v| sign_of(v)).collect();
    SignPattern::new(a, b)
}

/// Halfspace and equality constraints on `z_i = v_i w_i` induced by a pattern,
/// plus the activity sets `sigma_it = 1{a_it = +1}`.
#[derive(Debug, Clone)]
pub struct BasinConstraints {
    pattern: SignPattern,
    d: usize,
}

impl BasinConstraints {
    pub fn new(pattern: &SignPattern, data: &Dataset) -> Result<Self> {
        if pattern.m() != data.m() {
            return Err(Error::Dimension(format!(
                "pattern covers {} instances but the dataset has {}",
                pattern.m(),
                data.m()
            )));
        }
        Ok(BasinConstraints {
            pattern: pattern.clone(),
            d: data.d(),
        })
    }

    pub fn pattern(&self) -> &SignPattern {
        &self.pattern
    }

    pub fn active(&self, i: usize, t: usize) -> bool {
        self.pattern.a(i, t) == 1
    }

    /// Rows `b_i a_it x_t` that must have non-negative inner product with `z_i`.
    pub fn halfspaces(&self, i: usize, data: &Dataset) -> DMatrix<f64> {
        let b = self.pattern.b(i) as f64;
        let ts: Vec<usize> = (0..data.m()).filter(|&t| self.pattern.a(i, t) != 0).collect();
        DMatrix::from_fn(ts.len(), self.d, |r, c| {
            b * self.pattern.a(i, ts[r]) as f64 * data.x()[(ts[r], c)]
        })
    }

    /// Instances on which `<z_i, x_t>` is pinned to zero.
    pub fn equalities(&self, i: usize, data: &Dataset) -> DMatrix<f64> {
        let ts: Vec<usize> = (0..data.m()).filter(|&t| self.pattern.a(i, t) == 0).collect();
        DMatrix::from_fn(ts.len(), self.d, |r, c| data.x()[(ts[r], c)])
    }

    /// Largest violation of any constraint by `z` (rows are neurons).
    pub fn max_violation(&self, z: &DMatrix<f64>, data: &Dataset) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.pattern.n() {
            let zi = z.row(i);
            if self.pattern.b(i) == 0 {
                worst = worst.max(zi.amax());
                continue;
            }
            for t in 0..data.m() {
                let ip = zi.dot(&data.x().row(t));
                let a = self.pattern.a(i, t);
                let viol = if a == 0 {
                    ip.abs()
                } else {
                    (-(self.pattern.b(i) * a) as f64 * ip).max(0.0)
                };
                worst = worst.max(viol);
            }
        }
        worst
    }
}

/// Predictions `sum_i sigma_it <z_i, x_t>`.
pub fn z_predictions(constraints: &BasinConstraints, z: &DMatrix<f64>, data: &Dataset) -> Result<PredictionMatrix> {
    if z.nrows() != constraints.pattern.n() || z.ncols() != data.d() {
        return Err(Error::Dimension(format!(
            "Z is {}x{} but the pattern needs {}x{}",
            z.nrows(),
            z.ncols(),
            constraints.pattern.n(),
            data.d()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Z".into()));
    }
    let ip = data.x() * z.transpose(); // m×n
    let p = DMatrix::from_fn(data.m(), 1, |t, _| {
        (0..z.nrows())
            .filter(|&i| constraints.active(i, t))
            .map(|i| ip[(t, i)])
            .sum()
    });
    Ok(PredictionMatrix(p))
}

/// The convex in-basin objective as a function of `Z`.
pub fn z_objective(constraints: &BasinConstraints, z: &DMatrix<f64>, data: &Dataset, loss: LossKind) -> Result<f64> {
    let p = z_predictions(constraints, z, data)?;
    objective(loss, &p, data.targets())
}

#[derive(Debug, Clone, Serialize)]
pub struct BasinSolveResult {
    pub value: f64,
    #[serde(skip)]
    pub z_star: DMatrix<f64>,
    pub feasibility_residual: f64,
    pub grad_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Lagrangian dual value at the recovered multipliers.
    pub lower_bound: f64,
    /// Penalized objective at the last homotopy stage.
    pub penalty_lower_bound: f64,
}

impl BasinSolveResult {
    pub fn gap(&self) -> f64 {
        self.value - self.lower_bound
    }

    /// A point of the basin attaining `value`: `w_i = b_i z_i`, `v_i = b_i`.
    pub fn params(&self, pattern: &SignPattern) -> TwoLayerParams {
        let n = pattern.n();
        let mut w = self.z_star.clone();
        let v = DVector::from_fn(n, |i, _| pattern.b(i) as f64);
        for i in 0..n {
            let b = pattern.b(i) as f64;
            w.row_mut(i).scale_mut(b);
        }
        TwoLayerParams { w, v }
    }
}

fn require_squared_scalar(loss: LossKind, data: &Dataset, context: &str) -> Result<Vec<f64>> {
    if loss != LossKind::Squared {
        return Err(Error::UnsupportedLoss {
            loss: loss.name(),
            context: format!("{context}: two-layer nets have scalar outputs"),
        });
    }
    Ok(data.scalar_targets(context)?.to_vec())
}

/// Checks that some `w` realizes neuron `i`'s signs strictly
/// (`a_it <w, x_t> > 0` for `a_it != 0`, `<w, x_t> = 0` otherwise).
/// On failure returns a Farkas certificate `y >= 0` over the strict rows
/// with `sum y = 1` and `sum_t y_t a_it x_t` in the span of the pinned rows.
fn strict_feasibility(pattern: &SignPattern, data: &Dataset, i: usize) -> Option<Vec<f64>> {
    let d = data.d();
    let strict: Vec<usize> = (0..data.m())
        .filter(|&t| pattern.a(i, t) != 0 && data.x().row(t).norm() > 0.0)
        .collect();
    if strict.is_empty() {
        return None;
    }
    let zero: Vec<usize> = (0..data.m()).filter(|&t| pattern.a(i, t) == 0).collect();
    let e = DMatrix::from_fn(zero.len(), d, |r, c| data.x()[(zero[r], c)]);
    let basis = null_space(&e, d);
    let k = basis.ncols();
    let mut g = DMatrix::from_fn(strict.len(), d, |r, c| {
        pattern.a(i, strict[r]) as f64 * data.x()[(strict[r], c)]
    }) * &basis;
    for mut row in g.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    // Least-distance problem: min ||[Gᵀ; 1ᵀ] y - e_{k+1}|| over y >= 0. A zero
    // residual means 0 lies in the convex hull of the rows (infeasible).
    let mut a = DMatrix::zeros(k + 1, strict.len());
    a.view_mut((0, 0), (k, strict.len())).copy_from(&g.transpose());
    a.row_mut(k).fill(1.0);
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let y = nnls(&a, &rhs);
    let res = &a * &y - &rhs;
    if res.norm() > 1e-9 {
        return None;
    }
    let total: f64 = y.sum();
    let mut cert = vec![0.0; data.m()];
    for (r, &t) in strict.iter().enumerate() {
        cert[t] = y[r] / total;
    }
    Some(cert)
}

/// Minimum of the squared loss over the closure of the basin with sign
/// pattern `pattern`, via the convex program in `z`.
pub fn solve_basin_value(pattern: &SignPattern, data: &Dataset, loss: LossKind, tol: f64) -> Result<BasinSolveResult> {
    solve_basin_value_capped(pattern, data, loss, tol, 100_000)
}

pub fn solve_basin_value_capped(
    pattern: &SignPattern,
    data: &Dataset,
    loss: LossKind,
    tol: f64,
    max_iterations: usize,
) -> Result<BasinSolveResult> {
    let y = require_squared_scalar(loss, data, "basin solver")?;
    let constraints = BasinConstraints::new(pattern, data)?;
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    for i in 0..pattern.n() {
        if let Some(certificate) = strict_feasibility(pattern, data, i) {
            return Err(Error::EmptyBasin { neuron: i, certificate });
        }
    }
    let d = data.d();
    let m = data.m();
    let mut bases = Vec::with_capacity(pattern.n());
    let mut blocks = Vec::new();
    let mut owners = Vec::new();
    for i in 0..pattern.n() {
        if pattern.b(i) == 0 {
            bases.push(DMatrix::zeros(d, 0));
            continue;
        }
        let basis = null_space(&constraints.equalities(i, data), d);
        let rows = constraints.halfspaces(i, data) * &basis;
        blocks.push(ConeBlock::new(rows));
        owners.push(i);
        bases.push(basis);
    }
    let total: usize = owners.iter().map(|&i| bases[i].ncols()).sum();
    let mut mmat = DMatrix::zeros(m, total);
    let mut col = 0;
    for &i in &owners {
        let k = bases[i].ncols();
        for t in 0..m {
            if constraints.active(i, t) {
                let row = data.x().row(t) * &bases[i];
                mmat.view_mut((t, col), (1, k)).copy_from(&row);
            }
        }
        col += k;
    }
    let problem = ConeProblem {
        blocks,
        m: mmat,
        r: DVector::from_vec(y),
        weight: 1.0 / m as f64,
    };
    let sol = problem.solve(&ConeOptions { max_iterations });
    let mut z = DMatrix::zeros(pattern.n(), d);
    let mut col = 0;
    for &i in &owners {
        let k = bases[i].ncols();
        let zi = &bases[i] * sol.u.rows(col, k);
        z.row_mut(i).copy_from(&zi.transpose());
        col += k;
    }
    let value = z_objective(&constraints, &z, data, loss)?;
    let feasibility_residual = constraints.max_violation(&z, data);
    let lower_bound = sol.lower_bound.min(value);
    let converged = !sol.hit_cap
        && value - lower_bound <= tol
        && sol.grad_residual <= tol
        && feasibility_residual <= FEASIBILITY_TOL;
    Ok(BasinSolveResult {
        value,
        z_star: z,
        feasibility_residual,
        grad_residual: sol.grad_residual,
        iterations: sol.iterations,
        converged,
        lower_bound,
        penalty_lower_bound: sol.penalty_lower_bound,
    })
}

/// Euclidean projection of `target` onto the closed cone of directions `w`
/// whose signs on the instances agree with `signs` (`signs[t] <w, x_t> >= 0`,
/// and `<w, x_t> = 0` where `signs[t] == 0`).
pub fn project_onto_sign_cone(target: &DVector<f64>, signs: &[i8], x: &DMatrix<f64>) -> DVector<f64> {
    let d = x.ncols();
    let eq: Vec<usize> = (0..x.nrows()).filter(|&t| signs[t] == 0).collect();
    let ineq: Vec<usize> = (0..x.nrows()).filter(|&t| signs[t] != 0).collect();
    let e = DMatrix::from_fn(eq.len(), d, |r, c| x[(eq[r], c)]);
    let basis = null_space(&e, d);
    let g = DMatrix::from_fn(ineq.len(), d, |r, c| signs[ineq[r]] as f64 * x[(ineq[r], c)]) * &basis;
    let problem = ConeProblem {
        blocks: vec![ConeBlock::new(g)],
        m: basis.clone(),
        r: target.clone(),
        weight: 1.0,
    };
    let sol = problem.solve(&ConeOptions::default());
    &basis * sol.u
}

/// Basin values of the full network and of the sub-network on `subset`.
#[derive(Debug, Clone, Serialize)]
pub struct KeyLemmaReport {
    pub full_value: f64,
    pub subset_value: f64,
    pub exact: bool,
    pub holds: bool,
}

/// Compares the basin value of `params` with that of the sub-network on
/// `subset`. Singleton datasets use the exact oracle, everything else the
/// numerical solver with tolerance `tol`.
pub fn key_lemma_check(
    params: &TwoLayerParams,
    subset: &[usize],
    data: &Dataset,
    loss: LossKind,
    tol: f64,
) -> Result<KeyLemmaReport> {
    let full = extract_sign_pattern(params, data)?;
    let sub = full.restrict(subset)?;
    if is_singleton_dataset(data) {
        let full_value = singleton_basin_oracle(&full, data, loss)?;
        let subset_value = singleton_basin_oracle(&sub, data, loss)?;
        return Ok(KeyLemmaReport {
            full_value,
            subset_value,
            exact: true,
            holds: full_value <= subset_value + 1e-12,
        });
    }
    let a = solve_basin_value(&full, data, loss, tol)?;
    let b = solve_basin_value(&sub, data, loss, tol)?;
    for (r, name) in [(&a, "full network"), (&b, "sub-network")] {
        if !r.converged {
            return Err(Error::Invalid(format!(
                "basin solver did not converge for the {name} (gap {:.3e}, iterations {})",
                r.gap(),
                r.iterations
            )));
        }
    }
    Ok(KeyLemmaReport {
        full_value: a.value,
        subset_value: b.value,
        exact: false,
        holds: a.value <= b.value + 2.0 * tol,
    })
}

/// Path that rescales each neuron so the output weights become `sign(v)`,
/// leaving every prediction unchanged. Neurons with `v_i = 0` first have `w_i`
/// sent to zero and then `v_i` sent to +1. Returns `steps + 1` samples per
/// phase, endpoints included.
pub fn second_layer_rescaling_path(params: &TwoLayerParams, steps: usize) -> Result<Vec<TwoLayerParams>> {
    if steps == 0 {
        return Err(Error::Invalid("path needs at least one step".into()));
    }
    let n = params.width();
    let mut path = vec![params.clone()];
    let mut cur = params.clone();
    let zero: Vec<usize> = (0..n).filter(|&i| params.v[i] == 0.0).collect();
    if !zero.is_empty() {
        let start = cur.clone();
        for s in 1..=steps {
            let lam = s as f64 / steps as f64;
            for &i in &zero {
                let row = start.w.row(i) * (1.0 - lam);
                cur.w.row_mut(i).copy_from(&row);
            }
            path.push(cur.clone());
        }
        for s in 1..=steps {
            let lam = s as f64 / steps as f64;
            for &i in &zero {
                cur.v[i] = lam;
            }
            path.push(cur.clone());
        }
    }
    let base = cur.clone();
    for s in 1..=steps {
        let lam = s as f64 / steps as f64;
        let mut next = base.clone();
        for i in 0..n {
            if zero.contains(&i) {
                continue;
            }
            let alpha = 1.0 - lam + lam * base.v[i].abs();
            let row = base.w.row(i) * alpha;
            next.w.row_mut(i).copy_from(&row);
            next.v[i] = base.v[i] / alpha;
        }
        if s == steps {
            for i in 0..n {
                if !zero.contains(&i) {
                    next.v[i] = base.v[i].signum();
                }
            }
        }
        path.push(next);
    }
    Ok(path)
}

/// Interpolates two points of one basin so that `v_i w_i` moves linearly.
pub fn basin_interpolation(
    a: &TwoLayerParams,
    b: &TwoLayerParams,
    lambda: f64,
    data: &Dataset,
) -> Result<TwoLayerParams> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda = {lambda} outside [0, 1]")));
    }
    let pa = extract_sign_pattern(a, data)?;
    let pb = extract_sign_pattern(b, data)?;
    if pa != pb {
        return Err(Error::PatternMismatch(format!(
            "patterns differ (hashes {:016x} and {:016x})",
            pa.hash64(),
            pb.hash64()
        )));
    }
    let n = a.width();
    let mut w = DMatrix::zeros(n, a.input_dim());
    let mut v = DVector::zeros(n);
    for i in 0..n {
        let vl = lambda * b.v[i] + (1.0 - lambda) * a.v[i];
        v[i] = vl;
        let row = if a.v[i] == 0.0 && b.v[i] == 0.0 {
            b.w.row(i) * lambda + a.w.row(i) * (1.0 - lambda)
        } else {
            (b.w.row(i) * (lambda * b.v[i]) + a.w.row(i) * ((1.0 - lambda) * a.v[i])) / vl
        };
        w.row_mut(i).copy_from(&row);
    }
    TwoLayerParams::new(w, v)
}

/// Scalar targets helper used by tests and experiments.
pub fn squared_loss_at_zero(data: &Dataset) -> Result<f64> {
    objective(LossKind::Squared, &PredictionMatrix::zeros(data.m(), 1), data.targets())
}
