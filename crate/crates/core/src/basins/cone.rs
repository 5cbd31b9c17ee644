//! Least squares over a product of polyhedral cones:
//! `min w ||M u - r||^2` subject to `G_i u_i >= 0` for every block `i`.
//!
//! A quadratic-penalty homotopy produces a warm start, which is projected onto
//! the nearly active halfspaces and then polished by a primal active-set method.
//! Multipliers come from NNLS so that degenerate (dependent) active rows are
//! handled without special cases.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{lstsq, lstsq_scaled, nnls, null_space};

/// One block of variables together with its homogeneous inequality rows.
#[derive(Debug, Clone)]
pub(crate) struct ConeBlock {
    /// Inequality rows in block coordinates, `rows · u_i >= 0`. Rows are unit length.
    pub rows: DMatrix<f64>,
}

impl ConeBlock {
    /// Normalizes rows and drops the ones that are numerically zero.
    pub fn new(rows: DMatrix<f64>) -> Self {
        let keep: Vec<usize> = (0..rows.nrows())
            .filter(|&k| rows.row(k).norm() > 1e-14)
            .collect();
        let mut out = rows.select_rows(&keep);
        for mut row in out.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        ConeBlock { rows: out }
    }

    fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConeProblem {
    pub blocks: Vec<ConeBlock>,
    pub m: DMatrix<f64>,
    pub r: DVector<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ConeSolution {
    pub u: DVector<f64>,
    #[allow(dead_code)]
    pub value: f64,
    pub lower_bound: f64,
    pub penalty_lower_bound: f64,
    pub grad_residual: f64,
    pub iterations: usize,
    pub hit_cap: bool,
}

pub(crate) struct ConeOptions {
    pub max_iterations: usize,
}

impl Default for ConeOptions {
    fn default() -> Self {
        ConeOptions {
            max_iterations: 100_000,
        }
    }
}

struct Layout {
    offsets: Vec<usize>,
    total: usize,
}

impl ConeProblem {
    fn layout(&self) -> Layout {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut total = 0;
        for b in &self.blocks {
            offsets.push(total);
            total += b.dim();
        }
        Layout { offsets, total }
    }

    fn value(&self, u: &DVector<f64>) -> f64 {
        self.weight * (&self.m * u - &self.r).norm_squared()
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        self.m.transpose() * (&self.m * u - &self.r) * (2.0 * self.weight)
    }

    /// Slack `rows · u_i` of every constraint, block by block.
    fn slacks(&self, lay: &Layout, u: &DVector<f64>) -> Vec<DVector<f64>> {
        self.blocks
            .iter()
            .zip(&lay.offsets)
            .map(|(b, &o)| &b.rows * u.rows(o, b.dim()))
            .collect()
    }

    pub fn solve(&self, opts: &ConeOptions) -> ConeSolution {
        let lay = self.layout();
        let n = lay.total;
        if n == 0 {
            let v = self.value(&DVector::zeros(0));
            return ConeSolution {
                u: DVector::zeros(0),
                value: v,
                lower_bound: v,
                penalty_lower_bound: v,
                grad_residual: 0.0,
                iterations: 0,
                hit_cap: false,
            };
        }
        let mut iterations = 0;
        let (u_pen, penalty_lower_bound) = self.penalty_phase(&lay, &mut iterations);
        let (mut u, mut working) = self.restore_feasibility(&lay, u_pen);
        let mut hit_cap = false;
        let mut multipliers: Vec<(usize, usize, f64)> = Vec::new();
        let mut residual = DVector::zeros(n);
        let m_norm = self.m.norm();

        loop {
            iterations += 1;
            if iterations > opts.max_iterations {
                hit_cap = true;
                break;
            }
            // Equality-constrained step on the working set.
            let (z, cols) = self.working_basis(&lay, &working);
            let p = if cols == 0 {
                DVector::zeros(n)
            } else {
                let bmat = &self.m * &z;
                let xi = lstsq_scaled(&bmat, &(&self.r - &self.m * &u), m_norm);
                &z * xi
            };
            let unorm = 1.0 + u.norm();
            if p.norm() > 1e-12 * unorm {
                let (alpha, block) = self.ratio_test(&lay, &u, &p, &working);
                u += &p * alpha;
                if let Some((b, k)) = block {
                    working[b][k] = true;
                }
                continue;
            }

            // Stationary on the working set: check KKT over every active row.
            let g = self.gradient(&u);
            let slacks = self.slacks(&lay, &u);
            let act_tol = 1e-12 * unorm;
            let mut active = Vec::new();
            for (b, s) in slacks.iter().enumerate() {
                for k in 0..s.len() {
                    if working[b][k] || s[k] <= act_tol {
                        active.push((b, k));
                    }
                }
            }
            let a = self.active_matrix(&lay, &active);
            let lambda = nnls(&a, &g);
            residual = &g - &a * &lambda;
            multipliers = active
                .iter()
                .zip(lambda.iter())
                .map(|(&(b, k), &l)| (b, k, l))
                .collect();
            let kkt_tol = 1e-11 * (1.0 + g.norm());
            if residual.norm() <= kkt_tol {
                break;
            }
            // Feasible descent direction: every active row has non-negative slope.
            let d = -&residual;
            let dn = d.norm();
            for w in working.iter_mut() {
                w.fill(false);
            }
            let slopes = a.transpose() * &d;
            for (idx, &(b, k)) in active.iter().enumerate() {
                if slopes[idx] <= 1e-12 * dn {
                    working[b][k] = true;
                }
            }
            let md = &self.m * &d;
            let curv = 2.0 * self.weight * md.norm_squared();
            let t_star = if curv > 0.0 {
                residual.norm_squared() / curv
            } else {
                f64::INFINITY
            };
            let (alpha, block) = self.ratio_test_scaled(&lay, &u, &d, &working, t_star);
            if alpha.is_finite() {
                u += &d * alpha;
            }
            if let Some((b, k)) = block {
                working[b][k] = true;
            }
        }

        let value = self.value(&u);
        let lower_bound = self.lagrangian_bound(&lay, &u, value, &multipliers, &residual, penalty_lower_bound);
        ConeSolution {
            u,
            value,
            lower_bound,
            penalty_lower_bound,
            grad_residual: residual.norm(),
            iterations,
            hit_cap,
        }
    }

    fn penalty_objective(&self, lay: &Layout, u: &DVector<f64>, rho: f64) -> f64 {
        let viol: f64 = self
            .slacks(lay, u)
            .iter()
            .flat_map(|s| s.iter().copied())
            .map(|s| if s < 0.0 { s * s } else { 0.0 })
            .sum();
        self.value(u) + 0.5 * rho * viol
    }

    /// Semismooth Newton on the penalized objective for a growing penalty.
    /// Returns the last iterate and the penalized value there.
    fn penalty_phase(&self, lay: &Layout, iterations: &mut usize) -> (DVector<f64>, f64) {
        let n = lay.total;
        let h0 = self.m.transpose() * &self.m * (2.0 * self.weight);
        let scale = h0.diagonal().max().max(1e-300);
        let g0 = (self.m.transpose() * &self.r * (2.0 * self.weight)).norm();
        let mut u = DVector::zeros(n);
        let mut rho = scale;
        let mut bound = self.value(&u);
        for _stage in 0..14 {
            for _ in 0..60 {
                *iterations += 1;
                let slacks = self.slacks(lay, &u);
                let mut grad = self.gradient(&u);
                let mut h = h0.clone();
                for (b, (blk, &o)) in self.blocks.iter().zip(&lay.offsets).enumerate() {
                    let k = blk.dim();
                    for (row, &s) in blk.rows.row_iter().zip(slacks[b].iter()) {
                        if s < 0.0 {
                            let rt = row.transpose();
                            let mut gseg = grad.rows_mut(o, k);
                            gseg += &rt * (rho * s);
                            let mut hseg = h.view_mut((o, o), (k, k));
                            hseg += &rt * row * rho;
                        }
                    }
                }
                if grad.norm() <= 1e-13 * (1.0 + g0) {
                    break;
                }
                // Relative to the current Hessian so its condition number stays
                // bounded as rho grows.
                let ridge = 1e-12 * h.diagonal().max();
                for i in 0..n {
                    h[(i, i)] += ridge;
                }
                let step = match h.clone().cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => lstsq(&h, &(-&grad)),
                };
                let f0 = self.penalty_objective(lay, &u, rho);
                let slope = grad.dot(&step);
                if slope >= 0.0 {
                    break;
                }
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let cand = &u + &step * t;
                    if self.penalty_objective(lay, &cand, rho) <= f0 + 1e-4 * t * slope {
                        u = cand;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted || (&step * t).norm() <= 1e-15 * (1.0 + u.norm()) {
                    break;
                }
            }
            bound = self.penalty_objective(lay, &u, rho);
            let worst = self
                .slacks(lay, &u)
                .iter()
                .flat_map(|s| s.iter().copied())
                .fold(0.0_f64, |acc, s| acc.max(-s));
            if worst <= 1e-10 * (1.0 + u.norm()) {
                break;
            }
            rho *= 10.0;
        }
        (u, bound)
    }

    /// Projects onto the null space of the nearly active rows, adding rows
    /// until the point is feasible.
    fn restore_feasibility(&self, lay: &Layout, mut u: DVector<f64>) -> (DVector<f64>, Vec<Vec<bool>>) {
        let mut working: Vec<Vec<bool>> = Vec::with_capacity(self.blocks.len());
        for (blk, &o) in self.blocks.iter().zip(&lay.offsets) {
            let k = blk.dim();
            let mut ui: DVector<f64> = u.rows(o, k).into_owned();
            let tol = 1e-6 * ui.norm().max(1.0);
            let s = &blk.rows * &ui;
            let mut w: Vec<bool> = s.iter().map(|&v| v <= tol).collect();
            loop {
                let idx: Vec<usize> = (0..w.len()).filter(|&j| w[j]).collect();
                let z = null_space(&blk.rows.select_rows(&idx), k);
                ui = &z * (z.transpose() * &ui);
                let s = &blk.rows * &ui;
                let mut changed = false;
                for j in 0..w.len() {
                    if !w[j] && s[j] < 0.0 {
                        w[j] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            u.rows_mut(o, k).copy_from(&ui);
            working.push(w);
        }
        (u, working)
    }

    /// Block-diagonal orthonormal basis of the working set's null space.
    fn working_basis(&self, lay: &Layout, working: &[Vec<bool>]) -> (DMatrix<f64>, usize) {
        let bases: Vec<DMatrix<f64>> = self
            .blocks
            .iter()
            .zip(working)
            .map(|(blk, w)| {
                let idx: Vec<usize> = (0..w.len()).filter(|&j| w[j]).collect();
                null_space(&blk.rows.select_rows(&idx), blk.dim())
            })
            .collect();
        let cols: usize = bases.iter().map(|b| b.ncols()).sum();
        let mut z = DMatrix::zeros(lay.total, cols);
        let mut c = 0;
        for (b, &o) in bases.iter().zip(&lay.offsets) {
            z.view_mut((o, c), (b.nrows(), b.ncols())).copy_from(b);
            c += b.ncols();
        }
        (z, cols)
    }

    fn ratio_test(
        &self,
        lay: &Layout,
        u: &DVector<f64>,
        p: &DVector<f64>,
        working: &[Vec<bool>],
    ) -> (f64, Option<(usize, usize)>) {
        self.ratio_test_scaled(lay, u, p, working, 1.0)
    }

    /// Largest step in `[0, cap]` along `p` keeping rows outside the working
    /// set feasible, and the row that blocks it.
    fn ratio_test_scaled(
        &self,
        lay: &Layout,
        u: &DVector<f64>,
        p: &DVector<f64>,
        working: &[Vec<bool>],
        cap: f64,
    ) -> (f64, Option<(usize, usize)>) {
        let su = self.slacks(lay, u);
        let sp = self.slacks(lay, p);
        let pn = p.norm();
        let mut alpha = cap;
        let mut block = None;
        for b in 0..self.blocks.len() {
            for k in 0..su[b].len() {
                if working[b][k] {
                    continue;
                }
                let s = sp[b][k];
                if s < -1e-14 * pn {
                    let a = su[b][k].max(0.0) / -s;
                    if a < alpha {
                        alpha = a;
                        block = Some((b, k));
                    }
                }
            }
        }
        (alpha, block)
    }

    fn active_matrix(&self, lay: &Layout, active: &[(usize, usize)]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(lay.total, active.len());
        for (c, &(b, k)) in active.iter().enumerate() {
            let blk = &self.blocks[b];
            let o = lay.offsets[b];
            for j in 0..blk.dim() {
                a[(o + j, c)] = blk.rows[(k, j)];
            }
        }
        a
    }

    /// Lagrangian dual value at the recovered multipliers:
    /// `f(u) - λᵀ(G u) - ½ ρᵀ H⁺ ρ` with ρ the stationarity residual.
    fn lagrangian_bound(
        &self,
        lay: &Layout,
        u: &DVector<f64>,
        value: f64,
        multipliers: &[(usize, usize, f64)],
        residual: &DVector<f64>,
        penalty_bound: f64,
    ) -> f64 {
        let slacks = self.slacks(lay, u);
        let comp: f64 = multipliers.iter().map(|&(b, k, l)| l * slacks[b][k]).sum();
        let mut lb = value - comp;
        if residual.norm() > 0.0 {
            let mt = self.m.transpose();
            let y = lstsq(&mt, residual);
            let miss = (&mt * &y - residual).norm();
            if miss > 1e-9 * (1.0 + residual.norm()) {
                return penalty_bound.min(value);
            }
            lb -= y.norm_squared() / (4.0 * self.weight);
        }
        lb.min(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(rows: &[f64], d: usize, m: &[f64], mrows: usize, r: &[f64]) -> ConeProblem {
        ConeProblem {
            blocks: vec![ConeBlock::new(DMatrix::from_row_slice(rows.len() / d, d, rows))],
            m: DMatrix::from_row_slice(mrows, d, m),
            r: DVector::from_column_slice(r),
            weight: 1.0,
        }
    }

    #[test]
    fn projection_onto_halfplane() {
        // min ||u - (-1, 2)||^2 s.t. u_1 >= 0  ->  u = (0, 2), value 1.
        let p = problem(&[1.0, 0.0], 2, &[1.0, 0.0, 0.0, 1.0], 2, &[-1.0, 2.0]);
        let s = p.solve(&ConeOptions::default());
        assert!((s.u[0]).abs() < 1e-12 && (s.u[1] - 2.0).abs() < 1e-12);
        assert!((s.value - 1.0).abs() < 1e-12);
        assert!(s.value - s.lower_bound < 1e-10);
    }

    #[test]
    fn projection_onto_orthant_corner() {
        // min ||u - (-1, -3)||^2 over the nonnegative quadrant -> origin, value 10.
        let p = problem(&[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 0.0, 0.0, 1.0], 2, &[-1.0, -3.0]);
        let s = p.solve(&ConeOptions::default());
        assert!(s.u.norm() < 1e-12);
        assert!((s.value - 10.0).abs() < 1e-12);
        assert!((s.lower_bound - 10.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_duplicate_rows() {
        // Three copies of the same row plus an opposite row force u_1 = 0.
        let p = problem(
            &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0, -1.0, 0.0],
            2,
            &[1.0, 1.0],
            1,
            &[3.0],
        );
        let s = p.solve(&ConeOptions::default());
        assert!(s.u[0].abs() < 1e-12);
        assert!(s.value < 1e-20);
    }

    #[test]
    fn rank_deficient_objective() {
        // One observation of u_1 + u_2 with u in a wedge; the optimum is exact fit.
        let p = problem(&[1.0, -1.0, 0.0, 1.0], 2, &[1.0, 1.0], 1, &[-2.0]);
        let s = p.solve(&ConeOptions::default());
        // u_1 >= u_2 >= 0 implies u_1 + u_2 >= 0, so the best is 0 with value 4.
        assert!((s.value - 4.0).abs() < 1e-10);
        assert!(s.value - s.lower_bound <= 1e-8);
    }
}
