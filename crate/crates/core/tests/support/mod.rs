//! Independent reference implementations used to check the library.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relu_landscape::basins::SignPattern;
use relu_landscape::{Dataset, TwoLayerParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, so the oracles do not share the library's sampling code.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Plain loops over neurons and coordinates.
pub fn loop_forward(w: &[Vec<f64>], v: &[f64], x: &[f64]) -> f64 {
    let mut out = 0.0;
    for (wi, vi) in w.iter().zip(v) {
        let mut pre = 0.0;
        for j in 0..x.len() {
            pre += wi[j] * x[j];
        }
        if pre > 0.0 {
            out += vi * pre;
        }
    }
    out
}

pub fn loop_objective(w: &[Vec<f64>], v: &[f64], x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let m = x.nrows();
    let mut total = 0.0;
    for t in 0..m {
        let xt: Vec<f64> = x.row(t).iter().copied().collect();
        let r = loop_forward(w, v, &xt) - y[t];
        total += r * r;
    }
    total / m as f64
}

/// The basin's optimization problem written out directly: variables `z_i`
/// for neurons with `b_i != 0`, each confined to its sign cone.
pub struct BasinProblem {
    pub neurons: Vec<usize>,
    pub d: usize,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub a: Vec<Vec<i8>>,
    pub b: Vec<i8>,
}

impl BasinProblem {
    pub fn new(pattern: &SignPattern, data: &Dataset) -> Self {
        let neurons = (0..pattern.n()).filter(|&i| pattern.b(i) != 0).collect();
        BasinProblem {
            neurons,
            d: data.d(),
            x: data.x().clone(),
            y: data.targets().as_scalar().expect("scalar targets").to_vec(),
            a: pattern.a_rows(),
            b: pattern.b_vec().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.neurons.len() * self.d
    }

    /// Largest violation of the sign constraints at `z`.
    pub fn violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, &i) in self.neurons.iter().enumerate() {
            for t in 0..self.x.nrows() {
                let pre: f64 = (0..self.d).map(|j| z[k * self.d + j] * self.x[(t, j)]).sum();
                let s = self.a[i][t] as f64 * self.b[i] as f64;
                let v = if self.a[i][t] == 0 { pre.abs() } else { (-s * pre).max(0.0) };
                worst = worst.max(v);
            }
        }
        worst
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let m = self.x.nrows();
        let mut total = 0.0;
        for t in 0..m {
            let mut p = 0.0;
            for (k, &i) in self.neurons.iter().enumerate() {
                if self.a[i][t] == 1 {
                    p += (0..self.d).map(|j| z[k * self.d + j] * self.x[(t, j)]).sum::<f64>();
                }
            }
            total += (p - self.y[t]).powi(2);
        }
        total / m as f64
    }
}

/// Grid search with repeated zooming around the best feasible point.
pub fn grid_oracle(problem: &BasinProblem, radius: f64) -> f64 {
    let k = problem.dim();
    if k == 0 {
        return problem.value(&[]);
    }
    let mut center = vec![0.0; k];
    let mut best = problem.value(&center);
    let mut half = radius;
    let points = if k <= 2 { 41 } else { 13 };
    for _ in 0..120 {
        let mut improved_center = center.clone();
        let mut idx = vec![0usize; k];
        loop {
            let z: Vec<f64> = (0..k)
                .map(|j| center[j] - half + 2.0 * half * idx[j] as f64 / (points - 1) as f64)
                .collect();
            if problem.violation(&z) == 0.0 {
                let v = problem.value(&z);
                if v < best {
                    best = v;
                    improved_center = z;
                }
            }
            let mut j = 0;
            while j < k {
                idx[j] += 1;
                if idx[j] < points {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == k {
                break;
            }
        }
        center = improved_center;
        half *= 0.7;
        if half < 1e-9 {
            break;
        }
    }
    best
}

pub fn params_from(w: &[Vec<f64>], v: &[f64]) -> TwoLayerParams {
    TwoLayerParams::from_rows(w, v).unwrap()
}
