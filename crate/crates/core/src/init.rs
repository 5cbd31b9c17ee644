//! Random initializations: every neuron's weight vector is drawn independently
//! from a spherically symmetric distribution.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nets::{DeepParams, HiddenLayer, TwoLayerParams};
use crate::rng::{trial_stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    GaussianIid { scale: f64 },
    UniformSphere { radius: f64 },
}

impl InitKind {
    fn validate(&self) -> Result<()> {
        let (name, x) = match *self {
            InitKind::GaussianIid { scale } => ("scale", scale),
            InitKind::UniformSphere { radius } => ("radius", radius),
        };
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Invalid(format!("{name} must be positive and finite, got {x}")));
        }
        Ok(())
    }

    /// One draw of a `dim`-dimensional neuron vector.
    pub fn draw(&self, dim: usize, rng: &mut StreamRng) -> Vec<f64> {
        match *self {
            InitKind::GaussianIid { scale } => (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            InitKind::UniformSphere { radius } => loop {
                let g: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break g.into_iter().map(|v| radius * v / norm).collect();
                }
            },
        }
    }
}

/// An initialization distribution plus the seed all its streams derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitDistribution {
    #[serde(flatten)]
    pub kind: InitKind,
    pub seed: u64,
}

impl InitDistribution {
    pub fn gaussian(scale: f64, seed: u64) -> Self {
        InitDistribution {
            kind: InitKind::GaussianIid { scale },
            seed,
        }
    }

    pub fn sphere(radius: f64, seed: u64) -> Self {
        InitDistribution {
            kind: InitKind::UniformSphere { radius },
            seed,
        }
    }
}

/// Draws `(W, v)` from the stream `init/trial/<stream>` of the distribution's seed.
pub fn sample_two_layer(dist: &InitDistribution, n: usize, d: usize, stream: u64) -> Result<TwoLayerParams> {
    let mut rng = trial_stream(dist.seed, stream);
    sample_two_layer_from(&dist.kind, n, d, &mut rng)
}

pub fn sample_two_layer_from(kind: &InitKind, n: usize, d: usize, rng: &mut StreamRng) -> Result<TwoLayerParams> {
    kind.validate()?;
    if n == 0 || d == 0 {
        return Err(Error::Invalid(format!("need n, d >= 1, got n = {n}, d = {d}")));
    }
    let mut w = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = kind.draw(d, rng);
        for (j, x) in row.into_iter().enumerate() {
            w[(i, j)] = x;
        }
    }
    let v = DVector::from_fn(n, |_, _| kind.draw(1, rng)[0]);
    TwoLayerParams::new(w, v)
}

/// Draws a deep net with layer widths `[d, n_1, ..., n_{h-1}, k]`.
pub fn sample_deep(dist: &InitDistribution, layer_sizes: &[usize], stream: u64) -> Result<DeepParams> {
    let mut rng = trial_stream(dist.seed, stream);
    sample_deep_from(&dist.kind, layer_sizes, &mut rng)
}

pub fn sample_deep_from(kind: &InitKind, layer_sizes: &[usize], rng: &mut StreamRng) -> Result<DeepParams> {
    kind.validate()?;
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::Invalid(format!(
            "layer sizes {layer_sizes:?} need at least input and output widths, all positive"
        )));
    }
    let h = layer_sizes.len() - 1;
    let mut hidden = Vec::with_capacity(h - 1);
    for l in 0..h - 1 {
        let (fan_in, width) = (layer_sizes[l], layer_sizes[l + 1]);
        let mut w = DMatrix::zeros(width, fan_in);
        let mut b = DVector::zeros(width);
        for i in 0..width {
            let draw = kind.draw(fan_in + 1, rng);
            for j in 0..fan_in {
                w[(i, j)] = draw[j];
            }
            b[i] = draw[fan_in];
        }
        hidden.push(HiddenLayer { w, b });
    }
    let (fan_in, k) = (layer_sizes[h - 1], layer_sizes[h]);
    let mut out = DMatrix::zeros(k, fan_in);
    for i in 0..k {
        for (j, x) in kind.draw(fan_in, rng).into_iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    DeepParams::new(hidden, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi_square_pvalue, ks_two_sample_pvalue};

    #[test]
    fn same_seed_same_params() {
        let dist = InitDistribution::gaussian(0.7, 42);
        assert_eq!(
            sample_two_layer(&dist, 4, 3, 5).unwrap(),
            sample_two_layer(&dist, 4, 3, 5).unwrap()
        );
        assert_ne!(
            sample_two_layer(&dist, 4, 3, 5).unwrap(),
            sample_two_layer(&dist, 4, 3, 6).unwrap()
        );
        let deep = InitDistribution::sphere(1.0, 9);
        assert_eq!(
            sample_deep(&deep, &[2, 3, 1], 0).unwrap(),
            sample_deep(&deep, &[2, 3, 1], 0).unwrap()
        );
    }

    #[test]
    fn sphere_rows_have_unit_norm() {
        let p = sample_two_layer(&InitDistribution::sphere(1.0, 3), 50, 7, 0).unwrap();
        for row in p.w.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
        assert!(p.v.iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(sample_two_layer(&InitDistribution::gaussian(0.0, 1), 2, 2, 0).is_err());
        assert!(sample_two_layer(&InitDistribution::sphere(-1.0, 1), 2, 2, 0).is_err());
    }

    #[test]
    fn gaussian_signs_are_balanced() {
        let p = sample_two_layer(&InitDistribution::gaussian(1.0, 11), 1000, 100, 0).unwrap();
        let pos = p.w.iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
        assert!((pos - 0.5).abs() < 0.01, "{pos}");
    }

    #[test]
    fn deep_shapes() {
        let p = sample_deep(&InitDistribution::gaussian(1.0, 1), &[2, 3, 1], 0).unwrap();
        assert_eq!(p.hidden.len(), 1);
        assert_eq!(p.hidden[0].w.shape(), (3, 2));
        assert_eq!(p.hidden[0].b.len(), 3);
        assert_eq!(p.output.shape(), (1, 3));
    }

    #[test]
    fn neuron_sign_vectors_are_uniform() {
        // Signs of (w_1, w_2, bias) of the first hidden neuron over 10^4 draws.
        for kind in [InitKind::GaussianIid { scale: 2.0 }, InitKind::UniformSphere { radius: 1.0 }] {
            let mut counts = vec![0u64; 8];
            let mut rng = crate::rng::named_stream(5, "init/sign-test");
            for _ in 0..10_000 {
                let p = sample_deep_from(&kind, &[2, 3, 1], &mut rng).unwrap();
                let l = &p.hidden[0];
                let code = (l.w[(0, 0)] > 0.0) as usize
                    | ((l.w[(0, 1)] > 0.0) as usize) << 1
                    | ((l.b[0] > 0.0) as usize) << 2;
                counts[code] += 1;
            }
            let expected = vec![10_000.0 / 8.0; 8];
            let p = chi_square_pvalue(&counts, &expected);
            assert!(p > 0.001, "{kind:?}: p = {p}");
        }
    }

    #[test]
    fn projections_are_rotation_invariant() {
        let d = 5;
        let u = [1.0, 0.0, 0.0, 0.0, 0.0];
        let s = 1.0 / (d as f64).sqrt();
        let u_rot = [s; 5];
        for kind in [InitKind::GaussianIid { scale: 1.0 }, InitKind::UniformSphere { radius: 3.0 }] {
            let mut rng = crate::rng::named_stream(17, "init/rotation-test");
            let mut a = Vec::with_capacity(10_000);
            let mut b = Vec::with_capacity(10_000);
            for k in 0..20_000 {
                let w = kind.draw(d, &mut rng);
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dir = if k % 2 == 0 { &u } else { &u_rot };
                let c = w.iter().zip(dir.iter()).map(|(x, y)| x * y).sum::<f64>() / norm;
                if k % 2 == 0 {
                    a.push(c);
                } else {
                    b.push(c);
                }
            }
            let p = ks_two_sample_pvalue(&a, &b);
            assert!(p > 0.001, "{kind:?}: p = {p}");
        }
    }
}
