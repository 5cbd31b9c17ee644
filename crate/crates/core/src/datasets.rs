//! Generators and validators for the special datasets: singleton hardness
//! data, full-rank data, clustered data and low-rank realizable data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basins::is_singleton_dataset;
use crate::error::{Error, Result};
use crate::linalg::{rank, singular_values};
use crate::nets::{prediction_matrix_two_layer, Dataset, LossKind, TwoLayerParams};
use crate::rng::StreamRng;

/// Constants recorded alongside a generated dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub d: usize,
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    /// Largest instance norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Smallest cluster-centre norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_targets: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub good_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bad_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingletonHardnessSpec {
    pub d: usize,
    pub eps: f64,
    #[serde(default = "squared")]
    pub loss: LossKind,
}

fn squared() -> LossKind {
    LossKind::Squared
}

/// For each coordinate `j`: `(0.5 e_j, sqrt(2 eps))` and `(-e_j, 1)`.
pub fn gen_singleton_hardness(spec: &SingletonHardnessSpec) -> Result<(Dataset, DatasetMeta)> {
    if spec.loss != LossKind::Squared {
        return Err(Error::UnsupportedLoss {
            loss: spec.loss.name(),
            context: "the explicit hardness construction uses the squared loss".into(),
        });
    }
    if spec.d == 0 {
        return Err(Error::Invalid("d must be at least 1".into()));
    }
    if !(spec.eps > 0.0 && spec.eps < 0.25) {
        return Err(Error::Invalid(format!("eps must lie in (0, 1/4), got {}", spec.eps)));
    }
    let d = spec.d;
    let mut x = DMatrix::zeros(2 * d, d);
    let mut y = Vec::with_capacity(2 * d);
    for j in 0..d {
        x[(2 * j, j)] = 0.5;
        y.push((2.0 * spec.eps).sqrt());
        x[(2 * j + 1, j)] = -1.0;
        y.push(1.0);
    }
    let data = Dataset::scalar(x, y)?.with_provenance("singleton");
    let meta = DatasetMeta {
        kind: "singleton".into(),
        d,
        m: 2 * d,
        good_value: Some(spec.eps),
        bad_value: Some(0.5),
        ..Default::default()
    };
    Ok((data, meta))
}

pub fn validate_singleton(data: &Dataset) -> Result<()> {
    if !is_singleton_dataset(data) {
        return Err(Error::Invalid("some instance is not a singleton".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRankSpec {
    pub m: usize,
    pub d: usize,
    /// Defaults to i.i.d. standard normal targets.
    #[serde(default)]
    pub targets: Option<Vec<f64>>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn extreme_singular_values(x: &DMatrix<f64>) -> (f64, f64) {
    let sv = singular_values(x);
    (*sv.last().unwrap_or(&0.0), *sv.first().unwrap_or(&0.0))
}

pub fn gen_fullrank(spec: &FullRankSpec, rng: &mut StreamRng) -> Result<(Dataset, DatasetMeta)> {
    if spec.m == 0 || spec.d == 0 {
        return Err(Error::Invalid("m and d must be positive".into()));
    }
    if spec.m > spec.d {
        return Err(Error::Invalid(format!("full rank needs m <= d, got m = {} > d = {}", spec.m, spec.d)));
    }
    if let Some(t) = &spec.targets {
        if t.len() != spec.m {
            return Err(Error::Dimension(format!("{} targets for m = {}", t.len(), spec.m)));
        }
    }
    loop {
        let x = gaussian_matrix(spec.m, spec.d, rng);
        let (smin, smax) = extreme_singular_values(&x);
        if smin <= 1e-8 * smax {
            continue;
        }
        let y = match &spec.targets {
            Some(t) => t.clone(),
            None => (0..spec.m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        let data = Dataset::scalar(x, y)?.with_provenance("fullrank");
        let meta = DatasetMeta {
            kind: "fullrank".into(),
            d: spec.d,
            m: spec.m,
            rank: Some(spec.m),
            sigma_min: Some(smin),
            sigma_max: Some(smax),
            ..Default::default()
        };
        return Ok((data, meta));
    }
}

pub fn validate_fullrank(data: &Dataset) -> Result<()> {
    let (smin, smax) = extreme_singular_values(data.x());
    if data.m() > data.d() || smin <= 1e-8 * smax {
        return Err(Error::Invalid(format!(
            "instance matrix is not of full row rank (sigma_min = {smin:e}, sigma_max = {smax:e})"
        )));
    }
    Ok(())
}

/// Largest allowed ratio `delta_j / ||c_j||`: `2 sin(sqrt(2 pi) / (16 d sqrt d))`.
pub fn cluster_radius_bound(d: usize) -> f64 {
    let df = d as f64;
    2.0 * ((2.0 * std::f64::consts::PI).sqrt() / (16.0 * df * df.sqrt())).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredSpec {
    pub d: usize,
    pub k: usize,
    pub points_per_cluster: usize,
    /// Lower bound `c` on the centre norms; default centres have norms in `[c, 2c]`.
    pub min_center_norm: f64,
    /// Radii as a fraction of the largest allowed radius `bound * ||c_j||`.
    pub radius_fraction: f64,
    pub gamma: f64,
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub cluster_targets: Option<Vec<f64>>,
}

impl Default for ClusteredSpec {
    fn default() -> Self {
        ClusteredSpec {
            d: 10,
            k: 3,
            points_per_cluster: 5,
            min_center_norm: 1.0,
            radius_fraction: 0.1,
            gamma: 1.0,
            centers: None,
            radii: None,
            cluster_targets: None,
        }
    }
}

/// Orthonormal columns spanning a random `k`-dimensional subspace of R^d.
fn random_orthonormal(d: usize, k: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    loop {
        let g = gaussian_matrix(d, k, rng);
        let qr = g.qr();
        let r = qr.r();
        if (0..k).all(|i| r[(i, i)].abs() > 1e-8) {
            return qr.q().columns(0, k).into_owned();
        }
    }
}

fn unit_vector(d: usize, rng: &mut StreamRng) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = g.norm();
        if n > 0.0 {
            return g / n;
        }
    }
}

pub fn gen_clustered(spec: &ClusteredSpec, rng: &mut StreamRng) -> Result<(Dataset, DatasetMeta)> {
    let (d, k) = (spec.d, spec.k);
    if d == 0 || k == 0 || k > d {
        return Err(Error::Invalid(format!("need 1 <= k <= d, got k = {k}, d = {d}")));
    }
    if spec.points_per_cluster == 0 {
        return Err(Error::Invalid("points_per_cluster must be positive".into()));
    }
    if !(spec.gamma >= 0.0) || !(spec.min_center_norm > 0.0) || !(spec.radius_fraction >= 0.0) {
        return Err(Error::Invalid("gamma, radius_fraction >= 0 and min_center_norm > 0 required".into()));
    }
    let centers: Vec<DVector<f64>> = match &spec.centers {
        Some(cs) => {
            if cs.len() != k || cs.iter().any(|c| c.len() != d) {
                return Err(Error::Dimension(format!("expected {k} centres of dimension {d}")));
            }
            cs.iter().map(|c| DVector::from_column_slice(c)).collect()
        }
        None => {
            let q = random_orthonormal(d, k, rng);
            (0..k)
                .map(|j| {
                    let norm = spec.min_center_norm * rng.random_range(1.0..2.0);
                    q.column(j) * norm
                })
                .collect()
        }
    };
    let bound = cluster_radius_bound(d);
    let radii: Vec<f64> = match &spec.radii {
        Some(r) if r.len() == k => r.clone(),
        Some(r) => return Err(Error::Dimension(format!("{} radii for k = {k}", r.len()))),
        None => centers.iter().map(|c| spec.radius_fraction * bound * c.norm()).collect(),
    };
    for (j, (c, &r)) in centers.iter().zip(&radii).enumerate() {
        let ratio = r / c.norm();
        if !(r >= 0.0) || ratio > bound {
            return Err(Error::Invalid(format!(
                "cluster {}: delta/||c|| = {ratio:e} exceeds the bound 2*sin(sqrt(2*pi)/(16*d*sqrt(d))) = {bound:e}",
                j + 1
            )));
        }
    }
    let cmat = DMatrix::from_fn(k, d, |j, i| centers[j][i]);
    let (smin, smax) = extreme_singular_values(&cmat);
    if smin <= 0.0 || rank(&cmat) < k {
        return Err(Error::Invalid("cluster centres are not in general position".into()));
    }
    let yhat: Vec<f64> = match &spec.cluster_targets {
        Some(t) if t.len() == k => t.clone(),
        Some(t) => return Err(Error::Dimension(format!("{} cluster targets for k = {k}", t.len()))),
        None => (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    let m = k * spec.points_per_cluster;
    let mut x = DMatrix::zeros(m, d);
    let mut y = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    for j in 0..k {
        let u = unit_vector(d, rng);
        for _ in 0..spec.points_per_cluster {
            let dir = unit_vector(d, rng);
            let radius = radii[j] * rng.random::<f64>().powf(1.0 / d as f64);
            let p = &centers[j] + dir * radius;
            y.push(yhat[j] + spec.gamma * u.dot(&(&p - &centers[j])));
            x.row_mut(ids.len()).copy_from(&p.transpose());
            ids.push(j + 1);
        }
    }
    let b = x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let c = centers.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
    let data = Dataset::scalar(x, y)?.with_clusters(ids)?.with_provenance("clustered");
    let meta = DatasetMeta {
        kind: "clustered".into(),
        d,
        m,
        rank: None,
        sigma_min: Some(smin),
        sigma_max: Some(smax),
        b: Some(b),
        c: Some(c),
        radii: Some(radii),
        gamma: Some(spec.gamma),
        radius_bound: Some(bound),
        centers: Some(centers.iter().map(|c| c.iter().copied().collect()).collect()),
        cluster_targets: Some(yhat),
        ..Default::default()
    };
    validate_clustered(&data, &meta)?;
    Ok((data, meta))
}

/// Re-checks the clustered-data requirements: radius bound, membership of
/// each point in exactly its own ball, the norm bound and the Lipschitz
/// condition on targets within each cluster.
pub fn validate_clustered(data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let missing = |what: &str| Error::Invalid(format!("clustered metadata lacks {what}"));
    let centers = meta.centers.as_ref().ok_or_else(|| missing("centers"))?;
    let radii = meta.radii.as_ref().ok_or_else(|| missing("radii"))?;
    let gamma = meta.gamma.ok_or_else(|| missing("gamma"))?;
    let bmax = meta.b.ok_or_else(|| missing("B"))?;
    let ids = data.cluster_ids().ok_or_else(|| missing("cluster ids"))?;
    let y = data.scalar_targets("clustered validation")?;
    let bound = cluster_radius_bound(data.d());
    let cs: Vec<DVector<f64>> = centers.iter().map(|c| DVector::from_column_slice(c)).collect();
    for (j, c) in cs.iter().enumerate() {
        if radii[j] / c.norm() > bound {
            return Err(Error::Invalid(format!(
                "cluster {}: delta/||c|| = {:e} exceeds {bound:e}",
                j + 1,
                radii[j] / c.norm()
            )));
        }
    }
    for t in 0..data.m() {
        let xt = data.instance(t);
        let own = ids[t] - 1;
        for (j, c) in cs.iter().enumerate() {
            let dist = (&xt - c).norm();
            let inside = dist <= radii[j] * (1.0 + 1e-12) + 1e-15;
            if (j == own) != inside {
                return Err(Error::Invalid(format!(
                    "instance {t} is at distance {dist:e} from centre {}, radius {:e}",
                    j + 1,
                    radii[j]
                )));
            }
        }
        if xt.norm() > bmax * (1.0 + 1e-12) {
            return Err(Error::Invalid(format!("instance {t} exceeds the norm bound B = {bmax}")));
        }
    }
    for s in 0..data.m() {
        for t in s + 1..data.m() {
            if ids[s] != ids[t] {
                continue;
            }
            let dist = (data.instance(s) - data.instance(t)).norm();
            if (y[s] - y[t]).abs() > gamma * dist * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Invalid(format!(
                    "targets of instances {s} and {t} violate the {gamma}-Lipschitz condition"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankSpec {
    pub d: usize,
    pub m: usize,
    pub rank: usize,
    pub teacher_width: usize,
    /// Bound `B` on `|v_i| ||w_i||` for the teacher.
    pub b: f64,
}

/// Unit-norm instances in a random `rank`-dimensional subspace, labelled by a
/// random teacher with `|v_i| = 1`, `||w_i|| = B`.
pub fn gen_lowrank_realizable(
    spec: &LowRankSpec,
    rng: &mut StreamRng,
) -> Result<(Dataset, TwoLayerParams, DatasetMeta)> {
    let LowRankSpec { d, m, rank: r, teacher_width: n, b } = *spec;
    if r == 0 || r > d || m == 0 || n == 0 {
        return Err(Error::Invalid(format!(
            "need 1 <= rank <= d and m, n >= 1 (rank = {r}, d = {d}, m = {m}, n = {n})"
        )));
    }
    if !(b > 0.0) {
        return Err(Error::Invalid(format!("B must be positive, got {b}")));
    }
    let u = random_orthonormal(d, r, rng);
    let (x, got_rank) = loop {
        let g = gaussian_matrix(m, r, rng);
        let mut x = g * u.transpose();
        for mut row in x.row_iter_mut() {
            let nrm = row.norm();
            if nrm > 0.0 {
                row /= nrm;
            }
        }
        let got = rank(&x);
        if got == r.min(m) && x.row_iter().all(|row| row.norm() > 0.0) {
            break (x, got);
        }
    };
    let mut w = DMatrix::zeros(n, d);
    for i in 0..n {
        let dir = unit_vector(d, rng);
        w.row_mut(i).copy_from(&(dir * b).transpose());
    }
    let v = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let teacher = TwoLayerParams::new(w, v)?;
    let placeholder = Dataset::scalar(x.clone(), vec![0.0; m])?;
    let y: Vec<f64> = prediction_matrix_two_layer(&teacher, &placeholder)?
        .0
        .iter()
        .copied()
        .collect();
    let data = Dataset::scalar(x, y)?.with_provenance("lowrank");
    let (smin, smax) = extreme_singular_values(data.x());
    let meta = DatasetMeta {
        kind: "lowrank".into(),
        d,
        m,
        rank: Some(got_rank),
        sigma_min: Some(smin),
        sigma_max: Some(smax),
        b: Some(b),
        ..Default::default()
    };
    Ok((data, teacher, meta))
}

/// `(1 / (2 pi (r - 1))) * (sqrt(eps) / (n B) * sqrt(1 - eps / (4 n^2 B^2)))^(r - 1)`.
pub fn p_epsilon(eps: f64, n: usize, b: f64, rank: usize) -> Result<f64> {
    if rank < 2 {
        return Err(Error::Invalid(format!("rank must be at least 2, got {rank}")));
    }
    if !(eps >= 0.0) || n == 0 || !(b > 0.0) {
        return Err(Error::Invalid("need eps >= 0, n >= 1 and B > 0".into()));
    }
    let nb = n as f64 * b;
    let ratio = eps.sqrt() / nb;
    if ratio > 2.0 {
        return Err(Error::Invalid(format!("sqrt(eps)/(nB) = {ratio} exceeds 2")));
    }
    let inner = ratio * (1.0 - eps / (4.0 * nb * nb)).sqrt();
    let r1 = (rank - 1) as f64;
    Ok(inner.powf(r1) / (2.0 * std::f64::consts::PI * r1))
}
