//! Seeded Monte Carlo estimates of the good-basin probabilities, exact
//! binomial confidence limits, and the explicit constructions that certify a
//! good basin without running the solver.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::basins::{
    extract_sign_pattern, project_onto_sign_cone, singleton_alpha, singleton_basin_oracle, solve_basin_value,
    squared_loss_at_zero, DEFAULT_TOL,
};
use crate::datasets::{
    cluster_radius_bound, gen_clustered, gen_fullrank, gen_lowrank_realizable, gen_singleton_hardness, p_epsilon,
    ClusteredSpec, DatasetMeta, FullRankSpec, LowRankSpec, SingletonHardnessSpec,
};
use crate::error::{Error, Result};
use crate::init::{sample_two_layer, InitDistribution, InitKind};
use crate::nets::{objective, prediction_matrix_two_layer, Dataset, LossKind, Targets, TwoLayerParams};
use crate::paths::{check_condition2_probability, condition2_bound};
use crate::rng::{dataset_stream, trial_stream};
use crate::stats::{binomial_half_cdf, chi_square_pvalue, clopper_pearson_lower, clopper_pearson_upper};

/// Confidence level of every reported limit.
pub const CONFIDENCE: f64 = 0.999;
/// Largest fraction of errored trials before a run is inconclusive.
pub const MAX_ERRORED_FRACTION: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The claimed bound is a lower bound on the event probability.
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Consistent,
    Refuted,
    Inconclusive,
}

/// Result of one trial; `event` is `None` when evaluating the predicate failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub event: Option<bool>,
    pub value: Option<f64>,
    pub detail: String,
}

/// What a trial closure reports on success.
#[derive(Debug, Clone, Default)]
pub struct TrialEval {
    pub event: bool,
    pub value: Option<f64>,
    pub detail: String,
}

impl From<(bool, String)> for TrialEval {
    fn from((event, detail): (bool, String)) -> Self {
        TrialEval { event, value: None, detail }
    }
}

/// Runs `trials` independent trials on a pool of `workers` threads (0 uses
/// the rayon default). Outcomes are ordered by trial index whatever the pool.
pub fn run_trials<F, T>(trials: u64, workers: usize, f: F) -> Result<Vec<TrialOutcome>>
where
    F: Fn(u64) -> Result<T> + Sync + Send,
    T: Into<TrialEval>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| match f(i) {
                Ok(r) => {
                    let r = r.into();
                    TrialOutcome {
                        trial: i,
                        event: Some(r.event),
                        value: r.value,
                        detail: r.detail,
                    }
                }
                Err(e) => TrialOutcome {
                    trial: i,
                    event: None,
                    value: None,
                    detail: e.to_string(),
                },
            })
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCReport {
    pub bound_id: String,
    pub trials: u64,
    pub successes: u64,
    pub errored: u64,
    pub estimate: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub confidence: f64,
    pub bound: f64,
    pub direction: Direction,
    pub verdict: Verdict,
    pub seed: u64,
    pub diagnostics: Vec<TrialOutcome>,
    pub extra: Map<String, Value>,
}

impl MCReport {
    pub fn from_outcomes(bound_id: &str, bound: f64, direction: Direction, seed: u64, outcomes: &[TrialOutcome]) -> Self {
        let trials = outcomes.len() as u64;
        let errored = outcomes.iter().filter(|o| o.event.is_none()).count() as u64;
        let successes = outcomes.iter().filter(|o| o.event == Some(true)).count() as u64;
        let valid = trials - errored;
        let (estimate, lower_limit, upper_limit) = if valid == 0 {
            (f64::NAN, 0.0, 1.0)
        } else {
            (
                successes as f64 / valid as f64,
                clopper_pearson_lower(successes, valid, CONFIDENCE),
                clopper_pearson_upper(successes, valid, CONFIDENCE),
            )
        };
        let verdict = if valid == 0 || errored as f64 > MAX_ERRORED_FRACTION * trials as f64 {
            Verdict::Inconclusive
        } else {
            let refuted = match direction {
                Direction::Lower => upper_limit < bound,
                Direction::Upper => lower_limit > bound,
            };
            if refuted {
                Verdict::Refuted
            } else {
                Verdict::Consistent
            }
        };
        let mut diagnostics: Vec<TrialOutcome> = outcomes.iter().take(20).cloned().collect();
        diagnostics.extend(outcomes.iter().skip(20).filter(|o| o.event.is_none()).take(100).cloned());
        MCReport {
            bound_id: bound_id.to_string(),
            trials,
            successes,
            errored,
            estimate,
            lower_limit,
            upper_limit,
            confidence: CONFIDENCE,
            bound,
            direction,
            verdict,
            seed,
            diagnostics,
            extra: Map::new(),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-trial table with columns `trial,event,value,detail`.
pub fn trials_csv(outcomes: &[TrialOutcome]) -> String {
    let mut out = String::from("trial,event,value,detail\n");
    for o in outcomes {
        let event = match o.event {
            Some(true) => "1",
            Some(false) => "0",
            None => "error",
        };
        let value = o.value.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!("{},{event},{value},{}\n", o.trial, csv_field(&o.detail)));
    }
    out
}

fn default_check_every() -> u64 {
    1
}

/// One bound experiment: which claim is tested and at which size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "snake_case")]
pub enum BoundSpec {
    Prop1 {
        input_dim: usize,
        hidden: Vec<usize>,
        m: usize,
        loss: LossKind,
        /// Output width; the number of classes under cross-entropy.
        outputs: usize,
    },
    Thm3 {
        d: usize,
        n: usize,
        eps: f64,
        /// Run the numerical solver on every k-th trial (0 disables it).
        #[serde(default = "default_check_every")]
        solver_check_every: u64,
    },
    Thm4 {
        d: usize,
        m: usize,
        rank: usize,
        teacher_width: usize,
        b: f64,
        eps: f64,
        c: usize,
    },
    Thm5 {
        m: usize,
        d: usize,
        n: usize,
        #[serde(default = "default_check_every")]
        solver_check_every: u64,
    },
    Thm6 {
        d: usize,
        k: usize,
        n: usize,
        points_per_cluster: usize,
        radius_fraction: f64,
        gamma: f64,
        min_center_norm: f64,
    },
    Thm7 {
        d: usize,
        eps: f64,
    },
    Cap {
        d: usize,
        delta: f64,
    },
    Noisy {
        d: usize,
        /// `delta / ||c||` as a fraction of the largest allowed ratio.
        radius_fraction: f64,
    },
}

impl BoundSpec {
    pub const IDS: [&'static str; 8] = ["prop1", "thm3", "thm4", "thm5", "thm6", "thm7", "cap", "noisy"];

    /// The default desk-scale configuration of each experiment.
    pub fn default_for(id: &str) -> Option<BoundSpec> {
        Some(match id {
            "prop1" => BoundSpec::Prop1 {
                input_dim: 4,
                hidden: vec![6, 3],
                m: 10,
                loss: LossKind::Squared,
                outputs: 1,
            },
            "thm3" => BoundSpec::Thm3 {
                d: 5,
                n: 20,
                eps: 0.1,
                solver_check_every: 10,
            },
            "thm4" => BoundSpec::Thm4 {
                d: 4,
                m: 16,
                rank: 2,
                teacher_width: 1,
                b: 1.0,
                eps: 0.25,
                c: 2,
            },
            "thm5" => BoundSpec::Thm5 {
                m: 5,
                d: 8,
                n: 15,
                solver_check_every: 1,
            },
            "thm6" => BoundSpec::Thm6 {
                d: 10,
                k: 3,
                n: 40,
                points_per_cluster: 5,
                radius_fraction: 0.1,
                gamma: 1.0,
                min_center_norm: 1.0,
            },
            "thm7" => BoundSpec::Thm7 { d: 16, eps: 0.1 },
            "cap" => BoundSpec::Cap { d: 10, delta: 0.3 },
            "noisy" => BoundSpec::Noisy {
                d: 10,
                radius_fraction: 1.0,
            },
            _ => return None,
        })
    }

    pub fn id(&self) -> &'static str {
        match self {
            BoundSpec::Prop1 { .. } => "prop1",
            BoundSpec::Thm3 { .. } => "thm3",
            BoundSpec::Thm4 { .. } => "thm4",
            BoundSpec::Thm5 { .. } => "thm5",
            BoundSpec::Thm6 { .. } => "thm6",
            BoundSpec::Thm7 { .. } => "thm7",
            BoundSpec::Cap { .. } => "cap",
            BoundSpec::Noisy { .. } => "noisy",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            BoundSpec::Thm7 { .. } => Direction::Upper,
            _ => Direction::Lower,
        }
    }

    /// Width of the trained network for low-rank realizable data: `c * ceil(n / p_eps)`.
    fn thm4_width(rank: usize, teacher_width: usize, b: f64, eps: f64, c: usize) -> Result<usize> {
        let p = p_epsilon(eps, teacher_width, b, rank)?;
        if p <= 0.0 {
            return Err(Error::Invalid("p_eps is zero".into()));
        }
        Ok(c * (teacher_width as f64 / p).ceil() as usize)
    }

    /// The claimed bound, clamped to `[0, 1]`.
    pub fn bound(&self) -> Result<f64> {
        let raw = match *self {
            BoundSpec::Prop1 { ref hidden, .. } => {
                condition2_bound(*hidden.last().ok_or_else(|| Error::Invalid("no hidden layer".into()))?)
            }
            BoundSpec::Thm3 { d, n, .. } => 1.0 - 2.0 * d as f64 * 0.75f64.powi(n as i32),
            BoundSpec::Thm4 { c, teacher_width, .. } => 1.0 - (-(c as f64) * teacher_width as f64 / 4.0).exp(),
            BoundSpec::Thm5 { m, n, .. } => 1.0 - m as f64 * 0.75f64.powi(n as i32),
            BoundSpec::Thm6 { d, n, .. } => 1.0 - d as f64 * 0.875f64.powi(n as i32),
            BoundSpec::Thm7 { d, .. } => (-(d as f64) / 16.0).exp(),
            BoundSpec::Cap { d, delta } => cap_bound(d, delta)?,
            BoundSpec::Noisy { d, .. } => 1.0 - 1.0 / (4.0 * d as f64),
        };
        Ok(raw.clamp(0.0, 1.0))
    }
}

/// `(1 / (pi (d - 1))) (delta sqrt(1 - delta^2 / 4))^(d - 1)`.
pub fn cap_bound(d: usize, delta: f64) -> Result<f64> {
    if d < 2 || !(delta > 0.0 && delta <= 2.0) {
        return Err(Error::Invalid(format!("cap bound needs d >= 2 and delta in (0, 2], got d = {d}, delta = {delta}")));
    }
    let base = delta * (1.0 - delta * delta / 4.0).max(0.0).sqrt();
    Ok(base.powi(d as i32 - 1) / (std::f64::consts::PI * (d - 1) as f64))
}

/// Exact `P[||a - b|| <= delta]` for `a` uniform on the 2-sphere.
pub fn cap_exact_d3(delta: f64) -> f64 {
    (1.0 - (2.0 * (delta / 2.0).min(1.0).asin()).cos()) / 2.0
}

fn random_unit(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = g.norm();
        if n > 0.0 {
            return g / n;
        }
    }
}

pub fn cap_bound_check(d: usize, delta: f64, trials: u64, seed: u64, workers: usize) -> Result<MCReport> {
    if !(delta > 0.0 && delta < 2.0) && delta != 2.0 {
        return Err(Error::Invalid(format!("delta must lie in (0, 2], got {delta}")));
    }
    let bound = cap_bound(d, delta)?;
    let outcomes = run_trials(trials, workers, |i| {
        let a = random_unit(d, &mut trial_stream(seed, i));
        let dist2 = (a[0] - 1.0).powi(2) + a.rows(1, d - 1).norm_squared();
        Ok((dist2 <= delta * delta, String::new()))
    })?;
    let mut r = MCReport::from_outcomes("cap", bound, Direction::Lower, seed, &outcomes);
    r.extra.insert("d".into(), d.into());
    r.extra.insert("delta".into(), delta.into());
    if d == 3 {
        r.extra.insert("exact".into(), cap_exact_d3(delta).into());
    }
    Ok(r)
}

/// Frequency of unit `w` with `|<w, c>| > delta`, i.e. whose hyperplane misses
/// the ball of radius `delta` around `c`.
pub fn noisy_region_check(d: usize, center: &[f64], delta: f64, trials: u64, seed: u64, workers: usize) -> Result<MCReport> {
    if center.len() != d || d == 0 {
        return Err(Error::Dimension(format!("centre of length {} in dimension {d}", center.len())));
    }
    let c = DVector::from_column_slice(center);
    let bound_ratio = cluster_radius_bound(d);
    if !(delta >= 0.0) || delta / c.norm() > bound_ratio * (1.0 + 1e-12) {
        return Err(Error::Invalid(format!(
            "delta/||c|| = {:e} exceeds the bound 2*sin(sqrt(2*pi)/(16*d*sqrt(d))) = {bound_ratio:e}",
            delta / c.norm()
        )));
    }
    let outcomes = run_trials(trials, workers, |i| {
        let w = random_unit(d, &mut trial_stream(seed, i));
        Ok((w.dot(&c).abs() > delta, String::new()))
    })?;
    let bound = 1.0 - 1.0 / (4.0 * d as f64);
    let mut r = MCReport::from_outcomes("noisy", bound, Direction::Lower, seed, &outcomes);
    r.extra.insert("d".into(), d.into());
    r.extra.insert("delta".into(), delta.into());
    r.extra.insert("center_norm".into(), c.norm().into());
    Ok(r)
}

/// Outcome of one of the explicit constructions.
#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Built { params: TwoLayerParams, objective: f64 },
    /// No neuron can take care of instance (or cluster) `index`.
    Unclaimed { index: usize },
    /// Neuron `neuron`'s hyperplane cuts through cluster `cluster`.
    NoisyRegion { neuron: usize, cluster: usize },
}

impl Construction {
    pub fn is_built(&self) -> bool {
        matches!(self, Construction::Built { .. })
    }

    pub fn describe(&self) -> String {
        match self {
            Construction::Built { objective, .. } => format!("built objective={objective:?}"),
            Construction::Unclaimed { index } => format!("unclaimed {index}"),
            Construction::NoisyRegion { neuron, cluster } => format!("noisy neuron={neuron} cluster={}", cluster + 1),
        }
    }
}

/// First neuron with `<w_i, p_t> > 0`, `v_i != 0` and `v_i y_t >= 0`, for each
/// point `p_t`; `Err(t)` names the first point nobody claims. Points with a
/// zero target need no claimant.
fn first_claimants(params: &TwoLayerParams, points: &DMatrix<f64>, y: &[f64]) -> std::result::Result<Vec<Option<usize>>, usize> {
    let pre = points * params.w.transpose();
    let mut out = Vec::with_capacity(points.nrows());
    for (t, &yt) in y.iter().enumerate() {
        if yt == 0.0 {
            out.push(None);
            continue;
        }
        let claim = (0..params.width()).find(|&i| pre[(t, i)] > 0.0 && params.v[i] != 0.0 && params.v[i] * yt >= 0.0);
        match claim {
            Some(i) => out.push(Some(i)),
            None => return Err(t),
        }
    }
    Ok(out)
}

/// Weights `w_i = P^T a_i` with `P P^T a_i = y'_i`, where `y'_it = |y_t|` if
/// neuron `i` claims point `t` and 0 otherwise.
fn claimant_weights(
    params: &TwoLayerParams,
    points: &DMatrix<f64>,
    y: &[f64],
    claims: &[Option<usize>],
) -> Result<DMatrix<f64>> {
    let gram = points * points.transpose();
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("the Gram matrix of the points is not positive definite".into()))?;
    let mut w = DMatrix::zeros(params.width(), points.ncols());
    for i in 0..params.width() {
        let rhs = DVector::from_fn(points.nrows(), |t, _| if claims[t] == Some(i) { y[t].abs() } else { 0.0 });
        if rhs.iter().all(|&v| v == 0.0) {
            continue;
        }
        let a = chol.solve(&rhs);
        w.row_mut(i).copy_from(&(points.transpose() * a).transpose());
    }
    Ok(w)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The interpolating construction for full-rank data: a point in the closed
/// basin of `params` whose network output equals `ybar` on every instance.
pub fn fullrank_construct(params: &TwoLayerParams, data: &Dataset, ybar: &[f64]) -> Result<Construction> {
    if ybar.len() != data.m() || params.input_dim() != data.d() {
        return Err(Error::Dimension("targets or weights do not match the dataset".into()));
    }
    let claims = match first_claimants(params, data.x(), ybar) {
        Ok(c) => c,
        Err(index) => return Ok(Construction::Unclaimed { index }),
    };
    let w = claimant_weights(params, data.x(), ybar, &claims)?;
    let v = params.v.map(sign);
    let built = TwoLayerParams::new(w, v)?;
    let before = data.x() * params.w.transpose();
    let after = data.x() * built.w.transpose();
    // The construction sets each pre-activation to |y_t| or 0; only rounding
    // noise may appear with the wrong sign.
    let noise = 1e-9 * (1.0 + ybar.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    for t in 0..data.m() {
        for i in 0..params.width() {
            let (b, a) = (before[(t, i)], after[(t, i)]);
            if (b * a < 0.0 || b == 0.0) && a.abs() > noise {
                return Err(Error::PatternMismatch(format!(
                    "constructed neuron {i} changes sign on instance {t}"
                )));
            }
        }
    }
    let p = prediction_matrix_two_layer(&built, data)?;
    for t in 0..data.m() {
        if (p.0[(t, 0)] - ybar[t]).abs() > 1e-8 * (1.0 + ybar[t].abs()) {
            return Err(Error::Singular(format!(
                "constructed output {} differs from target {} on instance {t}",
                p.0[(t, 0)],
                ybar[t]
            )));
        }
    }
    let objective = objective(LossKind::Squared, &p, &Targets::Scalar(ybar.to_vec()))?;
    Ok(Construction::Built { params: built, objective })
}

/// `delta^2 ((1 + B/c) n sigma_max / sigma_min^2 ||yhat|| + 2 gamma)^2`.
pub fn clustered_value_bound(meta: &DatasetMeta, n: usize) -> Result<f64> {
    let missing = |w: &str| Error::Invalid(format!("clustered metadata lacks {w}"));
    let delta = meta
        .radii
        .as_ref()
        .ok_or_else(|| missing("radii"))?
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let b = meta.b.ok_or_else(|| missing("B"))?;
    let c = meta.c.ok_or_else(|| missing("c"))?;
    let smax = meta.sigma_max.ok_or_else(|| missing("sigma_max"))?;
    let smin = meta.sigma_min.ok_or_else(|| missing("sigma_min"))?;
    let gamma = meta.gamma.ok_or_else(|| missing("gamma"))?;
    let yhat = meta.cluster_targets.as_ref().ok_or_else(|| missing("cluster targets"))?;
    let ynorm = yhat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let inner = (1.0 + b / c) * n as f64 * smax / (smin * smin) * ynorm + 2.0 * gamma;
    Ok(delta * delta * inner * inner)
}

/// Certificate for clustered data: the construction on the cluster centres,
/// moved into the basin of `params` on the full data by projecting each
/// neuron onto its sign cone. Fails on a noisy-region hit or an unclaimed
/// cluster.
pub fn clustered_construct(params: &TwoLayerParams, data: &Dataset, meta: &DatasetMeta) -> Result<Construction> {
    let missing = |w: &str| Error::Invalid(format!("clustered metadata lacks {w}"));
    let centers = meta.centers.as_ref().ok_or_else(|| missing("centers"))?;
    let radii = meta.radii.as_ref().ok_or_else(|| missing("radii"))?;
    let yhat = meta.cluster_targets.as_ref().ok_or_else(|| missing("cluster targets"))?;
    let k = centers.len();
    let d = data.d();
    if params.input_dim() != d {
        return Err(Error::Dimension("weights do not match the dataset".into()));
    }
    let cmat = DMatrix::from_fn(k, d, |j, c| centers[j][c]);
    for i in 0..params.width() {
        let wi = params.w.row(i);
        let wn = wi.norm();
        for j in 0..k {
            if (wi * cmat.row(j).transpose())[0].abs() <= radii[j] * wn {
                return Ok(Construction::NoisyRegion { neuron: i, cluster: j });
            }
        }
    }
    let claims = match first_claimants(params, &cmat, yhat) {
        Ok(c) => c,
        Err(index) => return Ok(Construction::Unclaimed { index }),
    };
    let w_tilde = claimant_weights(params, &cmat, yhat, &claims)?;
    let pattern = extract_sign_pattern(params, data)?;
    let mut w = DMatrix::zeros(params.width(), d);
    for i in 0..params.width() {
        if pattern.b(i) == 0 {
            continue;
        }
        let signs: Vec<i8> = (0..data.m()).map(|t| pattern.a(i, t)).collect();
        let target = w_tilde.row(i).transpose();
        let wi = project_onto_sign_cone(&target, &signs, data.x());
        w.row_mut(i).copy_from(&wi.transpose());
    }
    let built = TwoLayerParams::new(w, params.v.map(sign))?;
    let p = prediction_matrix_two_layer(&built, data)?;
    let objective = objective(LossKind::Squared, &p, data.targets())?;
    Ok(Construction::Built { params: built, objective })
}

/// Exact census of the single-neuron minima on the hardness data.
#[derive(Debug, Clone, Serialize)]
pub struct Census {
    pub d: usize,
    pub eps: f64,
    /// Value of the minimum whose bad coordinates are the set bits of the index.
    pub values: Vec<f64>,
    pub threshold: f64,
    /// `P[Bas <= threshold]` for uniformly random good/bad choices, as a ratio.
    pub tail_numerator: u128,
    pub tail_denominator: u128,
    pub tail_probability: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn appc_local_minima_census(d: usize, eps: f64) -> Result<Census> {
    if d == 0 || d > 20 {
        return Err(Error::Invalid(format!("exact enumeration needs 1 <= d <= 20, got {d}")));
    }
    let df = d as f64;
    let values: Vec<f64> = (0..1usize << d)
        .map(|mask| {
            let k = mask.count_ones() as f64;
            (k * 0.5 + (df - k) * eps) / df
        })
        .collect();
    let threshold = 0.125;
    // Value is increasing in k when eps < 1/2, so the tail is {k <= k*}.
    let count = values.iter().filter(|&&v| v <= threshold + 1e-12).count() as u128;
    let k_star = (0..=d).rev().find(|&k| (k as f64 * 0.5 + (df - k as f64) * eps) / df <= threshold + 1e-12);
    let (num, den) = match k_star {
        Some(k) => binomial_half_cdf(d as u32, k as u32),
        None => (0, 1u128 << d),
    };
    debug_assert_eq!(num, count);
    let tail_probability = num as f64 / den as f64;
    let bound = (-df / 16.0).exp();
    Ok(Census {
        d,
        eps,
        values,
        threshold,
        tail_numerator: num,
        tail_denominator: den,
        tail_probability,
        bound,
        holds: tail_probability <= bound,
    })
}

/// Chi-square p-value of the number of bad coordinates reached by random
/// single-neuron initializations with `v > 0` against Binomial(d, 1/2).
pub fn census_distribution_check(d: usize, eps: f64, init: &InitKind, trials: u64, seed: u64, workers: usize) -> Result<(f64, u64)> {
    let (data, _) = gen_singleton_hardness(&SingletonHardnessSpec { d, eps, loss: LossKind::Squared })?;
    let dist = InitDistribution { kind: *init, seed };
    let outcomes = run_trials(trials, workers, |i| {
        let p = sample_two_layer(&dist, 1, d, i)?;
        if p.v[0] <= 0.0 {
            return Ok(TrialEval { event: false, value: None, detail: String::new() });
        }
        let value = singleton_basin_oracle(&extract_sign_pattern(&p, &data)?, &data, LossKind::Squared)?;
        Ok(TrialEval { event: true, value: Some(value), detail: String::new() })
    })?;
    let mut counts = vec![0u64; d + 1];
    let mut used = 0;
    for o in &outcomes {
        if let (Some(true), Some(v)) = (o.event, o.value) {
            let k = ((v * d as f64 - d as f64 * eps) / (0.5 - eps)).round();
            if !(0.0..=d as f64).contains(&k) {
                return Err(Error::Invalid(format!("oracle value {v} is not a census value")));
            }
            counts[k as usize] += 1;
            used += 1;
        }
    }
    if used == 0 {
        return Ok((1.0, 0));
    }
    let den = (1u128 << d) as f64;
    let expected: Vec<f64> = (0..=d)
        .map(|k| {
            let (hi, _) = binomial_half_cdf(d as u32, k as u32);
            let lo = if k == 0 { 0 } else { binomial_half_cdf(d as u32, k as u32 - 1).0 };
            (hi - lo) as f64 / den * used as f64
        })
        .collect();
    Ok((chi_square_pvalue(&counts, &expected), used))
}

fn gaussian_dataset(m: usize, d: usize, loss: LossKind, outputs: usize, seed: u64) -> Result<Dataset> {
    let mut rng = dataset_stream(seed, "prop1");
    let x = DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let targets = match loss {
        LossKind::Squared if outputs == 1 => Targets::Scalar((0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()),
        LossKind::Squared => Targets::Vector(DMatrix::from_fn(m, outputs, |_, _| rng.sample::<f64, _>(StandardNormal))),
        LossKind::CrossEntropy => Targets::Classes {
            labels: (0..m).map(|_| rng.random_range(0..outputs)).collect(),
            classes: outputs,
        },
    };
    Ok(Dataset::new(x, targets)?.with_provenance("prop1"))
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: MCReport,
    pub outcomes: Vec<TrialOutcome>,
    pub dataset: Option<Dataset>,
}

/// Runs the experiment `spec` with `trials` seeded trials. The dataset is
/// drawn once from the `dataset/<kind>` stream and trial `i` initializes
/// from `init/trial/<i>`.
pub fn run_bound_experiment(spec: &BoundSpec, init: &InitKind, trials: u64, seed: u64, workers: usize) -> Result<ExperimentRun> {
    if trials < 1 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    let bound = spec.bound()?;
    let dist = InitDistribution { kind: *init, seed };
    let id = spec.id();
    let (outcomes, dataset, mut extra) = match *spec {
        BoundSpec::Prop1 { input_dim, ref hidden, m, loss, outputs } => {
            let data = gaussian_dataset(m, input_dim, loss, outputs, seed)?;
            let mut sizes = vec![input_dim];
            sizes.extend(hidden);
            sizes.push(outputs);
            let report = check_condition2_probability(&sizes, &dist, loss, &data, trials, workers)?;
            return Ok(ExperimentRun {
                outcomes: Vec::new(),
                dataset: Some(data),
                report,
            });
        }
        BoundSpec::Thm3 { d, n, eps, solver_check_every } => {
            let (data, _) = gen_singleton_hardness(&SingletonHardnessSpec { d, eps, loss: LossKind::Squared })?;
            let alpha = singleton_alpha(&data, n)?;
            let outcomes = run_trials(trials, workers, |i| {
                let p = sample_two_layer(&dist, n, d, i)?;
                let pattern = extract_sign_pattern(&p, &data)?;
                let oracle = singleton_basin_oracle(&pattern, &data, LossKind::Squared)?;
                let event = oracle <= alpha + 1e-12;
                let mut detail = format!("oracle={oracle:?}");
                if solver_check_every > 0 && i % solver_check_every == 0 {
                    let s = solve_basin_value(&pattern, &data, LossKind::Squared, DEFAULT_TOL)?;
                    let agree = (s.value <= alpha + 1e-6) == event;
                    detail.push_str(&format!(";solver={:?};agree={agree}", s.value));
                }
                Ok(TrialEval { event, value: Some(oracle), detail })
            })?;
            let checked = outcomes.iter().filter(|o| o.detail.contains("agree=")).count();
            let disagree = outcomes.iter().filter(|o| o.detail.contains("agree=false")).count();
            let mut extra = Map::new();
            extra.insert("alpha".into(), alpha.into());
            extra.insert("solver_checked".into(), checked.into());
            extra.insert("solver_disagreements".into(), disagree.into());
            (outcomes, data, extra)
        }
        BoundSpec::Thm4 { d, m, rank, teacher_width, b, eps, c } => {
            let width = BoundSpec::thm4_width(rank, teacher_width, b, eps, c)?;
            let spec = LowRankSpec { d, m, rank, teacher_width, b };
            let (data, _, _) = gen_lowrank_realizable(&spec, &mut dataset_stream(seed, "lowrank"))?;
            let l_zero = squared_loss_at_zero(&data)?;
            let outcomes = run_trials(trials, workers, |i| {
                let p = sample_two_layer(&dist, width, d, i)?;
                let pattern = extract_sign_pattern(&p, &data)?;
                let s = solve_basin_value(&pattern, &data, LossKind::Squared, DEFAULT_TOL)?;
                Ok(TrialEval {
                    event: s.value <= eps,
                    value: Some(s.value),
                    detail: format!("converged={}", s.converged),
                })
            })?;
            let mut extra = Map::new();
            extra.insert("width".into(), width.into());
            extra.insert("p_eps".into(), p_epsilon(eps, teacher_width, b, rank)?.into());
            extra.insert("L_zero".into(), l_zero.into());
            (outcomes, data, extra)
        }
        BoundSpec::Thm5 { m, d, n, solver_check_every } => {
            let (data, meta) = gen_fullrank(&FullRankSpec { m, d, targets: None }, &mut dataset_stream(seed, "fullrank"))?;
            let ybar = data.scalar_targets("full-rank construction")?.to_vec();
            let alpha = 0.0;
            let outcomes = run_trials(trials, workers, |i| {
                let p = sample_two_layer(&dist, n, d, i)?;
                let built = fullrank_construct(&p, &data, &ybar)?;
                let check = solver_check_every > 0 && i % solver_check_every == 0;
                let mut detail = built.describe();
                let cert = match &built {
                    Construction::Built { objective, .. } => Some(*objective),
                    _ => None,
                };
                let event = if let Some(obj) = cert.filter(|&o| o <= alpha + 1e-8) {
                    if check {
                        let pattern = extract_sign_pattern(&p, &data)?;
                        let s = solve_basin_value(&pattern, &data, LossKind::Squared, DEFAULT_TOL)?;
                        detail.push_str(&format!(";solver={:?};agree={}", s.value, s.value <= obj + 1e-6));
                    }
                    true
                } else {
                    let pattern = extract_sign_pattern(&p, &data)?;
                    let s = solve_basin_value(&pattern, &data, LossKind::Squared, DEFAULT_TOL)?;
                    detail.push_str(&format!(";fallback solver={:?}", s.value));
                    s.value <= alpha + 1e-6
                };
                Ok(TrialEval { event, value: cert, detail })
            })?;
            let built = outcomes.iter().filter(|o| o.detail.starts_with("built")).count();
            let disagree = outcomes.iter().filter(|o| o.detail.contains("agree=false")).count();
            let mut extra = Map::new();
            extra.insert("alpha".into(), alpha.into());
            extra.insert("constructions".into(), built.into());
            extra.insert("solver_disagreements".into(), disagree.into());
            extra.insert("sigma_min".into(), meta.sigma_min.unwrap_or(f64::NAN).into());
            (outcomes, data, extra)
        }
        BoundSpec::Thm6 { d, k, n, points_per_cluster, radius_fraction, gamma, min_center_norm } => {
            let cspec = ClusteredSpec {
                d,
                k,
                points_per_cluster,
                min_center_norm,
                radius_fraction,
                gamma,
                ..ClusteredSpec::default()
            };
            let (data, meta) = gen_clustered(&cspec, &mut dataset_stream(seed, "clustered"))?;
            let value_bound = clustered_value_bound(&meta, n)?;
            let outcomes = run_trials(trials, workers, |i| {
                let p = sample_two_layer(&dist, n, d, i)?;
                let built = clustered_construct(&p, &data, &meta)?;
                let mut detail = built.describe();
                match built {
                    Construction::Built { objective, .. } if objective <= value_bound + 1e-10 => {
                        Ok(TrialEval { event: true, value: Some(objective), detail })
                    }
                    _ => {
                        let pattern = extract_sign_pattern(&p, &data)?;
                        let s = solve_basin_value(&pattern, &data, LossKind::Squared, DEFAULT_TOL)?;
                        detail.push_str(&format!(";fallback solver={:?}", s.value));
                        Ok(TrialEval { event: s.value <= value_bound, value: None, detail })
                    }
                }
            })?;
            let built = outcomes.iter().filter(|o| o.detail.starts_with("built")).count();
            let mut extra = Map::new();
            extra.insert("value_bound".into(), value_bound.into());
            extra.insert("constructions".into(), built.into());
            extra.insert("meta".into(), serde_json::to_value(&meta)?);
            (outcomes, data, extra)
        }
        BoundSpec::Thm7 { d, eps } => {
            let (data, _) = gen_singleton_hardness(&SingletonHardnessSpec { d, eps, loss: LossKind::Squared })?;
            let census = appc_local_minima_census(d.min(20), eps)?;
            let outcomes = run_trials(trials, workers, |i| {
                let p = sample_two_layer(&dist, 1, d, i)?;
                let v = singleton_basin_oracle(&extract_sign_pattern(&p, &data)?, &data, LossKind::Squared)?;
                Ok(TrialEval { event: v <= 0.125 + 1e-12, value: Some(v), detail: String::new() })
            })?;
            let (pvalue, used) = census_distribution_check(d, eps, init, trials, seed, workers)?;
            let mut extra = Map::new();
            extra.insert("census_tail".into(), census.tail_probability.into());
            extra.insert(
                "census_tail_ratio".into(),
                format!("{}/{}", census.tail_numerator, census.tail_denominator).into(),
            );
            extra.insert("census_holds".into(), census.holds.into());
            extra.insert("binomial_chi_square_p".into(), pvalue.into());
            extra.insert("binomial_trials".into(), used.into());
            (outcomes, data, extra)
        }
        BoundSpec::Cap { d, delta } => {
            let report = cap_bound_check(d, delta, trials, seed, workers)?;
            return Ok(ExperimentRun { report, outcomes: Vec::new(), dataset: None });
        }
        BoundSpec::Noisy { d, radius_fraction } => {
            let mut c = vec![0.0; d];
            c[0] = 1.0;
            let delta = radius_fraction * cluster_radius_bound(d);
            let report = noisy_region_check(d, &c, delta, trials, seed, workers)?;
            return Ok(ExperimentRun { report, outcomes: Vec::new(), dataset: None });
        }
    };
    let mut report = MCReport::from_outcomes(id, bound, spec.direction(), seed, &outcomes);
    report.extra.append(&mut extra);
    Ok(ExperimentRun {
        report,
        outcomes,
        dataset: Some(dataset),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basins::solve_basin_value;

    fn outcome(trial: u64, event: Option<bool>) -> TrialOutcome {
        TrialOutcome { trial, event, value: None, detail: String::new() }
    }

    #[test]
    fn verdict_logic() {
        let all: Vec<_> = (0..1000).map(|i| outcome(i, Some(i % 2 == 0))).collect();
        let r = MCReport::from_outcomes("x", 0.45, Direction::Lower, 0, &all);
        assert_eq!(r.verdict, Verdict::Consistent);
        assert_eq!(MCReport::from_outcomes("x", 0.6, Direction::Lower, 0, &all).verdict, Verdict::Refuted);
        assert_eq!(MCReport::from_outcomes("x", 0.6, Direction::Upper, 0, &all).verdict, Verdict::Consistent);
        assert_eq!(MCReport::from_outcomes("x", 0.4, Direction::Upper, 0, &all).verdict, Verdict::Refuted);
        let mut bad = all.clone();
        bad[3].event = None;
        bad[4].event = None;
        let r = MCReport::from_outcomes("x", 0.45, Direction::Lower, 0, &bad);
        assert_eq!(r.errored, 2);
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn pool_size_does_not_change_outcomes() {
        let f = |i: u64| -> Result<(bool, String)> {
            let x: f64 = trial_stream(5, i).random();
            Ok((x < 0.3, format!("{x:?}")))
        };
        assert_eq!(run_trials(200, 1, f).unwrap(), run_trials(200, 4, f).unwrap());
    }

    #[test]
    fn bound_formulas() {
        let b = |id| BoundSpec::default_for(id).unwrap().bound().unwrap();
        assert!((b("thm3") - (1.0 - 10.0 * 0.75f64.powi(20))).abs() < 1e-15);
        assert!((b("thm3") - 0.9683).abs() < 1e-4);
        assert!((b("thm5") - 0.9331).abs() < 1e-4);
        assert!((b("thm6") - 0.952).abs() < 1e-3);
        assert!((b("thm4") - 0.3935).abs() < 1e-4);
        assert!((b("thm7") - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(b("prop1"), 0.4375);
        assert!((cap_bound(3, 0.5).unwrap() - 0.0373).abs() < 1e-4);
        assert!((cap_exact_d3(0.5) - 0.0625).abs() < 1e-12);
        assert!(cap_bound(2, 2.0).unwrap() <= 1.0);
        assert_eq!(
            BoundSpec::thm4_width(2, 1, 1.0, 0.25, 2).unwrap(),
            26
        );
    }

    #[test]
    fn fullrank_single_instance() {
        let data = Dataset::scalar(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![3.0]).unwrap();
        let p = TwoLayerParams::from_rows(&[vec![1.0, 0.0]], &[1.0]).unwrap();
        match fullrank_construct(&p, &data, &[3.0]).unwrap() {
            Construction::Built { params, objective } => {
                assert!((params.w[(0, 0)] - 3.0).abs() < 1e-14);
                assert!(params.w[(0, 1)].abs() < 1e-14);
                assert!(objective < 1e-20);
            }
            other => panic!("{other:?}"),
        }
        let q = TwoLayerParams::from_rows(&[vec![-1.0, 0.0]], &[1.0]).unwrap();
        assert_eq!(fullrank_construct(&q, &data, &[3.0]).unwrap(), Construction::Unclaimed { index: 0 });
    }

    #[test]
    fn fullrank_random_construction_agrees_with_solver() {
        let mut rng = dataset_stream(8, "fullrank");
        let (data, _) = gen_fullrank(&FullRankSpec { m: 3, d: 5, targets: None }, &mut rng).unwrap();
        let y = data.scalar_targets("test").unwrap().to_vec();
        let dist = InitDistribution::gaussian(1.0, 8);
        let mut built = 0;
        for i in 0..20 {
            let p = sample_two_layer(&dist, 8, 5, i).unwrap();
            if let Construction::Built { objective, .. } = fullrank_construct(&p, &data, &y).unwrap() {
                built += 1;
                assert!(objective <= 1e-8);
                let s = solve_basin_value(&extract_sign_pattern(&p, &data).unwrap(), &data, LossKind::Squared, 1e-8).unwrap();
                assert!(s.value <= objective + 1e-6);
            }
        }
        assert!(built > 10);
    }

    #[test]
    fn clustered_zero_radius_is_exact() {
        let spec = ClusteredSpec { d: 6, k: 2, radius_fraction: 0.0, ..ClusteredSpec::default() };
        let (data, meta) = gen_clustered(&spec, &mut dataset_stream(2, "clustered")).unwrap();
        let dist = InitDistribution::gaussian(1.0, 2);
        let mut built = 0;
        for i in 0..20 {
            let p = sample_two_layer(&dist, 10, 6, i).unwrap();
            if let Construction::Built { objective, .. } = clustered_construct(&p, &data, &meta).unwrap() {
                built += 1;
                assert!(objective <= 1e-10, "{objective}");
            }
        }
        assert!(built > 10);
    }

    #[test]
    fn clustered_noisy_hit_is_reported() {
        let spec = ClusteredSpec {
            d: 2,
            k: 1,
            centers: Some(vec![vec![1.0, 0.0]]),
            radius_fraction: 1.0,
            ..ClusteredSpec::default()
        };
        let (data, meta) = gen_clustered(&spec, &mut dataset_stream(2, "clustered")).unwrap();
        let p = TwoLayerParams::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]).unwrap();
        assert_eq!(
            clustered_construct(&p, &data, &meta).unwrap(),
            Construction::NoisyRegion { neuron: 1, cluster: 0 }
        );
    }

    #[test]
    fn census_small_cases() {
        let c1 = appc_local_minima_census(1, 0.1).unwrap();
        assert_eq!(c1.values, vec![0.1, 0.5]);
        let c2 = appc_local_minima_census(2, 0.1).unwrap();
        assert_eq!(c2.values.len(), 4);
        assert!((c2.values[1] - 0.3).abs() < 1e-15 && (c2.values[2] - 0.3).abs() < 1e-15);
        let c16 = appc_local_minima_census(16, 0.1).unwrap();
        assert_eq!((c16.tail_numerator, c16.tail_denominator), (17, 65536));
        assert!(c16.holds);
        assert!(appc_local_minima_census(21, 0.1).is_err());
    }

    #[test]
    fn cap_whole_sphere() {
        let r = cap_bound_check(4, 2.0, 200, 1, 2).unwrap();
        assert_eq!(r.successes, 200);
        assert_eq!(r.verdict, Verdict::Consistent);
    }

    #[test]
    fn noisy_region_zero_radius() {
        let r = noisy_region_check(5, &[0.0, 2.0, 0.0, 0.0, 0.0], 0.0, 500, 3, 2).unwrap();
        assert_eq!(r.successes, 500);
        assert!(noisy_region_check(5, &[1.0, 0.0, 0.0, 0.0, 0.0], 0.5, 10, 3, 1).is_err());
    }

    #[test]
    fn noisy_event_is_symmetric() {
        let c = DVector::from_vec(vec![0.3, -1.2, 0.5]);
        let delta = 0.9 * cluster_radius_bound(3) * c.norm();
        let mut rng = trial_stream(4, 0);
        for _ in 0..1000 {
            let w = random_unit(3, &mut rng);
            assert_eq!(w.dot(&c).abs() > delta, (-&w).dot(&c).abs() > delta);
        }
    }

    #[test]
    fn spec_round_trips_through_toml_shape() {
        for id in BoundSpec::IDS {
            let spec = BoundSpec::default_for(id).unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<BoundSpec>(&json).unwrap(), spec);
            assert_eq!(spec.id(), id);
        }
    }
}
