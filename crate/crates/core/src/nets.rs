//! ReLU networks, datasets, losses and the objective `L(P(W))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Training targets, one entry per instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Scalar(Vec<f64>),
    /// m×k real targets for vector-valued squared loss.
    Vector(DMatrix<f64>),
    /// Class indices in `0..classes` for softmax cross-entropy.
    Classes { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Scalar(y) => y.len(),
            Targets::Vector(y) => y.nrows(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output width `k` a network needs to be scored against these targets.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Scalar(_) => 1,
            Targets::Vector(y) => y.ncols(),
            Targets::Classes { classes, .. } => *classes,
        }
    }

    pub fn as_scalar(&self) -> Option<&[f64]> {
        match self {
            Targets::Scalar(y) => Some(y),
            _ => None,
        }
    }
}

/// A labelled sample `S = (x_t, y_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    targets: Targets,
    cluster_ids: Option<Vec<usize>>,
    provenance: Option<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, targets: Targets) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Invalid(format!(
                "dataset needs m >= 1 and d >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if targets.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "{} instances but {} targets",
                x.nrows(),
                targets.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("instance matrix".into()));
        }
        match &targets {
            Targets::Scalar(y) if y.iter().any(|v| !v.is_finite()) => {
                return Err(Error::NonFinite("targets".into()))
            }
            Targets::Vector(y) if y.iter().any(|v| !v.is_finite()) => {
                return Err(Error::NonFinite("targets".into()))
            }
            Targets::Classes { labels, classes } => {
                if *classes < 2 {
                    return Err(Error::Invalid("cross-entropy needs at least 2 classes".into()));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Invalid(format!("class label {bad} >= {classes}")));
                }
            }
            _ => {}
        }
        Ok(Dataset {
            x,
            targets,
            cluster_ids: None,
            provenance: None,
        })
    }

    pub fn scalar(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        Self::new(x, Targets::Scalar(y))
    }

    /// Attach 1-based cluster ids; every id must lie in `1..=k` with `k <= d`.
    pub fn with_clusters(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.m() {
            return Err(Error::Dimension(format!(
                "{} cluster ids for {} instances",
                ids.len(),
                self.m()
            )));
        }
        let k = ids.iter().copied().max().unwrap_or(0);
        if ids.iter().any(|&c| c == 0) || k > self.d() {
            return Err(Error::Invalid(format!(
                "cluster ids must lie in 1..=k with k <= d = {}",
                self.d()
            )));
        }
        self.cluster_ids = Some(ids);
        Ok(self)
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance = Some(tag.into());
        self
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn instance(&self, t: usize) -> DVector<f64> {
        self.x.row(t).transpose()
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn cluster_ids(&self) -> Option<&[usize]> {
        self.cluster_ids.as_deref()
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    /// Scalar targets, or an error naming the caller.
    pub fn scalar_targets(&self, context: &str) -> Result<&[f64]> {
        self.targets.as_scalar().ok_or_else(|| Error::UnsupportedLoss {
            loss: "non-scalar targets",
            context: context.to_string(),
        })
    }
}

/// Width-n two-layer network `x -> sum_i v_i relu(<w_i, x>)`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerParams {
    pub w: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl TwoLayerParams {
    pub fn new(w: DMatrix<f64>, v: DVector<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::Invalid("two-layer net needs n >= 1 and d >= 1".into()));
        }
        if w.nrows() != v.len() {
            return Err(Error::Dimension(format!(
                "W is {}x{} but v has length {}",
                w.nrows(),
                w.ncols(),
                v.len()
            )));
        }
        Ok(TwoLayerParams { w, v })
    }

    pub fn from_rows(rows: &[Vec<f64>], v: &[f64]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged weight rows".into()));
        }
        let w = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        Self::new(w, DVector::from_column_slice(v))
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Keep only the neurons in `subset`, in the given order.
    pub fn select(&self, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() || subset.iter().any(|&i| i >= self.width()) {
            return Err(Error::Invalid(format!(
                "subset {subset:?} is empty or out of range for width {}",
                self.width()
            )));
        }
        let w = DMatrix::from_fn(subset.len(), self.input_dim(), |r, c| self.w[(subset[r], c)]);
        let v = DVector::from_fn(subset.len(), |r, _| self.v[subset[r]]);
        Self::new(w, v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Deep ReLU net: hidden layers `O_{i+1} = relu(W O_i + b)` and a linear,
/// bias-free output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepParams {
    pub hidden: Vec<HiddenLayer>,
    pub output: DMatrix<f64>,
}

impl DeepParams {
    pub fn new(hidden: Vec<HiddenLayer>, output: DMatrix<f64>) -> Result<Self> {
        let mut fan_in = None;
        for (i, layer) in hidden.iter().enumerate() {
            if layer.w.nrows() != layer.b.len() {
                return Err(Error::Dimension(format!(
                    "layer {i}: W is {}x{} but b has length {}",
                    layer.w.nrows(),
                    layer.w.ncols(),
                    layer.b.len()
                )));
            }
            if let Some(prev) = fan_in {
                if layer.w.ncols() != prev {
                    return Err(Error::Dimension(format!(
                        "layer {i}: expects {} inputs but previous layer emits {prev}",
                        layer.w.ncols()
                    )));
                }
            }
            fan_in = Some(layer.w.nrows());
        }
        if let Some(prev) = fan_in {
            if output.ncols() != prev {
                return Err(Error::Dimension(format!(
                    "output layer is {}x{} but last hidden layer emits {prev}",
                    output.nrows(),
                    output.ncols()
                )));
            }
        }
        if output.nrows() == 0 || output.ncols() == 0 {
            return Err(Error::Invalid("empty output layer".into()));
        }
        Ok(DeepParams { hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.ncols(), |l| l.w.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.output.nrows()
    }

    /// Layer widths `[d, n_1, ..., n_{h-1}, k]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.hidden.iter().map(|l| l.w.nrows()));
        sizes.push(self.output_dim());
        sizes
    }
}

/// Either architecture, as used by the path machinery and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum NetParams {
    TwoLayer(TwoLayerParams),
    Deep(DeepParams),
}

impl NetParams {
    pub fn input_dim(&self) -> usize {
        match self {
            NetParams::TwoLayer(p) => p.input_dim(),
            NetParams::Deep(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            NetParams::TwoLayer(_) => 1,
            NetParams::Deep(p) => p.output_dim(),
        }
    }

    /// Multiply the last (linear) layer by `c`.
    pub fn scale_output(&self, c: f64) -> NetParams {
        match self {
            NetParams::TwoLayer(p) => NetParams::TwoLayer(TwoLayerParams {
                w: p.w.clone(),
                v: &p.v * c,
            }),
            NetParams::Deep(p) => NetParams::Deep(DeepParams {
                hidden: p.hidden.clone(),
                output: &p.output * c,
            }),
        }
    }

    /// Straight line `(1 - lambda) self + lambda other` in parameter space.
    pub fn lerp(&self, other: &NetParams, lambda: f64) -> Result<NetParams> {
        let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - lambda) + b * lambda;
        match (self, other) {
            (NetParams::TwoLayer(a), NetParams::TwoLayer(b))
                if a.w.shape() == b.w.shape() =>
            {
                Ok(NetParams::TwoLayer(TwoLayerParams {
                    w: mix(&a.w, &b.w),
                    v: &a.v * (1.0 - lambda) + &b.v * lambda,
                }))
            }
            (NetParams::Deep(a), NetParams::Deep(b)) if a.layer_sizes() == b.layer_sizes() => {
                let hidden = a
                    .hidden
                    .iter()
                    .zip(&b.hidden)
                    .map(|(la, lb)| HiddenLayer {
                        w: mix(&la.w, &lb.w),
                        b: &la.b * (1.0 - lambda) + &lb.b * lambda,
                    })
                    .collect();
                Ok(NetParams::Deep(DeepParams {
                    hidden,
                    output: mix(&a.output, &b.output),
                }))
            }
            _ => Err(Error::Dimension(
                "path endpoints have different architectures".into(),
            )),
        }
    }

    pub fn predictions(&self, data: &Dataset) -> Result<PredictionMatrix> {
        match self {
            NetParams::TwoLayer(p) => prediction_matrix_two_layer(p, data),
            NetParams::Deep(p) => prediction_matrix_deep(p, data),
        }
    }
}

pub fn forward_two_layer(params: &TwoLayerParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input has length {} but W is {}x{}",
            x.len(),
            params.width(),
            params.input_dim()
        )));
    }
    let mut out = 0.0;
    for i in 0..params.width() {
        let pre: f64 = params.w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        out += params.v[i] * relu(pre);
    }
    Ok(out)
}

pub fn forward_deep(params: &DeepParams, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input has length {} but the network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut o = DVector::from_column_slice(x);
    for layer in &params.hidden {
        o = (&layer.w * o + &layer.b).map(relu);
    }
    Ok(&params.output * o)
}

/// Output of the two-layer net on every instance (m×1).
pub fn prediction_matrix_two_layer(params: &TwoLayerParams, data: &Dataset) -> Result<PredictionMatrix> {
    if params.input_dim() != data.d() {
        return Err(Error::Dimension(format!(
            "W is {}x{} but instances have dimension {}",
            params.width(),
            params.input_dim(),
            data.d()
        )));
    }
    let pre = data.x() * params.w.transpose();
    let p = pre.map(relu) * &params.v;
    Ok(PredictionMatrix(DMatrix::from_column_slice(data.m(), 1, p.as_slice())))
}

/// Deep-net outputs stacked row by row (m×k).
pub fn prediction_matrix_deep(params: &DeepParams, data: &Dataset) -> Result<PredictionMatrix> {
    let k = params.output_dim();
    let mut p = DMatrix::zeros(data.m(), k);
    for t in 0..data.m() {
        let row: Vec<f64> = data.x().row(t).iter().copied().collect();
        let out = forward_deep(params, &row)?;
        p.row_mut(t).copy_from(&out.transpose());
    }
    Ok(PredictionMatrix(p))
}

/// Row t holds the network prediction on `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix(pub DMatrix<f64>);

impl PredictionMatrix {
    pub fn zeros(m: usize, k: usize) -> Self {
        PredictionMatrix(DMatrix::zeros(m, k))
    }

    pub fn scaled(&self, c: f64) -> Self {
        PredictionMatrix(&self.0 * c)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "squared" | "sq" => Some(LossKind::Squared),
            "cross_entropy" | "cross-entropy" | "ce" => Some(LossKind::CrossEntropy),
            _ => None,
        }
    }
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.map(|p| (p - max).exp()).sum::<f64>().ln()
}

/// Per-instance loss of prediction row `t`.
fn instance_loss(loss: LossKind, p: &DMatrix<f64>, t: usize, targets: &Targets) -> Result<f64> {
    match (loss, targets) {
        (LossKind::Squared, Targets::Scalar(y)) => {
            let r = p[(t, 0)] - y[t];
            Ok(r * r)
        }
        (LossKind::Squared, Targets::Vector(y)) => Ok((0..p.ncols())
            .map(|j| {
                let r = p[(t, j)] - y[(t, j)];
                r * r
            })
            .sum()),
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            let row = p.row(t);
            Ok(log_sum_exp(row.iter().copied()) - row[labels[t]])
        }
        (LossKind::Squared, Targets::Classes { .. }) => Err(Error::UnsupportedLoss {
            loss: "squared",
            context: "class-index targets".into(),
        }),
        (LossKind::CrossEntropy, _) => Err(Error::UnsupportedLoss {
            loss: "cross_entropy",
            context: "real-valued targets".into(),
        }),
    }
}

/// `(1/m) sum_t loss(P_t, y_t)`.
pub fn objective(loss: LossKind, p: &PredictionMatrix, targets: &Targets) -> Result<f64> {
    let pm = &p.0;
    if pm.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "prediction matrix has {} rows but there are {} targets",
            pm.nrows(),
            targets.len()
        )));
    }
    if pm.ncols() != targets.output_dim() {
        return Err(Error::Dimension(format!(
            "prediction matrix has {} columns but targets need {}",
            pm.ncols(),
            targets.output_dim()
        )));
    }
    if pm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction matrix".into()));
    }
    let m = pm.nrows();
    let mut total = 0.0;
    for t in 0..m {
        total += instance_loss(loss, pm, t, targets)?;
    }
    Ok(total / m as f64)
}

/// `L(c P)`.
pub fn objective_at_scale(loss: LossKind, p: &PredictionMatrix, targets: &Targets, c: f64) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::NonFinite("scale factor".into()));
    }
    objective(loss, &p.scaled(c), targets)
}

/// `d/dc L(c P)`, used to orient the closing rescale of a monotone path.
pub fn objective_scale_derivative(
    loss: LossKind,
    p: &PredictionMatrix,
    targets: &Targets,
    c: f64,
) -> Result<f64> {
    let pm = &p.0;
    let m = pm.nrows();
    let mut total = 0.0;
    match (loss, targets) {
        (LossKind::Squared, Targets::Scalar(y)) => {
            for t in 0..m {
                total += 2.0 * (c * pm[(t, 0)] - y[t]) * pm[(t, 0)];
            }
        }
        (LossKind::Squared, Targets::Vector(y)) => {
            for t in 0..m {
                for j in 0..pm.ncols() {
                    total += 2.0 * (c * pm[(t, j)] - y[(t, j)]) * pm[(t, j)];
                }
            }
        }
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            for t in 0..m {
                let row = pm.row(t);
                let lse = log_sum_exp(row.iter().map(|v| c * v));
                let expected: f64 = row.iter().map(|&v| (c * v - lse).exp() * v).sum();
                total += expected - row[labels[t]];
            }
        }
        _ => {
            // Reuse the compatibility error from the objective itself.
            objective(loss, p, targets)?;
        }
    }
    Ok(total / m as f64)
}

/// Gradient of the squared-loss objective with respect to `(W, v)`.
///
/// At a zero pre-activation the ReLU subgradient is taken to be 0.
pub fn objective_gradient_two_layer(
    params: &TwoLayerParams,
    data: &Dataset,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let y = data.scalar_targets("two-layer gradient")?;
    let p = prediction_matrix_two_layer(params, data)?;
    let m = data.m() as f64;
    let pre = data.x() * params.w.transpose(); // m×n
    let mut gw = DMatrix::zeros(params.width(), params.input_dim());
    let mut gv = DVector::zeros(params.width());
    for t in 0..data.m() {
        let r = 2.0 * (p.0[(t, 0)] - y[t]) / m;
        for i in 0..params.width() {
            let z = pre[(t, i)];
            if z > 0.0 {
                gv[i] += r * z;
                for j in 0..params.input_dim() {
                    gw[(i, j)] += r * params.v[i] * data.x()[(t, j)];
                }
            }
        }
    }
    Ok((gw, gv))
}
