//! Last-token readout, MLP classifier head, the two loss regimes
//! (cross-entropy single-label, Huber multi-label) and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::matrix::Matrix;
use crate::num::{Real, Rng};
use crate::transformer::HiddenStates;

/// Head layout, resolved per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Single affine layer.
    Linear { classes: usize },
    /// Hidden layer with ReLU, then affine.
    Mlp { hidden: usize, classes: usize },
}

impl HeadSpec {
    pub fn classes(&self) -> usize {
        match self {
            HeadSpec::Linear { classes } => *classes,
            HeadSpec::Mlp { classes, .. } => *classes,
        }
    }

    pub fn param_count(&self, d_model: usize) -> usize {
        match self {
            HeadSpec::Linear { classes } => d_model * classes + classes,
            HeadSpec::Mlp { hidden, classes } => {
                d_model * hidden + hidden + hidden * classes + classes
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pub hidden: Option<(Matrix<T>, Matrix<T>)>,
    pub out_weight: Matrix<T>,
    pub out_bias: Matrix<T>,
}

pub struct HeadCache<T> {
    /// Pre-ReLU hidden activations, present iff the head has a hidden layer.
    pre: Option<Vec<T>>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn build(spec: &HeadSpec, d_model: usize, rng: &mut Rng) -> Result<Self> {
        if spec.classes() < 2 {
            return Err(GraftError::Config(format!(
                "classifier needs at least 2 classes, got {}",
                spec.classes()
            )));
        }
        Ok(match spec {
            HeadSpec::Linear { classes } => ClassifierHead {
                hidden: None,
                out_weight: Matrix::gaussian(d_model, *classes, 0.02, rng),
                out_bias: Matrix::zeros(1, *classes),
            },
            HeadSpec::Mlp { hidden, classes } => ClassifierHead {
                hidden: Some((
                    Matrix::gaussian(d_model, *hidden, 0.02, rng),
                    Matrix::zeros(1, *hidden),
                )),
                out_weight: Matrix::gaussian(*hidden, *classes, 0.02, rng),
                out_bias: Matrix::zeros(1, *classes),
            },
        })
    }

    pub fn spec(&self) -> HeadSpec {
        match &self.hidden {
            Some((w, _)) => HeadSpec::Mlp {
                hidden: w.cols(),
                classes: self.out_weight.cols(),
            },
            None => HeadSpec::Linear {
                classes: self.out_weight.cols(),
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.out_weight.cols()
    }

    pub fn zeros_like(&self) -> ClassifierHead<T> {
        ClassifierHead {
            hidden: self
                .hidden
                .as_ref()
                .map(|(w, b)| (Matrix::zeros(w.rows(), w.cols()), Matrix::zeros(1, b.cols()))),
            out_weight: Matrix::zeros(self.out_weight.rows(), self.out_weight.cols()),
            out_bias: Matrix::zeros(1, self.out_bias.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        if let Some((w, b)) = &self.hidden {
            f("head.hidden_w".into(), w);
            f("head.hidden_b".into(), b);
        }
        f("head.out_w".into(), &self.out_weight);
        f("head.out_b".into(), &self.out_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        if let Some((w, b)) = &mut self.hidden {
            f("head.hidden_w".into(), w);
            f("head.hidden_b".into(), b);
        }
        f("head.out_w".into(), &mut self.out_weight);
        f("head.out_b".into(), &mut self.out_bias);
    }

    pub fn cast<U: Real>(&self) -> ClassifierHead<U> {
        ClassifierHead {
            hidden: self.hidden.as_ref().map(|(w, b)| (w.cast(), b.cast())),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
        }
    }

    /// Affine, or affine ∘ ReLU ∘ affine when a hidden layer is present.
    pub fn classify(&self, v: &[T]) -> Result<(Vec<T>, HeadCache<T>)> {
        let expect = self
            .hidden
            .as_ref()
            .map(|(w, _)| w.rows())
            .unwrap_or(self.out_weight.rows());
        if v.len() != expect {
            return Err(GraftError::ShapeMismatch(format!(
                "head expects input of length {expect}, got {}",
                v.len()
            )));
        }
        let (features, pre): (Vec<T>, Option<Vec<T>>) = match &self.hidden {
            Some((w, b)) => {
                let mut pre: Vec<T> = b.data().to_vec();
                for (i, &vi) in v.iter().enumerate() {
                    for (h, &wij) in pre.iter_mut().zip(w.row(i).iter()) {
                        *h += vi * wij;
                    }
                }
                let post: Vec<T> = pre.iter().map(|&x| x.maximum(T::ZERO)).collect();
                (post, Some(pre))
            }
            None => (v.to_vec(), None),
        };
        let mut logits: Vec<T> = self.out_bias.data().to_vec();
        for (i, &fi) in features.iter().enumerate() {
            for (l, &wij) in logits.iter_mut().zip(self.out_weight.row(i).iter()) {
                *l += fi * wij;
            }
        }
        Ok((logits, HeadCache { pre }))
    }

    /// Returns the gradient w.r.t. the head input; accumulates parameter
    /// gradients into `grad`.
    pub fn backward(
        &self,
        v: &[T],
        cache: &HeadCache<T>,
        d_logits: &[T],
        grad: &mut ClassifierHead<T>,
    ) -> Vec<T> {
        match (&self.hidden, &cache.pre) {
            (Some((w, _)), Some(pre)) => {
                let features: Vec<T> = pre.iter().map(|&x| x.maximum(T::ZERO)).collect();
                let (gw, gb) = (&mut grad.out_weight, &mut grad.out_bias);
                for (i, &fi) in features.iter().enumerate() {
                    for (g, &dl) in gw.row_mut(i).iter_mut().zip(d_logits.iter()) {
                        *g += fi * dl;
                    }
                }
                for (g, &dl) in gb.data_mut().iter_mut().zip(d_logits.iter()) {
                    *g += dl;
                }
                let mut d_features = vec![T::ZERO; features.len()];
                for (i, df) in d_features.iter_mut().enumerate() {
                    for (&wij, &dl) in self.out_weight.row(i).iter().zip(d_logits.iter()) {
                        *df += wij * dl;
                    }
                }
                // ReLU gate
                for (df, &p) in d_features.iter_mut().zip(pre.iter()) {
                    if p <= T::ZERO {
                        *df = T::ZERO;
                    }
                }
                let (ghw, ghb) = grad.hidden.as_mut().expect("gradient head shape matches");
                for (i, &vi) in v.iter().enumerate() {
                    for (g, &df) in ghw.row_mut(i).iter_mut().zip(d_features.iter()) {
                        *g += vi * df;
                    }
                }
                for (g, &df) in ghb.data_mut().iter_mut().zip(d_features.iter()) {
                    *g += df;
                }
                let mut d_v = vec![T::ZERO; v.len()];
                for (i, dv) in d_v.iter_mut().enumerate() {
                    for (&wij, &df) in w.row(i).iter().zip(d_features.iter()) {
                        *dv += wij * df;
                    }
                }
                d_v
            }
            _ => {
                for (i, &vi) in v.iter().enumerate() {
                    for (g, &dl) in grad.out_weight.row_mut(i).iter_mut().zip(d_logits.iter()) {
                        *g += vi * dl;
                    }
                }
                for (g, &dl) in grad.out_bias.data_mut().iter_mut().zip(d_logits.iter()) {
                    *g += dl;
                }
                let mut d_v = vec![T::ZERO; v.len()];
                for (i, dv) in d_v.iter_mut().enumerate() {
                    for (&wij, &dl) in self.out_weight.row(i).iter().zip(d_logits.iter()) {
                        *dv += wij * dl;
                    }
                }
                d_v
            }
        }
    }
}

/// Either a single class id in `[0, K)` or a multi-hot vector over K.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelTarget {
    Class(usize),
    MultiHot(Vec<bool>),
}

impl LabelTarget {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            LabelTarget::Class(c) if *c < classes => Ok(()),
            LabelTarget::Class(c) => Err(GraftError::DataFormat(format!(
                "class id {c} out of range for {classes} classes"
            ))),
            LabelTarget::MultiHot(v) if v.len() == classes => {
                if v.iter().any(|&b| b) {
                    Ok(())
                } else {
                    Err(GraftError::DataFormat(
                        "multi-hot target has no positive label".into(),
                    ))
                }
            }
            LabelTarget::MultiHot(v) => Err(GraftError::DataFormat(format!(
                "multi-hot width {} vs {classes} classes",
                v.len()
            ))),
        }
    }

    pub fn contains(&self, class: usize) -> bool {
        match self {
            LabelTarget::Class(c) => *c == class,
            LabelTarget::MultiHot(v) => v.get(class).copied().unwrap_or(false),
        }
    }
}

/// Returns row `seq_len − 1` of the backbone output.
pub fn readout_last<T: Real>(h: &HiddenStates<T>) -> Result<&[T]> {
    if h.seq_len() == 0 {
        return Err(GraftError::ShapeMismatch("empty sequence".into()));
    }
    Ok(h.values().row(h.seq_len() - 1))
}

/// `−log softmax(logits)[class]`, stabilized by max subtraction.
pub fn cross_entropy<T: Real>(logits: &[T], class: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(GraftError::ShapeMismatch("need at least 2 logits".into()));
    }
    if class >= logits.len() {
        return Err(GraftError::DataFormat(format!(
            "class id {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .copied()
        .fold(T::from_f64(f64::NEG_INFINITY), |a, b| a.maximum(b));
    let log_sum = logits
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<T>()
        .ln();
    Ok(log_sum - (logits[class] - max))
}

/// d loss / d logits for cross-entropy: `softmax − onehot`.
pub fn cross_entropy_grad<T: Real>(logits: &[T], class: usize) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::from_f64(f64::NEG_INFINITY), |a, b| a.maximum(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / total;
            if i == class {
                p - T::ONE
            } else {
                p
            }
        })
        .collect()
}

/// Mean over classes of the Huber penalty on `logit − target` against raw
/// logits: `0.5·e²` for |e| ≤ δ, else `δ·(|e| − 0.5·δ)`.
pub fn huber_multilabel<T: Real>(logits: &[T], targets: &[bool], delta: T) -> Result<T> {
    if logits.len() != targets.len() {
        return Err(GraftError::ShapeMismatch(format!(
            "huber: {} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let half = T::from_f64(0.5);
    let mut total = T::ZERO;
    for (&l, &t) in logits.iter().zip(targets.iter()) {
        let e = l - if t { T::ONE } else { T::ZERO };
        let a = e.abs();
        total += if a <= delta {
            half * e * e
        } else {
            delta * (a - half * delta)
        };
    }
    Ok(total / T::from_f64(logits.len() as f64))
}

pub fn huber_multilabel_grad<T: Real>(logits: &[T], targets: &[bool], delta: T) -> Vec<T> {
    let inv_k = T::ONE / T::from_f64(logits.len() as f64);
    logits
        .iter()
        .zip(targets.iter())
        .map(|(&l, &t)| {
            let e = l - if t { T::ONE } else { T::ZERO };
            inv_k * e.maximum(-delta).minimum(delta)
        })
        .collect()
}

/// Argmax with ties broken toward the lower index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the k largest logits, ties broken toward the lower index.
pub fn top_k_indices<T: Real>(logits: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// A sample scores 1 if any true label appears among its k highest logits;
/// returns the mean over samples.
pub fn top_k_accuracy<T: Real>(
    logit_rows: &[Vec<T>],
    labels: &[LabelTarget],
    k: usize,
) -> Result<f64> {
    if logit_rows.len() != labels.len() || logit_rows.is_empty() {
        return Err(GraftError::ShapeMismatch(format!(
            "top_k_accuracy: {} logit rows vs {} labels",
            logit_rows.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (row, label) in logit_rows.iter().zip(labels.iter()) {
        let non_empty = match label {
            LabelTarget::Class(_) => true,
            LabelTarget::MultiHot(v) => v.iter().any(|&b| b),
        };
        if !non_empty {
            return Err(GraftError::DataFormat("empty label set".into()));
        }
        if top_k_indices(row, k).iter().any(|&i| label.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / logit_rows.len() as f64)
}

/// Plain single-label accuracy over argmax predictions.
pub fn accuracy<T: Real>(logit_rows: &[Vec<T>], labels: &[LabelTarget]) -> Result<f64> {
    if logit_rows.len() != labels.len() || logit_rows.is_empty() {
        return Err(GraftError::ShapeMismatch("accuracy: size mismatch".into()));
    }
    let mut hits = 0usize;
    for (row, label) in logit_rows.iter().zip(labels.iter()) {
        if label.contains(argmax(row)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / logit_rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Top5AnyHit,
}

impl MetricKind {
    pub fn label(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Top5AnyHit => "top5_any_hit",
        }
    }
}

/// Loss value and logit gradient for one example.
pub fn loss_and_grad<T: Real>(
    kind: LossKind,
    logits: &[T],
    target: &LabelTarget,
) -> Result<(T, Vec<T>)> {
    match (kind, target) {
        (LossKind::CrossEntropy, LabelTarget::Class(c)) => Ok((
            cross_entropy(logits, *c)?,
            cross_entropy_grad(logits, *c),
        )),
        (LossKind::Huber, LabelTarget::MultiHot(v)) => {
            let delta = T::ONE;
            Ok((
                huber_multilabel(logits, v, delta)?,
                huber_multilabel_grad(logits, v, delta),
            ))
        }
        (LossKind::Huber, LabelTarget::Class(c)) => {
            // single-label task under the Huber regime: one-hot target
            let v: Vec<bool> = (0..logits.len()).map(|i| i == *c).collect();
            let delta = T::ONE;
            Ok((
                huber_multilabel(logits, &v, delta)?,
                huber_multilabel_grad(logits, &v, delta),
            ))
        }
        (LossKind::CrossEntropy, LabelTarget::MultiHot(_)) => Err(GraftError::Config(
            "cross-entropy needs single-label targets".into(),
        )),
    }
}
