//! Classifier head, cross-entropy loss and top-1 accuracy.

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::nn::Linear;
use crate::tensor::{dropout, DropoutMode, Tensor};
use rand::Rng;

/// Dropout followed by an affine map from `c` features to `|T|` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub dropout: f64,
    pub linear: Linear,
}

impl_parameterized!(ClassifierHead { linear });

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Tensor,
    mask: Option<Tensor>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(features: usize, classes: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            dropout,
            linear: Linear::new(features, classes, 1.0, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.outputs()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        features: &Tensor,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<(Tensor, HeadCache)> {
        let c = features.len();
        if c != self.linear.inputs() {
            return Err(Error::dim(format!(
                "classifier expects {} features, got {c}",
                self.linear.inputs()
            )));
        }
        let (dropped, mask) = dropout(features, self.dropout, mode, rng)?;
        let input = dropped.reshape(&[1, c])?;
        let logits = self.linear.forward(&input)?;
        let t = logits.len();
        Ok((logits.reshape(&[t])?, HeadCache { input, mask }))
    }

    /// Returns the gradient with respect to the head's input features.
    pub fn backward(&mut self, cache: &HeadCache, grad_logits: &Tensor) -> Result<Tensor> {
        let t = grad_logits.len();
        let g = self.linear.backward(&cache.input, &grad_logits.clone().reshape(&[1, t])?)?;
        let c = g.len();
        let g = g.reshape(&[c])?;
        Ok(match &cache.mask {
            Some(m) => g.zip_map(m, |a, b| a * b)?,
            None => g,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let c = features.len();
        let logits = self.linear.forward(&features.clone().reshape(&[1, c])?)?;
        let t = logits.len();
        logits.reshape(&[t])
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits and the predicted class.
pub fn classify(features: &Tensor, head: &ClassifierHead) -> Result<(Tensor, usize)> {
    let logits = head.logits(features)?;
    let predicted = argmax(logits.data());
    Ok((logits, predicted))
}

/// `−log softmax(logits)[target]` via a max-shifted log-sum-exp, together
/// with its gradient `softmax(logits) − onehot(target)`.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if target >= z.len() {
        return Err(Error::Argument(format!(
            "target class {target} out of range for {} logits",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let log_norm = max + sum.ln();
    let loss = log_norm - z[target];
    let mut grad: Vec<f64> = z.iter().map(|v| (v - log_norm).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss.max(0.0), Tensor::vector(grad)))
}

/// Fraction of positions where `predictions[i] == labels[i]`.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Argument("accuracy of an empty prediction list".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}
