//! Reverse Huber (BerHu) loss with a per-batch threshold.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-element BerHu value for error `x` and threshold `c > 0`.
pub fn berhu(x: f64, c: f64) -> f64 {
    let a = x.abs();
    if a <= c {
        a
    } else {
        (x * x + c * c) / (2.0 * c)
    }
}

/// Derivative of [`berhu`] with respect to `x`, with `c` held fixed.
pub fn berhu_grad(x: f64, c: f64) -> f64 {
    if x.abs() <= c {
        if x == 0.0 {
            0.0
        } else {
            x.signum()
        }
    } else {
        x / c
    }
}

/// Threshold `c = fraction * max|pred - target|`.
pub fn berhu_threshold(pred: &[f64], target: &[f64], fraction: f64) -> f64 {
    fraction
        * pred
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .fold(0.0, f64::max)
}

fn check(pred: &Tensor, target: &Tensor, fraction: f64) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "berhu: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "berhu fraction {fraction} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Mean BerHu loss and its gradient with respect to `pred`.
pub fn berhu_value_and_grad(
    pred: &Tensor,
    target: &Tensor,
    fraction: f64,
) -> Result<(f64, Vec<f64>)> {
    check(pred, target, fraction)?;
    let c = berhu_threshold(pred.data(), target.data(), fraction);
    if c == 0.0 {
        return Ok((0.0, vec![0.0; pred.numel()]));
    }
    berhu_pinned(pred, target, c)
}

/// Mean BerHu loss and gradient for an externally fixed threshold `c`.
pub fn berhu_pinned(pred: &Tensor, target: &Tensor, c: f64) -> Result<(f64, Vec<f64>)> {
    check(pred, target, 1.0)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!(
            "berhu threshold {c} must be positive"
        )));
    }
    let n = pred.numel() as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let x = p - t;
            total += berhu(x, c);
            berhu_grad(x, c) / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Records the BerHu loss of `pred` against a constant `target` on `graph`.
pub fn berhu_loss(graph: &mut Graph, pred: Var, target: &Tensor, fraction: f64) -> Result<Var> {
    let (value, grad) = berhu_value_and_grad(graph.value(pred), target, fraction)?;
    graph.scalar_with_grad(pred, value, grad)
}

/// Like [`berhu_loss`] but with the threshold fixed by the caller.
pub fn berhu_loss_pinned(graph: &mut Graph, pred: Var, target: &Tensor, c: f64) -> Result<Var> {
    let (value, grad) = berhu_pinned(graph.value(pred), target, c)?;
    graph.scalar_with_grad(pred, value, grad)
}
