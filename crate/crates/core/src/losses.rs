//! Dense multi-label logistic loss, segmentation softmax loss and the joint
//! objective.
//!
//! Both losses are negative log-likelihoods (non-negative, minimized). The
//! logistic loss is averaged over every position and class; the softmax loss
//! over supervised pixels only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gt::IGNORE;
use crate::tensor::{Element, Tensor};

/// Loss values of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_mul: Vec<f64>,
    pub total: f64,
    pub valid_pixel_count: usize,
    /// Set when the batch had no supervised pixel; `l_seg` is then 0.
    pub no_valid_pixels: bool,
}

impl LossReport {
    pub fn csv_header(levels: usize) -> String {
        let mut s = String::from("iter,l_seg");
        for j in 1..=levels {
            let _ = write!(s, ",l_mul_{j}");
        }
        s.push_str(",total");
        s
    }

    /// `iter,l_seg,l_mul_1..J,total` with shortest round-trip float formatting.
    pub fn csv_row(&self, iter: usize) -> String {
        let mut s = format!("{iter},{}", self.l_seg);
        for v in &self.l_mul {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{}", self.total);
        s
    }
}

/// `l_seg + λ·Σ l_mul`.
pub fn total_objective(
    l_seg: f64,
    l_mul: &[f64],
    lambda: f64,
    valid_pixel_count: usize,
) -> LossReport {
    let mul_sum: f64 = l_mul.iter().sum();
    LossReport {
        l_seg,
        l_mul: l_mul.to_vec(),
        total: l_seg + lambda * mul_sum,
        valid_pixel_count,
        no_valid_pixels: valid_pixel_count == 0,
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element `−[y·log σ(m) + (1−y)·log(1−σ(m))]`, overflow-free.
#[inline]
pub(crate) fn logistic_term(m: f64, y: f64) -> f64 {
    m.max(0.0) - m * y + (-m.abs()).exp().ln_1p()
}

fn check_same_shape<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::config(format!(
            "multilabel_nll: scores {} vs targets {}",
            logits.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

pub fn multilabel_nll_value<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    check_same_shape(logits, targets)?;
    let mut acc = 0.0f64;
    for (&m, &y) in logits.data().iter().zip(targets.data()) {
        acc += logistic_term(m.to_f64().unwrap(), y.to_f64().unwrap());
    }
    Ok(T::from_f64_lossy(acc / logits.numel() as f64))
}

/// `upstream · (σ(m) − y) / (I·K)`.
pub fn multilabel_nll_grad<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    upstream: T,
) -> Tensor<T> {
    let scale = upstream.to_f64().unwrap() / logits.numel() as f64;
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&m, &y)| {
            let g = sigmoid(m.to_f64().unwrap()) - y.to_f64().unwrap();
            T::from_f64_lossy(g * scale)
        })
        .collect();
    Tensor::from_vec(logits.shape(), data).expect("same shape")
}

fn check_labels<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<()> {
    let s = logits.shape();
    if labels.len() != s.n * s.h * s.w {
        return Err(Error::config(format!(
            "softmax_nll: {} labels for scores {s} (expected {})",
            labels.len(),
            s.n * s.h * s.w
        )));
    }
    if let Some((i, &bad)) = labels
        .iter()
        .enumerate()
        .find(|&(_, &l)| l != IGNORE && l as usize >= s.c)
    {
        return Err(Error::data(format!(
            "softmax_nll: label {bad} at position {i} is not below K = {}",
            s.c
        )));
    }
    Ok(())
}

/// Returns the mean loss and the number of supervised pixels.
pub fn softmax_nll_value<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, usize)> {
    check_labels(logits, labels)?;
    let s = logits.shape();
    let plane = s.h * s.w;
    let mut acc = 0.0f64;
    let mut valid = 0usize;
    for n in 0..s.n {
        for i in 0..plane {
            let y = labels[n * plane + i];
            if y == IGNORE {
                continue;
            }
            valid += 1;
            let at = |k: usize| logits.data()[(n * s.c + k) * plane + i].to_f64().unwrap();
            let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..s.c).map(|k| (at(k) - max).exp()).sum();
            acc += max + sum.ln() - at(y as usize);
        }
    }
    if valid == 0 {
        log::warn!("softmax_nll: batch has no supervised pixels; loss set to 0");
        return Ok((T::zero(), 0));
    }
    Ok((T::from_f64_lossy(acc / valid as f64), valid))
}

/// `upstream · (softmax − onehot) / I_valid` at supervised pixels, zero elsewhere.
pub fn softmax_nll_grad<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    valid: usize,
    upstream: T,
) -> Tensor<T> {
    let s = logits.shape();
    let mut grad = Tensor::zeros(s);
    if valid == 0 {
        return grad;
    }
    let scale = upstream.to_f64().unwrap() / valid as f64;
    let plane = s.h * s.w;
    let mut probs = vec![0.0f64; s.c];
    for n in 0..s.n {
        for i in 0..plane {
            let y = labels[n * plane + i];
            if y == IGNORE {
                continue;
            }
            let idx = |k: usize| (n * s.c + k) * plane + i;
            let max = (0..s.c)
                .map(|k| logits.data()[idx(k)].to_f64().unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = (logits.data()[idx(k)].to_f64().unwrap() - max).exp();
                sum += *p;
            }
            for (k, p) in probs.iter().enumerate() {
                let onehot = if k == y as usize { 1.0 } else { 0.0 };
                grad.data_mut()[idx(k)] = T::from_f64_lossy((p / sum - onehot) * scale);
            }
        }
    }
    grad
}
