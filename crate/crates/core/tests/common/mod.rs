//! Independent reference implementations used by the integration tests.
//! Every oracle here is a direct loop over the definition, with no shared
//! code from the crate's kernels.

#![allow(dead_code)]

use dmlseg::gt::{LabelMask, IGNORE};
use dmlseg::ops::ConvParams;
use dmlseg::{Shape, Tensor};
use rand::Rng;

pub fn rand_tensor<R: Rng>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Zero-padded cross-correlation by six nested loops.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    p: ConvParams,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let span_h = (ws.h - 1) * p.dilation + 1;
    let span_w = (ws.w - 1) * p.dilation + 1;
    let oh = (xs.h + 2 * p.padding - span_h) / p.stride + 1;
    let ow = (xs.w + 2 * p.padding - span_w) / p.stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow).unwrap();
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy =
                                    (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix =
                                    (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let o = os.offset(n, co, oy, ox);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

/// Max over each window, treating padding as −∞.
pub fn maxpool_oracle(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(s.n, s.c, oh, ow).unwrap();
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let y = (oy * stride + dy) as isize - pad as isize;
                            let xx = (ox * stride + dx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                                best = best.max(x.at(n, c, y as usize, xx as usize));
                            }
                        }
                    }
                    let o = os.offset(n, c, oy, ox);
                    out.data_mut()[o] = best;
                }
            }
        }
    }
    out
}

/// Class presence in the clipped `window × window` box around each cell
/// centre `r·s + (s−1)/2`, by direct scan. Output is `(K, H/s, W/s)`.
pub fn brute_dilation(mask: &LabelMask, classes: usize, window: usize, stride: usize) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = (h / stride, w / stride);
    let half = (window / 2) as isize;
    let mut out = vec![0u8; classes * oh * ow];
    for k in 0..classes {
        for r in 0..oh {
            for c in 0..ow {
                let cy = (r * stride + (stride - 1) / 2) as isize;
                let cx = (c * stride + (stride - 1) / 2) as isize;
                let mut hit = 0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (y, x) = (cy + dy, cx + dx);
                        if y >= 0
                            && x >= 0
                            && (y as usize) < h
                            && (x as usize) < w
                            && mask.get(y as usize, x as usize) as usize == k
                        {
                            hit = 1;
                        }
                    }
                }
                out[(k * oh + r) * ow + c] = hit;
            }
        }
    }
    out
}

/// Majority vote per block, ignore excluded, lowest class on ties.
pub fn majority_oracle(mask: &LabelMask, f: usize) -> LabelMask {
    let (h, w) = (mask.height() / f, mask.width() / f);
    let mut out = LabelMask::filled(h, w, IGNORE);
    for by in 0..h {
        for bx in 0..w {
            let mut counts = std::collections::BTreeMap::new();
            for y in 0..f {
                for x in 0..f {
                    let v = mask.get(by * f + y, bx * f + x);
                    if v != IGNORE {
                        *counts.entry(v).or_insert(0) += 1;
                    }
                }
            }
            let best = counts
                .iter()
                .map(|(&k, &c)| (c, std::cmp::Reverse(k)))
                .max();
            if let Some((_, std::cmp::Reverse(k))) = best {
                out.set(by, bx, k);
            }
        }
    }
    out
}

/// Blocky random mask: a few random rectangles over a background, with
/// optional ignore speckle.
pub fn random_mask<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    classes: usize,
    ignore_rate: f64,
) -> LabelMask {
    let mut m = LabelMask::filled(h, w, rng.random_range(0..classes) as u8);
    for _ in 0..rng.random_range(0..6) {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let y1 = rng.random_range(y0..=h);
        let x1 = rng.random_range(x0..=w);
        let k = rng.random_range(0..classes) as u8;
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, k);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(ignore_rate) {
                m.set(y, x, IGNORE);
            }
        }
    }
    m
}

pub struct MetricOracle {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub mean_wrong_class: f64,
    pub mean_wrong_label: f64,
}

/// IoU from per-class pixel loops and wrong-class/label from explicit sets.
pub fn metric_oracle(pairs: &[(LabelMask, LabelMask)], classes: usize) -> MetricOracle {
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    let mut wc = 0.0;
    let mut wl = 0.0;
    for (pred, gt) in pairs {
        let n = gt.data().len();
        for k in 0..classes {
            for i in 0..n {
                let g = gt.data()[i];
                if g == IGNORE {
                    continue;
                }
                let p = pred.data()[i] as usize == k;
                let t = g as usize == k;
                if p && t {
                    inter[k] += 1;
                }
                if p || t {
                    union[k] += 1;
                }
            }
        }
        let gt_set: std::collections::BTreeSet<u8> =
            gt.data().iter().copied().filter(|&v| v != IGNORE).collect();
        let wrong: std::collections::BTreeSet<u8> = pred
            .data()
            .iter()
            .zip(gt.data())
            .filter(|(_, &g)| g != IGNORE)
            .map(|(&p, _)| p)
            .filter(|p| !gt_set.contains(p))
            .collect();
        wc += wrong.len() as f64;
        wl += pred
            .data()
            .iter()
            .zip(gt.data())
            .filter(|(p, &g)| g != IGNORE && wrong.contains(p))
            .count() as f64;
    }
    let per_class_iou: Vec<Option<f64>> = (0..classes)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    MetricOracle {
        mean_iou: defined.iter().sum::<f64>() / defined.len().max(1) as f64,
        per_class_iou,
        mean_wrong_class: wc / pairs.len() as f64,
        mean_wrong_label: wl / pairs.len() as f64,
    }
}

/// Mean binary cross-entropy written with the textbook sigmoid.
pub fn multilabel_ref(logits: &[f64], targets: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&m, &y) in logits.iter().zip(targets) {
        let s = 1.0 / (1.0 + (-m).exp());
        acc -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
    }
    acc / logits.len() as f64
}

/// Softmax cross-entropy over `(N, K, H, W)` logits, averaged over
/// non-ignore pixels.
pub fn softmax_ref(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let s = logits.shape();
    let mut acc = 0.0;
    let mut valid = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let l = labels[(n * s.h + y) * s.w + x];
                if l == IGNORE {
                    continue;
                }
                let z: f64 = (0..s.c).map(|k| logits.at(n, k, y, x).exp()).sum();
                acc += z.ln() - logits.at(n, l as usize, y, x);
                valid += 1;
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        acc / valid as f64
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Largest `|a − b| / max(|a|, |b|, 1e-6)` over the elements.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// A prediction/GT pair with ignore pixels; one in five predictions is a
/// lightly perturbed copy of the GT.
pub fn random_pair<R: Rng>(rng: &mut R, k: usize) -> (LabelMask, LabelMask) {
    let h = rng.random_range(1..12);
    let w = rng.random_range(1..12);
    let rate = rng.random_range(0.0..0.4);
    let gt = random_mask(rng, h, w, k, rate);
    let pred = if rng.random_bool(0.2) {
        // near-perfect prediction with a few flips
        let mut p = gt.clone();
        for v in p.data_mut() {
            if *v == IGNORE || rng.random_bool(0.05) {
                *v = rng.random_range(0..k) as u8;
            }
        }
        p
    } else {
        random_mask(rng, h, w, k, 0.0)
    };
    (pred, gt)
}
