//! Dense multi-label ground truth.
//!
//! A segmentation mask is split into one binary channel per class, and each
//! channel is dilated with a square window (a sliding max). The result at a
//! grid cell says which classes occur anywhere in the window centred there.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Element, Shape, Tensor};

/// Mask value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class indices, row-major `(height, width)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::data(format!(
                "label mask of {} values does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Checks every non-ignore value is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE && v as usize >= num_classes)
        {
            Some(i) => Err(Error::data(format!(
                "mask value {} at pixel (y={}, x={}) is neither a class below {num_classes} nor ignore",
                self.data[i],
                i / self.width,
                i % self.width
            ))),
            None => Ok(()),
        }
    }

    /// Sorted set of non-ignore classes present.
    pub fn classes_present(&self, num_classes: usize) -> Vec<u8> {
        let mut seen = vec![false; num_classes.max(1)];
        for &v in &self.data {
            if v != IGNORE && (v as usize) < num_classes {
                seen[v as usize] = true;
            }
        }
        (0..num_classes)
            .filter(|&k| seen[k])
            .map(|k| k as u8)
            .collect()
    }
}

/// Majority vote over `factor × factor` blocks, ignore excluded, ties to the
/// lowest class. Blocks with only ignore pixels stay ignore.
pub fn downsample_majority(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::config(format!(
            "mask {}x{} is not divisible by downsampling factor {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut out = LabelMask::filled(h, w, IGNORE);
    let mut counts = [0u32; 256];
    for by in 0..h {
        for bx in 0..w {
            counts.fill(0);
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    counts[mask.get(y, x) as usize] += 1;
                }
            }
            let mut best = IGNORE;
            let mut best_count = 0;
            for (k, &c) in counts.iter().enumerate().take(IGNORE as usize) {
                if c > best_count {
                    best_count = c;
                    best = k as u8;
                }
            }
            out.set(by, bx, best);
        }
    }
    Ok(out)
}

/// `K` binary planes of shape `(height, width)`, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryStack {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryStack {
    #[inline]
    pub fn get(&self, k: usize, y: usize, x: usize) -> u8 {
        self.data[(k * self.height + y) * self.width + x]
    }

    pub fn channel(&self, k: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.data[k * plane..(k + 1) * plane]
    }
}

/// One-hot channels of `mask`; ignore pixels are zero in every channel.
pub fn binarize_channels(mask: &LabelMask, num_classes: usize) -> Result<BinaryStack> {
    mask.validate(num_classes)?;
    let plane = mask.height * mask.width;
    let mut data = vec![0u8; num_classes * plane];
    for (i, &v) in mask.data.iter().enumerate() {
        if v != IGNORE {
            data[v as usize * plane + i] = 1;
        }
    }
    Ok(BinaryStack {
        classes: num_classes,
        height: mask.height,
        width: mask.width,
        data,
    })
}

/// Class-presence targets of one level, `(K, H', W')` of 0/1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiLabelTarget {
    /// Zero-based level index; 0 for targets built directly by [`dilate_window`].
    pub level: usize,
    /// Window side in pixels of the grid the target was dilated on.
    pub window: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MultiLabelTarget {
    #[inline]
    pub fn get(&self, k: usize, y: usize, x: usize) -> u8 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Stacks a batch of same-shaped targets into an `(N, K, H', W')` tensor.
    pub fn batch_tensor<T: Element>(targets: &[&MultiLabelTarget]) -> Result<Tensor<T>> {
        let first = targets
            .first()
            .ok_or_else(|| Error::config("empty multi-label target batch"))?;
        let shape = Shape::new(targets.len(), first.classes, first.height, first.width)?;
        let mut data = Vec::with_capacity(shape.numel());
        for t in targets {
            if (t.classes, t.height, t.width) != (first.classes, first.height, first.width) {
                return Err(Error::config(format!(
                    "multi-label targets differ in shape: ({}, {}, {}) vs ({}, {}, {})",
                    t.classes, t.height, t.width, first.classes, first.height, first.width
                )));
            }
            data.extend(
                t.data
                    .iter()
                    .map(|&v| if v != 0 { T::one() } else { T::zero() }),
            );
        }
        Tensor::from_vec(shape, data)
    }
}

/// Window centre of output cell `r` on the input grid.
#[inline]
pub fn cell_center(r: usize, out_stride: usize) -> usize {
    r * out_stride + (out_stride - 1) / 2
}

/// Sliding max of each channel over `window × window` neighbourhoods,
/// clipped at the borders and sampled at the centres given by
/// [`cell_center`].
pub fn dilate_window(
    binary: &BinaryStack,
    window: usize,
    out_stride: usize,
) -> Result<MultiLabelTarget> {
    if window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "dilation window must be odd, got {window}"
        )));
    }
    if out_stride == 0 || !binary.height.is_multiple_of(out_stride) || !binary.width.is_multiple_of(out_stride) {
        return Err(Error::config(format!(
            "grid {}x{} is not divisible by output stride {out_stride}",
            binary.height, binary.width
        )));
    }
    let half = window / 2;
    let (h, w) = (binary.height, binary.width);
    let (oh, ow) = (h / out_stride, w / out_stride);
    let mut data = vec![0u8; binary.classes * oh * ow];
    // Row pass: for each input row and output column, OR over the clipped span.
    let mut rows = vec![0u8; h * ow];
    for k in 0..binary.classes {
        let chan = binary.channel(k);
        for y in 0..h {
            let line = &chan[y * w..(y + 1) * w];
            // prefix counts make every span query O(1)
            let mut prefix = vec![0u32; w + 1];
            for x in 0..w {
                prefix[x + 1] = prefix[x] + line[x] as u32;
            }
            for c in 0..ow {
                let cx = cell_center(c, out_stride);
                let lo = cx.saturating_sub(half);
                let hi = (cx + half + 1).min(w);
                rows[y * ow + c] = (prefix[hi] > prefix[lo]) as u8;
            }
        }
        for c in 0..ow {
            let mut prefix = vec![0u32; h + 1];
            for y in 0..h {
                prefix[y + 1] = prefix[y] + rows[y * ow + c] as u32;
            }
            for r in 0..oh {
                let cy = cell_center(r, out_stride);
                let lo = cy.saturating_sub(half);
                let hi = (cy + half + 1).min(h);
                data[(k * oh + r) * ow + c] = (prefix[hi] > prefix[lo]) as u8;
            }
        }
    }
    Ok(MultiLabelTarget {
        level: 0,
        window,
        classes: binary.classes,
        height: oh,
        width: ow,
        data,
    })
}

/// Nominal extent on the segmentation grid of a DML-grid window `w`.
pub fn mask_grid_extent(window: usize, dml_extra_stride: usize) -> usize {
    window * dml_extra_stride
}

/// Odd dilation window on the segmentation grid for a DML-grid window.
///
/// With an even stride the nominal extent is even; one extra pixel gives the
/// symmetric window that also equals the receptive footprint of the strided
/// 3×3 conv followed by the window max pool.
pub fn mask_grid_window(window: usize, dml_extra_stride: usize) -> usize {
    let extent = mask_grid_extent(window, dml_extra_stride);
    if extent.is_multiple_of(2) {
        extent + 1
    } else {
        extent
    }
}

/// Supervision for one image: the segmentation mask on the score grid and
/// one multi-label target per level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageTargets {
    pub seg: LabelMask,
    pub mul: Vec<MultiLabelTarget>,
}

/// Multi-label targets from a mask already on the segmentation grid.
pub fn multilabel_targets_on_grid(
    grid_mask: &LabelMask,
    config: &ModelConfig,
) -> Result<Vec<MultiLabelTarget>> {
    let (gh, gw) = config.seg_grid();
    if (grid_mask.height, grid_mask.width) != (gh, gw) {
        return Err(Error::config(format!(
            "mask {}x{} does not match the segmentation grid {gh}x{gw}",
            grid_mask.height, grid_mask.width
        )));
    }
    let binary = binarize_channels(grid_mask, config.num_classes)?;
    config
        .window_sizes
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            let window = mask_grid_window(w, config.dml_extra_stride);
            let mut t = dilate_window(&binary, window, config.dml_extra_stride)?;
            t.level = j;
            Ok(t)
        })
        .collect()
}

/// Full procedure from an input-resolution mask: majority downsample to the
/// segmentation grid, binarize, dilate once per level.
pub fn gen_multilabel_gt(mask: &LabelMask, config: &ModelConfig) -> Result<Vec<MultiLabelTarget>> {
    Ok(prepare_targets(mask, config)?.mul)
}

pub fn prepare_targets(mask: &LabelMask, config: &ModelConfig) -> Result<ImageTargets> {
    let (h, w) = config.input_size;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::config(format!(
            "mask {}x{} does not match input size {h}x{w}",
            mask.height, mask.width
        )));
    }
    mask.validate(config.num_classes)?;
    let seg = downsample_majority(mask, config.low_stride())?;
    let mul = multilabel_targets_on_grid(&seg, config)?;
    Ok(ImageTargets { seg, mul })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_two_by_two() {
        let m = LabelMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let b = binarize_channels(&m, 2).unwrap();
        assert_eq!(b.channel(0), &[1, 0, 0, 1]);
        assert_eq!(b.channel(1), &[0, 1, 1, 0]);
    }

    #[test]
    fn binarize_all_ignore() {
        let m = LabelMask::filled(3, 3, IGNORE);
        let b = binarize_channels(&m, 4).unwrap();
        assert!(b.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn binarize_rejects_bad_value_and_names_pixel() {
        let m = LabelMask::new(2, 2, vec![0, 1, 7, 0]).unwrap();
        let err = binarize_channels(&m, 3).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("y=1, x=0"), "{err}");
    }

    #[test]
    fn dilating_a_point() {
        let mut m = LabelMask::filled(9, 9, 0);
        m.set(4, 4, 1);
        let b = binarize_channels(&m, 2).unwrap();
        let t = dilate_window(&b, 3, 1).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert_eq!(t.get(1, y, x), inside as u8, "({y},{x})");
            }
        }
    }

    #[test]
    fn window_one_is_identity() {
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 2, IGNORE, 0]).unwrap();
        let b = binarize_channels(&m, 3).unwrap();
        let t = dilate_window(&b, 1, 1).unwrap();
        assert_eq!(t.data, b.data);
    }

    #[test]
    fn even_window_rejected() {
        let b = binarize_channels(&LabelMask::filled(4, 4, 0), 1).unwrap();
        assert!(matches!(dilate_window(&b, 4, 1), Err(Error::Config(_))));
        assert!(matches!(dilate_window(&b, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn majority_vote_ties_and_ignore() {
        #[rustfmt::skip]
        let m = LabelMask::new(2, 4, vec![
            3, 1, IGNORE, IGNORE,
            1, 3, IGNORE, 2,
        ]).unwrap();
        let d = downsample_majority(&m, 2).unwrap();
        assert_eq!(d.data(), &[1, 2]);
        let all_ignore = LabelMask::filled(2, 2, IGNORE);
        assert_eq!(
            downsample_majority(&all_ignore, 2).unwrap().data(),
            &[IGNORE]
        );
    }

    #[test]
    fn large_config_window_arithmetic() {
        assert_eq!(mask_grid_extent(17, 4), 68);
        assert_eq!(17 * 8 * 4, 544);
        assert_eq!(mask_grid_window(17, 4), 69);
        assert_eq!(mask_grid_window(5, 3), 15);
    }
}
