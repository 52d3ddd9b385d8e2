//! Segmentation network with dense multi-label (DML) blocks.
//!
//! ```text
//! image ─ low-level convs (stride S_low) ─┬─ seg block (dilated, stride 1) ── s ───────┐
//!                                         ├─ DML block 1: conv /e → score → winmax → adapt → ×e ─┤
//!                                         ├─ DML block 2 ...                               ├─ Σ → p
//!                                         └─ DML block J ...                               ┘
//! ```
//!
//! Each DML block owns its weights. Its class scores live on the coarse grid
//! (stride `S_low · e`) where the window max pool runs; the result is
//! replicated back to the segmentation grid and summed into the fused score.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gt::{ImageTargets, LabelMask, MultiLabelTarget};
use crate::ops::ConvParams;
use crate::param::{ParamSet, Parameter};
use crate::tensor::{Element, Shape, Tensor};

/// One low-level conv stage: 3×3 kernel, the given stride, then ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowStage {
    pub width: usize,
    pub stride: usize,
}

/// One segmentation-block stage: 3×3 kernel at stride 1 with dilation, then ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegStage {
    pub width: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    pub low_level: Vec<LowStage>,
    pub seg_block: Vec<SegStage>,
    /// Conv widths inside each DML block; the first stage carries the extra stride.
    pub dml_block: Vec<usize>,
    pub dml_extra_stride: usize,
    /// Window sides on the DML grid, one per level, odd and strictly decreasing.
    pub window_sizes: Vec<usize>,
    pub lambda: f64,
    pub levels: usize,
}

impl Default for ModelConfig {
    /// The 96×96, 8-class configuration used for the synthetic experiments.
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            input_size: (96, 96),
            low_level: vec![
                LowStage {
                    width: 16,
                    stride: 2,
                },
                LowStage {
                    width: 32,
                    stride: 2,
                },
            ],
            seg_block: vec![
                SegStage {
                    width: 32,
                    dilation: 2,
                },
                SegStage {
                    width: 32,
                    dilation: 2,
                },
            ],
            dml_block: vec![32],
            dml_extra_stride: 2,
            window_sizes: vec![11, 5, 3],
            lambda: 1.0,
            levels: 3,
        }
    }
}

impl ModelConfig {
    /// Stride plan of the full-size setting: 1/8 segmentation grid, 1/32 DML
    /// grid, windows 35/17/7.
    pub fn full_scale() -> Self {
        ModelConfig {
            num_classes: 60,
            input_size: (512, 512),
            low_level: vec![
                LowStage {
                    width: 64,
                    stride: 2,
                },
                LowStage {
                    width: 128,
                    stride: 2,
                },
                LowStage {
                    width: 256,
                    stride: 2,
                },
            ],
            seg_block: vec![
                SegStage {
                    width: 512,
                    dilation: 2,
                },
                SegStage {
                    width: 512,
                    dilation: 4,
                },
            ],
            dml_block: vec![512],
            dml_extra_stride: 4,
            window_sizes: vec![35, 17, 7],
            lambda: 1.0,
            levels: 3,
        }
    }

    /// Tiny 3-level setting used for finite-difference gradient checks.
    pub fn grad_check() -> Self {
        ModelConfig {
            num_classes: 5,
            input_size: (32, 32),
            low_level: vec![
                LowStage {
                    width: 4,
                    stride: 2,
                },
                LowStage {
                    width: 6,
                    stride: 2,
                },
            ],
            seg_block: vec![SegStage {
                width: 6,
                dilation: 2,
            }],
            dml_block: vec![6],
            dml_extra_stride: 2,
            window_sizes: vec![5, 3, 1],
            lambda: 1.0,
            levels: 3,
        }
    }

    /// Keeps the first `levels` windows (largest first); `0` gives the plain FCN.
    pub fn with_levels(&self, levels: usize) -> Result<Self> {
        if levels > self.window_sizes.len() {
            return Err(Error::config(format!(
                "cannot use {levels} levels with only {} window sizes",
                self.window_sizes.len()
            )));
        }
        let mut c = self.clone();
        c.window_sizes.truncate(levels);
        c.levels = levels;
        Ok(c)
    }

    /// Product of the low-level strides.
    pub fn low_stride(&self) -> usize {
        self.low_level.iter().map(|s| s.stride).product()
    }

    /// Stride of the DML grid relative to the input.
    pub fn dml_stride(&self) -> usize {
        self.low_stride() * self.dml_extra_stride
    }

    pub fn seg_grid(&self) -> (usize, usize) {
        let s = self.low_stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn dml_grid(&self) -> (usize, usize) {
        let s = self.dml_stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Side in input pixels covered by a DML-grid window.
    pub fn input_extent(&self, window: usize) -> usize {
        window * self.dml_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_classes == 0 || self.num_classes > 255 {
            return fail(format!(
                "num_classes must be in 1..=255, got {}",
                self.num_classes
            ));
        }
        if self.low_level.is_empty() {
            return fail("low-level block needs at least one stage".into());
        }
        if self.low_level.iter().any(|s| s.width == 0 || s.stride == 0)
            || self
                .seg_block
                .iter()
                .any(|s| s.width == 0 || s.dilation == 0)
            || self.dml_block.contains(&0)
        {
            return fail("stage widths, strides and dilations must be positive".into());
        }
        if self.dml_extra_stride == 0 {
            return fail("dml_extra_stride must be positive".into());
        }
        if self.levels > 3 {
            return fail(format!("levels must be in 0..=3, got {}", self.levels));
        }
        if self.window_sizes.len() != self.levels {
            return fail(format!(
                "{} window sizes given for {} levels",
                self.window_sizes.len(),
                self.levels
            ));
        }
        if self.levels > 0 && self.dml_block.is_empty() {
            return fail("DML blocks need at least one conv stage".into());
        }
        if let Some(w) = self.window_sizes.iter().find(|&&w| w % 2 == 0) {
            return fail(format!("window sizes must be odd, got {w}"));
        }
        if self.window_sizes.windows(2).any(|p| p[0] <= p[1]) {
            return fail(format!(
                "window sizes must be strictly decreasing, got {:?}",
                self.window_sizes
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        let (h, w) = self.input_size;
        let s = self.dml_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return fail(format!(
                "input {h}x{w} must be divisible by the DML stride {s} (= {} x {})",
                self.low_stride(),
                self.dml_extra_stride
            ));
        }
        Ok(())
    }
}

/// DML first-stage kernel: smallest odd size covering the stride.
fn dml_kernel(stride: usize) -> usize {
    let k = stride + 1;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    params: ConvParams,
    relu: bool,
}

impl ConvLayer {
    fn new(
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        params: ConvParams,
        relu: bool,
    ) -> Self {
        ConvLayer {
            name,
            in_channels,
            out_channels,
            kernel,
            params,
            relu,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DmlBlock {
    convs: Vec<ConvLayer>,
    score: ConvLayer,
    window: usize,
    adapt: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    low: Vec<ConvLayer>,
    seg: Vec<ConvLayer>,
    seg_score: ConvLayer,
    dml: Vec<DmlBlock>,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let k = config.num_classes;
        let mut c = 3;
        let mut low = Vec::new();
        for (i, s) in config.low_level.iter().enumerate() {
            low.push(ConvLayer::new(
                format!("low.{i}"),
                c,
                s.width,
                3,
                ConvParams::new(s.stride, 1, 1),
                true,
            ));
            c = s.width;
        }
        let low_out = c;
        let mut seg = Vec::new();
        for (i, s) in config.seg_block.iter().enumerate() {
            seg.push(ConvLayer::new(
                format!("seg.{i}"),
                c,
                s.width,
                3,
                ConvParams::new(1, s.dilation, s.dilation),
                true,
            ));
            c = s.width;
        }
        let seg_score = ConvLayer::new("seg.score".into(), c, k, 1, ConvParams::default(), false);
        let dml = config
            .window_sizes
            .iter()
            .enumerate()
            .map(|(j, &window)| {
                let prefix = format!("dml{}", j + 1);
                let mut c = low_out;
                let convs = config
                    .dml_block
                    .iter()
                    .enumerate()
                    .map(|(i, &width)| {
                        let layer = if i == 0 {
                            let kernel = dml_kernel(config.dml_extra_stride);
                            ConvLayer::new(
                                format!("{prefix}.conv.{i}"),
                                c,
                                width,
                                kernel,
                                ConvParams::new(config.dml_extra_stride, 1, kernel / 2),
                                true,
                            )
                        } else {
                            ConvLayer::new(
                                format!("{prefix}.conv.{i}"),
                                c,
                                width,
                                3,
                                ConvParams::new(1, 1, 1),
                                true,
                            )
                        };
                        c = width;
                        layer
                    })
                    .collect();
                DmlBlock {
                    convs,
                    score: ConvLayer::new(
                        format!("{prefix}.score"),
                        c,
                        k,
                        1,
                        ConvParams::default(),
                        false,
                    ),
                    window,
                    adapt: ConvLayer::new(
                        format!("{prefix}.adapt"),
                        k,
                        k,
                        1,
                        ConvParams::default(),
                        false,
                    ),
                }
            })
            .collect();
        Layout {
            low,
            seg,
            seg_score,
            dml,
        }
    }

    fn all_layers(&self) -> Vec<&ConvLayer> {
        let mut v: Vec<&ConvLayer> = self.low.iter().chain(&self.seg).collect();
        v.push(&self.seg_score);
        for b in &self.dml {
            v.extend(&b.convs);
            v.push(&b.score);
            v.push(&b.adapt);
        }
        v
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter init seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// Segmentation scores `(N, K, H/S_low, W/S_low)`.
    pub s: Var,
    /// Per-level multi-label scores on the DML grid.
    pub m: Vec<Var>,
    /// `m` replicated onto the segmentation grid.
    pub m_up: Vec<Var>,
    /// Fused scores `s + Σ m_up`.
    pub p: Var,
    /// Per-level class scores on the DML grid, before pooling.
    pub scores: Vec<Var>,
    /// Window-max-pooled class scores, before the adaptive layer.
    pub pooled: Vec<Var>,
    /// Parameter leaves, in [`ParamSet`] order.
    pub params: Vec<Var>,
}

/// Scalar loss variables of one forward pass.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub l_seg: Var,
    pub l_mul: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamSet<T>,
}

impl<T: Element> Model<T> {
    /// Builds the network with fan-in scaled Gaussian weights and zero biases.
    ///
    /// Each parameter draws from its own stream seeded by `(seed, name)`, so
    /// configurations that share a parameter name share its initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = ParamSet::new();
        for layer in layout.all_layers() {
            let wshape = Shape::new(
                layer.out_channels,
                layer.in_channels,
                layer.kernel,
                layer.kernel,
            )?;
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let wname = layer.weight_name();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(wname.as_bytes()));
            params.insert(Parameter::new(
                wname,
                Tensor::randn(wshape, (2.0 / fan_in).sqrt(), &mut rng),
            ))?;
            let bshape = Shape::new(layer.out_channels, 1, 1, 1)?;
            params.insert(Parameter::new(layer.bias_name(), Tensor::zeros(bshape)))?;
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layer(
        &self,
        graph: &mut Graph<T>,
        vars: &[Var],
        layer: &ConvLayer,
        input: Var,
    ) -> Result<Var> {
        let lookup = |name: String| -> Result<Var> {
            self.params
                .position(&name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
        };
        let w = lookup(layer.weight_name())?;
        let b = lookup(layer.bias_name())?;
        let out = graph.conv2d(input, w, b, layer.params)?;
        if layer.relu {
            graph.relu(out)
        } else {
            Ok(out)
        }
    }

    pub fn check_input(&self, images: Shape) -> Result<()> {
        let (h, w) = self.config.input_size;
        if images.c != 3 || images.h != h || images.w != w {
            return Err(Error::config(format!(
                "input batch {images} does not match (N, 3, {h}, {w})"
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `images` (N, 3, H, W) on `graph`.
    pub fn forward(&self, graph: &mut Graph<T>, images: &Tensor<T>) -> Result<NetworkOutput> {
        self.check_input(images.shape())?;
        let vars = self.params.bind(graph);
        let x = graph.leaf(images.clone(), false);

        let mut o = x;
        for layer in &self.layout.low {
            o = self.layer(graph, &vars, layer, o)?;
        }

        let mut h = o;
        for layer in &self.layout.seg {
            h = self.layer(graph, &vars, layer, h)?;
        }
        let s = self.layer(graph, &vars, &self.layout.seg_score, h)?;

        let mut m = Vec::new();
        let mut m_up = Vec::new();
        let mut scores = Vec::new();
        let mut pooled = Vec::new();
        for block in &self.layout.dml {
            let mut f = o;
            for layer in &block.convs {
                f = self.layer(graph, &vars, layer, f)?;
            }
            let score = self.layer(graph, &vars, &block.score, f)?;
            let pool = graph.maxpool2d(score, block.window, 1, block.window / 2)?;
            let mj = self.layer(graph, &vars, &block.adapt, pool)?;
            let up = graph.upsample_nearest(mj, self.config.dml_extra_stride)?;
            scores.push(score);
            pooled.push(pool);
            m.push(mj);
            m_up.push(up);
        }

        let mut terms = vec![s];
        terms.extend(&m_up);
        let p = graph.elementwise_sum(&terms)?;
        Ok(NetworkOutput {
            s,
            m,
            m_up,
            p,
            scores,
            pooled,
            params: vars,
        })
    }

    /// Adds `l_seg` on the fused scores, one `l_mul` per level, and their
    /// λ-weighted total.
    pub fn objective(
        &self,
        graph: &mut Graph<T>,
        out: &NetworkOutput,
        targets: &[&ImageTargets],
    ) -> Result<ObjectiveVars> {
        let ps = graph.shape(out.p);
        if targets.len() != ps.n {
            return Err(Error::config(format!(
                "{} targets for a batch of {}",
                targets.len(),
                ps.n
            )));
        }
        let mut labels = Vec::with_capacity(ps.n * ps.h * ps.w);
        for t in targets {
            if (t.seg.height(), t.seg.width()) != (ps.h, ps.w) {
                return Err(Error::config(format!(
                    "segmentation target {}x{} does not match scores {ps}",
                    t.seg.height(),
                    t.seg.width()
                )));
            }
            if t.mul.len() != out.m.len() {
                return Err(Error::config(format!(
                    "{} multi-label levels in targets, model has {}",
                    t.mul.len(),
                    out.m.len()
                )));
            }
            labels.extend_from_slice(t.seg.data());
        }
        let l_seg = graph.softmax_nll(out.p, labels)?;
        let mut l_mul = Vec::new();
        for (j, &mj) in out.m.iter().enumerate() {
            let batch: Vec<&MultiLabelTarget> = targets.iter().map(|t| &t.mul[j]).collect();
            let y = MultiLabelTarget::batch_tensor::<T>(&batch)?;
            l_mul.push(graph.multilabel_nll(mj, y)?);
        }
        let total = if l_mul.is_empty() {
            l_seg
        } else {
            let mul_sum = graph.elementwise_sum(&l_mul)?;
            let weighted = graph.scale(mul_sum, T::from_f64_lossy(self.config.lambda))?;
            graph.elementwise_sum(&[l_seg, weighted])?
        };
        Ok(ObjectiveVars {
            total,
            l_seg,
            l_mul,
        })
    }

    /// Fused scores of `images` without keeping the graph.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, images)?;
        Ok(graph.value(out.p).clone())
    }

    /// Total objective value, no gradients.
    pub fn loss_value(&self, images: &Tensor<T>, targets: &[&ImageTargets]) -> Result<T> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, images)?;
        let obj = self.objective(&mut graph, &out, targets)?;
        graph.value(obj.total).item()
    }

    /// Plain-text listing of every layer with its output shape for batch size 1.
    pub fn architecture(&self) -> String {
        let c = &self.config;
        let (h, w) = c.input_size;
        let (sh, sw) = c.seg_grid();
        let (dh, dw) = c.dml_grid();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "classes {} | input {h}x{w} | S_low {} | S_dml {} | levels {} | windows {:?} | lambda {}",
            c.num_classes,
            c.low_stride(),
            c.dml_stride(),
            c.levels,
            c.window_sizes,
            c.lambda
        );
        let mut line = |name: &str, desc: String, shape: (usize, usize, usize)| {
            let _ = writeln!(
                s,
                "{name:<14} {desc:<34} -> (N, {}, {}, {})",
                shape.0, shape.1, shape.2
            );
        };
        let conv = |l: &ConvLayer| {
            format!(
                "conv{k}x{k} s{} d{} p{} {}->{}{}",
                l.params.stride,
                l.params.dilation,
                l.params.padding,
                l.in_channels,
                l.out_channels,
                if l.relu { " relu" } else { "" },
                k = l.kernel
            )
        };
        line("input", String::new(), (3, h, w));
        let (mut ch, mut cw) = (h, w);
        for (l, st) in self.layout.low.iter().zip(&c.low_level) {
            ch /= st.stride;
            cw /= st.stride;
            line(&l.name, conv(l), (l.out_channels, ch, cw));
        }
        for l in &self.layout.seg {
            line(&l.name, conv(l), (l.out_channels, sh, sw));
        }
        line(
            "seg.score",
            conv(&self.layout.seg_score),
            (c.num_classes, sh, sw),
        );
        for (j, b) in self.layout.dml.iter().enumerate() {
            for l in &b.convs {
                line(&l.name, conv(l), (l.out_channels, dh, dw));
            }
            line(&b.score.name, conv(&b.score), (c.num_classes, dh, dw));
            line(
                &format!("dml{}.pool", j + 1),
                format!("winmax{k}x{k} s1 p{}", b.window / 2, k = b.window),
                (c.num_classes, dh, dw),
            );
            line(&b.adapt.name, conv(&b.adapt), (c.num_classes, dh, dw));
            line(
                &format!("dml{}.up", j + 1),
                format!("nearest x{}", c.dml_extra_stride),
                (c.num_classes, sh, sw),
            );
        }
        line(
            "fuse",
            format!("s + {} x m_up", c.levels),
            (c.num_classes, sh, sw),
        );
        let _ = writeln!(
            s,
            "parameters {} tensors, {} scalars",
            self.params.len(),
            self.params.num_scalars()
        );
        s
    }
}

/// Per-pixel argmax over classes (ties to the lowest index), replicated up
/// to `full_size`.
pub fn predict_labels<T: Element>(
    p: &Tensor<T>,
    full_size: (usize, usize),
) -> Result<Vec<LabelMask>> {
    let s = p.shape();
    let (fh, fw) = full_size;
    if fh % s.h != 0 || fw % s.w != 0 || fh / s.h != fw / s.w {
        return Err(Error::config(format!(
            "score grid {}x{} does not evenly divide output size {fh}x{fw}",
            s.h, s.w
        )));
    }
    if s.c > 255 {
        return Err(Error::config(format!(
            "{} classes do not fit a label mask",
            s.c
        )));
    }
    let factor = fh / s.h;
    let plane = s.h * s.w;
    (0..s.n)
        .map(|n| {
            let mut grid = vec![0u8; plane];
            for (i, g) in grid.iter_mut().enumerate() {
                let mut best = 0;
                let mut best_v = p.data()[n * s.c * plane + i];
                for k in 1..s.c {
                    let v = p.data()[(n * s.c + k) * plane + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                *g = best as u8;
            }
            let mut data = vec![0u8; fh * fw];
            for y in 0..fh {
                for x in 0..fw {
                    data[y * fw + x] = grid[(y / factor) * s.w + x / factor];
                }
            }
            LabelMask::new(fh, fw, data)
        })
        .collect()
}
