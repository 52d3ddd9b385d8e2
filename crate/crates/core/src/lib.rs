//! Semantic segmentation with dense multi-label blocks for region consistency.
//!
//! The crate is self-contained: a small NCHW tensor type with reverse-mode
//! autodiff, the segmentation network and its dense multi-label (DML)
//! branches, ground-truth generation by binary dilation, the joint loss,
//! evaluation metrics (IoU, wrong-class and wrong-label counts), a synthetic
//! scene generator and a training driver.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gt;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod ops;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use gt::{LabelMask, MultiLabelTarget, IGNORE};
pub use metrics::EvalReport;
pub use model::{predict_labels, Model, ModelConfig, NetworkOutput};
pub use synth::{Sample, SceneSpec};
pub use tensor::{Element, Shape, Tensor};
