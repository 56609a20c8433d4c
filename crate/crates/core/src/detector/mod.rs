//! The toy two-stage detector.
//!
//! A small convolutional backbone turns a scene into a grid of cell
//! features. A per-cell scorer emits an objectness logit and coarse box
//! offsets; the top-k cells become proposals with one fixed anchor each.
//! Each proposal's cell feature is projected to a proposal feature from
//! which a classification head and a refinement head read their outputs;
//! the final box offsets are the sum of the coarse and refinement offsets
//! against the anchor. Forward and backward passes are written out by
//! hand so every gradient can be checked against finite differences.

mod backward;
mod checkpoint;
mod forward;
mod optim;

pub use backward::{
    inject_feature_gradient, match_proposals, smooth_l1, smooth_l1_grad,
    supervised_loss_and_grads, supervised_loss_from_trace, LossWeights, SupervisedLosses,
    MATCH_IOU,
};
pub use checkpoint::{
    load_checkpoint, load_tensor_set, save_checkpoint, save_tensor_set, CheckpointError,
};
pub use forward::{forward, sigmoid, softmax, Detection, ForwardTrace, Mode, Proposal};
pub use optim::{ema_update, grads_all_zero, sgd_momentum_step, SgdConfig, UpdateScope};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::geom::SceneBox;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectorError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace holds no proposals")]
    NoProposals,
}

/// One scene: `[H][W][C_in]` pixels plus a stable id.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub id: u64,
    pub pixels: Array3<f64>,
}

/// Ground-truth or pseudo-label instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: SceneBox,
}

/// Architecture hyperparameters. Both backbone layers halve the
/// resolution, so the proposal grid is `img_h/4 x img_w/4` with a
/// stride of 4 — coarse enough that neighbouring cells see visibly
/// different patches, which the proposal scorer and classifier rely on
/// to separate an object's best cell from its runners-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub c_in: usize,
    pub conv1_channels: usize,
    pub feature_channels: usize,
    pub roi_dim: usize,
    /// Object classes; the classifier adds one background slot.
    pub classes: usize,
    pub top_k: usize,
    pub anchor_size: f64,
    pub nms_iou: f64,
    /// Objectness (after sigmoid) needed for a proposal to count as
    /// foreground when pooling proposal features.
    pub fg_objectness: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_h: 32,
            img_w: 32,
            c_in: 3,
            conv1_channels: 8,
            feature_channels: 16,
            roi_dim: 16,
            classes: 3,
            top_k: 8,
            anchor_size: 12.0,
            nms_iou: 0.5,
            fg_objectness: 0.5,
        }
    }
}

impl ModelConfig {
    pub const STRIDE: usize = 4;

    pub fn grid_h(&self) -> usize {
        self.img_h / Self::STRIDE
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / Self::STRIDE
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let err = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.img_h < Self::STRIDE || self.img_w < Self::STRIDE {
            return err("img_h and img_w must cover at least one grid cell");
        }
        if self.img_h % Self::STRIDE != 0 || self.img_w % Self::STRIDE != 0 {
            return err("img_h and img_w must be multiples of the stride");
        }
        if self.c_in == 0
            || self.conv1_channels == 0
            || self.feature_channels == 0
            || self.roi_dim == 0
        {
            return err("channel and feature dimensions must be positive");
        }
        if self.classes == 0 {
            return err("need at least one object class");
        }
        if self.top_k == 0 || self.top_k > self.grid_h() * self.grid_w() {
            return err("top_k must be in 1..=grid cells");
        }
        if !(self.anchor_size > 0.0 && self.anchor_size.is_finite()) {
            return err("anchor_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return err("nms_iou must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fg_objectness) {
            return err("fg_objectness must be in [0, 1]");
        }
        Ok(())
    }

    /// Fixed anchor of a grid cell, centred on the cell.
    pub fn anchor(&self, row: usize, col: usize) -> SceneBox {
        let s = Self::STRIDE as f64;
        SceneBox::new(
            (col as f64 + 0.5) * s,
            (row as f64 + 0.5) * s,
            self.anchor_size,
            self.anchor_size,
        )
    }
}

/// Dense little tensor: a shape plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }
}

/// Every trainable tensor of the detector.
///
/// `rpn_w`/`rpn_b` hold five rows per cell feature: row 0 is the
/// objectness logit, rows 1..5 the coarse box offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub rpn_w: Tensor,
    pub rpn_b: Tensor,
    pub roi_w: Tensor,
    pub roi_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

impl DetectorParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c1 = cfg.conv1_channels;
        let c2 = cfg.feature_channels;
        let d = cfg.roi_dim;
        let kp1 = cfg.classes + 1;
        Self {
            conv1_w: Tensor::zeros(&[c1, cfg.c_in, 3, 3]),
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w: Tensor::zeros(&[c2, c1, 3, 3]),
            conv2_b: Tensor::zeros(&[c2]),
            rpn_w: Tensor::zeros(&[5, c2]),
            rpn_b: Tensor::zeros(&[5]),
            roi_w: Tensor::zeros(&[d, c2]),
            roi_b: Tensor::zeros(&[d]),
            cls_w: Tensor::zeros(&[kp1, d]),
            cls_b: Tensor::zeros(&[kp1]),
            reg_w: Tensor::zeros(&[4, d]),
            reg_b: Tensor::zeros(&[4]),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let fills: [(&mut Tensor, usize, usize); 6] = [
            (&mut p.conv1_w, cfg.c_in * 9, cfg.conv1_channels * 9),
            (&mut p.conv2_w, cfg.conv1_channels * 9, cfg.feature_channels * 9),
            (&mut p.rpn_w, cfg.feature_channels, 5),
            (&mut p.roi_w, cfg.feature_channels, cfg.roi_dim),
            (&mut p.cls_w, cfg.roi_dim, cfg.classes + 1),
            (&mut p.reg_w, cfg.roi_dim, 4),
        ];
        for (t, fan_in, fan_out) in fills {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub const NAMES: [&'static str; 12] = [
        "conv1_w", "conv1_b", "conv2_w", "conv2_b", "rpn_w", "rpn_b", "roi_w", "roi_b",
        "cls_w", "cls_b", "reg_w", "reg_b",
    ];

    pub fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("rpn_w", &self.rpn_w),
            ("rpn_b", &self.rpn_b),
            ("roi_w", &self.roi_w),
            ("roi_b", &self.roi_b),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("reg_w", &self.reg_w),
            ("reg_b", &self.reg_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("rpn_w", &mut self.rpn_w),
            ("rpn_b", &mut self.rpn_b),
            ("roi_w", &mut self.roi_w),
            ("roi_b", &mut self.roi_b),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
            ("reg_w", &mut self.reg_w),
            ("reg_b", &mut self.reg_b),
        ]
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &DetectorParams, alpha: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    /// Largest absolute entry difference across all tensors.
    pub fn max_abs_diff(&self, other: &DetectorParams) -> f64 {
        let mut m = 0.0f64;
        for ((_, a), (_, b)) in self.tensors().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                m = m.max((x - y).abs());
            }
        }
        m
    }
}
