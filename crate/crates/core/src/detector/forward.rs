//! Forward pass: backbone, proposal selection, heads and detections.

use ndarray::Array3;

use crate::geom::{decode_box, SceneBox};

use super::{DetectorError, DetectorParams, ModelConfig, Tensor, ToyScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Keep every proposal; no detection assembly.
    Train,
    /// Assemble detections with duplicate suppression.
    Infer,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One selected cell with everything its backward pass needs.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub row: usize,
    pub col: usize,
    pub anchor: SceneBox,
    pub obj_logit: f64,
    pub objectness: f64,
    /// Coarse offsets from the cell scorer.
    pub rpn_deltas: [f64; 4],
    /// Coarse box used for matching proposals to targets.
    pub proposal_box: SceneBox,
    /// Projection before the tanh.
    pub roi_pre: Vec<f64>,
    pub roi_feat: Vec<f64>,
    pub cls_logits: Vec<f64>,
    /// Refinement offsets from the head.
    pub head_deltas: [f64; 4],
    /// Coarse plus refinement; the output box decodes these.
    pub box_deltas: [f64; 4],
    pub output_box: SceneBox,
    /// Objectness cleared the foreground threshold.
    pub surviving: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: SceneBox,
    /// Index into the trace's proposal list.
    pub proposal_idx: usize,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub scene_id: u64,
    pub input: Array3<f64>,
    /// tanh output of the first conv layer.
    pub act1: Array3<f64>,
    /// tanh output of the second conv layer: the cell feature map.
    pub fmap: Array3<f64>,
    /// Objectness logit of every grid cell, row-major.
    pub obj_logits: Vec<f64>,
    /// Top-k cells by objectness, best first.
    pub proposals: Vec<Proposal>,
    /// Infer mode only; empty in train mode.
    pub detections: Vec<Detection>,
}

impl ForwardTrace {
    /// Indices of proposals whose objectness cleared the threshold.
    pub fn surviving(&self) -> Vec<usize> {
        (0..self.proposals.len())
            .filter(|&i| self.proposals[i].surviving)
            .collect()
    }
}

/// Zero-padded 3x3 convolution returning pre-activations.
pub(super) fn conv_forward(
    input: &Array3<f64>,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
) -> Array3<f64> {
    let (ih, iw, ic) = input.dim();
    let oc = w.shape[0];
    debug_assert_eq!(w.shape[1], ic);
    let oh = ih / stride;
    let ow = iw / stride;
    let mut out = Array3::zeros((oh, ow, oc));
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..oc {
                out[[oy, ox, o]] = b.data[o];
            }
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= ih {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= iw {
                        continue;
                    }
                    for o in 0..oc {
                        let mut acc = 0.0;
                        for i in 0..ic {
                            acc += w.data[w.at4(o, i, ky, kx)]
                                * input[[iy as usize, ix as usize, i]];
                        }
                        out[[oy, ox, o]] += acc;
                    }
                }
            }
        }
    }
    out
}

fn matvec(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let rows = w.shape[0];
    let cols = w.shape[1];
    debug_assert_eq!(cols, x.len());
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = match b {
            Some(b) => b.data[r],
            None => 0.0,
        };
        let base = r * cols;
        for c in 0..cols {
            acc += w.data[base + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// Run the detector on one scene.
pub fn forward(
    cfg: &ModelConfig,
    params: &DetectorParams,
    scene: &ToyScene,
    mode: Mode,
) -> Result<ForwardTrace, DetectorError> {
    let (h, w, c) = scene.pixels.dim();
    if h != cfg.img_h || w != cfg.img_w || c != cfg.c_in {
        return Err(DetectorError::ShapeMismatch(format!(
            "scene {}x{}x{} vs configured {}x{}x{}",
            h, w, c, cfg.img_h, cfg.img_w, cfg.c_in
        )));
    }

    let z1 = conv_forward(&scene.pixels, &params.conv1_w, &params.conv1_b, 2);
    let act1 = z1.mapv(f64::tanh);
    let z2 = conv_forward(&act1, &params.conv2_w, &params.conv2_b, 2);
    let fmap = z2.mapv(f64::tanh);

    let (gh, gw, c2) = fmap.dim();
    let mut obj_logits = vec![0.0; gh * gw];
    for row in 0..gh {
        for col in 0..gw {
            let mut acc = params.rpn_b.data[0];
            for k in 0..c2 {
                acc += params.rpn_w.data[k] * fmap[[row, col, k]];
            }
            obj_logits[row * gw + col] = acc;
        }
    }

    // Top-k cells by logit, ties broken by cell index for determinism.
    let mut order: Vec<usize> = (0..obj_logits.len()).collect();
    order.sort_by(|&a, &b| obj_logits[b].total_cmp(&obj_logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);

    let mut proposals = Vec::with_capacity(order.len());
    for &cell in &order {
        let row = cell / gw;
        let col = cell % gw;
        let feat: Vec<f64> = (0..c2).map(|k| fmap[[row, col, k]]).collect();

        let rpn_out = matvec(&params.rpn_w, Some(&params.rpn_b), &feat);
        let rpn_deltas = [rpn_out[1], rpn_out[2], rpn_out[3], rpn_out[4]];
        let anchor = cfg.anchor(row, col);
        let proposal_box = decode_box(&anchor, &rpn_deltas);

        let roi_pre = matvec(&params.roi_w, Some(&params.roi_b), &feat);
        let roi_feat: Vec<f64> = roi_pre.iter().map(|&v| v.tanh()).collect();
        let cls_logits = matvec(&params.cls_w, Some(&params.cls_b), &roi_feat);
        let reg_out = matvec(&params.reg_w, Some(&params.reg_b), &roi_feat);
        let head_deltas = [reg_out[0], reg_out[1], reg_out[2], reg_out[3]];
        let box_deltas = [
            rpn_deltas[0] + head_deltas[0],
            rpn_deltas[1] + head_deltas[1],
            rpn_deltas[2] + head_deltas[2],
            rpn_deltas[3] + head_deltas[3],
        ];
        let output_box = decode_box(&anchor, &box_deltas);
        let obj_logit = rpn_out[0];
        let objectness = sigmoid(obj_logit);
        proposals.push(Proposal {
            row,
            col,
            anchor,
            obj_logit,
            objectness,
            rpn_deltas,
            proposal_box,
            roi_pre,
            roi_feat,
            cls_logits,
            head_deltas,
            box_deltas,
            output_box,
            surviving: objectness >= cfg.fg_objectness,
        });
    }

    let detections = match mode {
        Mode::Train => Vec::new(),
        Mode::Infer => assemble_detections(cfg, &proposals),
    };

    Ok(ForwardTrace {
        mode,
        scene_id: scene.id,
        input: scene.pixels.clone(),
        act1,
        fmap,
        obj_logits,
        proposals,
        detections,
    })
}

/// Argmax class per proposal (background dropped), then greedy duplicate
/// suppression: a detection is kept only if its overlap with every kept box
/// stays below the threshold.
fn assemble_detections(cfg: &ModelConfig, proposals: &[Proposal]) -> Vec<Detection> {
    let bg = cfg.classes;
    let mut cands = Vec::new();
    for (idx, p) in proposals.iter().enumerate() {
        let probs = softmax(&p.cls_logits);
        let (best, &best_p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("classifier has at least one class");
        if best == bg {
            continue;
        }
        cands.push(Detection {
            class_id: best,
            score: best_p,
            bbox: p.output_box,
            proposal_idx: idx,
        });
    }
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.proposal_idx.cmp(&b.proposal_idx))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) < cfg.nms_iou) {
            kept.push(c);
        }
    }
    kept
}
