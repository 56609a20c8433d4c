//! Hand-written backward pass: detection losses, their gradients, and
//! gradient injection for pooled-feature regularizers.

use nalgebra::DVector;
use ndarray::Array3;

use crate::geom::encode_box;

use super::forward::{sigmoid, softmax, ForwardTrace};
use super::{Annotation, DetectorError, DetectorParams, ModelConfig, Tensor};

/// Minimum overlap between a proposal box and a target for a match.
pub const MATCH_IOU: f64 = 0.5;

/// Cells overlapping a target above this (without being its peak cell)
/// are excluded from objectness supervision: near-duplicates of the
/// peak should be neither encouraged nor punished.
pub const IGNORE_IOU: f64 = 0.3;

/// Huber-style regression penalty with unit transition point.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Greedy one-to-one assignment of proposals to targets.
///
/// Overlap is measured on the proposal's fixed anchor, not its decoded
/// box: decoded boxes move with the weights, which would turn the
/// supervision into a moving target (and, from a cold start, into no
/// target at all). Pairs with overlap below [`MATCH_IOU`] are never
/// matched. Remaining pairs are taken best overlap first; ties prefer
/// the earlier proposal, then the earlier target. Returns, per
/// proposal, the index of its matched target.
pub fn match_proposals(
    proposals: &[super::forward::Proposal],
    targets: &[Annotation],
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        for (ti, t) in targets.iter().enumerate() {
            let iou = p.anchor.iou(&t.bbox);
            if iou >= MATCH_IOU {
                pairs.push((iou, pi, ti));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![None; proposals.len()];
    let mut target_taken = vec![false; targets.len()];
    for (_, pi, ti) in pairs {
        if matched[pi].is_none() && !target_taken[ti] {
            matched[pi] = Some(ti);
            target_taken[ti] = true;
        }
    }
    matched
}

/// Relative weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, reg: 1.0, obj: 1.0 }
    }
}

/// Unweighted loss values of one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupervisedLosses {
    /// Cross-entropy over all proposals (background for unmatched ones).
    pub cls: f64,
    /// Smooth-L1 on box offsets, averaged over matched proposals.
    pub reg: f64,
    /// Binary cross-entropy on objectness over the whole cell grid,
    /// positives and negatives balanced.
    pub obj: f64,
    pub n_matched: usize,
}

impl SupervisedLosses {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls + w.reg * self.reg + w.obj * self.obj
    }
}

/// Stable `-[y ln s + (1-y) ln (1-s)]` for a logit `x`.
fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Gradient and feature-map accumulator shared by the loss backward pass
/// and regularizer injection.
struct BackAcc {
    grads: DetectorParams,
    d_fmap: Array3<f64>,
}

impl BackAcc {
    fn new(params: &DetectorParams, trace: &ForwardTrace) -> Self {
        Self {
            grads: params.zeros_like(),
            d_fmap: Array3::zeros(trace.fmap.dim()),
        }
    }

    /// Backward through the proposal-feature projection: `d_roi_feat` is
    /// the gradient at the tanh output of proposal `pi`. Accumulates into
    /// the projection weights and the cell feature map.
    fn add_roi_feat_grad(
        &mut self,
        params: &DetectorParams,
        trace: &ForwardTrace,
        pi: usize,
        d_roi_feat: &[f64],
    ) {
        let p = &trace.proposals[pi];
        let d = d_roi_feat.len();
        let c2 = params.roi_w.shape[1];
        let feat: Vec<f64> = (0..c2).map(|k| trace.fmap[[p.row, p.col, k]]).collect();
        for r in 0..d {
            let dpre = d_roi_feat[r] * (1.0 - p.roi_feat[r] * p.roi_feat[r]);
            if dpre == 0.0 {
                continue;
            }
            self.grads.roi_b.data[r] += dpre;
            let base = r * c2;
            for k in 0..c2 {
                self.grads.roi_w.data[base + k] += dpre * feat[k];
                self.d_fmap[[p.row, p.col, k]] += dpre * params.roi_w.data[base + k];
            }
        }
    }

    /// Backward through a cell-scorer row (0 = objectness, 1..5 = coarse
    /// offsets) at a grid cell.
    fn add_rpn_row_grad(
        &mut self,
        params: &DetectorParams,
        trace: &ForwardTrace,
        cell: (usize, usize),
        row: usize,
        g: f64,
    ) {
        if g == 0.0 {
            return;
        }
        let (cr, cc) = cell;
        let c2 = params.rpn_w.shape[1];
        self.grads.rpn_b.data[row] += g;
        let base = row * c2;
        for k in 0..c2 {
            self.grads.rpn_w.data[base + k] += g * trace.fmap[[cr, cc, k]];
            self.d_fmap[[cr, cc, k]] += g * params.rpn_w.data[base + k];
        }
    }

    /// Propagate the accumulated feature-map gradient through the
    /// backbone and return the finished parameter gradients.
    fn finish(mut self, params: &DetectorParams, trace: &ForwardTrace) -> DetectorParams {
        let dz2 = &self.d_fmap * &trace.fmap.mapv(|a| 1.0 - a * a);
        let d_act1 = conv_backward(
            &trace.act1,
            &dz2,
            &params.conv2_w,
            2,
            &mut self.grads.conv2_w,
            &mut self.grads.conv2_b,
        );
        let dz1 = &d_act1 * &trace.act1.mapv(|a| 1.0 - a * a);
        conv_backward(
            &trace.input,
            &dz1,
            &params.conv1_w,
            2,
            &mut self.grads.conv1_w,
            &mut self.grads.conv1_b,
        );
        self.grads
    }
}

/// Backward of the zero-padded 3x3 convolution. `dz` is the gradient at
/// the pre-activation output; weight and bias gradients accumulate into
/// `dw`/`db` and the input gradient is returned.
fn conv_backward(
    input: &Array3<f64>,
    dz: &Array3<f64>,
    w: &Tensor,
    stride: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Array3<f64> {
    let (ih, iw, ic) = input.dim();
    let (oh, ow, oc) = dz.dim();
    let mut d_input = Array3::zeros((ih, iw, ic));
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..oc {
                let g = dz[[oy, ox, o]];
                if g == 0.0 {
                    continue;
                }
                db.data[o] += g;
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
                        for i in 0..ic {
                            let idx = w.at4(o, i, ky, kx);
                            dw.data[idx] += g * input[[iy as usize, ix as usize, i]];
                            d_input[[iy as usize, ix as usize, i]] += g * w.data[idx];
                        }
                    }
                }
            }
        }
    }
    d_input
}

/// Compute losses and parameter gradients from a cached forward trace.
///
/// `params` must be the parameters that produced the trace. An empty
/// target list yields zero losses and zero gradients: absent labels mean
/// "no training signal", not "everything is background".
pub fn supervised_loss_from_trace(
    cfg: &ModelConfig,
    params: &DetectorParams,
    trace: &ForwardTrace,
    targets: &[Annotation],
    weights: &LossWeights,
) -> (SupervisedLosses, DetectorParams) {
    let n_p = trace.proposals.len();
    if targets.is_empty() || n_p == 0 {
        return (SupervisedLosses::default(), params.zeros_like());
    }
    let matched = match_proposals(&trace.proposals, targets);
    let n_matched = matched.iter().filter(|m| m.is_some()).count();
    let bg = cfg.classes;

    let mut acc = BackAcc::new(params, trace);
    let mut losses = SupervisedLosses { n_matched, ..Default::default() };

    // Objectness supervision covers the whole cell grid, not only the
    // selected proposals — otherwise cells outside the current top-k
    // never receive a push and the scorer cannot learn to surface the
    // right cells. Labeling is peaked: per target only the best-
    // overlapping cell is positive, and the remaining cells that still
    // overlap a target are excluded from the loss entirely. Training
    // every overlapping cell positive floods the top-k with redundant
    // cells of the same object, which crowds neighbouring objects out
    // of the proposal set. Positive and negative sides get equal total
    // weight so the couple of peak cells is not drowned out.
    let gw = cfg.grid_w();
    let n_cells = trace.obj_logits.len();
    let iou_with = |cell: usize, t: &Annotation| {
        cfg.anchor(cell / gw, cell % gw).iou(&t.bbox)
    };
    #[derive(PartialEq)]
    enum CellLabel {
        Positive,
        Negative,
        Ignored,
    }
    let mut label: Vec<CellLabel> = (0..n_cells)
        .map(|cell| {
            if targets.iter().any(|t| iou_with(cell, t) >= IGNORE_IOU) {
                CellLabel::Ignored
            } else {
                CellLabel::Negative
            }
        })
        .collect();
    for t in targets {
        let peak = (0..n_cells)
            .max_by(|&a, &b| iou_with(a, t).total_cmp(&iou_with(b, t)).then(b.cmp(&a)))
            .expect("grid is non-empty");
        label[peak] = CellLabel::Positive;
    }
    let n_pos = label.iter().filter(|l| **l == CellLabel::Positive).count();
    let n_neg = label.iter().filter(|l| **l == CellLabel::Negative).count();
    for (cell, l) in label.iter().enumerate() {
        let w_cell = match (l, n_pos > 0 && n_neg > 0) {
            (CellLabel::Ignored, _) => continue,
            (CellLabel::Positive, true) => 0.5 / n_pos as f64,
            (CellLabel::Negative, true) => 0.5 / n_neg as f64,
            (_, false) => 1.0 / (n_pos + n_neg) as f64,
        };
        let y = if *l == CellLabel::Positive { 1.0 } else { 0.0 };
        let x = trace.obj_logits[cell];
        losses.obj += w_cell * bce_with_logit(x, y);
        let g = weights.obj * w_cell * (sigmoid(x) - y);
        acc.add_rpn_row_grad(params, trace, (cell / gw, cell % gw), 0, g);
    }

    // Class cross-entropy over the selected proposals, with the matched
    // and background sides balanced the same way as objectness: most
    // proposals are background, and an unweighted mean teaches the head
    // to answer "background" everywhere.
    let n_neg = n_p - n_matched;
    for (pi, p) in trace.proposals.iter().enumerate() {
        let target_class = match matched[pi] {
            Some(ti) => targets[ti].class_id,
            None => bg,
        };
        let w_cls = if n_matched > 0 && n_neg > 0 {
            0.5 / if matched[pi].is_some() { n_matched as f64 } else { n_neg as f64 }
        } else {
            1.0 / n_p as f64
        };
        let probs = softmax(&p.cls_logits);
        losses.cls += w_cls * -probs[target_class].max(f64::MIN_POSITIVE).ln();
        let mut d_roi_feat = vec![0.0; p.roi_feat.len()];
        let d = p.roi_feat.len();
        for r in 0..probs.len() {
            let mut dl = probs[r];
            if r == target_class {
                dl -= 1.0;
            }
            let dl = weights.cls * w_cls * dl;
            acc.grads.cls_b.data[r] += dl;
            let base = r * d;
            for c in 0..d {
                acc.grads.cls_w.data[base + c] += dl * p.roi_feat[c];
                d_roi_feat[c] += dl * params.cls_w.data[base + c];
            }
        }

        if let Some(ti) = matched[pi] {
            let enc = encode_box(&targets[ti].bbox, &p.anchor);
            for j in 0..4 {
                let resid = p.box_deltas[j] - enc[j];
                losses.reg += smooth_l1(resid);
                let dj = weights.reg * smooth_l1_grad(resid) / n_matched as f64;
                // The offsets are the sum of the coarse and refinement
                // branches, so the same gradient reaches both.
                acc.add_rpn_row_grad(params, trace, (p.row, p.col), 1 + j, dj);
                if dj != 0.0 {
                    acc.grads.reg_b.data[j] += dj;
                    let base = j * d;
                    for c in 0..d {
                        acc.grads.reg_w.data[base + c] += dj * p.roi_feat[c];
                        d_roi_feat[c] += dj * params.reg_w.data[base + c];
                    }
                }
            }
        }

        acc.add_roi_feat_grad(params, trace, pi, &d_roi_feat);
    }

    if n_matched > 0 {
        losses.reg /= n_matched as f64;
    }

    (losses, acc.finish(params, trace))
}

/// Forward in train mode, then losses and gradients.
pub fn supervised_loss_and_grads(
    cfg: &ModelConfig,
    params: &DetectorParams,
    scene: &super::ToyScene,
    targets: &[Annotation],
    weights: &LossWeights,
) -> Result<(SupervisedLosses, DetectorParams), DetectorError> {
    let trace = super::forward::forward(cfg, params, scene, super::forward::Mode::Train)?;
    Ok(supervised_loss_from_trace(cfg, params, &trace, targets, weights))
}

/// Push externally supplied gradients at the pooled features back to the
/// parameters.
///
/// `global_grad` is the gradient at the scene's global pooled feature
/// (channel means over the cell grid); `fg_grad` the gradient at the
/// foreground pooled feature (mean proposal feature over surviving
/// proposals). Either may be absent. The result can be added to other
/// gradients before an optimizer step.
pub fn inject_feature_gradient(
    cfg: &ModelConfig,
    params: &DetectorParams,
    trace: &ForwardTrace,
    global_grad: Option<&DVector<f64>>,
    fg_grad: Option<&DVector<f64>>,
) -> Result<DetectorParams, DetectorError> {
    let mut acc = BackAcc::new(params, trace);
    let (gh, gw, c2) = trace.fmap.dim();

    if let Some(g) = global_grad {
        if g.len() != c2 {
            return Err(DetectorError::ShapeMismatch(format!(
                "global feature gradient has dim {}, feature map has {} channels",
                g.len(),
                c2
            )));
        }
        let scale = 1.0 / (gh * gw) as f64;
        for r in 0..gh {
            for c in 0..gw {
                for k in 0..c2 {
                    acc.d_fmap[[r, c, k]] += g[k] * scale;
                }
            }
        }
    }

    if let Some(g) = fg_grad {
        if g.len() != cfg.roi_dim {
            return Err(DetectorError::ShapeMismatch(format!(
                "foreground feature gradient has dim {}, proposal features have dim {}",
                g.len(),
                cfg.roi_dim
            )));
        }
        let surviving = trace.surviving();
        if surviving.is_empty() {
            return Err(DetectorError::NoProposals);
        }
        let scale = 1.0 / surviving.len() as f64;
        let d_roi: Vec<f64> = g.iter().map(|v| v * scale).collect();
        for pi in surviving {
            acc.add_roi_feat_grad(params, trace, pi, &d_roi);
        }
    }

    Ok(acc.finish(params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::forward::{forward, Mode, Proposal};
    use crate::detector::ToyScene;
    use crate::geom::SceneBox;
    use crate::seeds::rng_from;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            img_h: 8,
            img_w: 8,
            c_in: 2,
            conv1_channels: 3,
            feature_channels: 4,
            roi_dim: 5,
            classes: 2,
            top_k: 4,
            anchor_size: 4.0,
            ..ModelConfig::default()
        }
    }

    fn smooth_scene(cfg: &ModelConfig, seed: u64) -> ToyScene {
        let mut rng = rng_from(seed);
        let phase: Vec<f64> = (0..cfg.c_in).map(|_| rng.random_range(0.0..6.0)).collect();
        ToyScene {
            id: seed,
            pixels: Array3::from_shape_fn((cfg.img_h, cfg.img_w, cfg.c_in), |(i, j, k)| {
                0.4 + 0.3 * ((0.7 * i as f64 + 0.4 * j as f64 + phase[k]).sin())
            }),
        }
    }

    fn plain_proposal(pb: SceneBox) -> Proposal {
        Proposal {
            row: 0,
            col: 0,
            anchor: pb,
            obj_logit: 0.0,
            objectness: 0.5,
            rpn_deltas: [0.0; 4],
            proposal_box: pb,
            roi_pre: vec![],
            roi_feat: vec![],
            cls_logits: vec![],
            head_deltas: [0.0; 4],
            box_deltas: [0.0; 4],
            output_box: pb,
            surviving: true,
        }
    }

    #[test]
    fn smooth_l1_hand_values() {
        assert_abs_diff_eq!(smooth_l1(0.0), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(smooth_l1(0.5), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1(-0.5), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1(1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1(2.0), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1_grad(0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1_grad(2.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1_grad(-2.0), -1.0, epsilon = 1e-15);
        // The derivative is continuous across the transition point.
        assert_abs_diff_eq!(smooth_l1_grad(1.0 - 1e-9), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn matching_is_one_to_one_and_greedy() {
        let p0 = plain_proposal(SceneBox::new(10.0, 10.0, 10.0, 10.0));
        let p1 = plain_proposal(SceneBox::new(12.0, 10.0, 10.0, 10.0));
        let t_near = Annotation { class_id: 0, bbox: SceneBox::new(10.5, 10.0, 10.0, 10.0) };
        let t_far = Annotation { class_id: 1, bbox: SceneBox::new(26.0, 26.0, 4.0, 4.0) };
        let m = match_proposals(&[p0.clone(), p1.clone()], &[t_near, t_far]);
        // p0 overlaps t_near best and takes it; p1 cannot reuse it and
        // t_far is below the threshold for both.
        assert_eq!(m, vec![Some(0), None]);

        // Two targets competing for the same proposal: best overlap wins.
        let t_a = Annotation { class_id: 0, bbox: SceneBox::new(10.0, 10.0, 10.0, 10.0) };
        let t_b = Annotation { class_id: 1, bbox: SceneBox::new(11.0, 10.0, 10.0, 10.0) };
        let m = match_proposals(&[p0], &[t_b, t_a]);
        assert_eq!(m, vec![Some(1)]);
    }

    #[test]
    fn zero_params_losses_match_hand_values() {
        let cfg = tiny_cfg();
        let params = DetectorParams::zeros(&cfg);
        let scene = smooth_scene(&cfg, 5);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        // Target exactly on the first proposal's anchor: matched with
        // overlap 1, zero residual.
        let target = Annotation { class_id: 1, bbox: trace.proposals[0].anchor };
        let (losses, _) = supervised_loss_from_trace(
            &cfg,
            &params,
            &trace,
            &[target],
            &LossWeights::default(),
        );
        assert_eq!(losses.n_matched, 1);
        // Uniform softmax over classes+1 slots and objectness 1/2.
        assert_abs_diff_eq!(losses.cls, (3.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(losses.obj, (2.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(losses.reg, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn targets_equal_to_predictions_zero_the_regression_loss() {
        let cfg = tiny_cfg();
        let mut params = DetectorParams::init(&cfg, &mut rng_from(11));
        for (_, t) in params.tensors_mut() {
            for v in &mut t.data {
                *v *= 0.05;
            }
        }
        let scene = smooth_scene(&cfg, 6);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        let targets: Vec<Annotation> = trace
            .proposals
            .iter()
            .take(1)
            .map(|p| Annotation { class_id: 0, bbox: p.output_box })
            .collect();
        let m = match_proposals(&trace.proposals, &targets);
        assert_eq!(m[0], Some(0), "tiny offsets keep the obvious match");
        let (losses, _) =
            supervised_loss_from_trace(&cfg, &params, &trace, &targets, &LossWeights::default());
        assert_abs_diff_eq!(losses.reg, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_targets_mean_no_signal() {
        let cfg = tiny_cfg();
        let params = DetectorParams::init(&cfg, &mut rng_from(3));
        let scene = smooth_scene(&cfg, 7);
        let (losses, grads) =
            supervised_loss_and_grads(&cfg, &params, &scene, &[], &LossWeights::default())
                .unwrap();
        assert_eq!(losses, SupervisedLosses::default());
        assert_eq!(grads.max_abs_diff(&params.zeros_like()), 0.0);
    }

    fn fd_check_loss<F: Fn(&DetectorParams) -> f64>(
        params: &DetectorParams,
        grads: &DetectorParams,
        loss_at: F,
        probes_per_tensor: usize,
        seed: u64,
    ) {
        let mut rng = rng_from(seed);
        let h = 1e-5;
        for ti in 0..12 {
            let len = params.tensors()[ti].1.len();
            for _ in 0..probes_per_tensor {
                let ei = rng.random_range(0..len);
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1.data[ei] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1.data[ei] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grads.tensors()[ti].1.data[ei];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    rel <= 1e-4,
                    "tensor {} entry {}: analytic {} vs fd {} (rel {})",
                    params.tensors()[ti].0,
                    ei,
                    an,
                    fd,
                    rel
                );
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let params = DetectorParams::init(&cfg, &mut rng_from(21));
        let scene = smooth_scene(&cfg, 22);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        // Two targets sitting near proposal anchors so matches are stable
        // under the probe perturbations.
        let targets = vec![
            Annotation { class_id: 0, bbox: trace.proposals[0].anchor },
            Annotation { class_id: 1, bbox: trace.proposals[2].anchor },
        ];
        let weights = LossWeights { cls: 1.0, reg: 0.7, obj: 0.5 };
        let (_, grads) =
            supervised_loss_from_trace(&cfg, &params, &trace, &targets, &weights);
        fd_check_loss(
            &params,
            &grads,
            |p| {
                let (l, _) =
                    supervised_loss_and_grads(&cfg, p, &scene, &targets, &weights).unwrap();
                l.weighted_total(&weights)
            },
            4,
            23,
        );
    }

    #[test]
    fn injected_feature_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let params = DetectorParams::init(&cfg, &mut rng_from(31));
        let scene = smooth_scene(&cfg, 32);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        assert!(!trace.surviving().is_empty());
        let mut rng = rng_from(33);
        let a = DVector::from_fn(cfg.feature_channels, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(cfg.roi_dim, |_, _| rng.random_range(-1.0..1.0));
        let grads =
            inject_feature_gradient(&cfg, &params, &trace, Some(&a), Some(&b)).unwrap();
        // The probe loss is linear in the pooled features, so its exact
        // pooled-feature gradients are the fixed vectors above.
        let loss_at = |p: &DetectorParams| {
            let t = forward(&cfg, p, &scene, Mode::Train).unwrap();
            let (gh, gw, c2) = t.fmap.dim();
            let mut l = 0.0;
            for k in 0..c2 {
                let mut s = 0.0;
                for r in 0..gh {
                    for c in 0..gw {
                        s += t.fmap[[r, c, k]];
                    }
                }
                l += a[k] * s / (gh * gw) as f64;
            }
            let surv = t.surviving();
            for d in 0..cfg.roi_dim {
                let s: f64 = surv.iter().map(|&pi| t.proposals[pi].roi_feat[d]).sum();
                l += b[d] * s / surv.len() as f64;
            }
            l
        };
        fd_check_loss(&params, &grads, loss_at, 4, 34);
    }

    #[test]
    fn inject_is_additive_across_the_two_paths() {
        let cfg = tiny_cfg();
        let params = DetectorParams::init(&cfg, &mut rng_from(41));
        let scene = smooth_scene(&cfg, 42);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        let a = DVector::from_element(cfg.feature_channels, 0.3);
        let b = DVector::from_element(cfg.roi_dim, -0.2);
        let both = inject_feature_gradient(&cfg, &params, &trace, Some(&a), Some(&b)).unwrap();
        let mut sum = inject_feature_gradient(&cfg, &params, &trace, Some(&a), None).unwrap();
        sum.add_scaled(
            &inject_feature_gradient(&cfg, &params, &trace, None, Some(&b)).unwrap(),
            1.0,
        );
        assert!(both.max_abs_diff(&sum) < 1e-12);
    }

    #[test]
    fn inject_rejects_bad_dims() {
        let cfg = tiny_cfg();
        let params = DetectorParams::init(&cfg, &mut rng_from(51));
        let scene = smooth_scene(&cfg, 52);
        let trace = forward(&cfg, &params, &scene, Mode::Train).unwrap();
        let bad = DVector::from_element(cfg.feature_channels + 1, 1.0);
        assert!(matches!(
            inject_feature_gradient(&cfg, &params, &trace, Some(&bad), None),
            Err(DetectorError::ShapeMismatch(_))
        ));
    }
}
