//! Average-precision scoring of recorded detections against ground
//! truth, plus the cumulative per-batch curve.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::detector::{Annotation, Detection};

/// Everything the evaluator needs about one scene.
#[derive(Clone, Debug, Default)]
pub struct SceneEval {
    pub detections: Vec<Detection>,
    pub truths: Vec<Annotation>,
}

/// Detection quality at a fixed overlap threshold.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EvalResult {
    /// Average precision per class, for classes with at least one
    /// ground-truth instance.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Unweighted mean of the per-class values.
    pub map: f64,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

/// Score detections at `iou_threshold`.
///
/// Per class, detections are ranked by score across all scenes (ties
/// broken by scene and detection order) and matched greedily to the
/// best-overlapping unmatched ground truth of the same scene and class.
/// AP is the area under the right-side precision envelope over the
/// resulting curve. Detections of classes absent from the ground truth
/// count as false positives but join no AP.
pub fn evaluate_map(scenes: &[SceneEval], iou_threshold: f64) -> EvalResult {
    let mut classes: Vec<usize> = scenes
        .iter()
        .flat_map(|s| s.truths.iter().map(|t| t.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap = BTreeMap::new();
    let mut tp_total = 0;
    let mut fp_total = 0;
    let mut gt_total = 0;

    for &class in &classes {
        let (ap, tp, fp, n_gt) = class_ap(scenes, class, iou_threshold);
        per_class_ap.insert(class, ap);
        tp_total += tp;
        fp_total += fp;
        gt_total += n_gt;
    }

    // Detections of classes that never occur in the ground truth.
    for s in scenes {
        fp_total += s
            .detections
            .iter()
            .filter(|d| classes.binary_search(&d.class_id).is_err())
            .count();
    }

    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    EvalResult { per_class_ap, map, tp: tp_total, fp: fp_total, missed: gt_total - tp_total }
}

fn class_ap(scenes: &[SceneEval], class: usize, thr: f64) -> (f64, usize, usize, usize) {
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (di, d) in s.detections.iter().enumerate() {
            if d.class_id == class {
                dets.push((si, di, d.score));
            }
        }
    }
    dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let gt_idx: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| {
            (0..s.truths.len()).filter(|&i| s.truths[i].class_id == class).collect()
        })
        .collect();
    let n_gt: usize = gt_idx.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gt_idx.iter().map(|g| vec![false; g.len()]).collect();

    let mut tp_cum = 0usize;
    let mut fp_cum = 0usize;
    let mut recalls = Vec::with_capacity(dets.len());
    let mut precisions = Vec::with_capacity(dets.len());
    for (si, di, _) in &dets {
        let det_box = &scenes[*si].detections[*di].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_idx[*si].iter().enumerate() {
            if taken[*si][slot] {
                continue;
            }
            let iou = det_box.iou(&scenes[*si].truths[gi].bbox);
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((slot, iou));
            }
        }
        match best {
            Some((slot, _)) => {
                taken[*si][slot] = true;
                tp_cum += 1;
            }
            None => fp_cum += 1,
        }
        recalls.push(if n_gt > 0 { tp_cum as f64 / n_gt as f64 } else { 0.0 });
        precisions.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
    }

    // Right-side envelope, then the area under it across recall steps.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    (ap, tp_cum, fp_cum, n_gt)
}

/// Cumulative score over the stream: entry `t` re-scores every scene of
/// batches `0..=t` from scratch rather than keeping a running
/// approximation.
pub fn cumulative_curve(batches: &[Vec<SceneEval>], iou_threshold: f64) -> Vec<(usize, f64)> {
    let mut prefix: Vec<SceneEval> = Vec::new();
    let mut curve = Vec::with_capacity(batches.len());
    for (t, batch) in batches.iter().enumerate() {
        prefix.extend(batch.iter().cloned());
        curve.push((t + 1, evaluate_map(&prefix, iou_threshold).map));
    }
    curve
}
