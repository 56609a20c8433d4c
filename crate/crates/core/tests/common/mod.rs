//! Helpers shared by the integration suites.
//!
//! The centrepiece is an independent average-precision reference that
//! recomputes the detection/ground-truth matching from scratch at every
//! score threshold, instead of sweeping one ranked list the way the
//! library does. Agreement between the two is therefore meaningful.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tta_core::bench::SceneEval;
use tta_core::detector::{Annotation, Detection};
use tta_core::geom::SceneBox;

/// Mean average precision by brute force.
///
/// For every class present in the ground truth, AP is taken as
/// `sum_k (1/n_gt) * max{ precision(t) : recall(t) >= k/n_gt }` where
/// `t` ranges over all detection scores of that class and each
/// operating point `(recall(t), precision(t))` is produced by an
/// independent greedy matching over the detections scoring at least
/// `t`. Scores are assumed distinct (the random instances below draw
/// them from a continuous distribution).
pub fn reference_map(scenes: &[SceneEval], iou_threshold: f64) -> f64 {
    let mut classes: Vec<usize> = scenes
        .iter()
        .flat_map(|s| s.truths.iter().map(|t| t.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| reference_class_ap(scenes, c, iou_threshold))
        .sum();
    total / classes.len() as f64
}

fn reference_class_ap(scenes: &[SceneEval], class: usize, thr: f64) -> f64 {
    let n_gt: usize = scenes
        .iter()
        .map(|s| s.truths.iter().filter(|t| t.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.detections.iter())
        .filter(|d| d.class_id == class)
        .map(|d| d.score)
        .collect();
    thresholds.sort_by(f64::total_cmp);

    let mut ap = 0.0;
    for k in 1..=n_gt {
        let want = k as f64 / n_gt as f64;
        let mut best = 0.0;
        let mut reached = false;
        for &t in &thresholds {
            let (recall, precision) = operating_point(scenes, class, thr, t);
            if recall >= want {
                reached = true;
                if precision > best {
                    best = precision;
                }
            }
        }
        if reached {
            ap += best / n_gt as f64;
        }
    }
    ap
}

/// Recall and precision when only detections scoring at least
/// `min_score` are kept, matched greedily in descending score order to
/// the best-overlapping free ground truth of the same scene and class.
fn operating_point(
    scenes: &[SceneEval],
    class: usize,
    thr: f64,
    min_score: f64,
) -> (f64, f64) {
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (di, d) in s.detections.iter().enumerate() {
            if d.class_id == class && d.score >= min_score {
                kept.push((si, di));
            }
        }
    }
    kept.sort_by(|a, b| {
        let sa = scenes[a.0].detections[a.1].score;
        let sb = scenes[b.0].detections[b.1].score;
        sb.total_cmp(&sa)
    });

    let mut taken: Vec<Vec<bool>> = scenes
        .iter()
        .map(|s| vec![false; s.truths.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (si, di) in kept {
        let det = &scenes[si].detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, t) in scenes[si].truths.iter().enumerate() {
            if t.class_id != class || taken[si][gi] {
                continue;
            }
            let iou = det.bbox.iou(&t.bbox);
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[si][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
    }

    let n_gt: usize = scenes
        .iter()
        .map(|s| s.truths.iter().filter(|t| t.class_id == class).count())
        .sum();
    let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    (recall, precision)
}

/// A randomized evaluation instance: a handful of scenes with random
/// ground truth and a mix of near-hit, duplicate, misclassified, and
/// stray detections. Scores are continuous draws, so they are distinct
/// and ranking is unambiguous.
pub fn random_eval_instance(rng: &mut ChaCha8Rng) -> Vec<SceneEval> {
    let n_scenes = rng.random_range(1..=3);
    (0..n_scenes)
        .map(|_| {
            let n_truth = rng.random_range(0..=4);
            let truths: Vec<Annotation> = (0..n_truth)
                .map(|_| Annotation {
                    class_id: rng.random_range(0..3),
                    bbox: random_box(rng),
                })
                .collect();

            let n_det = rng.random_range(0..=6);
            let detections: Vec<Detection> = (0..n_det)
                .map(|_| {
                    let (class_id, bbox) = if !truths.is_empty() && rng.random_bool(0.6) {
                        // Perturbation of a real object; sometimes with
                        // the wrong label.
                        let t = &truths[rng.random_range(0..truths.len())];
                        let class = if rng.random_bool(0.8) {
                            t.class_id
                        } else {
                            rng.random_range(0..4)
                        };
                        (class, jitter_box(&t.bbox, rng))
                    } else {
                        // A stray box, possibly of a class with no
                        // ground truth at all.
                        (rng.random_range(0..4), random_box(rng))
                    };
                    Detection {
                        class_id,
                        score: rng.random_range(0.05..1.0),
                        bbox,
                        proposal_idx: 0,
                    }
                })
                .collect();
            SceneEval { detections, truths }
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> SceneBox {
    SceneBox::new(
        rng.random_range(5.0..27.0),
        rng.random_range(5.0..27.0),
        rng.random_range(4.0..11.0),
        rng.random_range(4.0..11.0),
    )
}

fn jitter_box(b: &SceneBox, rng: &mut ChaCha8Rng) -> SceneBox {
    SceneBox::new(
        b.cx + rng.random_range(-2.5..2.5),
        b.cy + rng.random_range(-2.5..2.5),
        (b.w + rng.random_range(-2.0..2.0)).max(2.0),
        (b.h + rng.random_range(-2.0..2.0)).max(2.0),
    )
}
