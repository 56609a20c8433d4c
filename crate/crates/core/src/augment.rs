//! Paired weak/strong scene views, teacher pseudo-labels, and the
//! self-training losses assembled from them.
//!
//! The weak view is a near-identity geometric jitter used to read
//! pseudo-labels off the slow teacher; the strong view adds photometric
//! noise and rectangle erasing and is what the student trains on. A
//! [`ViewTransform`] records the geometry so boxes can be carried
//! between views exactly.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{
    forward, supervised_loss_from_trace, Annotation, DetectorError, DetectorParams,
    ForwardTrace, LossWeights, Mode, ModelConfig, ToyScene,
};
use crate::geom::SceneBox;

/// Horizontal flip and isotropic scale about the image centre.
///
/// The family is closed under composition and inversion, both exact up
/// to float rounding, which is what lets pseudo boxes travel between
/// views without drift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub flip_x: bool,
    pub scale: f64,
    pub img_w: f64,
    pub img_h: f64,
}

impl ViewTransform {
    pub fn identity(img_w: f64, img_h: f64) -> Self {
        Self { flip_x: false, scale: 1.0, img_w, img_h }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_x && self.scale == 1.0
    }

    /// Map a point from the source view into the transformed view.
    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let cx = 0.5 * self.img_w;
        let cy = 0.5 * self.img_h;
        let dx = if self.flip_x { cx - x } else { x - cx };
        (cx + self.scale * dx, cy + self.scale * (y - cy))
    }

    pub fn apply_box(&self, b: &SceneBox) -> SceneBox {
        let (cx, cy) = self.apply_point(b.cx, b.cy);
        SceneBox::new(cx, cy, self.scale * b.w, self.scale * b.h)
    }

    pub fn inverse(&self) -> Self {
        Self { scale: 1.0 / self.scale, ..*self }
    }

    /// The transform equivalent to `self` followed by `next`.
    pub fn then(&self, next: &ViewTransform) -> Self {
        debug_assert_eq!((self.img_w, self.img_h), (next.img_w, next.img_h));
        Self {
            flip_x: self.flip_x ^ next.flip_x,
            scale: self.scale * next.scale,
            img_w: self.img_w,
            img_h: self.img_h,
        }
    }
}

/// Geometric and photometric jitter ranges for both views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Weak and strong: probability of a horizontal flip.
    pub flip_prob: f64,
    /// Weak and strong: isotropic rescale range.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Strong only: additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Strong only: brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Strong only: contrast factor range, applied about 0.5.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    /// Strong only: up to this many rectangles filled with 0.5.
    pub max_erase: usize,
    /// Strong only: largest erased fraction of the image per rectangle.
    pub erase_area: f64,
    /// Strong only: final pixel clamp range.
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_lo: 0.9,
            scale_hi: 1.1,
            noise_sigma: 0.1,
            brightness: 0.2,
            contrast_lo: 0.8,
            contrast_hi: 1.25,
            max_erase: 2,
            erase_area: 0.2,
            clamp_lo: -1.0,
            clamp_hi: 2.0,
        }
    }
}

impl AugmentConfig {
    /// Every jitter switched off; both views reproduce the input scene.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            noise_sigma: 0.0,
            brightness: 0.0,
            contrast_lo: 1.0,
            contrast_hi: 1.0,
            max_erase: 0,
            erase_area: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err("flip_prob must be in [0, 1]".into());
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err("need 0 < scale_lo <= scale_hi".into());
        }
        if self.noise_sigma < 0.0 || self.brightness < 0.0 {
            return Err("noise_sigma and brightness must be non-negative".into());
        }
        if !(self.contrast_lo > 0.0 && self.contrast_lo <= self.contrast_hi) {
            return Err("need 0 < contrast_lo <= contrast_hi".into());
        }
        if !(0.0..=1.0).contains(&self.erase_area) {
            return Err("erase_area must be in [0, 1]".into());
        }
        if self.clamp_lo >= self.clamp_hi {
            return Err("need clamp_lo < clamp_hi".into());
        }
        Ok(())
    }
}

/// Resample a scene under a view transform with bilinear interpolation
/// and border clamping. The identity transform returns the input bit for
/// bit.
pub fn rasterize(pixels: &Array3<f64>, t: &ViewTransform) -> Array3<f64> {
    if t.is_identity() {
        return pixels.clone();
    }
    let (h, w, c) = pixels.dim();
    let inv = t.inverse();
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let (sx, sy) = inv.apply_point(j as f64 + 0.5, i as f64 + 0.5);
        sample_bilinear(pixels, sy - 0.5, sx - 0.5, k)
    })
}

fn sample_bilinear(img: &Array3<f64>, fy: f64, fx: f64, c: usize) -> f64 {
    let (h, w, _) = img.dim();
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    (1.0 - wy) * ((1.0 - wx) * img[[y0, x0, c]] + wx * img[[y0, x1, c]])
        + wy * ((1.0 - wx) * img[[y1, x0, c]] + wx * img[[y1, x1, c]])
}

fn draw_view_transform(
    cfg: &AugmentConfig,
    img_w: f64,
    img_h: f64,
    rng: &mut impl Rng,
) -> ViewTransform {
    let flip_x = rng.random_bool(cfg.flip_prob);
    let scale = if cfg.scale_lo < cfg.scale_hi {
        rng.random_range(cfg.scale_lo..cfg.scale_hi)
    } else {
        cfg.scale_lo
    };
    ViewTransform { flip_x, scale, img_w, img_h }
}

/// Flip/scale jitter; returns the view and the transform that produced
/// it.
pub fn weak_augment(
    scene: &ToyScene,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ToyScene, ViewTransform) {
    let (h, w, _) = scene.pixels.dim();
    let t = draw_view_transform(cfg, w as f64, h as f64, rng);
    let view = ToyScene { id: scene.id, pixels: rasterize(&scene.pixels, &t) };
    (view, t)
}

/// Weak jitter plus pixel noise, brightness and contrast jitter, and
/// rectangle erasing, clamped at the end. With all extra jitters zeroed
/// in the config this reduces to [`weak_augment`] exactly.
pub fn strong_augment(
    scene: &ToyScene,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ToyScene, ViewTransform) {
    let (mut view, t) = weak_augment(scene, cfg, rng);
    let (h, w, _) = view.pixels.dim();

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in view.pixels.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    if cfg.brightness > 0.0 {
        let b = rng.random_range(-cfg.brightness..cfg.brightness);
        for v in view.pixels.iter_mut() {
            *v += b;
        }
    }
    if cfg.contrast_lo < cfg.contrast_hi || cfg.contrast_lo != 1.0 {
        let f = if cfg.contrast_lo < cfg.contrast_hi {
            rng.random_range(cfg.contrast_lo..cfg.contrast_hi)
        } else {
            cfg.contrast_lo
        };
        for v in view.pixels.iter_mut() {
            *v = (*v - 0.5) * f + 0.5;
        }
    }
    if cfg.max_erase > 0 && cfg.erase_area > 0.0 {
        let n = rng.random_range(0..=cfg.max_erase);
        let max_area = (cfg.erase_area * (w * h) as f64).floor().max(1.0);
        for _ in 0..n {
            let area = rng.random_range(0.1..1.0) * max_area;
            let aspect = rng.random_range(0.5..2.0);
            let mut pw = ((area * aspect).sqrt().floor() as usize).clamp(1, w);
            let mut ph = ((area / aspect).sqrt().floor() as usize).clamp(1, h);
            while (pw * ph) as f64 > max_area && pw.max(ph) > 1 {
                if pw >= ph {
                    pw -= 1;
                } else {
                    ph -= 1;
                }
            }
            let x0 = rng.random_range(0..=w - pw);
            let y0 = rng.random_range(0..=h - ph);
            for i in y0..y0 + ph {
                for j in x0..x0 + pw {
                    for k in 0..view.pixels.dim().2 {
                        view.pixels[[i, j, k]] = 0.5;
                    }
                }
            }
        }
    }
    let touched = cfg.noise_sigma > 0.0
        || cfg.brightness > 0.0
        || cfg.contrast_lo != 1.0
        || cfg.contrast_hi != 1.0
        || cfg.max_erase > 0;
    if touched {
        view.pixels.mapv_inplace(|v| v.clamp(cfg.clamp_lo, cfg.clamp_hi));
    }
    (view, t)
}

/// A weak and a strong view of the same source scene.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub weak: ToyScene,
    pub strong: ToyScene,
    /// Maps weak-view coordinates into the strong view.
    pub strong_transform: ViewTransform,
}

/// Draw both views from one rng: the weak view first, then the strong
/// view with its own geometry.
pub fn augment_pair(scene: &ToyScene, cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentedPair {
    let (weak, t_weak) = weak_augment(scene, cfg, rng);
    let (strong, t_strong) = strong_augment(scene, cfg, rng);
    AugmentedPair {
        weak,
        strong,
        strong_transform: t_weak.inverse().then(&t_strong),
    }
}

/// Confidence gate for teacher detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub tau: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err("tau must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: SceneBox,
    pub class_id: usize,
    pub score: f64,
}

/// Teacher detections that cleared the confidence gate, in weak-view
/// coordinates.
#[derive(Clone, Debug, Default)]
pub struct PseudoLabelSet {
    pub items: Vec<PseudoLabel>,
    pub source_scene_id: u64,
}

/// Run the teacher on the weak view and keep confident detections. The
/// teacher is read-only here; it only ever moves via the parameter
/// average.
pub fn pseudo_label(
    model: &ModelConfig,
    teacher: &DetectorParams,
    weak: &ToyScene,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabelSet, DetectorError> {
    let trace = forward(model, teacher, weak, Mode::Infer)?;
    let (h, w, _) = weak.pixels.dim();
    let mut items = Vec::new();
    for det in &trace.detections {
        if det.score < cfg.tau {
            continue;
        }
        let clipped = det.bbox.clip(w as f64, h as f64);
        if clipped.is_degenerate() {
            continue;
        }
        items.push(PseudoLabel { bbox: clipped, class_id: det.class_id, score: det.score });
    }
    Ok(PseudoLabelSet { items, source_scene_id: weak.id })
}

/// Carry pseudo boxes into the strong view and clip them to its bounds;
/// boxes that collapse under clipping are dropped.
pub fn pseudo_to_targets(
    pseudo: &PseudoLabelSet,
    transform: &ViewTransform,
) -> Vec<Annotation> {
    pseudo
        .items
        .iter()
        .filter_map(|p| {
            let b = transform.apply_box(&p.bbox).clip(transform.img_w, transform.img_h);
            if b.is_degenerate() {
                None
            } else {
                Some(Annotation { class_id: p.class_id, bbox: b })
            }
        })
        .collect()
}

/// Raw self-training loss values plus the gradient of their weighted
/// sum.
#[derive(Clone, Debug)]
pub struct StLosses {
    /// Classification part: class cross-entropy plus objectness term.
    pub cls: f64,
    /// Box regression part.
    pub reg: f64,
    pub n_pseudo: usize,
    pub n_matched: usize,
}

/// Self-training losses of the student on a strong view whose trace has
/// already been computed. The gradient is of
/// `lambda_cls * cls + lambda_reg * reg`; an empty pseudo set yields
/// zeros, not background supervision.
pub fn st_losses_from_trace(
    model: &ModelConfig,
    student: &DetectorParams,
    trace: &ForwardTrace,
    pseudo: &PseudoLabelSet,
    transform: &ViewTransform,
    lambda_cls: f64,
    lambda_reg: f64,
) -> (StLosses, DetectorParams) {
    let targets = pseudo_to_targets(pseudo, transform);
    if targets.is_empty() {
        let out = StLosses { cls: 0.0, reg: 0.0, n_pseudo: 0, n_matched: 0 };
        return (out, student.zeros_like());
    }
    let weights = LossWeights { cls: lambda_cls, reg: lambda_reg, obj: lambda_cls };
    let (losses, grads) = supervised_loss_from_trace(model, student, trace, &targets, &weights);
    let out = StLosses {
        cls: losses.cls + losses.obj,
        reg: losses.reg,
        n_pseudo: targets.len(),
        n_matched: losses.n_matched,
    };
    (out, grads)
}

/// As [`st_losses_from_trace`], but running the student forward pass
/// here.
pub fn st_losses(
    model: &ModelConfig,
    student: &DetectorParams,
    strong: &ToyScene,
    pseudo: &PseudoLabelSet,
    transform: &ViewTransform,
    lambda_cls: f64,
    lambda_reg: f64,
) -> Result<(StLosses, DetectorParams), DetectorError> {
    let trace = forward(model, student, strong, Mode::Train)?;
    Ok(st_losses_from_trace(model, student, &trace, pseudo, transform, lambda_cls, lambda_reg))
}
