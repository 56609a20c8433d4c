//! Synthetic detection scenes, photometric corruptions, and the mAP
//! evaluator used to score adaptation runs.
//!
//! Scenes are small RGB-like images with 1-3 colored blobs; each class
//! has a distinct shape (square, disc, diamond cycle) and a distinct
//! color from a hue wheel, so a small detector can learn to tell them
//! apart. Corruptions are strictly photometric: boxes stay valid without
//! re-annotation.

mod eval;

pub use eval::{cumulative_curve, evaluate_map, EvalResult, SceneEval};

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{Annotation, ToyScene};
use crate::geom::SceneBox;
use crate::seeds::{child_seed_n, rng_from};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("could not place object {object} of scene {scene} within {attempts} attempts")]
    PlacementFailure { scene: u64, object: usize, attempts: usize },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("i/o failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset format problem: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.to_path_buf(), source }
}

/// Parameters of the synthetic scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    /// Number of object classes; each gets its own shape/color signature.
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Blob side length range (also the annotation box size).
    pub min_size: f64,
    pub max_size: f64,
    /// Largest tolerated overlap between placed boxes.
    pub max_overlap: f64,
    /// Background intensity level.
    pub background: f64,
    /// Standard deviation of the background pixel noise.
    pub noise: f64,
    /// Base seed of the scene stream.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            img_h: 32,
            img_w: 32,
            channels: 3,
            classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 11.0,
            max_size: 14.0,
            max_overlap: 0.3,
            background: 0.1,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: &str| Err(BenchError::Spec(m.to_string()));
        if self.img_h < 8 || self.img_w < 8 {
            return err("img_h and img_w must be at least 8");
        }
        if self.channels == 0 {
            return err("channels must be positive");
        }
        if self.classes < 2 {
            return err("need at least two classes");
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return err("need 1 <= min_objects <= max_objects");
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return err("need 2 <= min_size <= max_size");
        }
        if self.max_size > self.img_h.min(self.img_w) as f64 {
            return err("max_size must fit inside the scene");
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return err("max_overlap must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.background) || self.noise < 0.0 {
            return err("background must be in [0, 1] and noise non-negative");
        }
        Ok(())
    }

    /// Color signature of a class: a point on a hue wheel, one phase per
    /// channel.
    pub fn class_color(&self, class_id: usize, channel: usize) -> f64 {
        let angle = std::f64::consts::TAU * class_id as f64 / self.classes as f64;
        let phase = std::f64::consts::TAU * channel as f64 / self.channels as f64;
        0.55 + 0.4 * (angle + phase).cos()
    }
}

/// Signed-distance-style blob coverage in [0, 1] with a one-pixel soft
/// edge. Shapes cycle with the class id.
fn blob_coverage(class_id: usize, dx: f64, dy: f64, half: f64) -> f64 {
    let d = match class_id % 3 {
        0 => dx.abs().max(dy.abs()),
        1 => (dx * dx + dy * dy).sqrt(),
        _ => dx.abs() + dy.abs(),
    };
    (half - d + 0.5).clamp(0.0, 1.0)
}

pub type LabeledScene = (ToyScene, Vec<Annotation>);

fn generate_scene(spec: &SceneSpec, id: u64, rng: &mut impl Rng) -> Result<LabeledScene, BenchError> {
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n_objects);
    const ATTEMPTS: usize = 100;
    for object in 0..n_objects {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let half = 0.5 * size;
            let cx = rng.random_range(half..=spec.img_w as f64 - half);
            let cy = rng.random_range(half..=spec.img_h as f64 - half);
            let class_id = rng.random_range(0..spec.classes);
            let bbox = SceneBox::new(cx, cy, size, size);
            if annotations.iter().all(|a| a.bbox.iou(&bbox) <= spec.max_overlap) {
                annotations.push(Annotation { class_id, bbox });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(BenchError::PlacementFailure { scene: id, object, attempts: ATTEMPTS });
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Array3::zeros((spec.img_h, spec.img_w, spec.channels));
    for i in 0..spec.img_h {
        for j in 0..spec.img_w {
            for k in 0..spec.channels {
                let base = spec.background + spec.noise * normal.sample(rng);
                pixels[[i, j, k]] = base;
            }
        }
    }
    for a in &annotations {
        let half = 0.5 * a.bbox.w;
        let (x0, y0, x1, y1) = a.bbox.corners();
        let i0 = (y0.floor().max(0.0)) as usize;
        let i1 = (y1.ceil().min(spec.img_h as f64)) as usize;
        let j0 = (x0.floor().max(0.0)) as usize;
        let j1 = (x1.ceil().min(spec.img_w as f64)) as usize;
        for i in i0..i1 {
            for j in j0..j1 {
                let dx = j as f64 + 0.5 - a.bbox.cx;
                let dy = i as f64 + 0.5 - a.bbox.cy;
                let cov = blob_coverage(a.class_id, dx, dy, half);
                if cov > 0.0 {
                    for k in 0..spec.channels {
                        let color = spec.class_color(a.class_id, k);
                        let v = pixels[[i, j, k]];
                        pixels[[i, j, k]] = v + cov * (color - v);
                    }
                }
            }
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((ToyScene { id, pixels }, annotations))
}

/// Generate `n` labeled scenes, deterministic in `spec.seed`. Scene `i`
/// draws from its own derived rng, so a prefix of the dataset never
/// depends on `n`.
pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<LabeledScene>, BenchError> {
    spec.validate()?;
    (0..n as u64)
        .map(|i| {
            let mut rng = rng_from(child_seed_n(spec.seed, "scene", i));
            generate_scene(spec, i, &mut rng)
        })
        .collect()
}

/// The closed set of photometric corruptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Contrast,
    Brightness,
    Blur,
    PixelDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Blur,
        CorruptionKind::PixelDropout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Blur => "blur",
            CorruptionKind::PixelDropout => "pixel_dropout",
        }
    }
}

/// A corruption kind at an integer severity, 1 (mild) to 5 (harsh).
/// Severity 0 is the identity extension used as a reference point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(1..=5).contains(&self.severity) {
            return Err(BenchError::Spec(format!(
                "corruption severity must be 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}_s{}", self.kind.name(), self.severity)
    }
}

/// Apply a photometric corruption. Annotations stay valid; pixel values
/// are clamped back to [0, 1]. Severity 0 returns the scene unchanged.
pub fn corrupt(scene: &ToyScene, c: &Corruption, rng: &mut impl Rng) -> ToyScene {
    if c.severity == 0 {
        return scene.clone();
    }
    let s = c.severity as f64;
    let mut pixels = scene.pixels.clone();
    match c.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, 0.08 * s).expect("positive sigma");
            for v in pixels.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        CorruptionKind::Contrast => {
            let f = 1.0 - 0.15 * s;
            for v in pixels.iter_mut() {
                *v = (*v - 0.5) * f + 0.5;
            }
        }
        CorruptionKind::Brightness => {
            for v in pixels.iter_mut() {
                *v += 0.12 * s;
            }
        }
        CorruptionKind::Blur => {
            for _ in 0..c.severity {
                pixels = binomial_blur(&pixels);
            }
        }
        CorruptionKind::PixelDropout => {
            let p = 0.05 * s;
            let (h, w, ch) = pixels.dim();
            for i in 0..h {
                for j in 0..w {
                    if rng.random_bool(p) {
                        for k in 0..ch {
                            pixels[[i, j, k]] = 0.0;
                        }
                    }
                }
            }
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ToyScene { id: scene.id, pixels }
}

/// One pass of the separable [1, 2, 1]/4 kernel along each axis with
/// edge clamping.
fn binomial_blur(pixels: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let at = |img: &Array3<f64>, i: isize, j: isize, k: usize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        img[[i, j, k]]
    };
    let horiz = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let (i, j) = (i as isize, j as isize);
        0.25 * at(pixels, i, j - 1, k) + 0.5 * at(pixels, i, j, k) + 0.25 * at(pixels, i, j + 1, k)
    });
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let (i, j) = (i as isize, j as isize);
        0.25 * at(&horiz, i - 1, j, k) + 0.5 * at(&horiz, i, j, k) + 0.25 * at(&horiz, i + 1, j, k)
    })
}

const DATASET_FORMAT: &str = "toy-scene-dataset-v1";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    spec: SceneSpec,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    scene_id: u64,
    class_id: usize,
    bbox: [f64; 4],
}

/// Persist a dataset: manifest, per-scene binary pixel files, and one
/// annotations JSON.
pub fn save_dataset(dir: &Path, spec: &SceneSpec, data: &[LabeledScene]) -> Result<(), BenchError> {
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(io_err(&scenes_dir))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        spec: spec.clone(),
        n: data.len(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| BenchError::Format(e.to_string()))?;
    fs::write(&manifest_path, format!("{json}\n")).map_err(io_err(&manifest_path))?;

    let mut records = Vec::new();
    for (scene, annotations) in data {
        let mut bytes = Vec::with_capacity(scene.pixels.len() * 8);
        for v in scene.pixels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = scenes_dir.join(format!("scene_{:06}.bin", scene.id));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        for a in annotations {
            records.push(AnnotationRecord {
                scene_id: scene.id,
                class_id: a.class_id,
                bbox: [a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h],
            });
        }
    }
    let ann_path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| BenchError::Format(e.to_string()))?;
    fs::write(&ann_path, format!("{json}\n")).map_err(io_err(&ann_path))
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(SceneSpec, Vec<LabeledScene>), BenchError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| BenchError::Format(e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(BenchError::Format(format!("unknown format {:?}", manifest.format)));
    }
    let spec = manifest.spec;
    spec.validate()?;

    let ann_path = dir.join("annotations.json");
    let text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(&text).map_err(|e| BenchError::Format(e.to_string()))?;

    let expected = spec.img_h * spec.img_w * spec.channels * 8;
    let mut data = Vec::with_capacity(manifest.n);
    for id in 0..manifest.n as u64 {
        let path = dir.join(format!("scenes/scene_{id:06}.bin"));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != expected {
            return Err(BenchError::Format(format!(
                "scene {id}: {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunks")))
            .collect();
        let pixels = Array3::from_shape_vec((spec.img_h, spec.img_w, spec.channels), values)
            .map_err(|e| BenchError::Format(e.to_string()))?;
        let annotations = records
            .iter()
            .filter(|r| r.scene_id == id)
            .map(|r| Annotation {
                class_id: r.class_id,
                bbox: SceneBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
            })
            .collect();
        data.push((ToyScene { id, pixels }, annotations));
    }
    Ok((spec, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_datasets() {
        let spec = SceneSpec::default();
        let a = generate_dataset(&spec, 6).unwrap();
        let b = generate_dataset(&spec, 6).unwrap();
        assert_eq!(a.len(), b.len());
        for ((sa, aa), (sb, ab)) in a.iter().zip(&b) {
            assert_eq!(sa.pixels, sb.pixels);
            assert_eq!(aa, ab);
        }
        let c = generate_dataset(&SceneSpec { seed: 1, ..spec }, 6).unwrap();
        assert!(a[0].0.pixels != c[0].0.pixels);
    }

    #[test]
    fn prefix_stability_under_larger_n() {
        let spec = SceneSpec::default();
        let short = generate_dataset(&spec, 3).unwrap();
        let long = generate_dataset(&spec, 10).unwrap();
        for i in 0..3 {
            assert_eq!(short[i].0.pixels, long[i].0.pixels);
            assert_eq!(short[i].1, long[i].1);
        }
    }

    #[test]
    fn boxes_stay_inside_and_overlap_is_bounded() {
        let spec = SceneSpec::default();
        for (_, annotations) in generate_dataset(&spec, 40).unwrap() {
            assert!(!annotations.is_empty());
            assert!(annotations.len() <= spec.max_objects);
            for a in &annotations {
                let (x0, y0, x1, y1) = a.bbox.corners();
                assert!(x0 >= 0.0 && y0 >= 0.0);
                assert!(x1 <= spec.img_w as f64 && y1 <= spec.img_h as f64);
                assert!(a.class_id < spec.classes);
            }
            for (i, a) in annotations.iter().enumerate() {
                for b in &annotations[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= spec.max_overlap + 1e-12);
                }
            }
        }
    }

    #[test]
    fn crowded_spec_fails_placement() {
        let spec = SceneSpec {
            min_objects: 3,
            max_objects: 3,
            min_size: 14.0,
            max_size: 14.0,
            img_h: 16,
            img_w: 16,
            max_overlap: 0.0,
            ..SceneSpec::default()
        };
        let mut failures = 0;
        for seed in 0..10 {
            if matches!(
                generate_dataset(&SceneSpec { seed, ..spec.clone() }, 1),
                Err(BenchError::PlacementFailure { .. })
            ) {
                failures += 1;
            }
        }
        assert!(failures > 0, "a 16x16 scene cannot hold three disjoint 14px boxes");
    }

    #[test]
    fn class_signatures_are_distinct() {
        let spec = SceneSpec::default();
        for a in 0..spec.classes {
            for b in a + 1..spec.classes {
                let dist: f64 = (0..spec.channels)
                    .map(|k| (spec.class_color(a, k) - spec.class_color(b, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.3, "classes {a} and {b} too similar: {dist}");
            }
        }
    }

    #[test]
    fn severity_zero_is_identity() {
        let spec = SceneSpec::default();
        let (scene, _) = &generate_dataset(&spec, 1).unwrap()[0];
        for kind in CorruptionKind::ALL {
            let c = Corruption { kind, severity: 0 };
            let out = corrupt(scene, &c, &mut rng_from(1));
            assert_eq!(out.pixels, scene.pixels, "{kind:?}");
        }
    }

    fn mean_mse(scene: &ToyScene, c: &Corruption, draws: u64) -> f64 {
        let mut total = 0.0;
        for d in 0..draws {
            let out = corrupt(scene, c, &mut rng_from(900 + d));
            total += scene
                .pixels
                .iter()
                .zip(out.pixels.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / scene.pixels.len() as f64;
        }
        total / draws as f64
    }

    #[test]
    fn severity_increases_pixel_distance() {
        let spec = SceneSpec::default();
        let (scene, _) = &generate_dataset(&spec, 1).unwrap()[0];
        for kind in CorruptionKind::ALL {
            let mut last = 0.0;
            for severity in [1u8, 3, 5] {
                let mse = mean_mse(scene, &Corruption { kind, severity }, 100);
                assert!(
                    mse > last,
                    "{kind:?} severity {severity}: mse {mse} not above {last}"
                );
                last = mse;
            }
        }
    }

    #[test]
    fn corruption_preserves_shape_and_range() {
        let spec = SceneSpec::default();
        let (scene, _) = &generate_dataset(&spec, 1).unwrap()[0];
        for kind in CorruptionKind::ALL {
            let out = corrupt(scene, &Corruption { kind, severity: 5 }, &mut rng_from(7));
            assert_eq!(out.pixels.dim(), scene.pixels.dim());
            assert_eq!(out.id, scene.id);
            for v in out.pixels.iter() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn corruption_kind_serde_names() {
        assert_eq!(
            serde_json::to_string(&CorruptionKind::GaussianNoise).unwrap(),
            "\"gaussian_noise\""
        );
        let c: Corruption =
            serde_json::from_str("{\"kind\":\"pixel_dropout\",\"severity\":3}").unwrap();
        assert_eq!(c.kind, CorruptionKind::PixelDropout);
        assert!(c.validate().is_ok());
        assert!(Corruption { kind: c.kind, severity: 6 }.validate().is_err());
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let data = generate_dataset(&spec, 4).unwrap();
        save_dataset(dir.path(), &spec, &data).unwrap();
        let (spec2, data2) = load_dataset(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(data.len(), data2.len());
        for ((sa, aa), (sb, ab)) in data.iter().zip(&data2) {
            assert_eq!(sa.id, sb.id);
            for (x, y) in sa.pixels.iter().zip(sb.pixels.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(aa, ab);
        }
    }
}
