//! Online adaptation loop over a sequential scene stream.
//!
//! Each incoming batch is first predicted with the current student —
//! those detections are what the run is scored on — and only then used
//! for adaptation: the teacher pseudo-labels a weakly augmented view,
//! the student trains on a strongly augmented view, the running target
//! feature statistics absorb the batch, and the student takes SGD steps
//! on the weighted sum of self-training and distribution-alignment
//! losses. The teacher tracks the student by exponential moving
//! average.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{backprop_to_features, sym_kl, sym_kl_grad, AlignError};
use crate::augment::{
    augment_pair, pseudo_label, st_losses_from_trace, AugmentConfig, PseudoLabelConfig,
};
use crate::bench::{cumulative_curve, SceneEval};
use crate::detector::{
    ema_update, forward, grads_all_zero, inject_feature_gradient, load_tensor_set,
    save_tensor_set, sgd_momentum_step, Annotation, CheckpointError, Detection, DetectorError,
    DetectorParams, Mode, ModelConfig, SgdConfig, ToyScene, UpdateScope,
};
use crate::seeds::{child_seed, child_seed_n, rng_from};
use crate::stats::{
    fit_source, pool_foreground, pool_global, regularize_cov, update_streaming, GaussianStats,
    StatsError, StreamConfig,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("engine config: {0}")]
    Config(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which loss components participate in adaptation. All off means a
/// plain inference pass: parameters and statistics never move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentFlags {
    pub self_training: bool,
    pub global_align: bool,
    pub foreground_align: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self { self_training: true, global_align: true, foreground_align: true }
    }
}

impl ComponentFlags {
    pub fn any(self) -> bool {
        self.self_training || self.global_align || self.foreground_align
    }
}

/// Named presets for the component flags, used by the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// No adaptation: score the source model as-is.
    Direct,
    /// Pseudo-label self-training only.
    St,
    /// Global feature alignment only.
    Global,
    /// Self-training plus global alignment.
    StGlobal,
    /// Everything, including foreground alignment.
    Full,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 5] =
        [AdaptMode::Direct, AdaptMode::St, AdaptMode::Global, AdaptMode::StGlobal, AdaptMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Direct => "direct",
            AdaptMode::St => "st",
            AdaptMode::Global => "global",
            AdaptMode::StGlobal => "st-global",
            AdaptMode::Full => "full",
        }
    }

    pub fn flags(self) -> ComponentFlags {
        let (st, gl, fg) = match self {
            AdaptMode::Direct => (false, false, false),
            AdaptMode::St => (true, false, false),
            AdaptMode::Global => (false, true, false),
            AdaptMode::StGlobal => (true, true, false),
            AdaptMode::Full => (true, true, true),
        };
        ComponentFlags { self_training: st, global_align: gl, foreground_align: fg }
    }
}

/// Knobs of the adaptation loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// Weight of the pseudo-label classification (and objectness) loss.
    pub lambda_st_cls: f64,
    /// Weight of the pseudo-label box regression loss.
    pub lambda_st_reg: f64,
    /// Weight of the global feature alignment loss.
    pub lambda_al_f: f64,
    /// Weight of the foreground feature alignment loss.
    pub lambda_al_a: f64,
    /// Streaming statistics rate per sample.
    pub gamma: f64,
    /// Gradient steps taken on each batch.
    pub steps_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Teacher EMA momentum: teacher = beta * teacher + (1 - beta) * student.
    pub beta: f64,
    pub batch_size: usize,
    /// Pseudo-label confidence gate.
    pub tau: f64,
    /// Which parameters the optimizer may touch.
    pub scope: UpdateScope,
    pub flags: ComponentFlags,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            lambda_st_cls: 1.0,
            lambda_st_reg: 1.0,
            lambda_al_f: 0.1,
            lambda_al_a: 0.01,
            gamma: 1.0 / 64.0,
            steps_per_batch: 2,
            lr: 5e-3,
            momentum: 0.9,
            beta: 0.99,
            batch_size: 8,
            tau: 0.5,
            scope: UpdateScope::BackboneOnly,
            flags: ComponentFlags::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: String| Err(EngineError::Config(m));
        for (name, v) in [
            ("lambda_st_cls", self.lambda_st_cls),
            ("lambda_st_reg", self.lambda_st_reg),
            ("lambda_al_f", self.lambda_al_f),
            ("lambda_al_a", self.lambda_al_a),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be a nonnegative finite number, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.gamma * self.batch_size as f64 >= 1.0 {
            return err(format!(
                "gamma * batch_size must stay below 1, got {}",
                self.gamma * self.batch_size as f64
            ));
        }
        if self.steps_per_batch == 0 {
            return err("steps_per_batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0) {
            return err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        Ok(())
    }
}

/// Everything produced by source training that adaptation starts from.
#[derive(Clone, Debug)]
pub struct SourceArtifacts {
    pub params: DetectorParams,
    pub global_stats: GaussianStats,
    pub fg_stats: GaussianStats,
}

/// Mutable state of an adaptation run.
#[derive(Clone, Debug)]
pub struct TtaState {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub velocity: DetectorParams,
    /// Running estimate of the target-domain global feature distribution.
    pub global_stats: GaussianStats,
    /// Running estimate of the target-domain foreground feature distribution.
    pub fg_stats: GaussianStats,
    pub batches_seen: u64,
}

/// Fresh state at the start of a stream: student and teacher both carry
/// the source weights, and the target statistics start at the source
/// statistics, so both alignment divergences begin at zero.
pub fn init_state(model: &ModelConfig, source: &SourceArtifacts) -> Result<TtaState, EngineError> {
    if source.global_stats.dim() != model.feature_channels {
        return Err(EngineError::Config(format!(
            "global stats have dim {}, model produces {} feature channels",
            source.global_stats.dim(),
            model.feature_channels
        )));
    }
    if source.fg_stats.dim() != model.roi_dim {
        return Err(EngineError::Config(format!(
            "foreground stats have dim {}, model produces dim-{} proposal features",
            source.fg_stats.dim(),
            model.roi_dim
        )));
    }
    Ok(TtaState {
        student: source.params.clone(),
        teacher: source.params.clone(),
        velocity: source.params.zeros_like(),
        global_stats: source.global_stats.clone(),
        fg_stats: source.fg_stats.clone(),
        batches_seen: 0,
    })
}

/// What one processed batch reports back.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Detections per scene, produced before any adaptation on this batch.
    pub detections: Vec<Vec<Detection>>,
    /// Loss values averaged over the inner steps.
    pub l_st_cls: f64,
    pub l_st_reg: f64,
    pub l_al_f: f64,
    pub l_al_a: f64,
    /// Unweighted divergences between source and running target statistics.
    pub sym_kl_f: f64,
    pub sym_kl_a: f64,
    /// Pseudo boxes the teacher produced on the first inner step.
    pub n_pseudo: usize,
}

/// Predict a batch with the current student, then adapt on it.
///
/// The inference stage always runs first and its detections are returned
/// untouched by whatever adaptation does afterwards. Adaptation takes
/// `steps_per_batch` gradient steps; the running target statistics are
/// committed once per batch (on the first step), while later steps
/// re-fold the current student's features against the same pre-batch
/// history so the alignment gradient stays alive without compounding the
/// update rate. A step in which every component yields zero gradient
/// performs no optimizer or teacher update at all.
///
/// Self-training losses are computed on the strong view; the alignment
/// statistics are pooled from a student forward on the weak view, the
/// same view the teacher labels. The source statistics were fitted on
/// un-augmented scenes, and the weak view (an occasional mirror flip)
/// pools to the same feature distribution, so the divergence measures
/// how far the incoming stream has drifted from the source rather than
/// the distortion injected by the strong augmentation.
pub fn process_batch(
    model: &ModelConfig,
    state: &mut TtaState,
    source: &SourceArtifacts,
    batch: &[ToyScene],
    cfg: &TtaConfig,
    augment: &AugmentConfig,
    batch_seed: u64,
) -> Result<BatchOutcome, EngineError> {
    if batch.is_empty() {
        return Err(EngineError::Config("batch must be nonempty".into()));
    }

    let mut detections = Vec::with_capacity(batch.len());
    for scene in batch {
        let trace = forward(model, &state.student, scene, Mode::Infer)?;
        detections.push(trace.detections);
    }
    let mut out = BatchOutcome {
        detections,
        l_st_cls: 0.0,
        l_st_reg: 0.0,
        l_al_f: 0.0,
        l_al_a: 0.0,
        sym_kl_f: 0.0,
        sym_kl_a: 0.0,
        n_pseudo: 0,
    };

    let flags = cfg.flags;
    if !flags.any() {
        state.batches_seen += 1;
        return Ok(out);
    }

    let pseudo_cfg = PseudoLabelConfig { tau: cfg.tau };
    let stream_cfg = StreamConfig { gamma: cfg.gamma };
    let sgd = SgdConfig { lr: cfg.lr, momentum: cfg.momentum };
    let n = batch.len() as f64;
    // The statistics this batch folds into. They are committed on the
    // first step; later steps start from the same pre-batch history.
    let pre_global = state.global_stats.clone();
    let pre_fg = state.fg_stats.clone();

    let need_align = flags.global_align || flags.foreground_align;
    for step in 0..cfg.steps_per_batch {
        let step_seed = child_seed_n(batch_seed, "step", step as u64);
        let mut grads = state.student.zeros_like();
        let mut align_traces = Vec::with_capacity(if need_align { batch.len() } else { 0 });
        let mut global_feats: Vec<DVector<f64>> = Vec::new();
        let mut fg_feats: Vec<DVector<f64>> = Vec::new();
        let mut fg_scene: Vec<usize> = Vec::new();
        let mut step_pseudo = 0usize;

        for (i, scene) in batch.iter().enumerate() {
            let mut rng = rng_from(child_seed_n(step_seed, "scene", i as u64));
            let pair = augment_pair(scene, augment, &mut rng);

            if flags.self_training {
                let trace = forward(model, &state.student, &pair.strong, Mode::Train)?;
                let pseudo = pseudo_label(model, &state.teacher, &pair.weak, &pseudo_cfg)?;
                let (st, g) = st_losses_from_trace(
                    model,
                    &state.student,
                    &trace,
                    &pseudo,
                    &pair.strong_transform,
                    cfg.lambda_st_cls,
                    cfg.lambda_st_reg,
                );
                out.l_st_cls += st.cls / n;
                out.l_st_reg += st.reg / n;
                step_pseudo += st.n_pseudo;
                grads.add_scaled(&g, 1.0 / n);
            }

            if need_align {
                let trace = forward(model, &state.student, &pair.weak, Mode::Train)?;
                if flags.global_align {
                    global_feats.push(pool_global(&trace.fmap));
                }
                if flags.foreground_align {
                    let feats: Vec<DVector<f64>> = trace
                        .surviving()
                        .iter()
                        .map(|&pi| DVector::from_column_slice(&trace.proposals[pi].roi_feat))
                        .collect();
                    if let Some(f) = pool_foreground(&feats) {
                        fg_feats.push(f);
                        fg_scene.push(i);
                    }
                }
                align_traces.push(trace);
            }
        }
        if step == 0 {
            out.n_pseudo = step_pseudo;
        }

        // Alignment: fold the step's features into the pre-batch
        // statistics, measure the divergence from source, and push its
        // gradient back through the update onto each scene's features.
        let mut glob_grads: Vec<Option<DVector<f64>>> = vec![None; batch.len()];
        let mut fg_grads: Vec<Option<DVector<f64>>> = vec![None; batch.len()];

        if flags.global_align {
            let post = update_streaming(&pre_global, &global_feats, &stream_cfg)?;
            let value = sym_kl(&source.global_stats, &post)?;
            let grad = sym_kl_grad(&source.global_stats, &post)?;
            let rows = backprop_to_features(&grad, &global_feats, &pre_global, &stream_cfg)?;
            for (i, row) in rows.into_iter().enumerate() {
                glob_grads[i] = Some(row * cfg.lambda_al_f);
            }
            out.l_al_f += cfg.lambda_al_f * value;
            out.sym_kl_f += value;
            if step == 0 {
                state.global_stats = post;
            }
        }
        // A batch in which no scene keeps a foreground proposal simply
        // skips the foreground term.
        if flags.foreground_align && !fg_feats.is_empty() {
            let post = update_streaming(&pre_fg, &fg_feats, &stream_cfg)?;
            let value = sym_kl(&source.fg_stats, &post)?;
            let grad = sym_kl_grad(&source.fg_stats, &post)?;
            let rows = backprop_to_features(&grad, &fg_feats, &pre_fg, &stream_cfg)?;
            for (k, row) in rows.into_iter().enumerate() {
                fg_grads[fg_scene[k]] = Some(row * cfg.lambda_al_a);
            }
            out.l_al_a += cfg.lambda_al_a * value;
            out.sym_kl_a += value;
            if step == 0 {
                state.fg_stats = post;
            }
        }

        for i in 0..batch.len() {
            if glob_grads[i].is_none() && fg_grads[i].is_none() {
                continue;
            }
            let inj = inject_feature_gradient(
                model,
                &state.student,
                &align_traces[i],
                glob_grads[i].as_ref(),
                fg_grads[i].as_ref(),
            )?;
            grads.add_scaled(&inj, 1.0);
        }

        if !grads_all_zero(&grads) {
            sgd_momentum_step(&mut state.student, &mut state.velocity, &grads, &sgd, cfg.scope);
            ema_update(&mut state.teacher, &state.student, cfg.beta);
        }
    }

    let steps = cfg.steps_per_batch as f64;
    out.l_st_cls /= steps;
    out.l_st_reg /= steps;
    out.l_al_f /= steps;
    out.l_al_a /= steps;
    out.sym_kl_f /= steps;
    out.sym_kl_a /= steps;
    state.batches_seen += 1;
    Ok(out)
}

/// One row of the run log, mirroring the CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub l_st_cls: f64,
    pub l_st_reg: f64,
    pub l_al_f: f64,
    pub l_al_a: f64,
    pub sym_kl_f: f64,
    pub sym_kl_a: f64,
    pub n_pseudo: usize,
    pub cum_map: f64,
}

/// Complete record of one streamed run: per-batch metrics plus the raw
/// detections and ground truth the cumulative scores came from.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<BatchRecord>,
    /// Per batch, per scene: the detections emitted at inference time
    /// and the hidden annotations. Only the evaluator reads the truths.
    pub evals: Vec<Vec<SceneEval>>,
}

impl RunLog {
    /// Cumulative mAP over the whole stream.
    pub fn final_map(&self) -> f64 {
        self.records.last().map(|r| r.cum_map).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "batch_index,l_st_cls,l_st_reg,l_al_f,l_al_a,sym_kl_f,sym_kl_a,n_pseudo,cum_map\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.batch_index,
                r.l_st_cls,
                r.l_st_reg,
                r.l_al_f,
                r.l_al_a,
                r.sym_kl_f,
                r.sym_kl_a,
                r.n_pseudo,
                r.cum_map
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            n_batches: usize,
            n_scenes: usize,
            final_map: f64,
            records: &'a [BatchRecord],
        }
        let s = Summary {
            n_batches: self.records.len(),
            n_scenes: self.evals.iter().map(|b| b.len()).sum(),
            final_map: self.final_map(),
            records: &self.records,
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

/// Run the full protocol over an ordered stream: predict each batch with
/// the current model, adapt on it, and score cumulatively. Annotations
/// are seen only by the evaluator, never by adaptation.
pub fn run_stream(
    model: &ModelConfig,
    source: &SourceArtifacts,
    stream: &[(ToyScene, Vec<Annotation>)],
    cfg: &TtaConfig,
    augment: &AugmentConfig,
    eval_iou: f64,
    seed: u64,
) -> Result<(RunLog, TtaState), EngineError> {
    cfg.validate()?;
    augment.validate().map_err(EngineError::Config)?;
    if stream.is_empty() {
        return Err(EngineError::Config("stream must be nonempty".into()));
    }

    let mut state = init_state(model, source)?;
    let adapt_seed = child_seed(seed, "adapt");
    let mut log = RunLog::default();
    let mut outcomes = Vec::new();

    for (bi, chunk) in stream.chunks(cfg.batch_size).enumerate() {
        let scenes: Vec<ToyScene> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let batch_seed = child_seed_n(adapt_seed, "batch", bi as u64);
        let outcome = process_batch(model, &mut state, source, &scenes, cfg, augment, batch_seed)?;
        let evals: Vec<SceneEval> = outcome
            .detections
            .iter()
            .zip(chunk)
            .map(|(dets, (_, truths))| SceneEval {
                detections: dets.clone(),
                truths: truths.clone(),
            })
            .collect();
        log.evals.push(evals);
        outcomes.push(outcome);
    }

    let curve = cumulative_curve(&log.evals, eval_iou);
    for (bi, (outcome, (_, cum_map))) in outcomes.into_iter().zip(curve).enumerate() {
        log.records.push(BatchRecord {
            batch_index: bi,
            l_st_cls: outcome.l_st_cls,
            l_st_reg: outcome.l_st_reg,
            l_al_f: outcome.l_al_f,
            l_al_a: outcome.l_al_a,
            sym_kl_f: outcome.sym_kl_f,
            sym_kl_a: outcome.sym_kl_a,
            n_pseudo: outcome.n_pseudo,
            cum_map,
        });
    }
    Ok((log, state))
}

/// Fit the source-domain feature Gaussians by running the model over
/// clean source scenes: one global pooled vector per scene, one pooled
/// foreground vector per scene with at least one surviving proposal.
/// Covariances get a small diagonal jitter so downstream Cholesky
/// factorizations are safe.
pub fn fit_source_stats(
    model: &ModelConfig,
    params: &DetectorParams,
    scenes: &[ToyScene],
) -> Result<(GaussianStats, GaussianStats), EngineError> {
    let mut global_feats = Vec::with_capacity(scenes.len());
    let mut fg_feats = Vec::new();
    for scene in scenes {
        let trace = forward(model, params, scene, Mode::Infer)?;
        global_feats.push(pool_global(&trace.fmap));
        let feats: Vec<DVector<f64>> = trace
            .surviving()
            .iter()
            .map(|&pi| DVector::from_column_slice(&trace.proposals[pi].roi_feat))
            .collect();
        if let Some(f) = pool_foreground(&feats) {
            fg_feats.push(f);
        }
    }
    if fg_feats.len() < 2 {
        return Err(EngineError::Config(format!(
            "only {} of {} scenes kept a surviving foreground proposal; cannot fit \
             foreground statistics",
            fg_feats.len(),
            scenes.len()
        )));
    }
    let jittered = |s: GaussianStats| -> Result<GaussianStats, EngineError> {
        let cov = regularize_cov(s.cov())?;
        Ok(GaussianStats::new(s.mean().clone(), cov)?)
    };
    let global = jittered(fit_source(&global_feats)?)?;
    let fg = jittered(fit_source(&fg_feats)?)?;
    Ok((global, fg))
}

const STATE_FORMAT: &str = "tta-state-v1";

#[derive(Serialize, Deserialize)]
struct StateManifest {
    format: String,
    batches_seen: u64,
    global_stats: serde_json::Value,
    fg_stats: serde_json::Value,
}

/// Write the full adaptation state (three tensor sets plus statistics)
/// so a run can resume bit-exactly.
pub fn save_state(dir: &Path, state: &TtaState) -> Result<(), EngineError> {
    save_tensor_set(&dir.join("student"), &state.student)?;
    save_tensor_set(&dir.join("teacher"), &state.teacher)?;
    save_tensor_set(&dir.join("velocity"), &state.velocity)?;
    let manifest = StateManifest {
        format: STATE_FORMAT.into(),
        batches_seen: state.batches_seen,
        global_stats: serde_json::from_str(&state.global_stats.to_json())
            .expect("stats serialize"),
        fg_stats: serde_json::from_str(&state.fg_stats.to_json()).expect("stats serialize"),
    };
    let path = dir.join("state.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| EngineError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_state(dir: &Path, model: &ModelConfig) -> Result<TtaState, EngineError> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| EngineError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: StateManifest = serde_json::from_str(&text)
        .map_err(|e| EngineError::Config(format!("state manifest: {e}")))?;
    if manifest.format != STATE_FORMAT {
        return Err(EngineError::Config(format!(
            "unrecognized state format {:?}",
            manifest.format
        )));
    }
    let stats = |v: &serde_json::Value| -> Result<GaussianStats, EngineError> {
        Ok(GaussianStats::from_json(&v.to_string())?)
    };
    Ok(TtaState {
        student: load_tensor_set(&dir.join("student"), model)?,
        teacher: load_tensor_set(&dir.join("teacher"), model)?,
        velocity: load_tensor_set(&dir.join("velocity"), model)?,
        global_stats: stats(&manifest.global_stats)?,
        fg_stats: stats(&manifest.fg_stats)?,
        batches_seen: manifest.batches_seen,
    })
}
