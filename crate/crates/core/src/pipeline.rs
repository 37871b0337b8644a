//! End-to-end orchestration: retrieve a moment per query, edit each segment
//! under its edited query, bridge consecutive segments with morphing
//! transitions, and write one numbered frame sequence plus a run manifest
//! that pins everything needed to reproduce the output bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    DiffusionBackend, DiffusionError, NoiseSchedule, ScheduleKind, ToyBackend, ToyBackendConfig,
};
use crate::editing::{edit_segment, EditConfig, EditError, EditedSegment, SegmentSource};
use crate::grounding::{
    retrieve, GroundingError, GroundingWeights, HashTextEncoder, MomentCandidate,
    DEFAULT_JOINT_DIM, DEFAULT_WEIGHT_SEED,
};
use crate::imaging::{self, ImagingError};
use crate::metrics::{temporal_flickering, TEMPORAL_FLICKERING};
use crate::morphing::{generate_transition, FinetuneOptions, MorphError, TransitionSpec};
use crate::personalize::{personalize, PersonalizeError, SubjectSpec};
use crate::seed::{derive_seed, fnv1a64};
use crate::store::{FeatureStore, StoreError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const FRAME_LIST_FILE: &str = "frames.txt";
/// When set, relative store paths in configs resolve under this directory.
pub const STORE_ROOT_ENV: &str = "STORYREEL_STORE_ROOT";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid storyboard: {0}")]
    Config(String),
    #[error("no moment found for query {0:?}; the corpus lacks a match — extend the store or rephrase the query")]
    NoMatch(String),
    #[error("segment {index} ({query:?}): {source}")]
    Segment {
        index: usize,
        query: String,
        #[source]
        source: EditError,
    },
    #[error("transition {index}: {source}")]
    Transition {
        index: usize,
        #[source]
        source: MorphError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Personalize(#[from] PersonalizeError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// One storyboard entry: the retrieval query and its edited counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub source: String,
    pub edited: String,
}

fn default_transition_n() -> usize {
    15
}

fn default_finetune_steps() -> usize {
    200
}

fn default_rank() -> usize {
    4
}

fn default_lora_lr() -> f64 {
    0.5
}

/// Morphing transition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSettings {
    /// Grid density: n yields n-1 intermediate frames.
    #[serde(default = "default_transition_n")]
    pub n: usize,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_lora_lr")]
    pub lr: f64,
}

impl Default for TransitionSettings {
    fn default() -> Self {
        Self {
            n: default_transition_n(),
            finetune_steps: default_finetune_steps(),
            rank: default_rank(),
            lr: default_lora_lr(),
        }
    }
}

fn default_pretrain_steps() -> usize {
    120
}

fn default_pretrain_lr() -> f64 {
    0.05
}

/// Which diffusion backend to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// The in-tree deterministic toy backend, briefly pretrained at
    /// construction.
    Toy {
        #[serde(default)]
        config: ToyBackendConfig,
        #[serde(default = "default_pretrain_steps")]
        pretrain_steps: usize,
        #[serde(default = "default_pretrain_lr")]
        pretrain_lr: f64,
    },
    /// Load previously saved backend weights.
    Archive { path: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Toy {
            config: ToyBackendConfig::default(),
            pretrain_steps: default_pretrain_steps(),
            pretrain_lr: default_pretrain_lr(),
        }
    }
}

fn default_joint_dim() -> usize {
    DEFAULT_JOINT_DIM
}

/// Retrieval weights configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    /// Weight archive holding w_mm, b_mm, and the reducer; identity/seeded
    /// defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_joint_dim")]
    pub joint_dim: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { weights: None, joint_dim: default_joint_dim() }
    }
}

/// Personalization stage configuration (optional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    pub images_dir: PathBuf,
    pub token: String,
    pub class_name: String,
    pub steps: usize,
    #[serde(default = "default_lora_lr")]
    pub lr: f64,
}

fn default_top_k() -> usize {
    1
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryboardConfig {
    pub queries: Vec<QueryPair>,
    pub store: PathBuf,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub transition: TransitionSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalization: Option<PersonalizationConfig>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Which retrieval rank to consume per query (0 = best).
    #[serde(default)]
    pub candidate_rank: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub grounding: GroundingConfig,
    /// Also write a plain-text frame list for external encoders.
    #[serde(default)]
    pub frame_list: bool,
}

impl StoryboardConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.queries.is_empty() {
            return Err(PipelineError::Config("at least one query pair is required".into()));
        }
        for (i, pair) in self.queries.iter().enumerate() {
            if pair.source.trim().is_empty() {
                return Err(PipelineError::Config(format!("query {i} has empty source text")));
            }
            if pair.edited.trim().is_empty() {
                return Err(PipelineError::Config(format!("query {i} has empty edited text")));
            }
        }
        if self.top_k == 0 {
            return Err(PipelineError::Config("top_k must be >= 1".into()));
        }
        if self.transition.n < 2 {
            return Err(PipelineError::Config("transition n must be >= 2".into()));
        }
        Ok(())
    }

    /// FNV hash of the canonical JSON encoding, hex-printed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub kind: ScheduleKind,
    pub alpha_min: f64,
    pub steps: usize,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub query: String,
    pub edited_query: String,
    pub candidate: MomentCandidate,
    pub frame_count: usize,
    /// Index of this segment's first frame in the output sequence.
    pub frame_offset: usize,
    pub seed: u64,
    /// FNV fingerprints of each frame's inverted noise latent.
    pub noise_fingerprints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    /// Transition k sits between segments k and k+1.
    pub index: usize,
    pub n: usize,
    pub frame_count: usize,
    pub frame_offset: usize,
    pub seed: u64,
}

/// Everything needed to audit and reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub store: String,
    pub schedule: ScheduleDump,
    pub segments: Vec<SegmentRecord>,
    pub transitions: Vec<TransitionRecord>,
    pub total_frames: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Frames carry no timestamps; pacing and frame-rate harmonization are
    /// left to the consumer.
    pub timing_note: String,
}

impl RunManifest {
    /// Frame-count conservation: total equals the sum of segment and
    /// transition frame counts.
    pub fn conserves_frame_count(&self) -> bool {
        let sum: usize = self.segments.iter().map(|s| s.frame_count).sum::<usize>()
            + self.transitions.iter().map(|t| t.frame_count).sum::<usize>();
        sum == self.total_frames
    }
}

/// Resolve a configured store path against [`STORE_ROOT_ENV`].
pub fn resolve_store_path(configured: &Path) -> PathBuf {
    if configured.is_absolute() {
        return configured.to_path_buf();
    }
    match std::env::var_os(STORE_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(configured),
        None => configured.to_path_buf(),
    }
}

/// Build the configured backend. The toy backend pretrains deterministically
/// at construction.
pub fn build_backend(
    config: &BackendConfig,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn DiffusionBackend>, DiffusionError> {
    match config {
        BackendConfig::Toy { config, pretrain_steps, pretrain_lr } => {
            if *pretrain_steps == 0 {
                Ok(Box::new(ToyBackend::new(config.clone())))
            } else {
                Ok(Box::new(ToyBackend::pretrained(
                    config.clone(),
                    schedule,
                    *pretrain_steps,
                    *pretrain_lr,
                )?))
            }
        }
        BackendConfig::Archive { path } => Ok(Box::new(ToyBackend::load(path)?)),
    }
}

/// Load grounding weights per config, falling back to identity/seeded
/// defaults sized for the store.
pub fn build_grounding_weights(
    config: &GroundingConfig,
    store: &FeatureStore,
) -> Result<GroundingWeights, PipelineError> {
    match &config.weights {
        Some(path) => Ok(GroundingWeights::load(path)?),
        None => {
            let feature_dim = store.feature_dim().ok_or(GroundingError::EmptyStore)?;
            Ok(GroundingWeights::default_for(feature_dim, config.joint_dim))
        }
    }
}

/// The deterministic query encoder used when no external embeddings are
/// configured. Seeded from a fixed constant, not the run seed, so retrieval
/// does not change with the run's randomness.
pub fn default_query_encoder(joint_dim: usize) -> HashTextEncoder {
    HashTextEncoder::new(joint_dim, derive_seed(DEFAULT_WEIGHT_SEED, &["query-encoder"]))
}

struct StagedSegment {
    record: SegmentRecord,
    frames: Vec<RgbImage>,
}

/// Run the full pipeline and write frames plus `manifest.json` into
/// `out_dir`.
pub fn generate(config: &StoryboardConfig, out_dir: &Path) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    let schedule = config.edit.noise_schedule()?;

    let store_path = resolve_store_path(&config.store);
    let store = FeatureStore::open(&store_path)?;
    let weights = build_grounding_weights(&config.grounding, &store)?;
    let encoder = default_query_encoder(config.grounding.joint_dim);

    let base_backend = build_backend(&config.backend, &schedule)?;
    let backend: Box<dyn DiffusionBackend> = match &config.personalization {
        None => base_backend,
        Some(p) => {
            let images = imaging::load_frames_dir(&p.images_dir)?;
            let spec = SubjectSpec {
                identifier_token: p.token.clone(),
                class_name: p.class_name.clone(),
                steps: p.steps,
                lr: p.lr,
                seed: derive_seed(config.seed, &["personalize"]),
                resolution: config.edit.resolution,
            };
            personalize(base_backend.as_ref(), &spec, &images, &schedule)?.0
        }
    };

    // Grounding: one candidate per query at the configured rank.
    let source_queries: Vec<String> = config.queries.iter().map(|q| q.source.clone()).collect();
    let top_k = config.top_k.max(config.candidate_rank + 1);
    let retrievals = retrieve(&source_queries, &store, &weights, &encoder, top_k)?;
    let mut chosen: Vec<MomentCandidate> = Vec::with_capacity(retrievals.len());
    for r in &retrievals {
        match r.candidates.get(config.candidate_rank) {
            Some(c) => chosen.push(c.clone()),
            None => return Err(PipelineError::NoMatch(r.query.clone())),
        }
    }

    // Edit all segments; segments are independent and run in parallel.
    let staged: Vec<StagedSegment> = config
        .queries
        .par_iter()
        .zip(chosen.par_iter())
        .enumerate()
        .map(|(index, (pair, candidate))| {
            stage_segment(index, pair, candidate, config, &store, backend.as_ref())
        })
        .collect::<Result<_, _>>()?;

    // Transitions depend on both neighbors and run after them.
    let mut transitions: Vec<(TransitionRecord, Vec<RgbImage>)> = Vec::new();
    for index in 0..staged.len().saturating_sub(1) {
        let prev = &staged[index];
        let next = &staged[index + 1];
        let seed = derive_seed(config.seed, &["transition", &index.to_string()]);
        let spec = TransitionSpec {
            n: config.transition.n,
            frame_i: prev.frames.last().expect("segments are non-empty").clone(),
            frame_j: next.frames.first().expect("segments are non-empty").clone(),
            query_i: prev.record.edited_query.clone(),
            query_j: next.record.edited_query.clone(),
            finetune: FinetuneOptions {
                steps: config.transition.finetune_steps,
                rank: config.transition.rank,
                lr: config.transition.lr,
                seed,
            },
        };
        let transition = generate_transition(&spec, backend.as_ref(), &schedule)
            .map_err(|source| PipelineError::Transition { index, source })?;
        let record = TransitionRecord {
            index,
            n: config.transition.n,
            frame_count: transition.frames.len(),
            frame_offset: 0, // fixed up during concatenation
            seed,
        };
        transitions.push((record, transition.frames));
    }

    // Concatenate: seg 0, transition 0, seg 1, transition 1, ...
    std::fs::create_dir_all(out_dir)
        .map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;
    let mut all_frames: Vec<RgbImage> = Vec::new();
    let mut segments = Vec::with_capacity(staged.len());
    let mut transition_records = Vec::with_capacity(transitions.len());
    let mut transition_iter = transitions.into_iter();
    for staged_segment in staged {
        let mut record = staged_segment.record;
        record.frame_offset = all_frames.len();
        all_frames.extend(staged_segment.frames);
        segments.push(record);
        if let Some((mut t_record, t_frames)) = transition_iter.next() {
            t_record.frame_offset = all_frames.len();
            all_frames.extend(t_frames);
            transition_records.push(t_record);
        }
    }
    for (i, frame) in all_frames.iter().enumerate() {
        imaging::save_frame(&out_dir.join(imaging::frame_file_name(i)), frame)?;
    }
    if config.frame_list {
        let list: String =
            (0..all_frames.len()).map(|i| imaging::frame_file_name(i) + "\n").collect();
        let path = out_dir.join(FRAME_LIST_FILE);
        std::fs::write(&path, list).map_err(|source| PipelineError::Io { path, source })?;
    }

    let mut metric_values = BTreeMap::new();
    if all_frames.len() >= 2 {
        if let Ok(score) = temporal_flickering(&all_frames) {
            metric_values.insert(TEMPORAL_FLICKERING.to_string(), score);
        }
    }

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: config.hash(),
        seed: config.seed,
        store: store_path.display().to_string(),
        schedule: ScheduleDump {
            kind: config.edit.schedule,
            alpha_min: config.edit.alpha_min,
            steps: config.edit.steps,
            alphas: schedule.alphas().to_vec(),
        },
        segments,
        transitions: transition_records,
        total_frames: all_frames.len(),
        metrics: metric_values,
        timing_note: "frames are emitted without timestamps; pacing is left to the consumer"
            .to_string(),
    };
    debug_assert!(manifest.conserves_frame_count());

    let manifest_path = out_dir.join(RUN_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json)
        .map_err(|source| PipelineError::Io { path: manifest_path, source })?;
    Ok(manifest)
}

fn stage_segment(
    index: usize,
    pair: &QueryPair,
    candidate: &MomentCandidate,
    config: &StoryboardConfig,
    store: &FeatureStore,
    backend: &dyn DiffusionBackend,
) -> Result<StagedSegment, PipelineError> {
    let frame_paths =
        store.get_frames(&candidate.video_id, (candidate.start_clip, candidate.end_clip))?;
    let frames: Vec<RgbImage> =
        frame_paths.iter().map(|p| imaging::load_frame(p)).collect::<Result<_, _>>()?;
    let mut edited: EditedSegment =
        edit_segment(&frames, &pair.source, &pair.edited, &config.edit, backend).map_err(
            |source| PipelineError::Segment { index, query: pair.source.clone(), source },
        )?;
    edited.source = Some(SegmentSource {
        video_id: candidate.video_id.clone(),
        start_clip: candidate.start_clip,
        end_clip: candidate.end_clip,
    });
    let record = SegmentRecord {
        index,
        query: pair.source.clone(),
        edited_query: pair.edited.clone(),
        candidate: candidate.clone(),
        frame_count: edited.frames.len(),
        frame_offset: 0, // fixed up during concatenation
        seed: derive_seed(config.seed, &["segment", &index.to_string()]),
        noise_fingerprints: edited.noise_fingerprints.iter().map(|f| format!("{f:016x}")).collect(),
    };
    Ok(StagedSegment { record, frames: edited.frames })
}
