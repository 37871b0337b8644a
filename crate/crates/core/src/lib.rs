//! Retrieval-grounded long video generation.
//!
//! Given an ordered list of text queries, this crate retrieves matching video
//! moments from a feature database, edits each retrieved segment toward an
//! edited query via DDIM inversion and sampling with inter-frame consistency
//! hooks, bridges consecutive segments with LoRA-interpolated latent morphing,
//! and stitches everything into one numbered frame sequence with a
//! reproducibility manifest.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`store`] — persistent corpus of videos with precomputed per-clip
//!   features and frame images.
//! - [`grounding`] — multi-sentence moment retrieval over 2D moment maps.
//! - [`diffusion`] — noise schedules, the DDIM inversion/sampling pair, and
//!   the [`diffusion::DiffusionBackend`] abstraction (a deterministic toy
//!   backend ships in-tree; real generative backends plug in behind the same
//!   trait).
//! - [`editing`] — per-segment text-guided editing with latent hooks.
//! - [`morphing`] — LoRA fine-tuning, delta interpolation, and spherical
//!   latent interpolation for smooth segment transitions.
//! - [`personalize`] — few-shot subject binding via rare-token fine-tuning.
//! - [`pipeline`] — end-to-end orchestration and the run manifest.
//! - [`metrics`] — built-in temporal flickering plus a plugin interface for
//!   external scorers.

pub mod archive;
pub mod diffusion;
pub mod editing;
pub mod grounding;
pub mod imaging;
pub mod linalg;
pub mod metrics;
pub mod morphing;
pub mod personalize;
pub mod pipeline;
pub mod seed;
pub mod store;

pub use diffusion::{Condition, DiffusionBackend, Latent, NoiseSchedule, ScheduleKind};
pub use editing::{EditConfig, EditedSegment};
pub use grounding::{MomentCandidate, MomentMap, QueryEmbedding};
pub use morphing::{LoraDelta, TransitionSpec};
pub use pipeline::{RunManifest, StoryboardConfig};
pub use store::{FeatureStore, VideoRecord};
