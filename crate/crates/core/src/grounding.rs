//! Multi-sentence video moment retrieval.
//!
//! Each video's clip features are reduced to the joint visual-text dimension
//! by a linear map and pooled into a 2D moment map whose (i, j) entry
//! represents the clip span i..=j. Query text is embedded, passed through the
//! learned match projection, and both sides are l2-normalized; the matching
//! score is their cosine similarity. Per query, the best moment of each video
//! is found first, then videos are ranked — at most one moment per video.
//!
//! Projection and reducer weights come from a weight archive; training them
//! is out of scope, so defaults are identity (square case) or seeded random
//! orthonormal rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError, NamedTensor};
use crate::linalg::{dot, normalized, Matrix};
use crate::seed::{derive_seed, hash_embed, SeedRng};
use crate::store::FeatureStore;

/// Seed behind default (untrained) projection, reducer, and text-encoder
/// weights. Fixed so retrieval results do not change with a run's global
/// seed.
pub const DEFAULT_WEIGHT_SEED: u64 = 0x5354_4F52_5952_4545; // "STORYREE"

/// Default joint visual-text dimension when no weight archive is supplied.
pub const DEFAULT_JOINT_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("text {0:?} not present in embedding file")]
    UnknownText(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: String, expected: usize, got: usize },
    #[error("degenerate input: {0} has zero norm after projection and cannot be normalized")]
    Degenerate(String),
    #[error("store is empty, nothing to retrieve")]
    EmptyStore,
    #[error("top_k must be >= 1")]
    InvalidTopK,
    #[error("embedding file {path}: {reason}")]
    EmbeddingFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// A query and its joint-space text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub text: String,
    pub vector: Vec<f64>,
}

/// Text → fixed-dimension embedding. Implementations must be deterministic.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<QueryEmbedding, GroundingError>;
}

/// Deterministic test encoder: seeded hash of tokens, mean-pooled.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<QueryEmbedding, GroundingError> {
        if text.trim().is_empty() {
            return Err(GroundingError::EmptyQuery);
        }
        Ok(QueryEmbedding { text: text.to_string(), vector: hash_embed(self.seed, text, self.dim) })
    }
}

/// Adapter for precomputed external embeddings: a JSON map from exact query
/// text to a d-vector.
#[derive(Debug, Clone)]
pub struct FileTextEncoder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl FileTextEncoder {
    pub fn load(path: &Path) -> Result<Self, GroundingError> {
        let err =
            |reason: String| GroundingError::EmbeddingFile { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let table: BTreeMap<String, Vec<f64>> =
            serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        let dim = table.values().next().map(Vec::len).ok_or_else(|| err("empty table".into()))?;
        if table.values().any(|v| v.len() != dim) {
            return Err(err("inconsistent vector dimensions".into()));
        }
        if table.values().flatten().any(|v| !v.is_finite()) {
            return Err(err("non-finite embedding entry".into()));
        }
        Ok(Self { dim, table })
    }
}

impl TextEncoder for FileTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<QueryEmbedding, GroundingError> {
        if text.trim().is_empty() {
            return Err(GroundingError::EmptyQuery);
        }
        let vector = self
            .table
            .get(text)
            .cloned()
            .ok_or_else(|| GroundingError::UnknownText(text.to_string()))?;
        Ok(QueryEmbedding { text: text.to_string(), vector })
    }
}

/// Learned match projection applied to query embeddings before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProjection {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl MatchProjection {
    pub fn identity(dim: usize) -> Self {
        Self { weight: Matrix::identity(dim), bias: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows
    }
}

/// Linear D→d reducer applied to raw clip features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReducer {
    pub weight: Matrix,
}

impl FeatureReducer {
    pub fn identity(dim: usize) -> Self {
        Self { weight: Matrix::identity(dim) }
    }

    /// Seeded random orthonormal rows, for the d < D case where no trained
    /// reducer is available.
    pub fn seeded_orthonormal(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = SeedRng::new(derive_seed(seed, &["reducer"]));
        Self { weight: Matrix::orthonormal_rows(out_dim, in_dim, &mut rng) }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }
}

/// Projection + reducer bundle as persisted in one weight archive.
#[derive(Debug, Clone)]
pub struct GroundingWeights {
    pub projection: MatchProjection,
    pub reducer: FeatureReducer,
}

impl GroundingWeights {
    /// Untrained defaults: identity reducer when D == d, otherwise seeded
    /// orthonormal rows; identity projection with zero bias.
    pub fn default_for(feature_dim: usize, joint_dim: usize) -> Self {
        let reducer = if feature_dim == joint_dim {
            FeatureReducer::identity(joint_dim)
        } else {
            FeatureReducer::seeded_orthonormal(joint_dim, feature_dim, DEFAULT_WEIGHT_SEED)
        };
        Self { projection: MatchProjection::identity(joint_dim), reducer }
    }

    pub fn save(&self, path: &Path) -> Result<(), GroundingError> {
        let d = self.projection.dim();
        let tensors = vec![
            NamedTensor::new("w_mm", vec![d, d], self.projection.weight.data().to_vec()),
            NamedTensor::new("b_mm", vec![d], self.projection.bias.clone()),
            NamedTensor::new(
                "reducer",
                vec![self.reducer.out_dim(), self.reducer.in_dim()],
                self.reducer.weight.data().to_vec(),
            ),
        ];
        archive::save(path, &tensors, &BTreeMap::new())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GroundingError> {
        let (mut tensors, _) = archive::load(path)?;
        let w = archive::take_tensor(&mut tensors, path, "w_mm")?;
        let b = archive::take_tensor(&mut tensors, path, "b_mm")?;
        let r = archive::take_tensor(&mut tensors, path, "reducer")?;
        let d = w.shape[0];
        let gw = Self {
            projection: MatchProjection {
                weight: Matrix::from_vec(w.shape[0], w.shape[1], w.data),
                bias: b.data,
            },
            reducer: FeatureReducer { weight: Matrix::from_vec(r.shape[0], r.shape[1], r.data) },
        };
        if gw.projection.weight.cols != d || gw.projection.bias.len() != d {
            return Err(GroundingError::Dimension {
                context: format!("projection in {}", path.display()),
                expected: d,
                got: gw.projection.bias.len(),
            });
        }
        if !gw.projection.weight.is_finite()
            || gw.projection.bias.iter().any(|v| !v.is_finite())
            || !gw.reducer.weight.is_finite()
        {
            return Err(GroundingError::EmbeddingFile {
                path: path.to_path_buf(),
                reason: "non-finite weight entry".to_string(),
            });
        }
        Ok(gw)
    }
}

/// 2D moment feature map: entry (i, j), i <= j, holds the pooled feature of
/// the clip span i..=j.
#[derive(Debug, Clone)]
pub struct MomentMap {
    pub video_id: String,
    pub num_clips: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl MomentMap {
    /// Feature vector of span (i, j); `None` when i > j or out of range.
    pub fn moment(&self, i: usize, j: usize) -> Option<&[f64]> {
        if i > j || j >= self.num_clips {
            return None;
        }
        let idx = (i * self.num_clips + j) * self.dim;
        Some(&self.data[idx..idx + self.dim])
    }

    /// All valid spans in (start, end) lexicographic order.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_clips).flat_map(move |i| (i..self.num_clips).map(move |j| (i, j)))
    }
}

/// Reduce each clip feature with the FC map, then pool each span by
/// elementwise max over its reduced clip vectors.
pub fn build_moment_map(
    record: &crate::store::VideoRecord,
    reducer: &FeatureReducer,
) -> Result<MomentMap, GroundingError> {
    if reducer.in_dim() != record.clip_features.cols {
        return Err(GroundingError::Dimension {
            context: format!("reducer input for video {}", record.video_id),
            expected: reducer.in_dim(),
            got: record.clip_features.cols,
        });
    }
    let n = record.num_clips;
    let d = reducer.out_dim();
    let reduced: Vec<Vec<f64>> =
        (0..n).map(|i| reducer.weight.matvec(record.clip_features.row(i))).collect();
    let mut data = vec![0.0f64; n * n * d];
    for i in 0..n {
        // Running elementwise max over r_i..r_j as j advances.
        let mut acc = reduced[i].clone();
        let base = (i * n + i) * d;
        data[base..base + d].copy_from_slice(&acc);
        for (j, row) in reduced.iter().enumerate().skip(i + 1) {
            for (a, b) in acc.iter_mut().zip(row) {
                if *b > *a {
                    *a = *b;
                }
            }
            let base = (i * n + j) * d;
            data[base..base + d].copy_from_slice(&acc);
        }
    }
    Ok(MomentMap { video_id: record.video_id.clone(), num_clips: n, dim: d, data })
}

/// Cosine matching score between the projected, normalized query embedding
/// and the normalized moment feature. Always in [-1, 1].
pub fn matching_score(
    query: &QueryEmbedding,
    moment: &[f64],
    projection: &MatchProjection,
) -> Result<f64, GroundingError> {
    if query.vector.len() != projection.dim() {
        return Err(GroundingError::Dimension {
            context: "query embedding".into(),
            expected: projection.dim(),
            got: query.vector.len(),
        });
    }
    if moment.len() != projection.dim() {
        return Err(GroundingError::Dimension {
            context: "moment feature".into(),
            expected: projection.dim(),
            got: moment.len(),
        });
    }
    let mut projected = projection.weight.matvec(&query.vector);
    for (p, b) in projected.iter_mut().zip(&projection.bias) {
        *p += b;
    }
    let q = normalized(&projected)
        .ok_or_else(|| GroundingError::Degenerate("projected query".into()))?;
    let v = normalized(moment).ok_or_else(|| GroundingError::Degenerate("moment".into()))?;
    Ok(dot(&q, &v).clamp(-1.0, 1.0))
}

/// One retrieved moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCandidate {
    pub video_id: String,
    pub start_clip: usize,
    pub end_clip: usize,
    pub score: f64,
}

/// Ranked candidates for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRetrieval {
    pub query: String,
    pub candidates: Vec<MomentCandidate>,
    /// True when top_k exceeded the corpus size and all videos were returned.
    pub exhausted: bool,
}

/// Retrieve the top_k moments per query, at most one moment per video.
///
/// Ranking: per video, the best span by score with ties broken by earlier
/// start then shorter span; across videos, descending score with ties broken
/// by ascending video id. Scoring is parallelized across videos; the merge
/// order is fixed, so results are independent of thread count.
pub fn retrieve(
    queries: &[String],
    store: &FeatureStore,
    weights: &GroundingWeights,
    encoder: &dyn TextEncoder,
    top_k: usize,
) -> Result<Vec<QueryRetrieval>, GroundingError> {
    if store.is_empty() {
        return Err(GroundingError::EmptyStore);
    }
    if top_k == 0 {
        return Err(GroundingError::InvalidTopK);
    }
    if encoder.dim() != weights.projection.dim() {
        return Err(GroundingError::Dimension {
            context: "text encoder output".into(),
            expected: weights.projection.dim(),
            got: encoder.dim(),
        });
    }

    let records: Vec<&crate::store::VideoRecord> = store.records().collect();
    let maps: Vec<MomentMap> = records
        .par_iter()
        .map(|r| build_moment_map(r, &weights.reducer))
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(queries.len());
    for query in queries {
        let embedding = encoder.encode(query)?;
        let mut best_per_video: Vec<MomentCandidate> = maps
            .par_iter()
            .map(|map| best_moment(map, &embedding, &weights.projection))
            .collect::<Result<_, _>>()?;
        best_per_video.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are finite")
                .then_with(|| a.video_id.cmp(&b.video_id))
        });
        let exhausted = top_k > best_per_video.len();
        best_per_video.truncate(top_k);
        out.push(QueryRetrieval { query: query.clone(), candidates: best_per_video, exhausted });
    }
    Ok(out)
}

/// Best span of one video: highest score, ties to earlier start then shorter
/// span (guaranteed by scan order with strict improvement).
fn best_moment(
    map: &MomentMap,
    query: &QueryEmbedding,
    projection: &MatchProjection,
) -> Result<MomentCandidate, GroundingError> {
    let mut best: Option<MomentCandidate> = None;
    for (i, j) in map.spans() {
        let feature = map.moment(i, j).expect("span iterator yields valid spans");
        let score = matching_score(query, feature, projection)?;
        let better = match &best {
            None => true,
            Some(b) => score > b.score,
        };
        if better {
            best = Some(MomentCandidate {
                video_id: map.video_id.clone(),
                start_clip: i,
                end_clip: j,
                score,
            });
        }
    }
    Ok(best.expect("maps have at least one clip"))
}
