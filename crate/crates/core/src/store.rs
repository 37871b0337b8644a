//! Video corpus with precomputed per-clip features: the retrieval database.
//!
//! On disk a store is a directory holding `store.json` (the manifest), one
//! `<video_id>.features` text matrix per video (rows = clips, cols = feature
//! dimension), and one `<video_id>/%06d.png` frame directory per video.
//! Feature extraction itself happens upstream; ingestion consumes the
//! extractor's output matrix plus a small JSON sidecar declaring clip count,
//! dimension, and fps.
//!
//! A store is immutable once loaded and safe to share across threads;
//! ingestion is single-writer and persists the manifest on every call.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging;
use crate::linalg::Matrix;
use crate::seed::fnv1a64;

pub const STORE_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "store.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest {path} has schema version {got}, this build reads version {expected}; migrate the store first")]
    SchemaVersion { path: PathBuf, got: u32, expected: u32 },
    #[error("feature file {path}: {reason}")]
    FeatureParse { path: PathBuf, reason: String },
    #[error("feature sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("feature dimension mismatch: store holds {store_dim}-dim features, {video_id} provides {got_dim}")]
    DimensionMismatch { video_id: String, store_dim: usize, got_dim: usize },
    #[error("video {0} already ingested with different content")]
    Conflict(String),
    #[error("unknown video id {0}")]
    UnknownVideo(String),
    #[error("clip span ({start}, {end}) invalid for {video_id} with {num_clips} clips")]
    SpanOutOfRange { video_id: String, start: usize, end: usize, num_clips: usize },
    #[error("{video_id}: {reason}")]
    InvalidRecord { video_id: String, reason: String },
    #[error(transparent)]
    Imaging(#[from] imaging::ImagingError),
}

/// Sidecar accompanying a feature matrix file at ingest time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub num_clips: usize,
    pub feature_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

/// One corpus entry, fully loaded in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_clips: usize,
    /// N×D matrix of raw extractor features, one row per clip.
    pub clip_features: Matrix,
    /// Absolute directory holding `%06d.png` frames.
    pub frame_dir: PathBuf,
    /// Inclusive (first, last) frame index per clip; contiguous, ordered,
    /// covering `[0, total_frames)`.
    pub clip_frame_ranges: Vec<(usize, usize)>,
    pub fps: f64,
}

impl VideoRecord {
    pub fn total_frames(&self) -> usize {
        self.clip_frame_ranges.last().map_or(0, |&(_, last)| last + 1)
    }

    /// Check the clip-range invariants; used on load and in tests.
    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |reason: String| {
            Err(StoreError::InvalidRecord { video_id: self.video_id.clone(), reason })
        };
        if self.num_clips == 0 {
            return fail("record has zero clips".into());
        }
        if self.clip_frame_ranges.len() != self.num_clips {
            return fail(format!(
                "{} clip ranges for {} clips",
                self.clip_frame_ranges.len(),
                self.num_clips
            ));
        }
        if self.clip_features.rows != self.num_clips {
            return fail(format!(
                "{} feature rows for {} clips",
                self.clip_features.rows, self.num_clips
            ));
        }
        if !self.fps.is_finite() || self.fps <= 0.0 {
            return fail(format!("fps {} not a positive finite number", self.fps));
        }
        let mut next = 0usize;
        for &(first, last) in &self.clip_frame_ranges {
            if first != next {
                return fail(format!("clip range starts at {first}, expected {next}"));
            }
            if last < first {
                return fail(format!("clip range ({first}, {last}) reversed"));
            }
            next = last + 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RecordEntry {
    video_id: String,
    num_clips: usize,
    feature_dim: usize,
    fps: f64,
    clip_frame_ranges: Vec<(usize, usize)>,
    total_frames: usize,
    content_hash: u64,
}

/// The serialized form of a store: schema version, feature dimension, and
/// one entry per record. Feature matrices live in per-video files next to it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreManifest {
    pub schema_version: u32,
    pub feature_dim: Option<usize>,
    records: Vec<RecordEntry>,
}

impl StoreManifest {
    pub fn empty() -> Self {
        Self { schema_version: STORE_SCHEMA_VERSION, feature_dim: None, records: Vec::new() }
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.video_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// In-memory store: manifest plus loaded feature matrices.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    feature_dim: Option<usize>,
    records: BTreeMap<String, VideoRecord>,
    hashes: BTreeMap<String, u64>,
}

impl FeatureStore {
    /// Open a store directory. A missing or empty directory yields an empty
    /// store with the feature dimension unset.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Ok(Self {
                root: root.to_path_buf(),
                feature_dim: None,
                records: BTreeMap::new(),
                hashes: BTreeMap::new(),
            });
        }
        let manifest = read_manifest(&manifest_path)?;
        let mut records = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        for entry in &manifest.records {
            let features_path = root.join(format!("{}.features", entry.video_id));
            let features = read_matrix(&features_path)?;
            if features.rows != entry.num_clips || features.cols != entry.feature_dim {
                return Err(StoreError::FeatureParse {
                    path: features_path,
                    reason: format!(
                        "matrix is {}x{}, manifest declares {}x{}",
                        features.rows, features.cols, entry.num_clips, entry.feature_dim
                    ),
                });
            }
            let record = VideoRecord {
                video_id: entry.video_id.clone(),
                num_clips: entry.num_clips,
                clip_features: features,
                frame_dir: root.join(&entry.video_id),
                clip_frame_ranges: entry.clip_frame_ranges.clone(),
                fps: entry.fps,
            };
            record.validate()?;
            hashes.insert(entry.video_id.clone(), entry.content_hash);
            records.insert(entry.video_id.clone(), record);
        }
        Ok(Self { root: root.to_path_buf(), feature_dim: manifest.feature_dim, records, hashes })
    }

    /// Assemble an in-memory store from prebuilt records, without touching
    /// disk. Frame directories are taken as-is; useful for synthetic corpora
    /// and embedding the store behind other storage layers.
    pub fn from_records(records: Vec<VideoRecord>) -> Result<Self, StoreError> {
        let mut map = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        let mut feature_dim = None;
        for record in records {
            record.validate()?;
            match feature_dim {
                None => feature_dim = Some(record.clip_features.cols),
                Some(dim) => {
                    if record.clip_features.cols != dim {
                        return Err(StoreError::DimensionMismatch {
                            video_id: record.video_id.clone(),
                            store_dim: dim,
                            got_dim: record.clip_features.cols,
                        });
                    }
                }
            }
            if map.contains_key(&record.video_id) {
                return Err(StoreError::Conflict(record.video_id.clone()));
            }
            let mut bytes = Vec::new();
            for v in record.clip_features.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            hashes.insert(record.video_id.clone(), fnv1a64(&bytes));
            map.insert(record.video_id.clone(), record);
        }
        Ok(Self { root: PathBuf::new(), feature_dim, records: map, hashes })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, video_id: &str) -> Result<&VideoRecord, StoreError> {
        self.records.get(video_id).ok_or_else(|| StoreError::UnknownVideo(video_id.to_string()))
    }

    /// Records in ascending `video_id` order.
    pub fn records(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.values()
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            schema_version: STORE_SCHEMA_VERSION,
            feature_dim: self.feature_dim,
            records: self
                .records
                .values()
                .map(|r| RecordEntry {
                    video_id: r.video_id.clone(),
                    num_clips: r.num_clips,
                    feature_dim: r.clip_features.cols,
                    fps: r.fps,
                    clip_frame_ranges: r.clip_frame_ranges.clone(),
                    total_frames: r.total_frames(),
                    content_hash: self.hashes[&r.video_id],
                })
                .collect(),
        }
    }

    /// Ingest a video: read its feature matrix (+ sidecar), copy its frames
    /// into the store as `<video_id>/%06d.png`, partition frames into
    /// uniform-length clips (last clip may be shorter), and persist the
    /// manifest. Re-ingesting identical content is a no-op; same id with
    /// different content is a conflict.
    pub fn ingest(
        &mut self,
        video_id: &str,
        frames_dir: &Path,
        features_path: &Path,
        fps: f64,
    ) -> Result<&VideoRecord, StoreError> {
        let sidecar = read_feature_sidecar(features_path)?;
        let features = read_matrix(features_path)?;
        if features.rows != sidecar.num_clips {
            return Err(StoreError::FeatureParse {
                path: features_path.to_path_buf(),
                reason: format!(
                    "file has {} rows, sidecar declares {} clips",
                    features.rows, sidecar.num_clips
                ),
            });
        }
        if features.cols != sidecar.feature_dim {
            return Err(StoreError::FeatureParse {
                path: features_path.to_path_buf(),
                reason: format!(
                    "file rows have {} columns, sidecar declares dimension {}",
                    features.cols, sidecar.feature_dim
                ),
            });
        }
        if let Some(store_dim) = self.feature_dim {
            if features.cols != store_dim {
                return Err(StoreError::DimensionMismatch {
                    video_id: video_id.to_string(),
                    store_dim,
                    got_dim: features.cols,
                });
            }
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(StoreError::InvalidRecord {
                video_id: video_id.to_string(),
                reason: format!("fps {fps} not a positive finite number"),
            });
        }
        if let Some(declared) = sidecar.fps {
            if (declared - fps).abs() > 1e-9 {
                return Err(StoreError::InvalidRecord {
                    video_id: video_id.to_string(),
                    reason: format!("sidecar declares fps {declared}, ingest got {fps}"),
                });
            }
        }

        let frame_files = imaging::list_frame_files(frames_dir)?;
        let total_frames = frame_files.len();
        if total_frames < features.rows {
            return Err(StoreError::InvalidRecord {
                video_id: video_id.to_string(),
                reason: format!("{total_frames} frames cannot fill {} clips", features.rows),
            });
        }

        let mut hasher_bytes = Vec::new();
        for v in features.data() {
            hasher_bytes.extend_from_slice(&v.to_le_bytes());
        }
        hasher_bytes.extend_from_slice(&fps.to_le_bytes());
        for f in &frame_files {
            let bytes = fs::read(f).map_err(|source| StoreError::Io { path: f.clone(), source })?;
            hasher_bytes.extend_from_slice(&bytes);
        }
        let content_hash = fnv1a64(&hasher_bytes);

        if let Some(existing) = self.hashes.get(video_id) {
            if *existing == content_hash {
                return Ok(&self.records[video_id]);
            }
            return Err(StoreError::Conflict(video_id.to_string()));
        }

        let ranges = uniform_clip_ranges(total_frames, features.rows);

        // Copy frames into the store under canonical numbered names.
        let dest_dir = self.root.join(video_id);
        fs::create_dir_all(&dest_dir)
            .map_err(|source| StoreError::Io { path: dest_dir.clone(), source })?;
        for (i, src) in frame_files.iter().enumerate() {
            let dest = dest_dir.join(imaging::frame_file_name(i));
            fs::copy(src, &dest).map_err(|source| StoreError::Io { path: dest, source })?;
        }
        let dest_features = self.root.join(format!("{video_id}.features"));
        write_matrix(&dest_features, &features)?;

        let record = VideoRecord {
            video_id: video_id.to_string(),
            num_clips: features.rows,
            clip_features: features,
            frame_dir: dest_dir,
            clip_frame_ranges: ranges,
            fps,
        };
        record.validate()?;
        self.feature_dim.get_or_insert(record.clip_features.cols);
        self.hashes.insert(video_id.to_string(), content_hash);
        self.records.insert(video_id.to_string(), record);
        self.save()?;
        Ok(&self.records[video_id])
    }

    /// Ordered frame paths covering clips `start..=end` (inclusive span).
    pub fn get_frames(
        &self,
        video_id: &str,
        span: (usize, usize),
    ) -> Result<Vec<PathBuf>, StoreError> {
        let record = self.record(video_id)?;
        let (start, end) = span;
        if start > end || end >= record.num_clips {
            return Err(StoreError::SpanOutOfRange {
                video_id: video_id.to_string(),
                start,
                end,
                num_clips: record.num_clips,
            });
        }
        let first = record.clip_frame_ranges[start].0;
        let last = record.clip_frame_ranges[end].1;
        Ok((first..=last).map(|i| record.frame_dir.join(imaging::frame_file_name(i))).collect())
    }

    fn save(&self) -> Result<(), StoreError> {
        fs::create_dir_all(&self.root)
            .map_err(|source| StoreError::Io { path: self.root.clone(), source })?;
        write_manifest(&self.root.join(MANIFEST_FILE), &self.manifest())
    }
}

/// Uniform partition of `total_frames` into `num_clips` contiguous ranges;
/// all clips share ceil(total/num) frames except a shorter final clip.
fn uniform_clip_ranges(total_frames: usize, num_clips: usize) -> Vec<(usize, usize)> {
    let per_clip = total_frames.div_ceil(num_clips);
    let mut ranges = Vec::with_capacity(num_clips);
    let mut start = 0usize;
    for i in 0..num_clips {
        let remaining_clips = num_clips - i - 1;
        // Leave at least one frame for every remaining clip.
        let end = (start + per_clip - 1).min(total_frames - 1 - remaining_clips);
        ranges.push((start, end));
        start = end + 1;
    }
    ranges
}

pub fn read_manifest(path: &Path) -> Result<StoreManifest, StoreError> {
    let bytes =
        fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let manifest: StoreManifest = serde_json::from_slice(&bytes)
        .map_err(|source| StoreError::ManifestParse { path: path.to_path_buf(), source })?;
    if manifest.schema_version != STORE_SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            path: path.to_path_buf(),
            got: manifest.schema_version,
            expected: STORE_SCHEMA_VERSION,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &manifest.records {
        if !seen.insert(&r.video_id) {
            return Err(StoreError::ManifestParse {
                path: path.to_path_buf(),
                source: serde::de::Error::custom(format!("duplicate video id {}", r.video_id)),
            });
        }
        if let Some(dim) = manifest.feature_dim {
            if r.feature_dim != dim {
                return Err(StoreError::ManifestParse {
                    path: path.to_path_buf(),
                    source: serde::de::Error::custom(format!(
                        "record {} has dimension {}, store declares {}",
                        r.video_id, r.feature_dim, dim
                    )),
                });
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &StoreManifest) -> Result<(), StoreError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, json).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

/// Text matrix format: one row per line, columns separated by single spaces,
/// floats printed in Rust's shortest round-trip form. Parse errors carry the
/// file path and the offending line.
pub fn read_matrix(path: &Path) -> Result<Matrix, StoreError> {
    let text = fs::read_to_string(path)
        .map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_ascii_whitespace() {
            let v: f64 = tok.parse().map_err(|_| StoreError::FeatureParse {
                path: path.to_path_buf(),
                reason: format!("line {}: invalid float {tok:?}", lineno + 1),
            })?;
            if !v.is_finite() {
                return Err(StoreError::FeatureParse {
                    path: path.to_path_buf(),
                    reason: format!("line {}: non-finite value {tok}", lineno + 1),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(StoreError::FeatureParse {
                    path: path.to_path_buf(),
                    reason: format!(
                        "line {}: {} columns, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(StoreError::FeatureParse {
            path: path.to_path_buf(),
            reason: "no rows".to_string(),
        });
    }
    let cols = rows[0].len();
    let data = rows.into_iter().flatten().collect::<Vec<f64>>();
    Ok(Matrix::from_vec(data.len() / cols, cols, data))
}

pub fn write_matrix(path: &Path, matrix: &Matrix) -> Result<(), StoreError> {
    let mut out = String::new();
    for r in 0..matrix.rows {
        let row = matrix.row(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

pub fn read_feature_sidecar(features_path: &Path) -> Result<FeatureSidecar, StoreError> {
    let mut os = features_path.as_os_str().to_owned();
    os.push(".json");
    let path = PathBuf::from(os);
    let bytes = fs::read(&path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
    serde_json::from_slice(&bytes)
        .map_err(|source| StoreError::Sidecar { path, reason: source.to_string() })
}

pub fn write_feature_sidecar(
    features_path: &Path,
    sidecar: &FeatureSidecar,
) -> Result<(), StoreError> {
    let mut os = features_path.as_os_str().to_owned();
    os.push(".json");
    let path = PathBuf::from(os);
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&path, json).map_err(|source| StoreError::Io { path, source })
}
