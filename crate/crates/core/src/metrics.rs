//! Video quality metrics: built-in temporal flickering plus an executable
//! plugin interface for external scorers (subject consistency, imaging
//! quality, temporal style, ...). Plugins receive the frame directory as
//! their single argument and print a score to stdout; missing plugins are
//! reported as unavailable rather than invented.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging;

pub const TEMPORAL_FLICKERING: &str = "temporal_flickering";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 frames, got {0}")]
    NotEnoughFrames(usize),
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    ShapeMismatch { index: usize, expected: (u32, u32), got: (u32, u32) },
    #[error(transparent)]
    Imaging(#[from] imaging::ImagingError),
}

/// Temporal flickering score in [0, 100]:
/// `(1 - mean|delta| / 255) * 100` over all adjacent frame pairs, pixels,
/// and channels. A static clip scores exactly 100, a black/white alternation
/// exactly 0.
pub fn temporal_flickering(frames: &[RgbImage]) -> Result<f64, MetricsError> {
    if frames.len() < 2 {
        return Err(MetricsError::NotEnoughFrames(frames.len()));
    }
    let expected = frames[0].dimensions();
    let mut total: u64 = 0;
    let mut count: u64 = 0;
    for (index, pair) in frames.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.dimensions() != expected {
            return Err(MetricsError::ShapeMismatch {
                index: index + 1,
                expected,
                got: b.dimensions(),
            });
        }
        for (x, y) in a.as_raw().iter().zip(b.as_raw()) {
            total += u64::from(x.abs_diff(*y));
            count += 1;
        }
    }
    let mean = total as f64 / count as f64;
    Ok((1.0 - mean / 255.0) * 100.0)
}

/// Result of one metric in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricOutcome {
    Score {
        value: f64,
    },
    /// Plugin executable not found.
    Unavailable,
    /// Plugin ran but failed (nonzero exit or unparseable output).
    Failed {
        exit_code: Option<i32>,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub outcome: MetricOutcome,
}

/// Score a frame directory with the built-in metric plus the given plugin
/// executables. Plugin failures are recorded, never fatal.
pub fn metrics_report(
    frames_dir: &Path,
    plugins: &[PathBuf],
) -> Result<Vec<MetricEntry>, MetricsError> {
    let frames = imaging::load_frames_dir(frames_dir)?;
    let mut entries = vec![MetricEntry {
        name: TEMPORAL_FLICKERING.to_string(),
        outcome: match temporal_flickering(&frames) {
            Ok(value) => MetricOutcome::Score { value },
            Err(e) => MetricOutcome::Failed { exit_code: None, detail: e.to_string() },
        },
    }];
    for plugin in plugins {
        let name = plugin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| plugin.display().to_string());
        entries.push(MetricEntry { name, outcome: run_plugin(plugin, frames_dir) });
    }
    Ok(entries)
}

fn run_plugin(plugin: &Path, frames_dir: &Path) -> MetricOutcome {
    if !plugin.exists() {
        return MetricOutcome::Unavailable;
    }
    let output = match Command::new(plugin).arg(frames_dir).output() {
        Ok(o) => o,
        Err(e) => {
            return MetricOutcome::Failed { exit_code: None, detail: e.to_string() };
        }
    };
    if !output.status.success() {
        return MetricOutcome::Failed {
            exit_code: output.status.code(),
            detail: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        };
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    match stdout.trim().parse::<f64>() {
        Ok(value) => MetricOutcome::Score { value },
        Err(_) => MetricOutcome::Failed {
            exit_code: output.status.code(),
            detail: format!("unparseable score {:?}", stdout.trim()),
        },
    }
}
