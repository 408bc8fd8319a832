//! Replay memory and its on-disk form: a JSONL manifest (header line, then
//! one line per entry) next to a little-endian `f64` feature blob.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Demo, TrainerError};
use crate::env::{CategoryId, NavAction, TrajectoryRecord};
use crate::tensor::checkpoint::{push_f64s, read_f64s, BlobEntry};
use crate::tensor::DenseArray;

pub const BUFFER_VERSION: &str = "cnav-buf-v1";

/// Sparse stored trajectory: features encoded once at storage time, the
/// expert actions at the kept frames, and weights recomputed on the sparse
/// action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    pub task: usize,
    pub trajectory_id: u64,
    pub category: CategoryId,
    pub frame_indices: Vec<usize>,
    pub features: Vec<DenseArray>,
    pub actions: Vec<NavAction>,
    pub weights: Vec<f64>,
    /// Length of the source trajectory.
    pub source_len: usize,
}

impl FeatureEntry {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub features: Vec<FeatureEntry>,
    pub raw: Vec<Demo>,
}

impl ReplayBuffer {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty() && self.raw.is_empty()
    }

    pub fn len(&self) -> usize {
        self.features.len() + self.raw.len()
    }

    pub fn summary(&self) -> BufferSummary {
        let dim = self.features.first().and_then(|e| e.features.first()).map_or(0, |f| f.len());
        let stored_frames: usize = self.features.iter().map(|e| e.len()).sum();
        let source_frames: usize = self.features.iter().map(|e| e.source_len).sum();
        BufferSummary {
            feature_entries: self.features.len(),
            raw_entries: self.raw.len(),
            feature_dim: dim,
            stored_frames,
            source_frames,
            feature_bytes: (stored_frames * dim * 8) as u64,
            full_replay_bytes: (source_frames * dim * 8) as u64,
            raw_frames: self.raw.iter().map(|d| d.len()).sum(),
        }
    }
}

/// Size accounting written as the manifest's first line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSummary {
    pub feature_entries: usize,
    pub raw_entries: usize,
    pub feature_dim: usize,
    pub stored_frames: usize,
    /// Frames the stored trajectories had before selection.
    pub source_frames: usize,
    pub feature_bytes: u64,
    /// Bytes the same trajectories would need with every frame kept.
    pub full_replay_bytes: u64,
    pub raw_frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header {
        version: String,
        #[serde(flatten)]
        summary: BufferSummary,
    },
    Feature {
        task: usize,
        trajectory_id: u64,
        category: CategoryId,
        frame_indices: Vec<usize>,
        actions: Vec<u8>,
        weights: Vec<f64>,
        source_len: usize,
        blob: BlobEntry,
    },
    Raw {
        task: usize,
        trajectory: TrajectoryRecord,
    },
}

pub fn buffer_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut json = prefix.as_os_str().to_owned();
    json.push(".jsonl");
    let mut bin = prefix.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn save_buffer(buffer: &ReplayBuffer, prefix: &Path) -> Result<BufferSummary, TrainerError> {
    let summary = buffer.summary();
    let mut blob = Vec::new();
    let mut lines = vec![Line::Header {
        version: BUFFER_VERSION.into(),
        summary: summary.clone(),
    }];
    for (n, e) in buffer.features.iter().enumerate() {
        let flat: Vec<f64> = e.features.iter().flat_map(|f| f.data().iter().copied()).collect();
        let name = format!("entry{n}");
        let entry = push_f64s(&mut blob, &name, &[e.len(), summary.feature_dim], &flat);
        lines.push(Line::Feature {
            task: e.task,
            trajectory_id: e.trajectory_id,
            category: e.category,
            frame_indices: e.frame_indices.clone(),
            actions: e.actions.iter().map(|a| a.code()).collect(),
            weights: e.weights.clone(),
            source_len: e.source_len,
            blob: entry,
        });
    }
    for d in &buffer.raw {
        lines.push(Line::Raw {
            task: d.task,
            trajectory: d.record.clone(),
        });
    }
    let (json_path, bin_path) = buffer_paths(prefix);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&json_path)?);
    for line in &lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    std::fs::write(bin_path, blob)?;
    Ok(summary)
}

/// Reads a buffer back. Raw entries hold only episode headers and actions,
/// so `restore` must rebuild their observations.
pub fn load_buffer(
    prefix: &Path,
    mut restore: impl FnMut(&TrajectoryRecord, usize) -> Result<Demo, TrainerError>,
) -> Result<(ReplayBuffer, BufferSummary), TrainerError> {
    let (json_path, bin_path) = buffer_paths(prefix);
    let blob = std::fs::read(&bin_path)?;
    let reader = BufReader::new(std::fs::File::open(&json_path)?);
    let mut buffer = ReplayBuffer::default();
    let mut summary = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Header { version, summary: s } => {
                if version != BUFFER_VERSION {
                    return Err(TrainerError::Buffer(format!(
                        "version {version}, expected {BUFFER_VERSION}"
                    )));
                }
                summary = Some(s);
            }
            Line::Feature {
                task,
                trajectory_id,
                category,
                frame_indices,
                actions,
                weights,
                source_len,
                blob: entry,
            } => {
                let s = summary
                    .as_ref()
                    .ok_or_else(|| TrainerError::Buffer("entry before header".into()))?;
                let flat = read_f64s(&blob, &entry)?;
                let rows = entry.shape.first().copied().unwrap_or(0);
                if entry.shape.len() != 2
                    || entry.shape[1] != s.feature_dim
                    || rows != actions.len()
                    || rows != weights.len()
                    || rows != frame_indices.len()
                {
                    return Err(TrainerError::Buffer(format!("line {}: inconsistent entry", n + 1)));
                }
                let actions = actions
                    .iter()
                    .map(|&c| NavAction::from_code(c).ok_or_else(|| TrainerError::Buffer(format!("bad action {c}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                buffer.features.push(FeatureEntry {
                    task,
                    trajectory_id,
                    category,
                    frame_indices,
                    features: flat.chunks_exact(s.feature_dim.max(1)).map(|c| DenseArray::vector(c.to_vec())).collect(),
                    actions,
                    weights,
                    source_len,
                });
            }
            Line::Raw { task, trajectory } => buffer.raw.push(restore(&trajectory, task)?),
        }
    }
    let summary = summary.ok_or_else(|| TrainerError::Buffer("missing header".into()))?;
    if summary != buffer.summary() {
        return Err(TrainerError::Buffer("header does not match the stored entries".into()));
    }
    Ok((buffer, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_entries_round_trip_bit_exact() {
        let entry = FeatureEntry {
            task: 1,
            trajectory_id: 42,
            category: 3,
            frame_indices: vec![0, 4, 7],
            features: vec![
                DenseArray::vector(vec![0.1, -2.5e-300, 3.0]),
                DenseArray::vector(vec![f64::MIN_POSITIVE, 1.0 / 3.0, -0.0]),
                DenseArray::vector(vec![7.0, 8.0, 9.0]),
            ],
            actions: vec![NavAction::TurnLeft, NavAction::MoveForward, NavAction::Stop],
            weights: vec![1.0, 4.48, 4.48],
            source_len: 8,
        };
        let buffer = ReplayBuffer {
            features: vec![entry.clone()],
            raw: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("buf");
        let summary = save_buffer(&buffer, &prefix).unwrap();
        assert_eq!(summary.feature_bytes, 3 * 3 * 8);
        assert_eq!(summary.full_replay_bytes, 8 * 3 * 8);
        let (back, _) = load_buffer(&prefix, |_, _| unreachable!()).unwrap();
        assert_eq!(back.features, vec![entry]);
        for (a, b) in back.features[0].features.iter().zip(&buffer.features[0].features) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("buf");
        save_buffer(&ReplayBuffer::default(), &prefix).unwrap();
        let (json, _) = buffer_paths(&prefix);
        let text = std::fs::read_to_string(&json).unwrap().replace(BUFFER_VERSION, "cnav-buf-v0");
        std::fs::write(&json, text).unwrap();
        assert!(matches!(load_buffer(&prefix, |_, _| unreachable!()), Err(TrainerError::Buffer(_))));
    }
}
