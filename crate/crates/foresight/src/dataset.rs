//! On-disk dataset model: videos as ordered lists of labeled, timed activity
//! instances, serialized one JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// One labeled, timed activity segment with its features, visible scene
/// objects and reference caption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActivityInstance {
    pub label: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub activity_feature: Vec<f64>,
    pub scene_feature: Vec<f64>,
    pub scene_objects: Vec<String>,
    pub caption_tokens: Vec<String>,
}

/// An ordered list of activity instances with strictly increasing starts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub activities: Vec<ActivityInstance>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut prev_start = f64::NEG_INFINITY;
        for (i, a) in self.activities.iter().enumerate() {
            if a.start_s <= prev_start {
                return Err(DataError::Invalid(format!(
                    "video {}: start times must be strictly increasing at activity {i}",
                    self.video_id
                )));
            }
            if a.end_s < a.start_s {
                return Err(DataError::Invalid(format!(
                    "video {}: activity {i} ends before it starts",
                    self.video_id
                )));
            }
            prev_start = a.start_s;
        }
        Ok(())
    }
}

/// Sidecar summary written next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub grammar: String,
    pub seed: u64,
    pub n_videos: usize,
    pub n_activities: usize,
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub objects: Vec<String>,
}

impl DatasetManifest {
    /// Conventional manifest path for a dataset file.
    pub fn path_for(dataset: &Path) -> std::path::PathBuf {
        let mut os = dataset.as_os_str().to_owned();
        os.push(".manifest.json");
        std::path::PathBuf::from(os)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_videos(path: &Path, videos: &[VideoRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for v in videos {
        let line = serde_json::to_string(v).expect("video record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_videos(path: &Path) -> Result<Vec<VideoRecord>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut videos = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let video: VideoRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            source: e,
        })?;
        video.validate()?;
        videos.push(video);
    }
    Ok(videos)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        line: 0,
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_video() -> VideoRecord {
        VideoRecord {
            video_id: "v0".into(),
            activities: vec![
                ActivityInstance {
                    label: 0,
                    start_s: 0.0,
                    end_s: 2.0,
                    activity_feature: vec![0.5, -1.0],
                    scene_feature: vec![1.0],
                    scene_objects: vec!["bowl".into()],
                    caption_tokens: vec!["the".into(), "person".into(), "washed".into()],
                },
                ActivityInstance {
                    label: 1,
                    start_s: 3.0,
                    end_s: 4.5,
                    activity_feature: vec![0.1, 0.2],
                    scene_feature: vec![-1.0],
                    scene_objects: vec!["pan".into()],
                    caption_tokens: vec!["the".into(), "person".into(), "peeled".into()],
                },
            ],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = std::env::temp_dir().join(format!("foresight-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.jsonl");
        let videos = vec![tiny_video()];
        write_videos(&path, &videos).unwrap();
        let back = read_videos(&path).unwrap();
        assert_eq!(videos, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validation_rejects_non_increasing_starts() {
        let mut v = tiny_video();
        v.activities[1].start_s = 0.0;
        assert!(v.validate().is_err());
    }
}
