//! Dataset manifest: a JSON array of frame records whose paths are relative
//! to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrvError};
use crate::geometry::{CameraExtrinsics, CameraIntrinsics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Camera image; for synthetic worlds an 8-bit class-id PNG.
    pub image: String,
    pub depth: String,
    pub features: String,
    pub masks: String,
    pub poses: String,
    pub calibration: String,
    pub timestamp: f64,
    /// Optional per-pixel class labels for image-space evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Optional ground-truth class grid (`TRVB`, class-id payload).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bev: Option<String>,
    /// Optional ego-vehicle mask PNG (non-zero = vehicle body).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_mask: Option<String>,
}

/// Per-frame camera calibration.
///
/// `extrinsics` maps world to camera at the frame time; `mount` maps the
/// vehicle frame to the camera and defaults to the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    #[serde(default = "CameraExtrinsics::identity")]
    pub mount: CameraExtrinsics,
}

impl Calibration {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrvError::io(path, e))?;
        let cal: Calibration = serde_json::from_str(&text)
            .map_err(|e| TrvError::format(format!("calibration {}", path.display()), e.to_string()))?;
        cal.intrinsics.validate()?;
        cal.extrinsics.validate()?;
        cal.mount.validate()?;
        Ok(cal)
    }

    /// World-to-vehicle transform at the frame time.
    pub fn world_to_vehicle(&self) -> CameraExtrinsics {
        self.mount.inverse().compose(&self.extrinsics)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| TrvError::io(manifest, e))?;
        let frames: Vec<FrameRecord> =
            serde_json::from_str(&text).map_err(|e| TrvError::format("manifest", e.to_string()))?;
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { root, frames })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_manifest(frames: &[FrameRecord], path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(frames).map_err(|e| TrvError::format("manifest", e.to_string()))?;
        super::write_atomic(path, text.as_bytes())
    }

    /// First `n` frames as a new dataset sharing the same root.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            root: self.root.clone(),
            frames: self.frames.iter().take(n).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![FrameRecord {
            image: "f/0.png".into(),
            depth: "f/0.trvd".into(),
            features: "f/0.trvf".into(),
            masks: "f/0.trvm".into(),
            poses: "poses.csv".into(),
            calibration: "f/0.json".into(),
            timestamp: 1.5,
            labels: None,
            gt_bev: Some("f/0.trvb".into()),
            ego_mask: None,
        }];
        let path = dir.path().join("manifest.json");
        Dataset::write_manifest(&frames, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.frames, frames);
        assert_eq!(ds.resolve("x"), dir.path().join("x"));
        assert!(!std::fs::read_to_string(&path).unwrap().contains("labels"));
    }

    #[test]
    fn calibration_field_names() {
        let json = r#"{"intrinsics":{"fx":100,"fy":100,"cx":64,"cy":64,"width":128,"height":128},
                       "extrinsics":{"rotation":[[1,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}}"#;
        let cal: Calibration = serde_json::from_str(json).unwrap();
        assert_eq!(cal.mount, CameraExtrinsics::identity());
        let bad = json.replace("\"fx\"", "\"focal\"");
        assert!(serde_json::from_str::<Calibration>(&bad).is_err());
    }
}
