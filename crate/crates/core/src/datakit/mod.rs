//! Synthetic scenes: skeleton annotations, analytic PCM/PAF labels, toy
//! multipath CSI, and the on-disk dataset layout.

mod dataset;
mod render;
mod scene;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::skeleton::NUM_KEYPOINTS;

pub use dataset::{
    generate, read_dataset, write_dataset, Dataset, ManifestEntry, ManifestFile, Sample, Split, SynthConfig,
    MANIFEST_VERSION,
};
pub use render::{render_labels, render_paf, render_pcm, RenderParams};
pub use scene::{random_person, synth_csi, MotionScript, RoomLayout, SceneConfig};

/// Normalised image position, both coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point {
            x: self.x + t * (other.x - self.x),
            y: self.y + t * (other.y - self.y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub kp: [Option<Point>; NUM_KEYPOINTS],
}

impl Person {
    pub fn present(&self) -> usize {
        self.kp.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(default)]
    pub frame: u64,
    #[serde(default)]
    pub scene: u64,
    pub persons: Vec<Person>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.persons.is_empty() {
            return Err(Error::config("a labelled frame needs at least one person"));
        }
        for p in &self.persons {
            for k in p.kp.iter().flatten() {
                if !((0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y)) {
                    return Err(Error::config(format!(
                        "keypoint ({}, {}) lies outside [0, 1]²",
                        k.x, k.y
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keypoints per person, the shape shared with decoded skeletons.
    pub fn normalized(&self) -> Vec<[Option<(f64, f64)>; NUM_KEYPOINTS]> {
        self.persons
            .iter()
            .map(|p| p.kp.map(|k| k.map(|k| (k.x, k.y))))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let ann: Annotation = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        ann.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(ann)
    }
}
