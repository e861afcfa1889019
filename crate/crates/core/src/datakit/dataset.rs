use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{synth_csi, MotionScript, RoomLayout, SceneConfig};
use super::Annotation;
use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::frontend::CsiWindow;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub scene: SceneConfig,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 16,
            scene: SceneConfig::default(),
            val_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: CsiWindow,
    /// Pose at the final packet of `window`.
    pub annotation: Annotation,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub csi: String,
    pub ann: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

/// Deterministic synthetic set: sample `i` draws from ChaCha stream `i + 1`
/// of `seed`, the validation split from stream 0.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let room = RoomLayout::default();
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let script = MotionScript::random(&mut rng, cfg.scene.persons, cfg.scene.keyframes);
        let frames = script.frames(cfg.scene.packets, i as u64);
        let window = synth_csi(&frames, &cfg.scene, &room, &mut rng)?;
        let annotation = frames.into_iter().last().expect("≥ 2 packets");
        samples.push(Sample {
            window,
            annotation,
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    order.shuffle(&mut rng);
    let n_val = ((cfg.samples as f64 * cfg.val_fraction).floor() as usize).min(cfg.samples.saturating_sub(1));
    for &i in &order[..n_val] {
        samples[i].split = Split::Val;
    }
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        samples,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let csi = format!("csi/{i:05}.csit");
        let ann = format!("ann/{i:05}.json");
        s.window.write(&dir.join(&csi))?;
        s.annotation.write(&dir.join(&ann))?;
        entries.push(ManifestEntry {
            csi,
            ann,
            split: s.split,
        });
    }
    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        seed: ds.seed,
        config: ds.config.clone(),
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_file(&dir.join(MANIFEST_NAME), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = read_file(&path)?;
    let probe: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::parse(&path, e.to_string()))?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            path,
            found: found as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: ManifestFile = serde_json::from_value(probe).map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        samples.push(Sample {
            window: CsiWindow::read(&dir.join(&e.csi))?,
            annotation: Annotation::read(&dir.join(&e.ann))?,
            split: e.split,
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        config: manifest.config,
        samples,
    })
}
