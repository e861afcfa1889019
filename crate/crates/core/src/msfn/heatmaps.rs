use std::path::Path;

use serde::Serialize;

use crate::binio::write_file;
use crate::error::Result;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::plot::write_pgm;
use crate::skeleton::channel_names;

/// One stage's PCM (`[B, 19, S, S]`) and PAF (`[B, 38, S, S]`) outputs.
#[derive(Debug, Clone, Copy)]
pub struct PoseHeatmaps {
    pub pcm: Var,
    pub paf: Var,
    pub stage: usize,
}

impl PoseHeatmaps {
    /// PCM and PAF concatenated along channels, `[B, 57, S, S]`.
    pub fn stacked<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        tape.concat(&[self.pcm, self.paf], 1)
    }
}

#[derive(Serialize)]
struct ChannelMeta {
    name: String,
    file: String,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct DumpMeta {
    side: usize,
    channels: Vec<ChannelMeta>,
}

/// Writes one PGM per channel of a single-sample `[57, S, S]` heatmap stack
/// plus `heatmaps.json` listing names and value ranges.
pub fn dump_heatmaps(dir: &Path, pcm: &Tensor<f64>, paf: &Tensor<f64>) -> Result<()> {
    let side = *pcm.shape().last().unwrap();
    let plane = side * side;
    let names = channel_names();
    let mut channels = Vec::with_capacity(names.len());
    let all = pcm.data().chunks_exact(plane).chain(paf.data().chunks_exact(plane));
    for (c, (name, values)) in names.into_iter().zip(all).enumerate() {
        let file = format!("{c:02}_{name}.pgm");
        let (min, max) = write_pgm(&dir.join(&file), side, side, values)?;
        channels.push(ChannelMeta { name, file, min, max });
    }
    let meta = DumpMeta { side, channels };
    let json = serde_json::to_vec_pretty(&meta).expect("plain struct serialises");
    write_file(&dir.join("heatmaps.json"), &json)
}
