use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{MultiFormer, Preset};

/// Published parameter count of the full model.
pub const REFERENCE_PARAMS: f64 = 11.93e6;

/// Relative deviation from [`REFERENCE_PARAMS`] tolerated without comment.
const TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub preset: String,
    pub params: usize,
    pub breakdown: BTreeMap<String, usize>,
    pub reference_params: f64,
    pub ratio: f64,
    pub within_tolerance: bool,
    /// Present when the count falls outside the tolerance band.
    pub justification: Option<String>,
}

/// Builds `preset` in f32 and counts its trainable parameters.
pub fn parameter_report(preset: Preset) -> Result<ParamReport> {
    let model = MultiFormer::<f32>::new(&preset.config(), 0)?;
    let params = model.count_parameters();
    let breakdown = model.parameter_breakdown();
    let ratio = params as f64 / REFERENCE_PARAMS;
    let within_tolerance = (ratio - 1.0).abs() <= TOLERANCE;
    let justification = (!within_tolerance).then(|| {
        let enc = &model.config.encoder;
        let attn: usize = breakdown
            .iter()
            .filter(|(k, _)| k.starts_with("encoder"))
            .map(|(_, v)| v)
            .sum();
        format!(
            "every encoder layer carries {h} value projections of size d×d (d = {d}) whose head outputs are \
             averaged rather than concatenated, so each layer holds {per} value weights; the encoders total {attn} \
             of {params} parameters. Preset {name} differs only in width and depth.",
            h = enc.heads,
            d = enc.d_model,
            per = enc.heads * enc.d_model * enc.d_model,
            name = preset.name(),
        )
    });
    Ok(ParamReport {
        preset: preset.name().to_string(),
        params,
        breakdown,
        reference_params: REFERENCE_PARAMS,
        ratio,
        within_tolerance,
        justification,
    })
}
