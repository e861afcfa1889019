use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datakit::Sample;
use crate::error::{Error, Result};
use crate::model::MultiFormer;
use crate::numerics::{Mode, Real};
use crate::pose::{decode_poses, hungarian_min, DecodeParams, SkeletonSet};
use crate::skeleton::{KEYPOINT_NAMES, LEFT_HIP, NUM_KEYPOINTS, RIGHT_SHOULDER};

/// Keypoints of one person in normalised image coordinates.
pub type Pose = [Option<(f64, f64)>; NUM_KEYPOINTS];

/// Length that converts keypoint error into a fraction of body size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    /// Distance between right shoulder and left hip.
    Torso,
    /// `√(‖rs‖² + ‖lh‖²)` with both positions read as vectors from the origin.
    Literal,
}

impl Normalizer {
    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Torso => "torso",
            Normalizer::Literal => "literal",
        }
    }

    pub fn length(self, gt: &Pose) -> Option<f64> {
        let (rs, lh) = (gt[RIGHT_SHOULDER]?, gt[LEFT_HIP]?);
        let len = match self {
            Normalizer::Torso => (rs.0 - lh.0).hypot(rs.1 - lh.1),
            Normalizer::Literal => (rs.0 * rs.0 + rs.1 * rs.1 + lh.0 * lh.0 + lh.1 * lh.1).sqrt(),
        };
        (len > 0.0).then_some(len)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

const UNMATCHABLE: f64 = 1e12;

/// Assigns predicted persons to ground-truth persons by minimal mean
/// distance over shared keypoints. Entry `g` is the prediction for truth `g`.
pub fn match_persons(pred: &[Pose], truth: &[Pose]) -> Vec<Option<usize>> {
    if pred.is_empty() || truth.is_empty() {
        return vec![None; truth.len()];
    }
    let cols = pred.len().max(truth.len());
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .map(|g| {
            (0..cols)
                .map(|p| {
                    let Some(pp) = pred.get(p) else { return UNMATCHABLE };
                    let ds: Vec<f64> = (0..NUM_KEYPOINTS).filter_map(|j| Some(dist(g[j]?, pp[j]?))).collect();
                    if ds.is_empty() {
                        UNMATCHABLE
                    } else {
                        ds.iter().sum::<f64>() / ds.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    hungarian_min(&cost)
        .into_iter()
        .enumerate()
        .map(|(g, p)| (p < pred.len() && cost[g][p] < UNMATCHABLE).then_some(p))
        .collect()
}

/// Correct-keypoint tallies per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PckCounts {
    pub alphas: Vec<f64>,
    /// `correct[a][j]`: evaluated persons whose keypoint `j` lies within
    /// `alphas[a] / 100` normalised lengths.
    pub correct: Vec<[usize; NUM_KEYPOINTS]>,
    /// Evaluated persons with keypoint `j` annotated.
    pub total: [usize; NUM_KEYPOINTS],
    pub persons: usize,
    /// Ground-truth persons without a usable normaliser.
    pub skipped: usize,
    /// Evaluated persons whose two normalisers differ by more than 1e-9.
    pub normalizers_differ: usize,
}

impl PckCounts {
    pub fn pck(&self, alpha: usize, j: usize) -> Option<f64> {
        (self.total[j] > 0).then(|| self.correct[alpha][j] as f64 / self.total[j] as f64)
    }

    /// Pooled over all annotated keypoints.
    pub fn mean(&self, alpha: usize) -> f64 {
        let total: usize = self.total.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.correct[alpha].iter().sum::<usize>() as f64 / total as f64
    }
}

/// PCK tallies of `pred[i]` against `truth[i]` for every sample `i`.
pub fn pck_counts(pred: &[Vec<Pose>], truth: &[Vec<Pose>], alphas: &[f64], norm: Normalizer) -> Result<PckCounts> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("pck_counts", &[pred.len()], &[truth.len()]));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::config(
            "PCK thresholds must be a non-empty list of positive numbers",
        ));
    }
    let mut c = PckCounts {
        alphas: alphas.to_vec(),
        correct: vec![[0; NUM_KEYPOINTS]; alphas.len()],
        total: [0; NUM_KEYPOINTS],
        persons: 0,
        skipped: 0,
        normalizers_differ: 0,
    };
    for (p, t) in pred.iter().zip(truth) {
        let assign = match_persons(p, t);
        for (g, gt) in t.iter().enumerate() {
            let Some(len) = norm.length(gt) else {
                c.skipped += 1;
                continue;
            };
            let other = Normalizer::Torso.length(gt).zip(Normalizer::Literal.length(gt));
            if other.is_some_and(|(a, b)| (a - b).abs() > 1e-9) {
                c.normalizers_differ += 1;
            }
            c.persons += 1;
            for j in 0..NUM_KEYPOINTS {
                let Some(gj) = gt[j] else { continue };
                c.total[j] += 1;
                let Some(pj) = assign[g].and_then(|i| p[i][j]) else {
                    continue;
                };
                let ratio = dist(gj, pj) / len;
                for (a, &alpha) in alphas.iter().enumerate() {
                    if ratio <= alpha / 100.0 {
                        c.correct[a][j] += 1;
                    }
                }
            }
        }
    }
    Ok(c)
}

fn alpha_key(a: f64) -> String {
    format!("{a}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    /// Pooled PCK per threshold.
    pub mean: BTreeMap<String, f64>,
    pub persons_detected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltNormalizer {
    pub name: String,
    pub alpha: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

/// Evaluation summary. Contains no timing so identical inputs give
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Final-stage PCK per threshold and keypoint.
    pub alpha: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub per_stage: Vec<StageSummary>,
    pub params: usize,
    pub samples: usize,
    pub persons: usize,
    pub skipped: usize,
    pub normalizer: String,
    pub alt_normalizer: Option<AltNormalizer>,
}

fn per_keypoint(c: &PckCounts) -> BTreeMap<String, BTreeMap<String, Option<f64>>> {
    c.alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let row = (0..NUM_KEYPOINTS)
                .map(|j| (KEYPOINT_NAMES[j].to_string(), c.pck(a, j)))
                .collect();
            (alpha_key(alpha), row)
        })
        .collect()
}

impl EvalReport {
    /// `stage_preds[s][i]` holds the persons predicted at stage `s + 1`
    /// for sample `i`.
    pub fn from_predictions(
        stage_preds: &[Vec<Vec<Pose>>],
        truth: &[Vec<Pose>],
        alphas: &[f64],
        params: usize,
    ) -> Result<Self> {
        let last = stage_preds
            .last()
            .ok_or_else(|| Error::Empty("prediction stages".into()))?;
        let mut per_stage = Vec::with_capacity(stage_preds.len());
        let mut final_counts = None;
        for (s, preds) in stage_preds.iter().enumerate() {
            let c = pck_counts(preds, truth, alphas, Normalizer::Torso)?;
            per_stage.push(StageSummary {
                stage: s + 1,
                mean: alphas
                    .iter()
                    .enumerate()
                    .map(|(a, &x)| (alpha_key(x), c.mean(a)))
                    .collect(),
                persons_detected: preds.iter().map(Vec::len).sum(),
            });
            final_counts = Some(c);
        }
        let c = final_counts.expect("at least one stage");
        let alt_normalizer = if c.normalizers_differ > 0 {
            let alt = pck_counts(last, truth, alphas, Normalizer::Literal)?;
            Some(AltNormalizer {
                name: Normalizer::Literal.name().into(),
                alpha: per_keypoint(&alt),
            })
        } else {
            None
        };
        Ok(EvalReport {
            alpha: per_keypoint(&c),
            per_stage,
            params,
            samples: truth.len(),
            persons: c.persons,
            skipped: c.skipped,
            normalizer: Normalizer::Torso.name().into(),
            alt_normalizer,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Plain-text keypoint × threshold table plus per-stage means.
    pub fn table(&self) -> String {
        let mut keys: Vec<(&String, f64)> = self.alpha.keys().map(|k| (k, k.parse().unwrap_or(f64::NAN))).collect();
        keys.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut s = format!("{:<16}", "keypoint");
        for (k, _) in &keys {
            let _ = write!(s, " {:>8}", format!("PCK@{k}"));
        }
        s.push('\n');
        for name in KEYPOINT_NAMES {
            let _ = write!(s, "{name:<16}");
            for (k, _) in &keys {
                match self.alpha[*k][name] {
                    Some(v) => {
                        let _ = write!(s, " {v:>8.3}");
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        for st in &self.per_stage {
            let _ = write!(s, "{:<16}", format!("stage {}", st.stage));
            for (k, _) in &keys {
                let _ = write!(s, " {:>8.3}", st.mean[*k]);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub decode: DecodeParams,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alphas: vec![5.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            decode: DecodeParams::default(),
            batch_size: 16,
        }
    }
}

/// Decoded skeletons per stage: `out[s][i]` for stage `s + 1`, sample `i`.
pub fn predict<T: Real>(
    model: &MultiFormer<T>,
    samples: &[&Sample],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<SkeletonSet>>> {
    let stages = model.config.stages;
    let side = model.config.side();
    let plane = side * side;
    let mut out = vec![Vec::with_capacity(samples.len()); stages];
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let windows: Vec<_> = chunk.iter().map(|s| &s.window).collect();
        let batch = model.token_batch(&windows)?;
        let mut tape = model.tape(Mode::Eval);
        let res = model.forward_batch(&mut tape, &batch)?;
        for (s, h) in res.msfn.heatmaps().enumerate() {
            let pcm = tape.value(h.pcm).to_f64_vec();
            let paf = tape.value(h.paf).to_f64_vec();
            let (np, nf) = (pcm.len() / chunk.len(), paf.len() / chunk.len());
            debug_assert_eq!(nf, 38 * plane);
            for i in 0..chunk.len() {
                out[s].push(decode_poses(
                    &pcm[i * np..(i + 1) * np],
                    &paf[i * nf..(i + 1) * nf],
                    side,
                    &cfg.decode,
                )?);
            }
        }
    }
    Ok(out)
}

/// Runs the model on `samples` and scores every stage.
pub fn evaluate<T: Real>(model: &MultiFormer<T>, samples: &[&Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let preds = predict(model, samples, cfg)?;
    let stage_preds: Vec<Vec<Vec<Pose>>> = preds
        .iter()
        .map(|stage| stage.iter().map(SkeletonSet::normalized).collect())
        .collect();
    let truth: Vec<Vec<Pose>> = samples.iter().map(|s| s.annotation.normalized()).collect();
    EvalReport::from_predictions(&stage_preds, &truth, &cfg.alphas, model.count_parameters())
}
