//! Heatmaps → multi-person skeletons: peak picking, part-affinity line
//! integrals, per-limb optimal assignment and greedy assembly.

mod hungarian;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::skeleton::{KEYPOINT_NAMES, LIMBS, NUM_KEYPOINTS, NUM_LIMBS, PAF_CHANNELS};

pub use hungarian::{hungarian_min, max_weight_matching};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    /// Minimum peak value for a keypoint candidate.
    pub threshold: f64,
    pub max_candidates: usize,
    /// Points sampled along each candidate segment.
    pub paf_samples: usize,
    /// A pair must average more than this alignment ...
    pub score_gate: f64,
    /// ... and at least this fraction of its samples must exceed `score_gate`.
    pub fraction_gate: f64,
    pub subpixel: bool,
    /// Persons with fewer keypoints are discarded.
    pub min_keypoints: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            threshold: 0.1,
            max_candidates: 8,
            paf_samples: 10,
            score_gate: 0.05,
            fraction_gate: 0.8,
            subpixel: true,
            min_keypoints: 3,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config(format!(
                "peak threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.max_candidates == 0 || self.paf_samples == 0 {
            return Err(Error::config("candidate and sample counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fraction_gate) {
            return Err(Error::config("fraction gate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A keypoint hypothesis in continuous grid coordinates (`x` = column).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub keypoint: usize,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Vertex offset of a 1-D parabola through `(-1, l), (0, c), (1, r)`.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    // log domain first: exact for Gaussian peaks
    let (num, den) = if l > 0.0 && c > 0.0 && r > 0.0 {
        let (l, c, r) = (l.ln(), c.ln(), r.ln());
        (l - r, l - 2.0 * c + r)
    } else {
        (l - r, l - 2.0 * c + r)
    };
    if den < 0.0 {
        (0.5 * num / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Strict 3×3 local maxima of a `side × side` map with value ≥ `threshold`,
/// best first; equal scores fall back to raster order.
pub fn nms_peaks(map: &[f64], side: usize, keypoint: usize, params: &DecodeParams) -> Vec<Candidate> {
    assert_eq!(map.len(), side * side, "nms_peaks: map is not side × side");
    let at = |r: usize, c: usize| map[r * side + c];
    let mut peaks = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let v = at(r, c);
            if !(v >= params.threshold) {
                continue;
            }
            let mut strict = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= side as i64 || cc >= side as i64 {
                        continue;
                    }
                    if at(rr as usize, cc as usize) >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                peaks.push((r, c, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    peaks.truncate(params.max_candidates);
    peaks
        .into_iter()
        .enumerate()
        .map(|(index, (r, c, v))| {
            let (mut x, mut y) = (c as f64, r as f64);
            if params.subpixel {
                if c > 0 && c + 1 < side {
                    x += parabola_offset(at(r, c - 1), v, at(r, c + 1));
                }
                if r > 0 && r + 1 < side {
                    y += parabola_offset(at(r - 1, c), v, at(r + 1, c));
                }
            }
            Candidate {
                keypoint,
                index,
                x,
                y,
                score: v,
            }
        })
        .collect()
}

/// Bilinear sample of a `side × side` map, clamped to the grid.
pub fn bilinear(map: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let hi = (side - 1) as f64;
    let (x, y) = (x.clamp(0.0, hi), y.clamp(0.0, hi));
    let (c0, r0) = (x.floor() as usize, y.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(side - 1), (r0 + 1).min(side - 1));
    let (fx, fy) = (x - c0 as f64, y - r0 as f64);
    let top = map[r0 * side + c0] * (1.0 - fx) + map[r0 * side + c1] * fx;
    let bottom = map[r1 * side + c0] * (1.0 - fx) + map[r1 * side + c1] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PafScore {
    /// Mean alignment of the field with the segment direction.
    pub score: f64,
    /// Fraction of samples whose alignment exceeds the score gate.
    pub fraction: f64,
}

/// Line integral of the `(fx, fy)` field along `a → b`, as a mean over
/// `samples` evenly spaced points including both endpoints.
pub fn paf_score(
    a: (f64, f64),
    b: (f64, f64),
    fx: &[f64],
    fy: &[f64],
    side: usize,
    samples: usize,
    gate: f64,
) -> Result<PafScore> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    if !(len > 0.0) {
        return Err(Error::Degenerate { op: "paf_score" });
    }
    let (ux, uy) = (dx / len, dy / len);
    let mut total = 0.0;
    let mut above = 0usize;
    for k in 0..samples {
        let t = if samples == 1 {
            0.5
        } else {
            k as f64 / (samples - 1) as f64
        };
        let (x, y) = (a.0 + t * dx, a.1 + t * dy);
        let dot = bilinear(fx, side, x, y) * ux + bilinear(fy, side, x, y) * uy;
        total += dot;
        if dot > gate {
            above += 1;
        }
    }
    Ok(PafScore {
        score: total / samples as f64,
        fraction: above as f64 / samples as f64,
    })
}

/// A selected pairing between candidate `a` of the limb's source keypoint
/// and candidate `b` of its target keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connection {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

pub fn passes_gates(s: &PafScore, params: &DecodeParams) -> bool {
    s.score > params.score_gate && s.fraction >= params.fraction_gate
}

/// Optimal one-to-one pairing for one limb type, restricted to gated pairs.
pub fn match_limb(scores: &[Vec<PafScore>], params: &DecodeParams) -> Vec<Connection> {
    let weights: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| s.score).collect()).collect();
    max_weight_matching(&weights, |i, j| passes_gates(&scores[i][j], params))
        .into_iter()
        .map(|(a, b)| Connection {
            a,
            b,
            score: scores[a][b].score,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// Grid coordinates per keypoint slot.
    pub keypoints: [Option<Keypoint>; NUM_KEYPOINTS],
    pub score: f64,
}

impl Skeleton {
    pub fn present(&self) -> usize {
        self.keypoints.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSet {
    pub side: usize,
    pub persons: Vec<Skeleton>,
    /// Accepted connection score per limb type.
    pub limb_scores: [f64; NUM_LIMBS],
}

struct Partial {
    slots: [Option<usize>; NUM_KEYPOINTS],
    score: f64,
    alive: bool,
}

/// Groups per-limb connections into persons.
///
/// Limbs are visited in topology order and, within a limb, by descending
/// score. A connection joining two different persons merges them when their
/// keypoint slots are disjoint and is dropped otherwise; a connection whose
/// target slot is already taken by another candidate is dropped too.
pub fn assemble(
    candidates: &[Vec<Candidate>],
    connections: &[Vec<Connection>],
    side: usize,
    min_keypoints: usize,
) -> SkeletonSet {
    assert_eq!(candidates.len(), NUM_KEYPOINTS);
    assert_eq!(connections.len(), NUM_LIMBS);
    let mut persons: Vec<Partial> = Vec::new();
    let mut owner: Vec<Vec<Option<usize>>> = candidates.iter().map(|c| vec![None; c.len()]).collect();
    let mut limb_scores = [0.0; NUM_LIMBS];

    for (k, conns) in connections.iter().enumerate() {
        let (ka, kb) = LIMBS[k];
        let mut order: Vec<&Connection> = conns.iter().collect();
        order.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.a, x.b).cmp(&(y.a, y.b))));
        for c in order {
            let accepted = match (owner[ka][c.a], owner[kb][c.b]) {
                (None, None) => {
                    let mut slots = [None; NUM_KEYPOINTS];
                    slots[ka] = Some(c.a);
                    slots[kb] = Some(c.b);
                    owner[ka][c.a] = Some(persons.len());
                    owner[kb][c.b] = Some(persons.len());
                    persons.push(Partial {
                        slots,
                        score: candidates[ka][c.a].score + candidates[kb][c.b].score,
                        alive: true,
                    });
                    Some(persons.len() - 1)
                }
                (Some(p), None) | (None, Some(p)) => {
                    let (slot, cand) = if owner[ka][c.a].is_some() { (kb, c.b) } else { (ka, c.a) };
                    if persons[p].slots[slot].is_none() {
                        persons[p].slots[slot] = Some(cand);
                        persons[p].score += candidates[slot][cand].score;
                        owner[slot][cand] = Some(p);
                        Some(p)
                    } else {
                        None
                    }
                }
                (Some(p), Some(q)) if p == q => Some(p),
                (Some(p), Some(q)) => {
                    let disjoint =
                        (0..NUM_KEYPOINTS).all(|j| persons[p].slots[j].is_none() || persons[q].slots[j].is_none());
                    if disjoint {
                        let (keep, gone) = (p.min(q), p.max(q));
                        for j in 0..NUM_KEYPOINTS {
                            if let Some(cand) = persons[gone].slots[j] {
                                persons[keep].slots[j] = Some(cand);
                                owner[j][cand] = Some(keep);
                            }
                        }
                        persons[keep].score += persons[gone].score;
                        persons[gone].alive = false;
                        Some(keep)
                    } else {
                        None
                    }
                }
            };
            if let Some(p) = accepted {
                persons[p].score += c.score;
                limb_scores[k] += c.score;
            }
        }
    }

    let persons = persons
        .into_iter()
        .filter(|p| p.alive && p.slots.iter().flatten().count() >= min_keypoints)
        .map(|p| {
            let mut keypoints = [None; NUM_KEYPOINTS];
            for (j, s) in p.slots.iter().enumerate() {
                if let Some(i) = *s {
                    let c = &candidates[j][i];
                    keypoints[j] = Some(Keypoint {
                        x: c.x,
                        y: c.y,
                        score: c.score,
                    });
                }
            }
            Skeleton {
                keypoints,
                score: p.score,
            }
        })
        .collect();
    SkeletonSet {
        side,
        persons,
        limb_scores,
    }
}

/// Full decode of one sample: `pcm` holds at least the 18 keypoint maps and
/// `paf` the 38 limb channels, each `side × side`, channel-major.
pub fn decode_poses(pcm: &[f64], paf: &[f64], side: usize, params: &DecodeParams) -> Result<SkeletonSet> {
    params.validate()?;
    let plane = side * side;
    if side < 2 || pcm.len() < NUM_KEYPOINTS * plane || paf.len() != PAF_CHANNELS * plane {
        return Err(Error::shape(
            "decode_poses",
            &[NUM_KEYPOINTS + 1, PAF_CHANNELS, side],
            &[pcm.len() / plane.max(1), paf.len() / plane.max(1), side],
        ));
    }
    let candidates: Vec<Vec<Candidate>> = (0..NUM_KEYPOINTS)
        .map(|j| nms_peaks(&pcm[j * plane..(j + 1) * plane], side, j, params))
        .collect();
    let mut connections = Vec::with_capacity(NUM_LIMBS);
    for (k, &(ka, kb)) in LIMBS.iter().enumerate() {
        let fx = &paf[2 * k * plane..(2 * k + 1) * plane];
        let fy = &paf[(2 * k + 1) * plane..(2 * k + 2) * plane];
        let scores: Vec<Vec<PafScore>> = candidates[ka]
            .iter()
            .map(|a| {
                candidates[kb]
                    .iter()
                    .map(|b| {
                        // coincident candidates cannot define a direction
                        paf_score(
                            (a.x, a.y),
                            (b.x, b.y),
                            fx,
                            fy,
                            side,
                            params.paf_samples,
                            params.score_gate,
                        )
                        .unwrap_or(PafScore {
                            score: 0.0,
                            fraction: 0.0,
                        })
                    })
                    .collect()
            })
            .collect();
        connections.push(match_limb(&scores, params));
    }
    Ok(assemble(&candidates, &connections, side, params.min_keypoints))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub keypoints: Vec<Option<KeypointRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbScoreRecord {
    pub limb: String,
    pub score: f64,
}

/// On-disk skeleton file; coordinates normalised to `[0, 1]` by `side − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub persons: Vec<PersonRecord>,
    pub limb_scores: Vec<LimbScoreRecord>,
}

impl SkeletonSet {
    pub fn to_file(&self) -> SkeletonFile {
        let scale = (self.side - 1) as f64;
        SkeletonFile {
            persons: self
                .persons
                .iter()
                .map(|p| PersonRecord {
                    keypoints: p
                        .keypoints
                        .iter()
                        .enumerate()
                        .map(|(j, k)| {
                            k.map(|k| KeypointRecord {
                                name: KEYPOINT_NAMES[j].to_string(),
                                x: k.x / scale,
                                y: k.y / scale,
                                score: k.score,
                            })
                        })
                        .collect(),
                })
                .collect(),
            limb_scores: self
                .limb_scores
                .iter()
                .enumerate()
                .map(|(k, &score)| LimbScoreRecord {
                    limb: crate::skeleton::limb_name(k),
                    score,
                })
                .collect(),
        }
    }

    /// Keypoints per person in normalised coordinates.
    pub fn normalized(&self) -> Vec<[Option<(f64, f64)>; NUM_KEYPOINTS]> {
        let scale = (self.side - 1) as f64;
        self.persons
            .iter()
            .map(|p| p.keypoints.map(|k| k.map(|k| (k.x / scale, k.y / scale))))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("skeleton file serialises");
        write_file(path, text.as_bytes())
    }
}

impl SkeletonFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = crate::binio::read_file(path)?;
        let f: SkeletonFile = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        if f.persons.iter().any(|p| p.keypoints.len() != NUM_KEYPOINTS) {
            return Err(Error::parse(
                path,
                format!("every person needs {NUM_KEYPOINTS} keypoint slots"),
            ));
        }
        Ok(f)
    }

    pub fn normalized(&self) -> Vec<[Option<(f64, f64)>; NUM_KEYPOINTS]> {
        self.persons
            .iter()
            .map(|p| std::array::from_fn(|j| p.keypoints[j].as_ref().map(|k| (k.x, k.y))))
            .collect()
    }
}
