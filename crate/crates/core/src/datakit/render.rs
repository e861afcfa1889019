use serde::{Deserialize, Serialize};

use super::Annotation;
use crate::numerics::Tensor;
use crate::skeleton::{LIMBS, NUM_KEYPOINTS, NUM_LIMBS, PAF_CHANNELS, PCM_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Gaussian width of each keypoint peak, in grid cells.
    pub sigma: f64,
    /// Half-width of each limb band, in grid cells.
    pub limb_width: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            sigma: 1.5,
            limb_width: 1.0,
        }
    }
}

/// Part confidence maps `[19, side, side]`: per keypoint the max over
/// persons of a unit-height Gaussian, and channel 19 the mean of the rest.
pub fn render_pcm(ann: &Annotation, side: usize, sigma: f64) -> Tensor<f64> {
    assert!(sigma > 0.0 && side >= 2);
    let plane = side * side;
    let scale = (side - 1) as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; PCM_CHANNELS * plane];
    for person in &ann.persons {
        for (j, k) in person.kp.iter().enumerate() {
            let Some(k) = k else { continue };
            let (gx, gy) = (k.x * scale, k.y * scale);
            let ch = &mut out[j * plane..(j + 1) * plane];
            for r in 0..side {
                for c in 0..side {
                    let d2 = (c as f64 - gx).powi(2) + (r as f64 - gy).powi(2);
                    let v = (-d2 * inv).exp();
                    let cell = &mut ch[r * side + c];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    let (keys, mean) = out.split_at_mut(NUM_KEYPOINTS * plane);
    for (i, m) in mean.iter_mut().enumerate() {
        let s: f64 = (0..NUM_KEYPOINTS).map(|j| keys[j * plane + i]).sum();
        *m = s / NUM_KEYPOINTS as f64;
    }
    Tensor::new(&[PCM_CHANNELS, side, side], out).expect("shape matches")
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (px - a.0 - t * dx).hypot(py - a.1 - t * dy)
}

/// Part affinity fields `[38, side, side]`: unit limb directions inside a
/// band around each limb, averaged where persons overlap.
pub fn render_paf(ann: &Annotation, side: usize, limb_width: f64) -> Tensor<f64> {
    assert!(limb_width > 0.0 && side >= 2);
    let plane = side * side;
    let scale = (side - 1) as f64;
    let mut out = vec![0.0; PAF_CHANNELS * plane];
    let mut count = vec![0u32; plane];
    for (k, &(ja, jb)) in LIMBS.iter().enumerate() {
        count.iter_mut().for_each(|c| *c = 0);
        let (xs, ys) = out[2 * k * plane..(2 * k + 2) * plane].split_at_mut(plane);
        for person in &ann.persons {
            let (Some(a), Some(b)) = (person.kp[ja], person.kp[jb]) else {
                continue;
            };
            let (a, b) = ((a.x * scale, a.y * scale), (b.x * scale, b.y * scale));
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if !(len > 0.0) {
                continue;
            }
            let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
            // only cells inside the limb's padded bounding box can be in the band
            let lo = |v: f64| ((v - limb_width).floor().max(0.0)) as usize;
            let hi = |v: f64| ((v + limb_width).ceil().min(scale)) as usize;
            for r in lo(a.1.min(b.1))..=hi(a.1.max(b.1)) {
                for c in lo(a.0.min(b.0))..=hi(a.0.max(b.0)) {
                    if segment_distance(c as f64, r as f64, a, b) <= limb_width {
                        xs[r * side + c] += ux;
                        ys[r * side + c] += uy;
                        count[r * side + c] += 1;
                    }
                }
            }
        }
        for (i, &n) in count.iter().enumerate() {
            if n > 1 {
                xs[i] /= n as f64;
                ys[i] /= n as f64;
            }
        }
    }
    debug_assert_eq!(out.len(), 2 * NUM_LIMBS * plane);
    Tensor::new(&[PAF_CHANNELS, side, side], out).expect("shape matches")
}

/// Both label tensors for one annotation.
pub fn render_labels(ann: &Annotation, side: usize, params: &RenderParams) -> (Tensor<f64>, Tensor<f64>) {
    (
        render_pcm(ann, side, params.sigma),
        render_paf(ann, side, params.limb_width),
    )
}
