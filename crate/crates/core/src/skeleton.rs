//! 18-keypoint body model and its 19-limb topology.

pub const NUM_KEYPOINTS: usize = 18;
pub const NUM_LIMBS: usize = 19;
/// Keypoint channels plus their mean.
pub const PCM_CHANNELS: usize = NUM_KEYPOINTS + 1;
pub const PAF_CHANNELS: usize = 2 * NUM_LIMBS;
pub const HEATMAP_CHANNELS: usize = PCM_CHANNELS + PAF_CHANNELS;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

pub const NOSE: usize = 0;
pub const NECK: usize = 1;
pub const RIGHT_SHOULDER: usize = 2;
pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_HIP: usize = 8;
pub const LEFT_HIP: usize = 11;

/// Limb `k` joins `LIMBS[k].0 → LIMBS[k].1`; its field lives in PAF
/// channels `2k` (x) and `2k+1` (y).
pub const LIMBS: [(usize, usize); NUM_LIMBS] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
    (2, 16),
    (5, 17),
];

pub fn limb_name(k: usize) -> String {
    let (a, b) = LIMBS[k];
    format!("{}-{}", KEYPOINT_NAMES[a], KEYPOINT_NAMES[b])
}

/// Names of all 57 heatmap channels in PCM-then-PAF order.
pub fn channel_names() -> Vec<String> {
    let mut out: Vec<String> = KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect();
    out.push("keypoint_mean".into());
    for k in 0..NUM_LIMBS {
        let l = limb_name(k);
        out.push(format!("{l}.x"));
        out.push(format!("{l}.y"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_covers_every_keypoint_with_distinct_pairs() {
        let mut seen = [false; NUM_KEYPOINTS];
        for (k, &(a, b)) in LIMBS.iter().enumerate() {
            assert_ne!(a, b);
            seen[a] = true;
            seen[b] = true;
            for &(c, d) in &LIMBS[..k] {
                assert!((a, b) != (c, d) && (a, b) != (d, c));
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(channel_names().len(), HEATMAP_CHANNELS);
    }
}
