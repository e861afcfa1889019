use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, Person, Point};
use crate::error::{Error, Result};
use crate::frontend::CsiWindow;
use crate::skeleton::NUM_KEYPOINTS;

const LIGHT_SPEED: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub persons: usize,
    /// Standard deviation of the complex noise, `E|n|² = σ²`.
    pub noise_sigma: f64,
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    /// Reflection gain of each keypoint scatterer.
    pub scatterer_gain: Vec<f64>,
    pub packets: usize,
    pub n_rx: usize,
    pub subcarriers: usize,
    pub sample_rate: f64,
    /// Poses interpolated across one window.
    pub keyframes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            persons: 1,
            noise_sigma: 0.05,
            carrier_hz: 5.32e9,
            subcarrier_spacing_hz: 625e3,
            scatterer_gain: vec![1.0; NUM_KEYPOINTS],
            packets: 10,
            n_rx: 3,
            subcarriers: 30,
            sample_rate: 1000.0,
            keyframes: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.persons == 0 {
            return Err(Error::config("scene needs at least one person"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "noise sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        if self.scatterer_gain.len() != NUM_KEYPOINTS {
            return Err(Error::config(format!(
                "scatterer_gain needs {NUM_KEYPOINTS} entries, got {}",
                self.scatterer_gain.len()
            )));
        }
        if self.packets < 2 || self.n_rx == 0 || self.subcarriers == 0 || self.keyframes == 0 {
            return Err(Error::config(
                "scene needs ≥ 2 packets, ≥ 1 antenna, ≥ 1 subcarrier, ≥ 1 keyframe",
            ));
        }
        if !(self.carrier_hz > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::config("carrier and sample rate must be positive"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        LIGHT_SPEED / self.carrier_hz
    }

    /// Centre frequency of subcarrier `s`, symmetric about the carrier.
    pub fn subcarrier_hz(&self, s: usize) -> f64 {
        self.carrier_hz + (s as f64 - (self.subcarriers - 1) as f64 / 2.0) * self.subcarrier_spacing_hz
    }
}

/// Top-view room: transmitter and receive array on opposite walls, people
/// in a square activity region between them. Metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomLayout {
    pub tx: (f64, f64),
    pub rx_centre: (f64, f64),
    /// Lower corner and edge length of the region image coordinates map onto.
    pub region: (f64, f64, f64),
}

impl Default for RoomLayout {
    fn default() -> Self {
        // 9 m × 6 m room
        RoomLayout {
            tx: (1.0, 3.0),
            rx_centre: (8.0, 3.0),
            region: (3.0, 1.5, 3.0),
        }
    }
}

impl RoomLayout {
    pub fn to_room(&self, p: Point) -> (f64, f64) {
        let (x0, y0, size) = self.region;
        (x0 + p.x * size, y0 + p.y * size)
    }

    /// Antenna `n` of `count`, spaced half a wavelength along the wall.
    pub fn rx(&self, n: usize, count: usize, wavelength: f64) -> (f64, f64) {
        let off = (n as f64 - (count - 1) as f64 / 2.0) * wavelength / 2.0;
        (self.rx_centre.0, self.rx_centre.1 + off)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Toy multipath capture: every present keypoint is a point scatterer on a
/// transmitter → keypoint → antenna path, with no line-of-sight term.
/// `frames[i]` is the scene during packet `i`.
pub fn synth_csi<R: Rng>(
    frames: &[Annotation],
    cfg: &SceneConfig,
    room: &RoomLayout,
    rng: &mut R,
) -> Result<CsiWindow> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::config(format!(
            "synth_csi needs ≥ 2 packets, got {}",
            frames.len()
        )));
    }
    let lambda = cfg.wavelength();
    let noise = Normal::new(0.0, cfg.noise_sigma / 2f64.sqrt()).expect("sigma validated");
    let rx: Vec<(f64, f64)> = (0..cfg.n_rx).map(|n| room.rx(n, cfg.n_rx, lambda)).collect();
    let freqs: Vec<f64> = (0..cfg.subcarriers).map(|s| cfg.subcarrier_hz(s)).collect();
    let mut samples = Vec::with_capacity(frames.len() * cfg.n_rx * cfg.subcarriers);
    for frame in frames {
        // (gain, first leg) per scatterer
        let scatterers: Vec<(f64, (f64, f64))> = frame
            .persons
            .iter()
            .flat_map(|p| p.kp.iter().enumerate())
            .filter_map(|(j, k)| k.map(|k| (cfg.scatterer_gain[j], room.to_room(k))))
            .collect();
        for &antenna in &rx {
            let delays: Vec<(f64, f64)> = scatterers
                .iter()
                .map(|&(g, p)| (g, (dist(room.tx, p) + dist(p, antenna)) / LIGHT_SPEED))
                .collect();
            for &f in &freqs {
                let mut h = Complex64::new(0.0, 0.0);
                for &(g, tau) in &delays {
                    h += Complex64::from_polar(g, -2.0 * PI * f * tau);
                }
                let n = Complex64::new(noise.sample(rng), noise.sample(rng));
                let z = h + n;
                samples.push(Complex32::new(z.re as f32, z.im as f32));
            }
        }
    }
    CsiWindow::new(frames.len(), 1, cfg.n_rx, cfg.subcarriers, cfg.sample_rate, samples)
}

/// One standing person with random limb angles, scaled into the box
/// `(x0, y0, x1, y1)` of normalised image space.
pub fn random_person<R: Rng>(rng: &mut R, bbox: (f64, f64, f64, f64)) -> Person {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mut kp = [(0.0, 0.0); NUM_KEYPOINTS];
    let at = |o: (f64, f64), len: f64, angle: f64, side: f64| (o.0 + side * len * angle.sin(), o.1 + len * angle.cos());
    let neck = (0.0, 0.0);
    let nose = (u(-0.03, 0.03), -0.11);
    kp[0] = nose;
    kp[1] = neck;
    for (side, sh, el, wr, hip, knee, ankle, eye, ear) in
        [(-1.0, 2, 3, 4, 8, 9, 10, 14, 16), (1.0, 5, 6, 7, 11, 12, 13, 15, 17)]
    {
        kp[sh] = (side * 0.13, 0.01);
        let upper = u(0.1, 1.4);
        kp[el] = at(kp[sh], 0.17, upper, side);
        kp[wr] = at(kp[el], 0.15, upper + u(-0.5, 0.9), side);
        kp[hip] = (side * 0.08, 0.31);
        let thigh = u(-0.05, 0.3);
        kp[knee] = at(kp[hip], 0.22, thigh, side);
        kp[ankle] = at(kp[knee], 0.21, thigh + u(-0.15, 0.1), side);
        kp[eye] = (nose.0 + side * 0.04, nose.1 - 0.035);
        kp[ear] = (nose.0 + side * 0.08, nose.1 - 0.005);
    }
    let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
    for &(x, y) in &kp {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let (bw, bh) = (bbox.2 - bbox.0, bbox.3 - bbox.1);
    let scale = (bw / (hi.0 - lo.0)).min(bh / (hi.1 - lo.1)) * u(0.8, 1.0);
    let ox = bbox.0 + u(0.0, 1.0) * (bw - scale * (hi.0 - lo.0));
    let oy = bbox.1 + u(0.0, 1.0) * (bh - scale * (hi.1 - lo.1));
    Person {
        kp: kp.map(|(x, y)| {
            Some(Point {
                x: (ox + scale * (x - lo.0)).clamp(0.0, 1.0),
                y: (oy + scale * (y - lo.1)).clamp(0.0, 1.0),
            })
        }),
    }
}

/// Keyframed poses, evenly spaced over a window and linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    /// `keyframes[f][p]` is person `p` at keyframe `f`.
    pub keyframes: Vec<Vec<Person>>,
}

impl MotionScript {
    /// Persons occupy disjoint vertical strips of the `[0.08, 0.92]` frame.
    pub fn random<R: Rng>(rng: &mut R, persons: usize, keyframes: usize) -> Self {
        let (lo, hi, gap) = (0.08, 0.92, 0.08);
        let width = (hi - lo - gap * (persons - 1) as f64) / persons as f64;
        let keyframes = (0..keyframes)
            .map(|_| {
                (0..persons)
                    .map(|p| {
                        let x0 = lo + p as f64 * (width + gap);
                        random_person(rng, (x0, lo, x0 + width, hi))
                    })
                    .collect()
            })
            .collect();
        MotionScript { keyframes }
    }

    pub fn at(&self, t: f64) -> Vec<Person> {
        let last = self.keyframes.len() - 1;
        let pos = t.clamp(0.0, 1.0) * last as f64;
        let f = (pos.floor() as usize).min(last.saturating_sub(1));
        let frac = if last == 0 { 0.0 } else { pos - f as f64 };
        let (a, b) = (&self.keyframes[f], &self.keyframes[(f + 1).min(last)]);
        a.iter()
            .zip(b)
            .map(|(pa, pb)| Person {
                kp: std::array::from_fn(|j| match (pa.kp[j], pb.kp[j]) {
                    (Some(x), Some(y)) => Some(x.lerp(y, frac)),
                    (x, _) => x,
                }),
            })
            .collect()
    }

    /// One annotation per packet; the last equals the final keyframe.
    pub fn frames(&self, packets: usize, scene: u64) -> Vec<Annotation> {
        (0..packets)
            .map(|i| Annotation {
                frame: i as u64,
                scene,
                persons: self.at(i as f64 / (packets - 1).max(1) as f64),
            })
            .collect()
    }
}
