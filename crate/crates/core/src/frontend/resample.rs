//! Rational polyphase resampling with a Hamming-windowed sinc.

use crate::error::{Error, Result};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resampler from `n` to `m` samples, `L/D = m/n` in lowest terms.
///
/// The zero-inserted sequence is filtered with `4·max(L,D)+1` taps centred
/// on the output instant, so output `k` sits at input position `k·n/m`.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub n_in: usize,
    pub n_out: usize,
    pub up: usize,
    pub down: usize,
    taps: Vec<f64>,
}

/// Low-pass prototype: cutoff `π/max(up, down)`, passband gain `up`.
pub fn design_lowpass(up: usize, down: usize) -> Vec<f64> {
    let r = up.max(down) as f64;
    let len = 4 * up.max(down) + 1;
    let centre = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|t| {
            let x = t as f64 - centre;
            let sinc = if x == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * x / r;
                a.sin() / a
            };
            let hamming = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * t as f64 / (len - 1) as f64).cos();
            up as f64 / r * sinc * hamming
        })
        .collect()
}

/// Reflects `j` into `0..n` with the edge sample repeated (`x[-1] = x[0]`).
fn symmetric_index(j: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = j.rem_euclid(period) as usize;
    if r < n {
        r
    } else {
        2 * n - 1 - r
    }
}

impl Resampler {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n < 2 || m == 0 {
            return Err(Error::config(format!("cannot resample {n} samples to {m}")));
        }
        let g = gcd(n, m);
        let (up, down) = (m / g, n / g);
        let mut taps = design_lowpass(up, down);
        // Each output draws on the taps of one residue class mod `up`; scaling
        // every class to unit sum makes constants pass through exactly.
        for phase in 0..up {
            let s: f64 = taps.iter().skip(phase).step_by(up).sum();
            for t in taps.iter_mut().skip(phase).step_by(up) {
                *t /= s;
            }
        }
        Ok(Resampler {
            n_in: n,
            n_out: m,
            up,
            down,
            taps,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Writes `n_out` samples into `out`; `x` must hold `n_in` samples.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        let (l, len) = (self.up as isize, self.taps.len() as isize);
        let half = (len - 1) / 2;
        for (k, y) in out.iter_mut().enumerate().take(self.n_out) {
            // taps[t] multiplies upsampled index p = k·D + half − t; only p = j·L are non-zero
            let centre = k as isize * self.down as isize + half;
            let j_lo = (centre - len + 1).div_euclid(l) + if (centre - len + 1).rem_euclid(l) == 0 { 0 } else { 1 };
            let j_hi = centre.div_euclid(l);
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                let t = (centre - j * l) as usize;
                acc += self.taps[t] * x[symmetric_index(j, self.n_in)];
            }
            *y = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out];
        self.apply_into(x, &mut out);
        out
    }
}

/// One-shot convenience wrapper around [`Resampler`].
pub fn resample(x: &[f64], m: usize) -> Result<Vec<f64>> {
    Ok(Resampler::new(x.len(), m)?.apply(x))
}
