use super::resample::Resampler;
use super::window::{amplitude, AmplitudeGrid, CsiWindow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// One token per subcarrier.
    Frequency,
    /// One token per packet instant.
    Temporal,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Frequency, Branch::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Frequency => "freq",
            Branch::Temporal => "time",
        }
    }

    pub fn token_count(self, g: &AmplitudeGrid) -> usize {
        match self {
            Branch::Frequency => g.subcarriers,
            Branch::Temporal => g.packets,
        }
    }

    pub fn token_width(self, g: &AmplitudeGrid) -> usize {
        match self {
            Branch::Frequency => g.packets * g.links,
            Branch::Temporal => g.subcarriers * g.links,
        }
    }
}

/// Row-major token matrix before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTokens {
    pub branch: Branch,
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RawTokens {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

/// Frequency row `s` lists `g[0..M][n][s]` for each link `n` in turn;
/// temporal row `i` lists `g[i][0..links][s]` for each subcarrier `s` in turn.
pub fn make_tokens(g: &AmplitudeGrid, branch: Branch) -> RawTokens {
    let (rows, width) = (branch.token_count(g), branch.token_width(g));
    let mut data = Vec::with_capacity(rows * width);
    match branch {
        Branch::Frequency => {
            for s in 0..g.subcarriers {
                for n in 0..g.links {
                    for i in 0..g.packets {
                        data.push(g.at(i, n, s));
                    }
                }
            }
        }
        Branch::Temporal => {
            for i in 0..g.packets {
                for s in 0..g.subcarriers {
                    for n in 0..g.links {
                        data.push(g.at(i, n, s));
                    }
                }
            }
        }
    }
    RawTokens {
        branch,
        rows,
        width,
        data,
    }
}

/// Amplitude extraction followed by separable resampling along time and
/// frequency.
#[derive(Debug, Clone)]
pub struct Tfddt {
    time: Resampler,
    freq: Resampler,
    links: usize,
}

impl Tfddt {
    pub fn new(packets: usize, links: usize, raw_subcarriers: usize, m: usize, n_s: usize) -> Result<Self> {
        Ok(Tfddt {
            time: Resampler::new(packets, m)?,
            freq: Resampler::new(raw_subcarriers, n_s)?,
            links,
        })
    }

    pub fn grid(&self, w: &CsiWindow) -> Result<AmplitudeGrid> {
        if w.packets != self.time.n_in || w.subcarriers != self.freq.n_in || w.links() != self.links {
            return Err(Error::shape(
                "tfddt",
                &[self.time.n_in, self.links, self.freq.n_in],
                &[w.packets, w.links(), w.subcarriers],
            ));
        }
        Ok(self.upsample(&amplitude(w)))
    }

    pub fn upsample(&self, a: &AmplitudeGrid) -> AmplitudeGrid {
        let (m, n_s, links) = (self.time.n_out, self.freq.n_out, a.links);
        let mut col = vec![0.0; a.packets];
        let mut col_out = vec![0.0; m];
        let mut timed = vec![0.0; m * links * a.subcarriers];
        for n in 0..links {
            for s in 0..a.subcarriers {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = a.at(i, n, s);
                }
                self.time.apply_into(&col, &mut col_out);
                for (i, &v) in col_out.iter().enumerate() {
                    timed[(i * links + n) * a.subcarriers + s] = v;
                }
            }
        }
        let mut values = vec![0.0; m * links * n_s];
        for (row_in, row_out) in timed.chunks_exact(a.subcarriers).zip(values.chunks_exact_mut(n_s)) {
            self.freq.apply_into(row_in, row_out);
        }
        AmplitudeGrid {
            packets: m,
            links,
            subcarriers: n_s,
            values,
        }
    }

    pub fn tokens(&self, w: &CsiWindow) -> Result<[RawTokens; 2]> {
        let g = self.grid(w)?;
        Ok([make_tokens(&g, Branch::Frequency), make_tokens(&g, Branch::Temporal)])
    }
}
