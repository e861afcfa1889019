use std::path::Path;

use num_complex::Complex32;

use crate::binio::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};

pub const CSIT_MAGIC: &[u8; 4] = b"CSIT";
pub const CSIT_VERSION: u16 = 1;

/// Complex channel responses over (packet, antenna link, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiWindow {
    pub packets: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub subcarriers: usize,
    pub sample_rate: f64,
    /// Row-major over (packet, link, subcarrier); link = tx·n_rx + rx.
    pub samples: Vec<Complex32>,
    pub meta: String,
}

impl CsiWindow {
    pub fn new(
        packets: usize,
        n_tx: usize,
        n_rx: usize,
        subcarriers: usize,
        sample_rate: f64,
        samples: Vec<Complex32>,
    ) -> Result<Self> {
        if packets < 2 {
            return Err(Error::config(format!(
                "a CSI window needs at least 2 packets, got {packets}"
            )));
        }
        if n_tx == 0 || n_rx == 0 || subcarriers == 0 {
            return Err(Error::config("antenna and subcarrier counts must be positive"));
        }
        let want = packets * n_tx * n_rx * subcarriers;
        if samples.len() != want {
            return Err(Error::shape(
                "csi_window",
                &[packets, n_tx * n_rx, subcarriers],
                &[samples.len()],
            ));
        }
        if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::config("CSI window contains non-finite samples"));
        }
        Ok(CsiWindow {
            packets,
            n_tx,
            n_rx,
            subcarriers,
            sample_rate,
            samples,
            meta: String::new(),
        })
    }

    pub fn links(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn at(&self, packet: usize, link: usize, s: usize) -> Complex32 {
        self.samples[(packet * self.links() + link) * self.subcarriers + s]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34 + self.samples.len() * 8);
        out.extend_from_slice(CSIT_MAGIC);
        out.extend_from_slice(&CSIT_VERSION.to_le_bytes());
        for d in [self.packets, self.n_tx, self.n_rx, self.subcarriers] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        for z in &self.samples {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = ByteReader::new(bytes, path);
        rd.magic(CSIT_MAGIC)?;
        let version = rd.u16()?;
        if version != CSIT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version as u32,
                expected: CSIT_VERSION as u32,
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = rd.u32()? as usize;
        }
        let sample_rate = rd.f64()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| rd.error("dimension overflow"))?;
        let raw = rd.take(n.checked_mul(8).ok_or_else(|| rd.error("dimension overflow"))?)?;
        if !rd.is_empty() {
            return Err(rd.error("trailing bytes after samples"));
        }
        let samples = raw
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        CsiWindow::new(dims[0], dims[1], dims[2], dims[3], sample_rate, samples)
            .map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut w = Self::from_bytes(&read_file(path)?, path)?;
        w.meta = path.display().to_string();
        Ok(w)
    }
}

/// Real grid over (packet, link, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeGrid {
    pub packets: usize,
    pub links: usize,
    pub subcarriers: usize,
    pub values: Vec<f64>,
}

impl AmplitudeGrid {
    pub fn new(packets: usize, links: usize, subcarriers: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != packets * links * subcarriers {
            return Err(Error::shape(
                "amplitude_grid",
                &[packets, links, subcarriers],
                &[values.len()],
            ));
        }
        Ok(AmplitudeGrid {
            packets,
            links,
            subcarriers,
            values,
        })
    }

    pub fn from_fn(packets: usize, links: usize, subcarriers: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(packets * links * subcarriers);
        for i in 0..packets {
            for n in 0..links {
                for s in 0..subcarriers {
                    values.push(f(i, n, s));
                }
            }
        }
        AmplitudeGrid {
            packets,
            links,
            subcarriers,
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, n: usize, s: usize) -> f64 {
        self.values[(i * self.links + n) * self.subcarriers + s]
    }
}

/// Elementwise modulus.
pub fn amplitude(w: &CsiWindow) -> AmplitudeGrid {
    let values = w.samples.iter().map(|z| (z.re as f64).hypot(z.im as f64)).collect();
    AmplitudeGrid {
        packets: w.packets,
        links: w.links(),
        subcarriers: w.subcarriers,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> CsiWindow {
        let samples = (0..2 * 3 * 4)
            .map(|k| Complex32::new(k as f32 * 0.5, -(k as f32)))
            .collect();
        CsiWindow::new(2, 1, 3, 4, 1000.0, samples).unwrap()
    }

    #[test]
    fn modulus_examples() {
        let mut w = window();
        w.samples[0] = Complex32::new(3.0, 4.0);
        w.samples[1] = Complex32::new(-2.0, 0.0);
        let g = amplitude(&w);
        assert_eq!(g.values[0], 5.0);
        assert_eq!(g.values[1], 2.0);
        assert_eq!((g.packets, g.links, g.subcarriers), (2, 3, 4));
    }

    #[test]
    fn csit_round_trip_and_header() {
        let w = window();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"CSIT");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        let back = CsiWindow::from_bytes(&bytes, Path::new("w.csit")).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn truncated_or_bad_version_is_reported() {
        let bytes = window().to_bytes();
        let err = CsiWindow::from_bytes(&bytes[..bytes.len() - 3], Path::new("cut.csit")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("cut.csit"));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(
            CsiWindow::from_bytes(&bad, Path::new("v")),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn rejects_single_packet() {
        assert!(CsiWindow::new(1, 1, 1, 1, 1.0, vec![Complex32::new(0.0, 0.0)]).is_err());
    }
}
