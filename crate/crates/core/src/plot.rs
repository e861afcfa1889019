//! File-only plotting: binary PGM images and SVG skeleton overlays.

use std::path::Path;

use std::fmt::Write as _;

use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::pose::SkeletonSet;
use crate::skeleton::LIMBS;

/// Encodes `values` (row-major `height × width`) as 8-bit P5, mapping
/// `[min, max]` affinely onto `[0, 255]`. Returns `(min, max)`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> (Vec<u8>, f64, f64) {
    assert_eq!(values.len(), width * height);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    (out, min, max)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(f64, f64)> {
    let (bytes, min, max) = encode_pgm(width, height, values);
    write_file(path, &bytes)?;
    Ok((min, max))
}

/// Minimal P5 reader: returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |m: &str| Error::parse(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(err("not a P5 image"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(err("only 8-bit PGM is supported"));
    }
    if pos >= bytes.len() {
        return Err(err("missing pixel data"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(err("pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Pixels per grid cell in the SVG overlay.
const SVG_CELL: f64 = 16.0;

/// Draws skeletons over an optional grey-scale `side × side` backdrop.
/// Each person gets its own hue, rotated by the golden angle.
pub fn skeleton_svg(set: &SkeletonSet, backdrop: Option<&[f64]>) -> String {
    let side = set.side;
    let size = side as f64 * SVG_CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="black"/>"#);
    if let Some(values) = backdrop {
        assert_eq!(values.len(), side * side);
        let max = values.iter().copied().fold(0.0, f64::max);
        for (i, &v) in values.iter().enumerate() {
            let level = if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            };
            if level == 0 {
                continue;
            }
            let (x, y) = ((i % side) as f64 * SVG_CELL, (i / side) as f64 * SVG_CELL);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{SVG_CELL}" height="{SVG_CELL}" fill="rgb({level},{level},{level})"/>"#
            );
        }
    }
    // grid coordinates address cell centres
    let at = |v: f64| (v + 0.5) * SVG_CELL;
    for (p, person) in set.persons.iter().enumerate() {
        let hue = (p as f64 * 137.508) % 360.0;
        let colour = format!("hsl({hue:.1},90%,55%)");
        for &(a, b) in LIMBS.iter() {
            if let (Some(ka), Some(kb)) = (person.keypoints[a], person.keypoints[b]) {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="3"/>"#,
                    at(ka.x),
                    at(ka.y),
                    at(kb.x),
                    at(kb.y)
                );
            }
        }
        for k in person.keypoints.iter().flatten() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{colour}"/>"#,
                at(k.x),
                at(k.y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_skeleton_svg(path: &Path, set: &SkeletonSet, backdrop: Option<&[f64]>) -> Result<()> {
    write_file(path, skeleton_svg(set, backdrop).as_bytes())
}
