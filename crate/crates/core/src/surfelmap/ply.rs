//! ASCII PLY export of surfel maps (`x y z nx ny nz red green blue`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{Surfel, SurfelMap};
use crate::error::{Error, Result};

pub fn to_string(map: &SurfelMap) -> String {
    let mut out = String::with_capacity(64 + map.len() * 64);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", map.len());
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        let _ = writeln!(out, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {p}");
    }
    out.push_str("end_header\n");
    for s in &map.surfels {
        let (p, n, c) = (&s.position, &s.normal, &s.color);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            p.x, p.y, p.z, n.x, n.y, n.z, c[0], c[1], c[2]
        );
    }
    out
}

pub fn save(path: &Path, map: &SurfelMap) -> Result<()> {
    std::fs::write(path, to_string(map)).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`save`]. Weight, radius and timestamps are not
/// stored in PLY and come back as `1`, `0.001` and `0`.
pub fn parse(text: &str, source: &str) -> Result<SurfelMap> {
    let mut lines = text.lines().enumerate();
    let mut count = None;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let line = line.trim();
        if i == 0 && line != "ply" {
            return Err(Error::parse(source, 1, "missing 'ply' magic"));
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse::<usize>().map_err(|e| Error::parse(source, i + 1, e.to_string()))?);
        }
        if line == "end_header" {
            header_done = true;
            break;
        }
    }
    let count = match (header_done, count) {
        (true, Some(c)) => c,
        _ => return Err(Error::parse(source, 0, "incomplete PLY header")),
    };
    let mut surfels = Vec::with_capacity(count);
    for (i, line) in lines.take(count) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(Error::parse(source, i + 1, format!("expected 9 fields, got {}", f.len())));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|e| Error::parse(source, i + 1, format!("field {}: {e}", k + 1)))
        };
        let byte = |k: usize| {
            f[k].parse::<u8>()
                .map_err(|e| Error::parse(source, i + 1, format!("field {}: {e}", k + 1)))
        };
        surfels.push(Surfel {
            position: Vector3::new(num(0)?, num(1)?, num(2)?),
            normal: Vector3::new(num(3)?, num(4)?, num(5)?),
            color: [byte(6)?, byte(7)?, byte(8)?],
            weight: 1.0,
            radius: 0.001,
            t0: 0,
            t: 0,
        });
    }
    if surfels.len() != count {
        return Err(Error::parse(source, 0, format!("expected {count} vertices, found {}", surfels.len())));
    }
    Ok(SurfelMap { surfels })
}

pub fn load(path: &Path) -> Result<SurfelMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}
