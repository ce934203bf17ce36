//! Wavefront OBJ export of predicted meshes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Point;

/// Writes `v x y z` lines, then 1-based `f a b c` lines when `faces`
/// (0-based) is given.
pub fn export_obj(vertices: &[Point], faces: Option<&[[usize; 3]]>, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(vertices.len() * 40);
    for [x, y, z] in vertices {
        let _ = writeln!(out, "v {x} {y} {z}");
    }
    for (i, f) in faces.unwrap_or_default().iter().enumerate() {
        if let Some(bad) = f.iter().find(|&&k| k >= vertices.len()) {
            return Err(Error::Export(format!(
                "face {i} references vertex {bad} but the mesh has {} vertices",
                vertices.len()
            )));
        }
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads triangle indices from either a plain file of 0-based `a b c`
/// lines or an OBJ file's 1-based `f` lines.
pub fn load_faces(path: &Path) -> Result<Vec<[usize; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, l: &str| Error::Asset(format!("{}:{}: bad face `{l}`", path.display(), n + 1));
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        let (body, one_based) = match line.strip_prefix("f ") {
            Some(rest) => (rest, true),
            None if line.is_empty() || line.starts_with('#') || line.starts_with("v ") => continue,
            None => (line, false),
        };
        let idx: Vec<usize> = body
            .split_whitespace()
            .map(|t| t.split('/').next().unwrap_or(t).parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(n, line))?;
        if idx.len() != 3 || (one_based && idx.contains(&0)) {
            return Err(bad(n, line));
        }
        let off = usize::from(one_based);
        faces.push([idx[0] - off, idx[1] - off, idx[2] - off]);
    }
    Ok(faces)
}

/// Vertex positions of an OBJ file.
pub fn read_obj_vertices(path: &Path) -> Result<Vec<Point>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter_map(|l| l.strip_prefix("v "))
        .map(|rest| {
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            match v[..] {
                [x, y, z] => Ok([x, y, z]),
                _ => Err(Error::Input(format!("{}: vertex needs 3 coordinates", path.display()))),
            }
        })
        .collect()
}
