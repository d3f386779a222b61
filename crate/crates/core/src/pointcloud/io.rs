//! ASCII PLY (vertex positions only) and plain `x y z` readers and writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{fit_to_count, PointCloud};
use crate::error::{GeoLinkError, Result};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GeoLinkError {
    GeoLinkError::ParseError {
        file: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn scene_id_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Read an ASCII PLY file. Only the `x`, `y`, `z` vertex properties are
/// kept; colors and any other elements are ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    if !path.exists() {
        return Err(GeoLinkError::MissingView(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_ply(&text, path)
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(path, n, "expected `ply` magic line")),
        None => return Err(parse_err(path, 1, "empty file")),
    }

    // (element name, count, property names) in header order
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(path, n, "only `format ascii 1.0` is supported"));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(path, n, "element line without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, n, "element line without a valid count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let Some(last) = elements.last_mut() else {
                    return Err(parse_err(path, n, "property before any element: missing `element vertex N` line"));
                };
                let name = tok
                    .last()
                    .ok_or_else(|| parse_err(path, n, "property line without a name"))?;
                last.2.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(parse_err(path, n, format!("unknown header keyword `{other}`"))),
        }
    }
    if !header_done {
        let what = if elements.iter().any(|e| e.0 == "vertex") {
            "header ends without `end_header`"
        } else {
            "header truncated: missing `element vertex N` line"
        };
        return Err(parse_err(path, last_line, what));
    }
    let Some(vertex_pos) = elements.iter().position(|e| e.0 == "vertex") else {
        return Err(parse_err(path, last_line, "missing `element vertex N` line"));
    };
    let props = &elements[vertex_pos].2;
    let col = |axis: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| parse_err(path, last_line, format!("vertex element lacks property `{axis}`")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);

    // Skip the bodies of elements declared before `vertex`.
    let skip: usize = elements[..vertex_pos].iter().map(|e| e.1).sum();
    for _ in 0..skip {
        if lines.next().is_none() {
            return Err(parse_err(path, last_line, "file ends inside an element body"));
        }
    }
    let count = elements[vertex_pos].1;
    let mut flat = Vec::with_capacity(count * 3);
    for i in 0..count {
        let Some((n, line)) = lines.next() else {
            return Err(parse_err(
                path,
                last_line + i + 1,
                format!("expected {count} vertices, found {i}"),
            ));
        };
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() < props.len() {
            return Err(parse_err(path, n, format!("expected {} values", props.len())));
        }
        for c in [cx, cy, cz] {
            let v: f64 = values[c]
                .parse()
                .map_err(|_| parse_err(path, n, format!("invalid number `{}`", values[c])))?;
            flat.push(v);
        }
    }
    let points = Array2::from_shape_vec((count, 3), flat).expect("3 values per vertex");
    PointCloud::new(points, scene_id_for(path))
}

/// Read a whitespace-separated `x y z` file, one point per line. Blank
/// lines and `#` comments are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    if !path.exists() {
        return Err(GeoLinkError::MissingView(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut flat = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < 3 {
            return Err(parse_err(path, i + 1, "expected `x y z`"));
        }
        for v in &vals[..3] {
            flat.push(
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("invalid number `{v}`")))?,
            );
        }
    }
    if flat.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    let n = flat.len() / 3;
    PointCloud::new(Array2::from_shape_vec((n, 3), flat).expect("3 per row"), scene_id_for(path))
}

/// Dispatch on extension (`.ply` or `.xyz`).
pub fn read_pointcloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        Some("xyz") | Some("txt") => read_xyz(path),
        _ => Err(parse_err(path, 0, "unsupported point-cloud extension")),
    }
}

/// Read a cloud and bring it to `num_points` (FPS subsampling or centroid
/// padding). Padding is logged as a warning.
pub fn load_pointcloud(path: &Path, num_points: usize) -> Result<PointCloud> {
    let pc = read_pointcloud(path)?;
    let (fitted, padded) = fit_to_count(&pc, num_points)?;
    if padded {
        log::warn!(
            "{}: {} points padded to {num_points} with the centroid",
            path.display(),
            pc.len()
        );
    }
    Ok(fitted)
}

pub fn write_xyz(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in pc.points.rows() {
        writeln!(out, "{} {} {}", r[0], r[1], r[2])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", pc.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for r in pc.points.rows() {
        writeln!(out, "{} {} {}", r[0], r[1], r[2])?;
    }
    out.flush()?;
    Ok(())
}
