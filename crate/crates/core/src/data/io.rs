//! ASCII XYZ and PLY point cloud files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("invalid number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

fn into_cloud(points: Vec<[f64; 3]>) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(parse_err(1, "no points"));
    }
    PointCloud::new(points)
}

/// One `x y z` line per point. Blank lines are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 values, found {}", toks.len())));
        }
        pts.push([
            parse_coord(toks[0], i + 1)?,
            parse_coord(toks[1], i + 1)?,
            parse_coord(toks[2], i + 1)?,
        ]);
    }
    into_cloud(pts)
}

/// Coordinates use the shortest decimal form that reads back exactly.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

/// Parses an ascii PLY vertex element, ignoring properties other than
/// `x`, `y`, `z` and any elements after the vertices.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(n, "missing ply magic")),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut skip_before = 0usize;
    loop {
        let (n, line) = lines.next().ok_or_else(|| parse_err(0, "unterminated header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => {
                return Err(parse_err(n, format!("unsupported format {fmt}")))
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| parse_err(n, format!("invalid element count {count:?}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertices = Some(count);
                } else if vertices.is_none() {
                    skip_before += count;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(n, "list properties on vertices are not supported"))
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = vertices.ok_or_else(|| parse_err(0, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(0, format!("vertex element lacks property {name}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    for _ in 0..skip_before {
        lines.next();
    }
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("expected {count} vertices, found {}", pts.len())))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(parse_err(n, format!("expected {} values, found {}", props.len(), toks.len())));
        }
        pts.push([parse_coord(toks[cx], n)?, parse_coord(toks[cy], n)?, parse_coord(toks[cz], n)?]);
    }
    into_cloud(pts)
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    s.push_str(&format_xyz(cloud));
    s
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_xyz(&read(path.as_ref())?)
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write(path.as_ref(), &format_xyz(cloud))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_ply(&read(path.as_ref())?)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write(path.as_ref(), &format_ply(cloud))
}

/// Dispatches on the extension: `.ply` or anything else as XYZ.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let p = path.as_ref();
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        read_ply(p)
    } else {
        read_xyz(p)
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let p = path.as_ref();
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        write_ply(p, cloud)
    } else {
        write_xyz(p, cloud)
    }
}
