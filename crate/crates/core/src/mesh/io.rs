//! ASCII OFF and OBJ readers and writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point3, RawMesh, TriMesh};
use crate::error::{Result, SemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("off") => Ok(MeshFormat::Off),
            Some("obj") => Ok(MeshFormat::Obj),
            _ => Err(SemError::Config(format!(
                "cannot infer mesh format of {} (expected .off or .obj)",
                path.display()
            ))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| SemError::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| SemError::parse(0, "file is not ASCII text (binary meshes are not supported)"))
}

/// Loads and validates a mesh, inferring the format from the extension.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    load_mesh_as(path, MeshFormat::from_path(path)?)
}

pub fn load_mesh_as(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriMesh> {
    let text = read_text(path.as_ref())?;
    let raw = match format {
        MeshFormat::Off => read_off(&text)?,
        MeshFormat::Obj => read_obj(&text)?,
    };
    TriMesh::new(raw)
}

pub fn save_mesh(path: impl AsRef<Path>, mesh: &RawMesh) -> Result<()> {
    let path = path.as_ref();
    save_mesh_as(path, mesh, MeshFormat::from_path(path)?)
}

pub fn save_mesh_as(path: impl AsRef<Path>, mesh: &RawMesh, format: MeshFormat) -> Result<()> {
    let text = match format {
        MeshFormat::Off => write_off(mesh),
        MeshFormat::Obj => write_obj(mesh),
    };
    fs::write(path.as_ref(), text).map_err(|e| SemError::io(path.as_ref(), e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| SemError::parse(line, format!("invalid coordinate '{tok}'")))
}

fn parse_point<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<Point3> {
    let mut xyz = [0.0; 3];
    for c in &mut xyz {
        let tok = toks.next().ok_or_else(|| SemError::parse(line, "expected three coordinates"))?;
        *c = parse_f64(tok, line)?;
    }
    Ok(Point3::new(xyz[0], xyz[1], xyz[2]))
}

pub fn read_off(text: &str) -> Result<RawMesh> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| SemError::parse(1, "empty file"))?;
    let mut htoks = header.split_whitespace();
    match htoks.next() {
        Some("OFF") => {}
        Some(other) => {
            return Err(SemError::parse(hline, format!("expected 'OFF' header, found '{other}'")));
        }
        None => unreachable!(),
    }
    let rest: Vec<&str> = htoks.collect();
    if rest.first().is_some_and(|t| t.eq_ignore_ascii_case("BINARY")) {
        return Err(SemError::parse(hline, "binary OFF is not supported"));
    }
    let (cline, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (l, s) = lines.next().ok_or_else(|| SemError::parse(hline, "missing counts line"))?;
        (l, s.split_whitespace().collect())
    } else {
        (hline, rest)
    };
    if counts.len() < 2 {
        return Err(SemError::parse(cline, "counts line needs 'V F [E]'"));
    }
    let parse_count = |t: &str| t.parse::<usize>().map_err(|_| SemError::parse(cline, format!("invalid count '{t}'")));
    let nv = parse_count(counts[0])?;
    let nf = parse_count(counts[1])?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| SemError::parse(0, "unexpected end of file in vertex list"))?;
        vertices.push(parse_point(s.split_whitespace(), l)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| SemError::parse(0, "unexpected end of file in face list"))?;
        let mut toks = s.split_whitespace();
        let k: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SemError::parse(l, "invalid face vertex count"))?;
        if k != 3 {
            return Err(SemError::parse(l, format!("only triangular faces are supported (found {k} vertices)")));
        }
        let mut idx = [0usize; 3];
        for v in &mut idx {
            let tok = toks.next().ok_or_else(|| SemError::parse(l, "face line too short"))?;
            *v = tok.parse().map_err(|_| SemError::parse(l, format!("invalid vertex index '{tok}'")))?;
            if *v >= nv {
                return Err(SemError::parse(l, format!("vertex index {v} out of range")));
            }
        }
        faces.push(idx);
    }
    Ok(RawMesh::new(vertices, faces))
}

fn parse_obj_index(tok: &str, nv: usize, line: usize) -> Result<usize> {
    let first = tok.split('/').next().unwrap_or("");
    let raw: i64 = first
        .parse()
        .map_err(|_| SemError::parse(line, format!("invalid face index '{tok}'")))?;
    let idx = match raw {
        r if r > 0 => (r - 1) as usize,
        r if r < 0 && (-r) as usize <= nv => nv - (-r) as usize,
        _ => return Err(SemError::parse(line, format!("face index '{tok}' out of range"))),
    };
    if idx >= nv {
        return Err(SemError::parse(line, format!("face index '{tok}' out of range")));
    }
    Ok(idx)
}

pub fn read_obj(text: &str) -> Result<RawMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (l, line) in content_lines(text) {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => vertices.push(parse_point(toks, l)?),
            Some("f") => {
                let idx: Vec<&str> = toks.collect();
                if idx.len() != 3 {
                    return Err(SemError::parse(
                        l,
                        format!("only triangular faces are supported (found {} vertices)", idx.len()),
                    ));
                }
                let mut face = [0usize; 3];
                for (slot, tok) in face.iter_mut().zip(idx) {
                    *slot = parse_obj_index(tok, vertices.len(), l)?;
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(SemError::parse(0, "no vertices found"));
    }
    Ok(RawMesh::new(vertices, faces))
}

pub fn write_off(mesh: &RawMesh) -> String {
    let mut out = String::with_capacity(64 * (mesh.vertices.len() + mesh.faces.len()));
    let _ = writeln!(out, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for p in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in &mesh.faces {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    out
}

pub fn write_obj(mesh: &RawMesh) -> String {
    let mut out = String::with_capacity(64 * (mesh.vertices.len() + mesh.faces.len()));
    for p in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
    }
    out
}
