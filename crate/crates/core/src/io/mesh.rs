//! OBJ and ascii PLY mesh files.
//!
//! Coordinates are written with 9 significant digits, which round-trips well
//! below a micrometer at face scale.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3xX;

use crate::error::{Error, Result};
use crate::shape::Shape3D;

/// A mesh as loaded from disk: vertices plus triangulated faces (possibly
/// empty for point-only files).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshData {
    pub shape: Shape3D,
    pub faces: Vec<[usize; 3]>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a mesh; the format is chosen by file extension (`.obj` or `.ply`).
pub fn read_mesh(path: impl AsRef<Path>) -> Result<MeshData> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply(path),
        other => Err(Error::Corrupt {
            path: path.display().to_string(),
            msg: format!("unsupported mesh extension {other:?} (want obj or ply)"),
        }),
    }
}

/// Writes a mesh; the format is chosen by file extension.
pub fn write_mesh(shape: &Shape3D, faces: &[[usize; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(shape, faces, path),
        Some("ply") => write_ply(shape, faces, path),
        other => Err(Error::Corrupt {
            path: path.display().to_string(),
            msg: format!("unsupported mesh extension {other:?} (want obj or ply)"),
        }),
    }
}

fn read_obj(path: &Path) -> Result<MeshData> {
    let text = fs::read_to_string(path)?;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(path, lineno + 1, "vertex needs 3 coordinates"))?;
                    *c = tok.parse().map_err(|_| {
                        parse_err(path, lineno + 1, format!("bad vertex coordinate {tok:?}"))
                    })?;
                }
                vertices.push(coords);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or(tok);
                    let v: i64 = first.parse().map_err(|_| {
                        parse_err(path, lineno + 1, format!("bad face index {tok:?}"))
                    })?;
                    if v < 1 {
                        return Err(parse_err(
                            path,
                            lineno + 1,
                            format!("face index {v} must be positive"),
                        ));
                    }
                    idx.push((v - 1) as usize);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, lineno + 1, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            // Normals, texture coordinates, groups and materials are ignored.
            _ => {}
        }
    }
    finish_mesh(path, vertices, faces)
}

fn finish_mesh(path: &Path, vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<MeshData> {
    if vertices.is_empty() {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            msg: "mesh has no vertices".into(),
        });
    }
    let n = vertices.len();
    for f in &faces {
        if f.iter().any(|&v| v >= n) {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                msg: format!("face {f:?} references a vertex out of range (n = {n})"),
            });
        }
    }
    let m = Matrix3xX::from_fn(n, |r, c| vertices[c][r]);
    Ok(MeshData {
        shape: Shape3D::new(m)?,
        faces,
    })
}

fn write_obj(shape: &Shape3D, faces: &[[usize; 3]], path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..shape.n() {
        let v = shape.vertex(i);
        out.push_str(&format!("v {:.8e} {:.8e} {:.8e}\n", v[0], v[1], v[2]));
    }
    for f in faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_ply(path: &Path) -> Result<MeshData> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if first.trim() != "ply" {
        return Err(parse_err(path, 1, "missing ply magic"));
    }

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut header_end = 0usize;
    for (lineno, raw) in &mut lines {
        let line = raw.trim();
        if line.starts_with("comment") {
            continue;
        }
        if line == "end_header" {
            header_end = lineno + 1;
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_err(path, lineno + 1, format!("unsupported format {other}")))
            }
            ["element", "vertex", count] => {
                vertex_count = count
                    .parse()
                    .map_err(|_| parse_err(path, lineno + 1, "bad vertex count"))?;
                in_vertex_element = true;
            }
            ["element", "face", count] => {
                face_count = count
                    .parse()
                    .map_err(|_| parse_err(path, lineno + 1, "bad face count"))?;
                in_vertex_element = false;
            }
            ["element", ..] => {
                in_vertex_element = false;
            }
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex_element {
                    vertex_props.push((*name).to_string());
                }
            }
            [] => {}
            _ => {}
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, 1, "header never ends"));
    }
    let xi = vertex_props.iter().position(|p| p == "x");
    let yi = vertex_props.iter().position(|p| p == "y");
    let zi = vertex_props.iter().position(|p| p == "z");
    let (xi, yi, zi) = match (xi, yi, zi) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, header_end, "vertex element lacks x/y/z")),
    };

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut faces = Vec::with_capacity(face_count * 2);
    for _ in 0..vertex_count {
        let (lineno, raw) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_end, "truncated vertex list"))?;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() < vertex_props.len() {
            return Err(parse_err(path, lineno + 1, "short vertex line"));
        }
        let get = |i: usize| -> Result<f64> {
            tokens[i]
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad coordinate {:?}", tokens[i])))
        };
        vertices.push([get(xi)?, get(yi)?, get(zi)?]);
    }
    for _ in 0..face_count {
        let (lineno, raw) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_end, "truncated face list"))?;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(parse_err(path, lineno + 1, "empty face line"));
        }
        let k: usize = tokens[0]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, "bad face arity"))?;
        if tokens.len() != k + 1 || k < 3 {
            return Err(parse_err(path, lineno + 1, "face arity mismatch"));
        }
        let mut idx = Vec::with_capacity(k);
        for t in &tokens[1..] {
            idx.push(
                t.parse::<usize>()
                    .map_err(|_| parse_err(path, lineno + 1, format!("bad face index {t:?}")))?,
            );
        }
        for j in 1..idx.len() - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    finish_mesh(path, vertices, faces)
}

fn write_ply(shape: &Shape3D, faces: &[[usize; 3]], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", shape.n()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str(&format!("element face {}\n", faces.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for i in 0..shape.n() {
        let v = shape.vertex(i);
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", v[0], v[1], v[2]));
    }
    for f in faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mesh(seed: u64, n: usize) -> MeshData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape =
            Shape3D::new(Matrix3xX::from_fn(n, |_, _| rng.gen_range(-120.0..120.0))).unwrap();
        let faces = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
        MeshData { shape, faces }
    }

    #[test]
    fn obj_round_trip_preserves_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = random_mesh(81, 50);
        let path = dir.path().join("m.obj");
        write_mesh(&mesh.shape, &mesh.faces, &path).unwrap();
        let back = read_mesh(&path).unwrap();
        assert_eq!(back.faces, mesh.faces);
        let delta = (back.shape.flat() - mesh.shape.flat()).amax();
        assert!(delta < 1e-6, "max delta {delta}");
    }

    #[test]
    fn ply_round_trip_preserves_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = random_mesh(82, 40);
        let path = dir.path().join("m.ply");
        write_mesh(&mesh.shape, &mesh.faces, &path).unwrap();
        let back = read_mesh(&path).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert!((back.shape.flat() - mesh.shape.flat()).amax() < 1e-6);
    }

    #[test]
    fn obj_faces_feed_adjacency() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let mesh = read_mesh(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
        let adj = crate::shape::adjacency_from_faces(3, &mesh.faces);
        assert_eq!(adj[0], vec![1, 2]);
        // Quads triangulate into a fan.
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        let mesh = read_mesh(&path).unwrap();
        assert_eq!(mesh.faces.len(), 2);
    }

    #[test]
    fn malformed_vertex_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 oops 0\n").unwrap();
        match read_mesh(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Face referencing a missing vertex.
        std::fs::write(&path, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(read_mesh(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn obj_with_slashed_indices_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slash.obj");
        std::fs::write(
            &path,
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 3/1/1\n",
        )
        .unwrap();
        let mesh = read_mesh(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }
}
