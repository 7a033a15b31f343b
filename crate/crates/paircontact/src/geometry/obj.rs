//! Wavefront OBJ subset: `v x y z`, `f i j k ...` with 1-based indices and
//! `#` comments. Polygons are fan-triangulated; normals and UVs are ignored.

use std::fs;
use std::path::Path;

use nalgebra::Point3;

use super::Mesh;
use crate::error::{Error, Result};

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

pub fn parse_obj(text: &str, origin: &str) -> Result<Mesh> {
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0; 3];
                for c in &mut coords {
                    let tok = tokens.next().ok_or_else(|| parse_err(origin, line, "vertex record needs 3 coordinates"))?;
                    *c = tok
                        .parse::<f64>()
                        .map_err(|_| parse_err(origin, line, &format!("bad coordinate '{tok}'")))?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in tokens {
                    // tolerate v/vt/vn forms; only the vertex index is used
                    let head = tok.split('/').next().unwrap_or(tok);
                    let i: i64 = head
                        .parse()
                        .map_err(|_| parse_err(origin, line, &format!("bad face index '{tok}'")))?;
                    if i < 1 {
                        return Err(parse_err(origin, line, "face indices are 1-based"));
                    }
                    let i = (i - 1) as usize;
                    if i >= vertices.len() {
                        return Err(Error::Validation(format!(
                            "{origin}:{line}: face index {} out of range ({} vertices so far)",
                            i + 1,
                            vertices.len()
                        )));
                    }
                    idx.push(i);
                }
                if idx.len() < 3 {
                    return Err(parse_err(origin, line, "face needs at least 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            // ignore other record types (vn, vt, o, g, s, mtllib, usemtl)
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_err(origin: &str, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TETRA: &str = "\
# minimal closed mesh
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 2 3
f 1 2 4
f 1 3 4
f 2 3 4
";

    #[test]
    fn tetrahedron_parses() {
        let m = parse_obj(TETRA, "tetra.obj").unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
        assert_eq!(m.edge_count(), 6);
    }

    #[test]
    fn quad_face_fan_triangulates() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let m = parse_obj(text, "quad.obj").unwrap();
        assert_eq!(m.face_count(), 2);
        assert_eq!(m.faces()[0], [0, 1, 2]);
        assert_eq!(m.faces()[1], [0, 2, 3]);
    }

    #[test]
    fn out_of_range_index_is_validation_error() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 9\n";
        let err = parse_obj(text, "bad.obj").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "v 0 0 0\nv nope 0 0\n";
        match parse_obj(text, "bad.obj").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn slash_form_indices_accepted() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n";
        let m = parse_obj(text, "slashes.obj").unwrap();
        assert_eq!(m.face_count(), 1);
    }

    #[test]
    fn obj_round_trip() {
        let m = parse_obj(TETRA, "tetra.obj").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&m, &path).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.faces(), m.faces());
    }
}
