//! Wavefront OBJ output of posed meshes (with UVs) and triangle-mesh input.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::assets::FlameAssets;
use crate::error::{Error, Result};
use crate::metrics::TriMesh;

/// OBJ text for `vertices` with the asset's UV layout; faces reference
/// `v/vt` pairs (1-based). `material` adds an `mtllib`/`usemtl` pair.
pub fn obj_string(assets: &FlameAssets, vertices: &[Vector3<f64>], material: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(m) = material {
        let _ = writeln!(s, "mtllib {m}.mtl\nusemtl {m}");
    }
    for v in vertices {
        let _ = writeln!(s, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z);
    }
    for uv in &assets.uv_coords {
        // OBJ texture space has v pointing up
        let _ = writeln!(s, "vt {:.9} {:.9}", uv[0], 1.0 - uv[1]);
    }
    for (f, t) in assets.faces.iter().zip(&assets.uv_faces) {
        let _ = writeln!(s, "f {}/{} {}/{} {}/{}", f[0] + 1, t[0] + 1, f[1] + 1, t[1] + 1, f[2] + 1, t[2] + 1);
    }
    s
}

pub fn write_obj(path: impl AsRef<Path>, assets: &FlameAssets, vertices: &[Vector3<f64>], material: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, obj_string(assets, vertices, material)).map_err(|e| Error::io(path, e))
}

/// Material file pointing at a diffuse texture.
pub fn write_mtl(path: impl AsRef<Path>, material: &str, texture_file: &str) -> Result<()> {
    let path = path.as_ref();
    let text = format!("newmtl {material}\nKa 1 1 1\nKd 1 1 1\nmap_Kd {texture_file}\n");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads `v` and `f` records of an OBJ file, keeping vertex order (vertex
/// correspondences rely on it). Polygons are fanned into triangles; negative
/// indices count back from the latest vertex.
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (no, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let xyz: Vec<f64> = tok.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(no, format!("{e}")))?;
                if xyz.len() != 3 {
                    return Err(bad(no, "vertex needs three coordinates".into()));
                }
                vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let head = t.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|e| bad(no, format!("face index `{t}`: {e}")))?;
                    let resolved = match i {
                        i if i > 0 && (i as usize) <= vertices.len() => i as usize - 1,
                        i if i < 0 && i.unsigned_abs() as usize <= vertices.len() => vertices.len() - i.unsigned_abs() as usize,
                        _ => return Err(bad(no, format!("face index {i} out of range"))),
                    };
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(bad(no, "face needs at least three vertices".into()));
                }
                faces.extend((1..idx.len() - 1).map(|k| [idx[0], idx[k], idx[k + 1]]));
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode, FlameParams};
    use crate::mini::make_mini_model;

    #[test]
    fn obj_round_trip_keeps_geometry() {
        let a = make_mini_model(0);
        let m = decode(&a, &FlameParams::zeros(&a)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        write_obj(&p, &a, &m.vertices, None).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.faces, a.faces);
        for (x, y) in back.vertices.iter().zip(&m.vertices) {
            assert!((x - y).norm() < 1e-8);
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("vt ")).count(), a.uv_coords.len());
    }

    #[test]
    fn malformed_obj_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        for text in ["v 0 0 0\nv 1 0 0\nf 1 2 7\n", "v 0 0\n", "v 0 0 0\nf 1 1\n", "v a b c\n"] {
            std::fs::write(&p, text).unwrap();
            assert!(read_obj(&p).is_err(), "{text}");
        }
        std::fs::write(&p, "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 -1/1\n").unwrap();
        assert_eq!(read_obj(&p).unwrap().faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(read_obj(dir.path().join("missing.obj")).is_err());
    }
}
