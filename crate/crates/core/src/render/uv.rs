use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};

use crate::assets::FlameAssets;
use crate::image::Image;
use crate::render::raster::edge;

/// Texel-to-surface map of a UV layout at `size × size`. Texel `(x, y)` has
/// its centre at `((x + 0.5) / size, (y + 0.5) / size)` in `(u, v)`.
#[derive(Clone, Debug)]
pub struct UvRaster {
    pub size: usize,
    /// Face owning each texel. Texels outside every UV triangle borrow the
    /// face of the nearest covered texel so that bilinear lookups near chart
    /// borders stay on the surface.
    pub face: Vec<usize>,
    pub bary: Vec<[f64; 3]>,
    /// Texel centre lies inside its face's UV triangle.
    pub covered: Vec<bool>,
}

fn uv_barycentric(tri: &[Vector2<f64>; 3], p: &Vector2<f64>) -> Option<[f64; 3]> {
    let area = edge(&tri[0], &tri[1], &tri[2]);
    if area.abs() < 1e-18 {
        return None;
    }
    Some([
        edge(&tri[1], &tri[2], p) / area,
        edge(&tri[2], &tri[0], p) / area,
        edge(&tri[0], &tri[1], p) / area,
    ])
}

fn clamp_to_triangle(b: [f64; 3]) -> [f64; 3] {
    let c = [b[0].max(0.0), b[1].max(0.0), b[2].max(0.0)];
    let s = c[0] + c[1] + c[2];
    if s > 0.0 {
        [c[0] / s, c[1] / s, c[2] / s]
    } else {
        [1.0 / 3.0; 3]
    }
}

impl UvRaster {
    pub fn new(assets: &FlameAssets, size: usize) -> Self {
        let n = size * size;
        let mut face = vec![usize::MAX; n];
        let mut bary = vec![[0.0; 3]; n];
        let mut covered = vec![false; n];
        let scale = size as f64;
        let texel_tri = |fi: usize| -> [Vector2<f64>; 3] {
            let f = assets.uv_faces[fi];
            [0, 1, 2].map(|k| {
                let c = assets.uv_coords[f[k]];
                Vector2::new(c[0] * scale, c[1] * scale)
            })
        };
        for fi in 0..assets.uv_faces.len() {
            let tri = texel_tri(fi);
            let lo = tri.iter().fold(Vector2::repeat(f64::MAX), |m, p| m.inf(p));
            let hi = tri.iter().fold(Vector2::repeat(f64::MIN), |m, p| m.sup(p));
            let x0 = lo.x.floor().max(0.0) as usize;
            let y0 = lo.y.floor().max(0.0) as usize;
            let x1 = (hi.x.ceil() as usize).min(size - 1);
            let y1 = (hi.y.ceil() as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * size + x;
                    if covered[i] {
                        continue;
                    }
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    if let Some(b) = uv_barycentric(&tri, &p) {
                        if b.iter().all(|&v| v >= 0.0) {
                            face[i] = fi;
                            bary[i] = b;
                            covered[i] = true;
                        }
                    }
                }
            }
        }

        // Breadth-first fill of uncovered texels from their nearest covered neighbour.
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| covered[i]).collect();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % size, i / size);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < size).then(|| i + 1),
                (y > 0).then(|| i - size),
                (y + 1 < size).then(|| i + size),
            ];
            for j in neighbours.into_iter().flatten() {
                if face[j] == usize::MAX {
                    face[j] = face[i];
                    let p = Vector2::new((j % size) as f64 + 0.5, (j / size) as f64 + 0.5);
                    bary[j] = uv_barycentric(&texel_tri(face[j]), &p).map(clamp_to_triangle).unwrap_or([1.0 / 3.0; 3]);
                    queue.push_back(j);
                }
            }
        }
        if face.contains(&usize::MAX) {
            // Layout with no UV triangles at all.
            face.iter_mut().for_each(|f| *f = 0);
        }
        Self { size, face, bary, covered }
    }

    /// Surface point of texel `i` on the given mesh.
    pub fn surface_point(&self, faces: &[[usize; 3]], vertices: &[Vector3<f64>], i: usize) -> Vector3<f64> {
        let f = faces[self.face[i]];
        let b = self.bary[i];
        vertices[f[0]] * b[0] + vertices[f[1]] * b[1] + vertices[f[2]] * b[2]
    }
}

/// Per-texel interpolated vertex normals, renormalized.
pub fn normal_map(raster: &UvRaster, faces: &[[usize; 3]], vertex_normals: &[Vector3<f64>]) -> Image {
    let data = (0..raster.size * raster.size)
        .map(|i| {
            let m = raster.surface_point(faces, vertex_normals, i);
            let len = m.norm();
            if len > 1e-12 {
                m / len
            } else {
                Vector3::z()
            }
        })
        .collect();
    Image {
        width: raster.size,
        height: raster.size,
        data,
    }
}

/// Pulls a gradient on the normal map back onto the vertex normals.
pub fn normal_map_backward(
    raster: &UvRaster,
    faces: &[[usize; 3]],
    vertex_normals: &[Vector3<f64>],
    grad_map: &[Vector3<f64>],
    grad_normals: &mut [Vector3<f64>],
) {
    for (i, g) in grad_map.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        let m = raster.surface_point(faces, vertex_normals, i);
        let len = m.norm();
        if len <= 1e-12 {
            continue;
        }
        let n = m / len;
        let gm = (g - n * n.dot(g)) / len;
        let f = faces[raster.face[i]];
        for k in 0..3 {
            grad_normals[f[k]] += gm * raster.bary[i][k];
        }
    }
}
