//! Procedural miniature head model: a radius-0.1 icosphere with a jaw joint,
//! smooth random blendshape bases and an iBUG-style 68-point landmark layout.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::assets::{Blendshapes, DenseMatrix, FlameAssets, LandmarkBinding, UvMask};

pub const MINI_RADIUS: f64 = 0.1;
pub const MINI_SUBDIVISIONS: usize = 2;
pub const MINI_N_SHAPE: usize = 4;
pub const MINI_N_EXPR: usize = 4;
pub const MINI_UV_MASK_SIZE: usize = 64;
/// Peak per-vertex displacement of one basis column, as a fraction of the radius.
pub const MINI_BASIS_PEAK: f64 = 0.05;

pub const DEFAULT_EYE_PAIRS: [(usize, usize); 4] = [(37, 41), (38, 40), (43, 47), (44, 46)];
pub const DEFAULT_LIP_PAIRS: [(usize, usize); 4] = [(61, 67), (62, 66), (63, 65), (60, 64)];

/// Unit icosphere with outward counter-clockwise winding.
pub fn icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Canonical 68-point layout on a face chart; x right (image), y up, both in [-1, 1].
pub fn ibug_chart() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(68);
    // jaw contour 0..=16
    for i in 0..17 {
        let a = -1.0 + 2.0 * i as f64 / 16.0;
        pts.push((0.8 * a, 0.05 - 0.6 * (1.0 - 0.85 * a * a).sqrt()));
    }
    // brows 17..=26
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { -0.62 + 0.5 * s } else { 0.12 + 0.5 * s };
            let arch = 0.06 * (1.0 - (2.0 * s - 1.0).powi(2));
            pts.push((x, 0.45 + arch));
        }
    }
    // nose bridge 27..=30, nostrils 31..=35
    for i in 0..4 {
        pts.push((0.0, 0.32 - 0.12 * i as f64));
    }
    for i in 0..5 {
        let x = -0.16 + 0.08 * i as f64;
        pts.push((x, -0.06 - 0.03 * (1.0 - (x / 0.16).powi(2))));
    }
    // eyes 36..=47: corner, two upper lid, corner, two lower lid
    for cx in [-0.34, 0.34] {
        let (cy, w, h) = (0.25, 0.13, 0.05);
        pts.push((cx - w, cy));
        pts.push((cx - w / 3.0, cy + h));
        pts.push((cx + w / 3.0, cy + h));
        pts.push((cx + w, cy));
        pts.push((cx + w / 3.0, cy - h));
        pts.push((cx - w / 3.0, cy - h));
    }
    // outer lip 48..=59
    let (mx, my) = (0.0, -0.3);
    for i in 0..12 {
        let ang = std::f64::consts::PI - i as f64 * std::f64::consts::PI / 6.0;
        pts.push((mx + 0.3 * ang.cos(), my + 0.11 * ang.sin()));
    }
    // inner lip 60..=67
    pts.push((mx - 0.2, my));
    for i in 0..3 {
        pts.push((mx - 0.1 + 0.1 * i as f64, my + 0.025));
    }
    pts.push((mx + 0.2, my));
    for i in 0..3 {
        pts.push((mx + 0.1 - 0.1 * i as f64, my - 0.025));
    }
    debug_assert_eq!(pts.len(), 68);
    pts
}

/// Direction on the unit sphere for a chart point (longitude/latitude scaled to 63°).
pub fn chart_direction(x: f64, y: f64) -> Vector3<f64> {
    let scale = 0.7 * std::f64::consts::FRAC_PI_2;
    let lon = x * scale;
    let lat = y * scale;
    Vector3::new(lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos())
}

/// Ray from the origin along `dir` against a triangle; returns barycentrics on hit.
fn ray_hit(dir: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<[f64; 3]> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = -a;
    let u = s.dot(&p) / det;
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    let t = e2.dot(&q) / det;
    if t <= 0.0 || u < -1e-12 || v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let u = u.max(0.0);
    let v = v.max(0.0);
    Some([1.0 - u - v, u, v])
}

fn uv_of(p: &Vector3<f64>) -> [f64; 2] {
    let n = p.normalize();
    let u = 0.5 + n.x.atan2(n.z) / (2.0 * std::f64::consts::PI);
    let v = n.y.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
    [u, v]
}

fn build_uv(verts: &[Vector3<f64>], faces: &[[usize; 3]]) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let mut lookup: HashMap<(usize, u64, u64), usize> = HashMap::new();
    let mut uv_faces = Vec::with_capacity(faces.len());
    for face in faces {
        let mut corner: Vec<[f64; 2]> = face.iter().map(|&i| uv_of(&verts[i])).collect();
        let is_pole: Vec<bool> = face
            .iter()
            .map(|&i| {
                let n = verts[i].normalize();
                n.x.hypot(n.z) < 1e-9
            })
            .collect();
        let us: Vec<f64> = (0..3).filter(|&i| !is_pole[i]).map(|i| corner[i][0]).collect();
        let spread = us.iter().cloned().fold(f64::MIN, f64::max) - us.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 0.5 {
            for (i, c) in corner.iter_mut().enumerate() {
                if !is_pole[i] && c[0] < 0.5 {
                    c[0] += 1.0;
                }
            }
        }
        let mean_u = (0..3).filter(|&i| !is_pole[i]).map(|i| corner[i][0]).sum::<f64>()
            / (0..3).filter(|&i| !is_pole[i]).count().max(1) as f64;
        for (i, c) in corner.iter_mut().enumerate() {
            if is_pole[i] {
                c[0] = mean_u;
            }
            c[0] = c[0].clamp(0.0, 1.0);
            c[1] = c[1].clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let key = (face[k], corner[k][0].to_bits(), corner[k][1].to_bits());
            idx[k] = *lookup.entry(key).or_insert_with(|| {
                coords.push(corner[k]);
                coords.len() - 1
            });
        }
        uv_faces.push(idx);
    }
    (coords, uv_faces)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth random vector field over the unit sphere from degree-2/3 monomials.
fn random_field(rng: &mut ChaCha8Rng, dirs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let monomials = |n: &Vector3<f64>| -> [f64; 16] {
        let (x, y, z) = (n.x, n.y, n.z);
        [
            x * x, y * y, z * z, x * y, y * z, z * x,
            x * x * x, y * y * y, z * z * z, x * x * y, x * x * z, y * y * x,
            y * y * z, z * z * x, z * z * y, x * y * z,
        ]
    };
    let coeffs: Vec<[f64; 3]> = (0..16)
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect();
    dirs.iter()
        .map(|n| {
            let m = monomials(n);
            let mut d = Vector3::zeros();
            for (mi, c) in m.iter().zip(&coeffs) {
                d += Vector3::new(c[0], c[1], c[2]) * *mi;
            }
            d
        })
        .collect()
}

fn scale_to_peak(field: &mut [Vector3<f64>], peak: f64) {
    let max = field.iter().map(|d| d.norm()).fold(0.0, f64::max);
    if max > 0.0 {
        for d in field.iter_mut() {
            *d *= peak / max;
        }
    }
}

fn basis_from_fields(fields: &[Vec<Vector3<f64>>], n_vertices: usize) -> Blendshapes {
    let mut b = Blendshapes::zeros(n_vertices, fields.len());
    for (k, field) in fields.iter().enumerate() {
        for (v, d) in field.iter().enumerate() {
            for axis in 0..3 {
                b.set(v, axis, k, d[axis]);
            }
        }
    }
    b
}

/// Deterministic desk-scale head model for tests and demos.
pub fn make_mini_model(seed: u64) -> FlameAssets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (unit, faces) = icosphere(MINI_SUBDIVISIONS);
    let n = unit.len();
    let template: Vec<Vector3<f64>> = unit.iter().map(|p| p * MINI_RADIUS).collect();

    let shape_fields: Vec<Vec<Vector3<f64>>> = (0..MINI_N_SHAPE)
        .map(|_| {
            let mut f = random_field(&mut rng, &unit);
            let peak = MINI_BASIS_PEAK * MINI_RADIUS * rng.gen_range(0.6..1.0);
            scale_to_peak(&mut f, peak);
            f
        })
        .collect();
    let expr_fields: Vec<Vec<Vector3<f64>>> = (0..MINI_N_EXPR)
        .map(|_| {
            let mut f = random_field(&mut rng, &unit);
            for (d, nrm) in f.iter_mut().zip(&unit) {
                *d *= smoothstep(-0.3, 0.6, nrm.z);
            }
            let peak = MINI_BASIS_PEAK * MINI_RADIUS * rng.gen_range(0.6..1.0);
            scale_to_peak(&mut f, peak);
            f
        })
        .collect();

    // Two joints: root and a jaw that drives the lower third of the head.
    let jaw_weight: Vec<f64> = unit.iter().map(|p| smoothstep(-0.2, -0.45, p.y)).collect();
    let mut skinning_weights = DenseMatrix::zeros(n, 2);
    for (v, &w) in jaw_weight.iter().enumerate() {
        skinning_weights.set(v, 0, 1.0 - w);
        skinning_weights.set(v, 1, w);
    }
    let pose_fields: Vec<Vec<Vector3<f64>>> = (0..9)
        .map(|_| {
            let mut f = random_field(&mut rng, &unit);
            for (d, w) in f.iter_mut().zip(&jaw_weight) {
                *d *= *w;
            }
            scale_to_peak(&mut f, 0.01 * MINI_RADIUS);
            f
        })
        .collect();

    let mut joint_regressor = DenseMatrix::zeros(2, n);
    for v in 0..n {
        joint_regressor.set(0, v, 1.0 / n as f64);
    }
    let mut hinge: Vec<usize> = Vec::new();
    for side in [-1.0, 1.0] {
        let target = Vector3::new(side, -0.3, -0.2).normalize();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            (unit[a] - target)
                .norm()
                .partial_cmp(&(unit[b] - target).norm())
                .unwrap()
                .then(a.cmp(&b))
        });
        hinge.extend_from_slice(&order[..3]);
    }
    for &v in &hinge {
        joint_regressor.set(1, v, 1.0 / hinge.len() as f64);
    }

    let landmark_embedding: Vec<LandmarkBinding> = ibug_chart()
        .iter()
        .map(|&(x, y)| {
            let dir = chart_direction(x, y);
            faces
                .iter()
                .enumerate()
                .find_map(|(fi, f)| {
                    ray_hit(&dir, &template[f[0]], &template[f[1]], &template[f[2]])
                        .map(|bary| LandmarkBinding { face: fi, bary })
                })
                .expect("every chart direction hits the closed sphere")
        })
        .collect();

    let (uv_coords, uv_faces) = build_uv(&unit, &faces);

    let m = MINI_UV_MASK_SIZE;
    let mut mask = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let u = (col as f64 + 0.5) / m as f64;
            let v = (row as f64 + 0.5) / m as f64;
            let lon = (u - 0.5) * 2.0 * std::f64::consts::PI;
            let polar = v * std::f64::consts::PI;
            let nz = polar.sin() * lon.cos();
            mask.push(nz > 0.15);
        }
    }

    FlameAssets {
        template,
        shape_basis: basis_from_fields(&shape_fields, n),
        expr_basis: basis_from_fields(&expr_fields, n),
        pose_basis: basis_from_fields(&pose_fields, n),
        joint_regressor,
        skinning_weights,
        kinematic_parents: vec![None, Some(0)],
        faces,
        uv_coords,
        uv_faces,
        landmark_embedding,
        eye_pairs: DEFAULT_EYE_PAIRS.to_vec(),
        lip_pairs: DEFAULT_LIP_PAIRS.to_vec(),
        mouth_polygon: (60..68).collect(),
        face_mask_uv: Some(UvMask { size: m, data: mask }),
    }
}
