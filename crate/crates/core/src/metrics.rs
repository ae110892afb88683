//! Reconstruction metrics: chamfer distance, mean normal error and
//! completeness ratio between a predicted and a ground-truth surface, after
//! similarity alignment.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::vertex_normals;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::invariant("TriMesh", format!("face {f:?} indexes past {} vertices", vertices.len())));
        }
        Ok(Self { vertices, faces })
    }

    pub fn transformed(&self, t: &Similarity) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    fn area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

/// `x ↦ s·R·x + t` with `s > 0` and `R` a rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn check(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if !(self.scale > 0.0) || orth > 1e-9 || self.rotation.determinant() < 0.0 {
            return Err(Error::invariant("Similarity", "scale must be positive and R a proper rotation"));
        }
        Ok(())
    }
}

/// Least-squares similarity mapping `source[i]` onto `target[i]` (Umeyama).
pub fn align_similarity(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::DimensionMismatch(format!("{n} source vs {} target points", target.len())));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("similarity alignment needs ≥ 3 correspondences, got {n}")));
    }
    let inv = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() * inv;
    let mu_t = target.iter().sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv;
    var_s *= inv;
    if var_s < 1e-300 {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // sort descending so the reflection fix touches the smallest direction
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let vt = Matrix3::from_rows(&order.map(|i| vt.row(i).into_owned()));
    sv = Vector3::new(sv[order[0]], sv[order[1]], sv[order[2]]);
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        d[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * vt;
    let scale = sv.dot(&d) / var_s;
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_t - rotation * mu_s * scale,
    })
}

/// Predicted and ground-truth meshes, the similarity taking the prediction
/// into the ground-truth frame, and an optional ground-truth vertex region.
#[derive(Clone, Debug)]
pub struct AlignedMeshPair {
    pub predicted: TriMesh,
    pub ground_truth: TriMesh,
    pub transform: Similarity,
    /// Ground-truth faces take part only if all three vertices are in the region.
    pub region: Option<Vec<bool>>,
}

impl AlignedMeshPair {
    pub fn new(predicted: TriMesh, ground_truth: TriMesh, transform: Similarity) -> Result<Self> {
        transform.check()?;
        Ok(Self {
            predicted,
            ground_truth,
            transform,
            region: None,
        })
    }

    /// Aligns on corresponding vertex indices `(predicted, ground truth)`.
    pub fn aligned(predicted: TriMesh, ground_truth: TriMesh, correspondences: &[(usize, usize)]) -> Result<Self> {
        let mut src = Vec::with_capacity(correspondences.len());
        let mut dst = Vec::with_capacity(correspondences.len());
        for &(p, g) in correspondences {
            let (Some(a), Some(b)) = (predicted.vertices.get(p), ground_truth.vertices.get(g)) else {
                return Err(Error::invariant("correspondences", format!("pair ({p}, {g}) out of range")));
            };
            src.push(*a);
            dst.push(*b);
        }
        let t = align_similarity(&src, &dst)?;
        Self::new(predicted, ground_truth, t)
    }

    fn predicted_in_gt_frame(&self) -> TriMesh {
        self.predicted.transformed(&self.transform)
    }

    fn ground_truth_region(&self) -> TriMesh {
        match &self.region {
            None => self.ground_truth.clone(),
            Some(mask) => TriMesh {
                vertices: self.ground_truth.vertices.clone(),
                faces: self.ground_truth.faces.iter().copied().filter(|f| f.iter().all(|&i| mask.get(i).copied().unwrap_or(false))).collect(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub samples: usize,
    pub seed: u64,
    /// Multiplier from mesh units to millimetres.
    pub unit_to_mm: f64,
    pub completeness_threshold_mm: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            unit_to_mm: 1000.0,
            completeness_threshold_mm: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_mm: f64,
    pub mne_rad: f64,
    pub cr: f64,
}

/// A surface sample with its smooth (vertex-interpolated) unit normal.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceSample {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

fn smooth_normal(normals: &[Vector3<f64>], face: &[usize; 3], b: [f64; 3], fallback: Vector3<f64>) -> Vector3<f64> {
    let n = normals[face[0]] * b[0] + normals[face[1]] * b[1] + normals[face[2]] * b[2];
    n.try_normalize(1e-15).unwrap_or(fallback)
}

fn face_normal(mesh: &TriMesh, f: usize) -> Vector3<f64> {
    let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
    (b - a).cross(&(c - a)).try_normalize(1e-300).unwrap_or_else(Vector3::z)
}

/// `n` points stratified by face area: the k-th sample falls at cumulative
/// area `(k + u_k)/n` of the total, then uniformly inside that face.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Vec<SurfaceSample> {
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.area(f)).collect();
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut total = 0.0;
    for a in &areas {
        total += a;
        cumulative.push(total);
    }
    if total <= 0.0 || n == 0 {
        return Vec::new();
    }
    let normals = vertex_normals(&mesh.vertices, &mesh.faces);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let target = (k as f64 + rng.gen::<f64>()) / n as f64 * total;
            let f = cumulative.partition_point(|&c| c < target).min(areas.len() - 1);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let b = [1.0 - s, s * (1.0 - r2), s * r2];
            let face = mesh.faces[f];
            let point = mesh.vertices[face[0]] * b[0] + mesh.vertices[face[1]] * b[1] + mesh.vertices[face[2]] * b[2];
            SurfaceSample {
                point,
                normal: smooth_normal(&normals, &face, b, face_normal(mesh, f)),
            }
        })
        .collect()
}

/// Closest point on triangle `abc` to `p` and its barycentrics.
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> (Vector3<f64>, [f64; 3]) {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn distance2(&self, p: &Vector3<f64>) -> f64 {
        let d = (self.lo - p).sup(&(p - self.hi)).sup(&Vector3::zeros());
        d.norm_squared()
    }
}

enum Node {
    Leaf { bounds: Aabb, faces: Vec<usize> },
    Inner { bounds: Aabb, children: Box<[Node; 2]> },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Nearest point on a triangle mesh (median-split bounding volume hierarchy).
pub struct ClosestPointIndex<'a> {
    mesh: &'a TriMesh,
    normals: Vec<Vector3<f64>>,
    root: Option<Node>,
}

/// Result of a closest-point query.
#[derive(Clone, Copy, Debug)]
pub struct Nearest {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub face: usize,
    pub normal: Vector3<f64>,
}

const LEAF_SIZE: usize = 8;

impl<'a> ClosestPointIndex<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let centroids: Vec<Vector3<f64>> = mesh.faces.iter().map(|f| (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0).collect();
        let faces: Vec<usize> = (0..mesh.faces.len()).collect();
        let root = (!faces.is_empty()).then(|| Self::build(mesh, &centroids, faces));
        Self {
            mesh,
            normals: vertex_normals(&mesh.vertices, &mesh.faces),
            root,
        }
    }

    fn build(mesh: &TriMesh, centroids: &[Vector3<f64>], mut faces: Vec<usize>) -> Node {
        let mut bounds = Aabb::empty();
        for &f in &faces {
            for &v in &mesh.faces[f] {
                bounds.grow(&mesh.vertices[v]);
            }
        }
        if faces.len() <= LEAF_SIZE {
            return Node::Leaf { bounds, faces };
        }
        let ext = bounds.hi - bounds.lo;
        let axis = ext.imax();
        faces.sort_by(|&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
        let right = faces.split_off(faces.len() / 2);
        Node::Inner {
            bounds,
            children: Box::new([Self::build(mesh, centroids, faces), Self::build(mesh, centroids, right)]),
        }
    }

    pub fn nearest(&self, p: &Vector3<f64>) -> Option<Nearest> {
        let root = self.root.as_ref()?;
        let mut best: Option<(f64, Vector3<f64>, usize, [f64; 3])> = None;
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            let bound = best.map_or(f64::INFINITY, |b| b.0);
            if node.bounds().distance2(p) > bound {
                continue;
            }
            match node {
                Node::Leaf { faces, .. } => {
                    for &f in faces {
                        let [a, b, c] = self.mesh.faces[f].map(|i| self.mesh.vertices[i]);
                        let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
                        let d2 = (q - p).norm_squared();
                        if best.is_none_or(|b| d2 < b.0) {
                            best = Some((d2, q, f, bary));
                        }
                    }
                }
                Node::Inner { children, .. } => {
                    let [l, r] = &**children;
                    let (dl, dr) = (l.bounds().distance2(p), r.bounds().distance2(p));
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
            }
        }
        best.map(|(d2, point, face, bary)| Nearest {
            distance: d2.sqrt(),
            point,
            face,
            normal: smooth_normal(&self.normals, &self.mesh.faces[face], bary, face_normal(self.mesh, face)),
        })
    }
}

fn nearest_all(index: &ClosestPointIndex, samples: &[SurfaceSample]) -> Vec<Nearest> {
    samples.par_iter().map(|s| index.nearest(&s.point).expect("index is non-empty")).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn require_surface(mesh: &TriMesh, which: &str) -> Result<()> {
    if mesh.faces.is_empty() || (0..mesh.faces.len()).all(|f| mesh.area(f) == 0.0) {
        return Err(Error::Empty(format!("{which} mesh has no surface")));
    }
    Ok(())
}

/// Symmetric mean nearest-surface distance in millimetres.
pub fn chamfer_distance(pair: &AlignedMeshPair, config: &MetricsConfig) -> Result<f64> {
    let pred = pair.predicted_in_gt_frame();
    let gt = pair.ground_truth_region();
    require_surface(&pred, "predicted")?;
    require_surface(&gt, "ground-truth")?;
    let (ip, ig) = (ClosestPointIndex::new(&pred), ClosestPointIndex::new(&gt));
    let sp = sample_surface(&pred, config.samples, config.seed);
    let sg = sample_surface(&gt, config.samples, config.seed.wrapping_add(1));
    let p_to_g = mean(nearest_all(&ig, &sp).iter().map(|n| n.distance));
    let g_to_p = mean(nearest_all(&ip, &sg).iter().map(|n| n.distance));
    Ok(0.5 * (p_to_g + g_to_p) * config.unit_to_mm)
}

/// Mean angle (radians) between the predicted normal at each predicted
/// sample and the ground-truth normal at its nearest ground-truth point.
pub fn mean_normal_error(pair: &AlignedMeshPair, config: &MetricsConfig) -> Result<f64> {
    let pred = pair.predicted_in_gt_frame();
    let gt = pair.ground_truth_region();
    require_surface(&pred, "predicted")?;
    require_surface(&gt, "ground-truth")?;
    let ig = ClosestPointIndex::new(&gt);
    let sp = sample_surface(&pred, config.samples, config.seed);
    let nearest = nearest_all(&ig, &sp);
    Ok(mean(sp.iter().zip(&nearest).map(|(s, n)| angle_between(&s.normal, &n.normal))))
}

/// Accurate for small angles too, unlike `acos` of the dot product.
fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Fraction of ground-truth samples within the threshold of the predicted surface.
pub fn completeness_ratio(pair: &AlignedMeshPair, config: &MetricsConfig) -> f64 {
    let pred = pair.predicted_in_gt_frame();
    let gt = pair.ground_truth_region();
    if require_surface(&pred, "predicted").is_err() {
        return 0.0;
    }
    let ip = ClosestPointIndex::new(&pred);
    let sg = sample_surface(&gt, config.samples, config.seed.wrapping_add(1));
    if sg.is_empty() {
        return 0.0;
    }
    let hits = nearest_all(&ip, &sg).iter().filter(|n| n.distance * config.unit_to_mm < config.completeness_threshold_mm).count();
    hits as f64 / sg.len() as f64
}

pub fn evaluate(pair: &AlignedMeshPair, config: &MetricsConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        cd_mm: chamfer_distance(pair, config)?,
        mne_rad: mean_normal_error(pair, config)?,
        cr: completeness_ratio(pair, config),
    })
}
