//! On-disk head-model assets: a JSON manifest plus one headerless
//! little-endian `f64` blob per array, all row-major.
//!
//! Integer-valued arrays (faces, parents, index pairs) are stored as `f64`
//! too, which is exact for every index below 2^53. The root joint's parent
//! is stored as `-1`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NUM_LANDMARKS: usize = 68;

const SKINNING_TOL: f64 = 1e-5;
const REGRESSOR_TOL: f64 = 1e-4;
const BARY_TOL: f64 = 1e-6;

/// Dense per-vertex displacement basis, laid out `[vertex][xyz][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blendshapes {
    n_vertices: usize,
    n_components: usize,
    data: Vec<f64>,
}

impl Blendshapes {
    pub fn new(n_vertices: usize, n_components: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_vertices * 3 * n_components {
            return Err(Error::DimensionMismatch(format!(
                "blendshape data has {} entries, expected {}x3x{}",
                data.len(),
                n_vertices,
                n_components
            )));
        }
        Ok(Self {
            n_vertices,
            n_components,
            data,
        })
    }

    pub fn zeros(n_vertices: usize, n_components: usize) -> Self {
        Self {
            n_vertices,
            n_components,
            data: vec![0.0; n_vertices * 3 * n_components],
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, vertex: usize, axis: usize, component: usize) -> f64 {
        self.data[(vertex * 3 + axis) * self.n_components + component]
    }

    #[inline]
    pub fn set(&mut self, vertex: usize, axis: usize, component: usize, value: f64) {
        self.data[(vertex * 3 + axis) * self.n_components + component] = value;
    }

    /// Adds `Σ_k basis[:, :, k] · coeffs[k]` onto `target`.
    pub fn accumulate(&self, coeffs: &[f64], target: &mut [Vector3<f64>]) {
        debug_assert_eq!(coeffs.len(), self.n_components);
        debug_assert_eq!(target.len(), self.n_vertices);
        let n = self.n_components;
        if n == 0 {
            return;
        }
        for (v, out) in target.iter_mut().enumerate() {
            for axis in 0..3 {
                let row = &self.data[(v * 3 + axis) * n..(v * 3 + axis + 1) * n];
                out[axis] += row.iter().zip(coeffs).map(|(b, c)| b * c).sum::<f64>();
            }
        }
    }

    /// Contracts a per-vertex gradient with the basis: `out[k] = Σ_v,a g[v][a] · basis[v][a][k]`.
    pub fn transpose_apply(&self, grad: &[Vector3<f64>]) -> Vec<f64> {
        let n = self.n_components;
        let mut out = vec![0.0; n];
        for (v, g) in grad.iter().enumerate() {
            for axis in 0..3 {
                let row = &self.data[(v * 3 + axis) * n..(v * 3 + axis + 1) * n];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += b * g[axis];
                }
            }
        }
        out
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A landmark glued to the mesh surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkBinding {
    pub face: usize,
    pub bary: [f64; 3],
}

/// Square boolean mask over UV space (true = facial region).
#[derive(Clone, Debug, PartialEq)]
pub struct UvMask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl UvMask {
    pub fn full(size: usize) -> Self {
        Self {
            size,
            data: vec![true; size * size],
        }
    }

    /// Nearest-neighbour resample to a new square resolution.
    pub fn resampled(&self, size: usize) -> UvMask {
        if size == self.size {
            return self.clone();
        }
        let mut data = Vec::with_capacity(size * size);
        for row in 0..size {
            let sr = (((row as f64 + 0.5) * self.size as f64 / size as f64) as usize).min(self.size - 1);
            for col in 0..size {
                let sc =
                    (((col as f64 + 0.5) * self.size as f64 / size as f64) as usize).min(self.size - 1);
                data.push(self.data[sr * self.size + sc]);
            }
        }
        UvMask { size, data }
    }
}

/// Everything the decoder, renderer and losses need to know about the head model.
#[derive(Clone, Debug, PartialEq)]
pub struct FlameAssets {
    pub template: Vec<Vector3<f64>>,
    pub shape_basis: Blendshapes,
    pub expr_basis: Blendshapes,
    /// Pose correctives, one 9-column block per non-root joint.
    pub pose_basis: Blendshapes,
    /// K×V.
    pub joint_regressor: DenseMatrix,
    /// V×K.
    pub skinning_weights: DenseMatrix,
    pub kinematic_parents: Vec<Option<usize>>,
    pub faces: Vec<[usize; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
    pub uv_faces: Vec<[usize; 3]>,
    pub landmark_embedding: Vec<LandmarkBinding>,
    pub eye_pairs: Vec<(usize, usize)>,
    pub lip_pairs: Vec<(usize, usize)>,
    pub mouth_polygon: Vec<usize>,
    pub face_mask_uv: Option<UvMask>,
}

impl FlameAssets {
    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.kinematic_parents.len()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_basis.n_components()
    }

    pub fn n_expr(&self) -> usize {
        self.expr_basis.n_components()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            v: self.n_vertices(),
            f: self.n_faces(),
            k: self.n_joints(),
            n_beta: self.n_shape(),
            n_psi: self.n_expr(),
        }
    }

    /// UV face mask at the requested resolution (all-true when the asset ships none).
    pub fn face_mask_uv_at(&self, size: usize) -> UvMask {
        match &self.face_mask_uv {
            Some(m) => m.resampled(size),
            None => UvMask::full(size),
        }
    }

    /// Checks every structural invariant; errors name the offending array.
    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        let f = self.n_faces();
        let k = self.n_joints();
        if v == 0 {
            return Err(Error::invariant("template", "no vertices"));
        }
        if k == 0 {
            return Err(Error::invariant("kinematic_parents", "no joints"));
        }
        for (name, b) in [
            ("shape_basis", &self.shape_basis),
            ("expr_basis", &self.expr_basis),
            ("pose_basis", &self.pose_basis),
        ] {
            if b.n_vertices() != v {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: vec![v, 3, b.n_components()],
                    found: vec![b.n_vertices(), 3, b.n_components()],
                });
            }
            if b.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::invariant(name, "non-finite entry"));
            }
        }
        if self.pose_basis.n_components() != 9 * (k - 1) {
            return Err(Error::ShapeMismatch {
                name: "pose_basis".into(),
                expected: vec![v, 3, 9 * (k - 1)],
                found: vec![v, 3, self.pose_basis.n_components()],
            });
        }
        if self.template.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::invariant("template", "non-finite entry"));
        }
        if (self.joint_regressor.rows, self.joint_regressor.cols) != (k, v) {
            return Err(Error::ShapeMismatch {
                name: "joint_regressor".into(),
                expected: vec![k, v],
                found: vec![self.joint_regressor.rows, self.joint_regressor.cols],
            });
        }
        for j in 0..k {
            let s: f64 = self.joint_regressor.row(j).iter().sum();
            if (s - 1.0).abs() > REGRESSOR_TOL {
                return Err(Error::invariant(
                    "joint_regressor",
                    format!("row {j} sums to {s}"),
                ));
            }
        }
        if (self.skinning_weights.rows, self.skinning_weights.cols) != (v, k) {
            return Err(Error::ShapeMismatch {
                name: "skinning_weights".into(),
                expected: vec![v, k],
                found: vec![self.skinning_weights.rows, self.skinning_weights.cols],
            });
        }
        for i in 0..v {
            let row = self.skinning_weights.row(i);
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::invariant(
                    "skinning_weights",
                    format!("row {i} has a negative or non-finite weight"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SKINNING_TOL {
                return Err(Error::invariant(
                    "skinning_weights",
                    format!("row {i} sums to {s}"),
                ));
            }
        }
        if self.kinematic_parents[0].is_some() {
            return Err(Error::invariant("kinematic_parents", "joint 0 must be the root"));
        }
        for (j, p) in self.kinematic_parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::invariant(
                        "kinematic_parents",
                        format!("joint {j} must have a parent with a smaller index"),
                    ))
                }
            }
        }
        if let Some(bad) = self.faces.iter().flatten().find(|&&i| i >= v) {
            return Err(Error::invariant("faces", format!("index {bad} >= V = {v}")));
        }
        if self.uv_faces.len() != f {
            return Err(Error::ShapeMismatch {
                name: "uv_faces".into(),
                expected: vec![f, 3],
                found: vec![self.uv_faces.len(), 3],
            });
        }
        let n_uv = self.uv_coords.len();
        if let Some(bad) = self.uv_faces.iter().flatten().find(|&&i| i >= n_uv) {
            return Err(Error::invariant("uv_faces", format!("index {bad} >= {n_uv}")));
        }
        if self
            .uv_coords
            .iter()
            .flatten()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::invariant("uv_coords", "coordinate outside [0, 1]"));
        }
        if self.landmark_embedding.len() != NUM_LANDMARKS {
            return Err(Error::ShapeMismatch {
                name: "landmark_embedding".into(),
                expected: vec![NUM_LANDMARKS, 4],
                found: vec![self.landmark_embedding.len(), 4],
            });
        }
        for (i, lm) in self.landmark_embedding.iter().enumerate() {
            if lm.face >= f {
                return Err(Error::invariant(
                    "landmark_embedding",
                    format!("landmark {i} references face {} >= F = {f}", lm.face),
                ));
            }
            let s: f64 = lm.bary.iter().sum();
            if (s - 1.0).abs() > BARY_TOL {
                return Err(Error::invariant(
                    "landmark_embedding",
                    format!("landmark {i} barycentric weights sum to {s}"),
                ));
            }
        }
        for (name, pairs) in [("eye_pairs", &self.eye_pairs), ("lip_pairs", &self.lip_pairs)] {
            if pairs
                .iter()
                .any(|&(a, b)| a >= NUM_LANDMARKS || b >= NUM_LANDMARKS)
            {
                return Err(Error::invariant(name, "landmark index out of range"));
            }
        }
        if self.mouth_polygon.iter().any(|&i| i >= NUM_LANDMARKS) {
            return Err(Error::invariant("mouth_polygon", "landmark index out of range"));
        }
        if let Some(m) = &self.face_mask_uv {
            if m.data.len() != m.size * m.size {
                return Err(Error::invariant("face_mask_uv", "mask is not square"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_beta: usize,
    pub n_psi: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub dtype: String,
    #[serde(default)]
    pub offset: u64,
}

impl ArrayEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> u64 {
        (self.len() * 8) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub format_version: String,
    pub dims: Dims,
    pub arrays: Vec<ArrayEntry>,
}

impl AssetManifest {
    /// Expected shape for every known array name, derived from `dims`.
    /// `None` in a slot means that axis is free (pair lists, polygons, UV sets).
    fn expected_shape(&self, name: &str) -> Option<Vec<Option<usize>>> {
        let d = self.dims;
        let s = match name {
            "template" => vec![Some(d.v), Some(3)],
            "shape_basis" => vec![Some(d.v), Some(3), Some(d.n_beta)],
            "expr_basis" => vec![Some(d.v), Some(3), Some(d.n_psi)],
            "pose_basis" => vec![Some(d.v), Some(3), Some(9 * d.k.saturating_sub(1))],
            "joint_regressor" => vec![Some(d.k), Some(d.v)],
            "skinning_weights" => vec![Some(d.v), Some(d.k)],
            "kinematic_parents" => vec![Some(d.k)],
            "faces" => vec![Some(d.f), Some(3)],
            "uv_coords" => vec![None, Some(2)],
            "uv_faces" => vec![Some(d.f), Some(3)],
            "landmark_embedding" => vec![Some(NUM_LANDMARKS), Some(4)],
            "eye_pairs" | "lip_pairs" => vec![None, Some(2)],
            "mouth_polygon" => vec![None],
            "face_mask_uv" => vec![None, None],
            _ => return None,
        };
        Some(s)
    }

    /// Shape consistency against `dims` and non-overlapping byte ranges per file.
    pub fn validate(&self) -> Result<()> {
        for entry in &self.arrays {
            if entry.dtype != "f64" {
                return Err(Error::invariant(
                    entry.name.clone(),
                    format!("unsupported dtype `{}`", entry.dtype),
                ));
            }
            if let Some(expected) = self.expected_shape(&entry.name) {
                let ok = expected.len() == entry.shape.len()
                    && expected
                        .iter()
                        .zip(&entry.shape)
                        .all(|(e, s)| e.is_none_or(|e| e == *s));
                if !ok {
                    return Err(Error::ShapeMismatch {
                        name: entry.name.clone(),
                        expected: expected.iter().map(|e| e.unwrap_or(0)).collect(),
                        found: entry.shape.clone(),
                    });
                }
            }
        }
        let mut by_file: HashMap<&str, Vec<(u64, u64, &str)>> = HashMap::new();
        for e in &self.arrays {
            by_file
                .entry(e.file.as_str())
                .or_default()
                .push((e.offset, e.offset + e.byte_len(), e.name.as_str()));
        }
        for ranges in by_file.values_mut() {
            ranges.sort();
            for w in ranges.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(Error::invariant(
                        w[1].2,
                        format!("byte range overlaps `{}`", w[0].2),
                    ));
                }
            }
        }
        Ok(())
    }

    fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|e| e.name == name)
    }
}

struct RawArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_array(dir: &Path, manifest: &AssetManifest, name: &str) -> Result<Option<RawArray>> {
    let Some(entry) = manifest.entry(name) else {
        return Ok(None);
    };
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let start = entry.offset as usize;
    let end = start + entry.byte_len() as usize;
    // A blob owned by a single array must match its declared size exactly.
    let shared = manifest.arrays.iter().filter(|e| e.file == entry.file).count() > 1;
    if end > bytes.len() || (!shared && bytes.len() != end) {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: entry.shape.clone(),
            found: vec![bytes.len().saturating_sub(start) / 8],
        });
    }
    let data = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some(RawArray {
        shape: entry.shape.clone(),
        data,
    }))
}

fn required(dir: &Path, manifest: &AssetManifest, name: &str) -> Result<RawArray> {
    read_array(dir, manifest, name)?.ok_or_else(|| Error::MissingArray(name.into()))
}

fn as_index(name: &str, x: f64) -> Result<usize> {
    if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
        return Err(Error::invariant(name, format!("{x} is not a valid index")));
    }
    Ok(x as usize)
}

fn triples(name: &str, raw: &RawArray) -> Result<Vec<[usize; 3]>> {
    raw.data
        .chunks_exact(3)
        .map(|c| Ok([as_index(name, c[0])?, as_index(name, c[1])?, as_index(name, c[2])?]))
        .collect()
}

fn pairs(name: &str, raw: &RawArray) -> Result<Vec<(usize, usize)>> {
    raw.data
        .chunks_exact(2)
        .map(|c| Ok((as_index(name, c[0])?, as_index(name, c[1])?)))
        .collect()
}

/// Loads and validates an asset directory.
pub fn load_assets(dir: impl AsRef<Path>) -> Result<FlameAssets> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: AssetManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    manifest.validate()?;
    let d = manifest.dims;

    let template = required(dir, &manifest, "template")?;
    let template = template
        .data
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let shape_basis = Blendshapes::new(d.v, d.n_beta, required(dir, &manifest, "shape_basis")?.data)?;
    let expr_basis = Blendshapes::new(d.v, d.n_psi, required(dir, &manifest, "expr_basis")?.data)?;
    let pose_basis = Blendshapes::new(
        d.v,
        9 * d.k.saturating_sub(1),
        required(dir, &manifest, "pose_basis")?.data,
    )?;
    let joint_regressor = DenseMatrix {
        rows: d.k,
        cols: d.v,
        data: required(dir, &manifest, "joint_regressor")?.data,
    };
    let skinning_weights = DenseMatrix {
        rows: d.v,
        cols: d.k,
        data: required(dir, &manifest, "skinning_weights")?.data,
    };
    let kinematic_parents = required(dir, &manifest, "kinematic_parents")?
        .data
        .iter()
        .map(|&p| {
            if p < 0.0 {
                Ok(None)
            } else {
                as_index("kinematic_parents", p).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let faces = triples("faces", &required(dir, &manifest, "faces")?)?;
    let uv_coords = required(dir, &manifest, "uv_coords")?
        .data
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let uv_faces = triples("uv_faces", &required(dir, &manifest, "uv_faces")?)?;
    let landmark_embedding = required(dir, &manifest, "landmark_embedding")?
        .data
        .chunks_exact(4)
        .map(|c| {
            Ok(LandmarkBinding {
                face: as_index("landmark_embedding", c[0])?,
                bary: [c[1], c[2], c[3]],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eye_pairs = pairs("eye_pairs", &required(dir, &manifest, "eye_pairs")?)?;
    let lip_pairs = pairs("lip_pairs", &required(dir, &manifest, "lip_pairs")?)?;
    let mouth_polygon = required(dir, &manifest, "mouth_polygon")?
        .data
        .iter()
        .map(|&x| as_index("mouth_polygon", x))
        .collect::<Result<Vec<_>>>()?;
    let face_mask_uv = match read_array(dir, &manifest, "face_mask_uv")? {
        Some(raw) => {
            if raw.shape[0] != raw.shape[1] {
                return Err(Error::invariant("face_mask_uv", "mask is not square"));
            }
            Some(UvMask {
                size: raw.shape[0],
                data: raw.data.iter().map(|&x| x != 0.0).collect(),
            })
        }
        None => None,
    };

    let assets = FlameAssets {
        template,
        shape_basis,
        expr_basis,
        pose_basis,
        joint_regressor,
        skinning_weights,
        kinematic_parents,
        faces,
        uv_coords,
        uv_faces,
        landmark_embedding,
        eye_pairs,
        lip_pairs,
        mouth_polygon,
        face_mask_uv,
    };
    assets.validate()?;
    Ok(assets)
}

fn flatten_indices<const N: usize>(rows: &[[usize; N]]) -> Vec<f64> {
    rows.iter().flatten().map(|&i| i as f64).collect()
}

/// Writes `assets` as a manifest plus raw blobs into `dir` (created if needed).
pub fn save_assets(assets: &FlameAssets, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    assets.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = assets.dims();

    let mut arrays: Vec<(&str, Vec<usize>, Vec<f64>)> = vec![
        (
            "template",
            vec![d.v, 3],
            assets.template.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        ),
        (
            "shape_basis",
            vec![d.v, 3, d.n_beta],
            assets.shape_basis.as_slice().to_vec(),
        ),
        (
            "expr_basis",
            vec![d.v, 3, d.n_psi],
            assets.expr_basis.as_slice().to_vec(),
        ),
        (
            "pose_basis",
            vec![d.v, 3, assets.pose_basis.n_components()],
            assets.pose_basis.as_slice().to_vec(),
        ),
        (
            "joint_regressor",
            vec![d.k, d.v],
            assets.joint_regressor.data.clone(),
        ),
        (
            "skinning_weights",
            vec![d.v, d.k],
            assets.skinning_weights.data.clone(),
        ),
        (
            "kinematic_parents",
            vec![d.k],
            assets
                .kinematic_parents
                .iter()
                .map(|p| p.map_or(-1.0, |p| p as f64))
                .collect(),
        ),
        ("faces", vec![d.f, 3], flatten_indices(&assets.faces)),
        (
            "uv_coords",
            vec![assets.uv_coords.len(), 2],
            assets.uv_coords.iter().flatten().copied().collect(),
        ),
        ("uv_faces", vec![d.f, 3], flatten_indices(&assets.uv_faces)),
        (
            "landmark_embedding",
            vec![NUM_LANDMARKS, 4],
            assets
                .landmark_embedding
                .iter()
                .flat_map(|l| [l.face as f64, l.bary[0], l.bary[1], l.bary[2]])
                .collect(),
        ),
        (
            "eye_pairs",
            vec![assets.eye_pairs.len(), 2],
            assets
                .eye_pairs
                .iter()
                .flat_map(|&(a, b)| [a as f64, b as f64])
                .collect(),
        ),
        (
            "lip_pairs",
            vec![assets.lip_pairs.len(), 2],
            assets
                .lip_pairs
                .iter()
                .flat_map(|&(a, b)| [a as f64, b as f64])
                .collect(),
        ),
        (
            "mouth_polygon",
            vec![assets.mouth_polygon.len()],
            assets.mouth_polygon.iter().map(|&i| i as f64).collect(),
        ),
    ];
    if let Some(m) = &assets.face_mask_uv {
        arrays.push((
            "face_mask_uv",
            vec![m.size, m.size],
            m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ));
    }

    let mut entries = Vec::with_capacity(arrays.len());
    for (name, shape, data) in arrays {
        let file = format!("{name}.f64");
        let path = dir.join(&file);
        let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ArrayEntry {
            name: name.into(),
            shape,
            file,
            dtype: "f64".into(),
            offset: 0,
        });
    }
    let manifest = AssetManifest {
        format_version: FORMAT_VERSION.into(),
        dims: d,
        arrays: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
