//! Per-view UV texture extraction, hole filling, multi-view fusion and the
//! `M_face` mask.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::assets::UvMask;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{save_mask_png, Image, Rgb};
use crate::render::{point_visible, FrameBuffer, UvRaster};

/// Depth tolerance (model units) of the visibility test.
pub const VISIBILITY_EPS: f64 = 1e-4;

/// Square UV map with a per-texel observation flag.
#[derive(Clone, Debug, PartialEq)]
pub struct UVTexture {
    pub data: Image,
    pub valid: Vec<bool>,
}

impl UVTexture {
    pub fn empty(size: usize) -> Self {
        Self {
            data: Image::new(size, size),
            valid: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.data.width
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Writes `<stem>.png` and the validity mask as `<stem>_valid.png`.
    pub fn save_png(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.data.save_png(dir.join(format!("{stem}.png")))?;
        save_mask_png(&self.valid, self.size(), self.size(), dir.join(format!("{stem}_valid.png")))
    }
}

/// Image location `U_V` of each texel's surface point, where that point is
/// visible in the view.
#[derive(Clone, Debug)]
pub struct UvCorrespondence {
    pub size: usize,
    pub pixel: Vec<Option<Vector2<f64>>>,
}

pub fn build_uv_correspondence(
    fb: &FrameBuffer,
    raster: &UvRaster,
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
) -> UvCorrespondence {
    let pixel = (0..raster.size * raster.size)
        .map(|i| {
            if !raster.covered[i] {
                return None;
            }
            let x = raster.surface_point(faces, vertices, i);
            point_visible(fb, vertices, faces, camera, &x, VISIBILITY_EPS).then(|| camera.project_point(&x).pixel)
        })
        .collect();
    UvCorrespondence {
        size: raster.size,
        pixel,
    }
}

/// `max(0, cos)` between the surface normal and the direction to the camera,
/// per texel with a correspondence; 0 elsewhere.
pub fn view_weights(
    raster: &UvRaster,
    corr: &UvCorrespondence,
    vertices: &[Vector3<f64>],
    vertex_normals: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
) -> Vec<f64> {
    (0..raster.size * raster.size)
        .map(|i| {
            if corr.pixel[i].is_none() {
                return 0.0;
            }
            let x = raster.surface_point(faces, vertices, i);
            let n = raster.surface_point(faces, vertex_normals, i);
            let len = n.norm();
            if len < 1e-12 {
                return 0.0;
            }
            (n / len).dot(&camera.view_direction(&x)).max(0.0)
        })
        .collect()
}

/// Bilinear sampling of `image` at each corresponded texel (`I′_uv` of one view).
pub fn extract_texture(image: &Image, corr: &UvCorrespondence) -> UVTexture {
    let mut out = UVTexture::empty(corr.size);
    let (w, h) = (image.width as f64, image.height as f64);
    for (i, p) in corr.pixel.iter().enumerate() {
        let Some(p) = p else { continue };
        if p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
            continue;
        }
        out.data.data[i] = image.sample(p.x, p.y);
        out.valid[i] = true;
    }
    out
}

/// Fills invalid texels inside `region` with the discrete harmonic
/// interpolant of their neighbours (successive over-relaxation until the
/// largest update is below 1e-4). Valid texels and flags are untouched.
pub fn inpaint_bilinear(texture: &UVTexture, region: Option<&UvMask>) -> UVTexture {
    let size = texture.size();
    let n = size * size;
    let unknown: Vec<bool> = (0..n)
        .map(|i| !texture.valid[i] && region.is_none_or(|m| m.data[i]))
        .collect();
    let mut out = texture.clone();
    let valid_count = texture.valid_count();
    if valid_count == 0 || !unknown.contains(&true) {
        return out;
    }
    let mean = texture
        .data
        .data
        .iter()
        .zip(&texture.valid)
        .filter(|(_, &v)| v)
        .fold(Rgb::zeros(), |acc, (c, _)| acc + c)
        / valid_count as f64;
    for i in 0..n {
        if unknown[i] {
            out.data.data[i] = mean;
        }
    }
    let known = |i: usize| texture.valid[i] || unknown[i];
    let omega = 2.0 / (1.0 + (std::f64::consts::PI / size as f64).sin());
    let cells: Vec<usize> = (0..n).filter(|&i| unknown[i]).collect();
    for _ in 0..20_000 {
        let mut max_change: f64 = 0.0;
        for &i in &cells {
            let (x, y) = (i % size, i / size);
            let mut sum = Rgb::zeros();
            let mut count = 0usize;
            for j in [
                (x > 0).then(|| i - 1),
                (x + 1 < size).then(|| i + 1),
                (y > 0).then(|| i - size),
                (y + 1 < size).then(|| i + size),
            ]
            .into_iter()
            .flatten()
            {
                if known(j) {
                    sum += out.data.data[j];
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let target = sum / count as f64;
            let delta = (target - out.data.data[i]) * omega;
            out.data.data[i] += delta;
            max_change = max_change.max(delta.amax());
        }
        if max_change < 1e-4 {
            break;
        }
    }
    out
}

/// Weighted per-texel average over the views that observe the texel.
/// Texels observed only with zero weight fall back to an unweighted mean.
pub fn fuse_views(textures: &[UVTexture], weights: &[Vec<f64>]) -> Result<UVTexture> {
    let first = textures.first().ok_or_else(|| Error::Empty("texture list".into()))?;
    let size = first.size();
    if textures.iter().any(|t| t.size() != size) {
        return Err(Error::ResolutionMismatch("fused textures differ in size".into()));
    }
    if weights.len() != textures.len() || weights.iter().any(|w| w.len() != size * size) {
        return Err(Error::DimensionMismatch("fusion weights do not match the textures".into()));
    }
    let mut out = UVTexture::empty(size);
    for i in 0..size * size {
        let (mut acc, mut wsum, mut plain, mut count) = (Rgb::zeros(), 0.0, Rgb::zeros(), 0usize);
        for (t, w) in textures.iter().zip(weights) {
            if t.valid[i] {
                acc += t.data.data[i] * w[i];
                wsum += w[i];
                plain += t.data.data[i];
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        out.valid[i] = true;
        out.data.data[i] = if wsum > 0.0 { acc / wsum } else { plain / count as f64 };
    }
    Ok(out)
}

/// `I_uv = M_face ⊙ I′_uv`; masked-out texels become invalid.
pub fn apply_face_mask(texture: &UVTexture, mask: &UvMask) -> Result<UVTexture> {
    if mask.size != texture.size() {
        return Err(Error::ResolutionMismatch(format!(
            "face mask {} vs texture {}",
            mask.size,
            texture.size()
        )));
    }
    let mut out = texture.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if !m {
            out.data.data[i] = Rgb::zeros();
            out.valid[i] = false;
        }
    }
    Ok(out)
}
