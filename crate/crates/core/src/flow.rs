//! Dense optical flow: a pyramidal Lucas–Kanade estimator, a rasterizer-based
//! oracle for synthetic scenes, and the flow-magnitude reduction.
//!
//! Convention: for a flow `F` from `source` to `target`,
//! `source(p) ≈ target(p + F(p))`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::covis::BinaryMask;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::FrameBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize, valid: bool) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            valid: vec![valid; n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.u[i], self.v[i])
    }

    /// Middlebury colour-wheel visualisation, normalized by the largest valid magnitude.
    pub fn to_color(&self) -> image::RgbImage {
        let wheel = color_wheel();
        let max = (0..self.u.len())
            .filter(|&i| self.valid[i])
            .map(|i| self.at(i).norm())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            if !self.valid[i] {
                return image::Rgb([0, 0, 0]);
            }
            let (u, v) = (self.u[i] / max, self.v[i] / max);
            let rad = (u * u + v * v).sqrt().min(1.0);
            let angle = (-v).atan2(-u) / std::f64::consts::PI;
            let fk = (angle + 1.0) / 2.0 * (wheel.len() - 1) as f64;
            let k0 = fk.floor() as usize;
            let k1 = (k0 + 1) % wheel.len();
            let f = fk - k0 as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                px[c] = ((1.0 - rad * (1.0 - col)) * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    pub fn save_color_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_color().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn color_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(ry + yg + gc + cb + bm + mr);
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w
}

/// Dense flow estimator interface.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, source: &Image, target: &Image) -> Result<FlowField>;
}

/// Squared update length (px²) below which a pixel's iterations stop early.
const CONVERGED_STEP2: f64 = 1e-6;

/// Pyramidal Lucas–Kanade parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LucasKanade {
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
    /// Smallest structure-tensor eigenvalue per window pixel for a valid estimate.
    pub min_eigenvalue: f64,
}

impl Default for LucasKanade {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 11,
            iterations: 3,
            min_eigenvalue: 1e-6,
        }
    }
}

impl FlowEstimator for LucasKanade {
    fn estimate(&self, source: &Image, target: &Image) -> Result<FlowField> {
        estimate_flow_lk(source, target, self.levels, self.window, self.iterations, self.min_eigenvalue)
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let xf = x.clamp(0.0, (self.w - 1) as f64);
        let yf = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (xf - x0 as f64, yf - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn downsample(&self) -> Plane {
        let (w, h) = ((self.w / 2).max(1), (self.h / 2).max(1));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xa, ya) = ((2 * x).min(self.w - 1), (2 * y).min(self.h - 1));
                let (xb, yb) = ((2 * x + 1).min(self.w - 1), (2 * y + 1).min(self.h - 1));
                data.push(0.25 * (self.get(xa, ya) + self.get(xb, ya) + self.get(xa, yb) + self.get(xb, yb)));
            }
        }
        Plane { w, h, data }
    }

    /// Central-difference gradients (one-sided at the border).
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; self.w * self.h];
        let mut gy = vec![0.0; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(self.w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(self.h - 1));
                let i = y * self.w + x;
                if xr > xl {
                    gx[i] = (self.get(xr, y) - self.get(xl, y)) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy[i] = (self.get(x, yd) - self.get(x, yu)) / (yd - yu) as f64;
                }
            }
        }
        (gx, gy)
    }
}

/// Summed-area table for O(1) clipped window sums.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(data: &[f64], w: usize, h: usize) -> Self {
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += data[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    #[inline]
    fn window(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

fn luma_plane(img: &Image) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        data: img.luma(),
    }
}

/// Coarse-to-fine Lucas–Kanade with box windows. Every level runs
/// `iterations` Gauss–Newton updates per pixel using the source-image
/// structure tensor. Flows longer than `(window/2)·2^levels` are marked
/// invalid.
pub fn estimate_flow_lk(
    source: &Image,
    target: &Image,
    levels: usize,
    window: usize,
    iterations: usize,
    min_eigenvalue: f64,
) -> Result<FlowField> {
    if !source.same_size(target) {
        return Err(Error::ResolutionMismatch(format!(
            "flow inputs {}x{} vs {}x{}",
            source.width, source.height, target.width, target.height
        )));
    }
    if source.width == 0 || source.height == 0 {
        return Err(Error::Empty("flow input image".into()));
    }
    let levels = levels.max(1);
    let mut src = vec![luma_plane(source)];
    let mut tgt = vec![luma_plane(target)];
    for _ in 1..levels {
        let (s, t) = (src.last().unwrap().downsample(), tgt.last().unwrap().downsample());
        src.push(s);
        tgt.push(t);
    }
    let r = window / 2;

    let (mut u, mut v) = (Vec::new(), Vec::new());
    let mut valid = Vec::new();
    for level in (0..levels).rev() {
        let (s, t) = (&src[level], &tgt[level]);
        let (w, h) = (s.w, s.h);
        // upsample the coarser estimate
        if u.is_empty() {
            u = vec![0.0; w * h];
            v = vec![0.0; w * h];
        } else {
            let (pw, ph) = (src[level + 1].w, src[level + 1].h);
            let (pu, pv) = (std::mem::take(&mut u), std::mem::take(&mut v));
            u = Vec::with_capacity(w * h);
            v = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let j = (y / 2).min(ph - 1) * pw + (x / 2).min(pw - 1);
                    u.push(2.0 * pu[j]);
                    v.push(2.0 * pv[j]);
                }
            }
        }
        let (gx, gy) = s.gradients();
        let gxx: Vec<f64> = gx.iter().map(|a| a * a).collect();
        let gxy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
        let gyy: Vec<f64> = gy.iter().map(|a| a * a).collect();
        let (ixx, ixy, iyy) = (Integral::new(&gxx, w, h), Integral::new(&gxy, w, h), Integral::new(&gyy, w, h));
        let bounds = |x: usize, y: usize| (x.saturating_sub(r), y.saturating_sub(r), (x + r + 1).min(w), (y + r + 1).min(h));

        valid = vec![false; w * h];
        let mut inverse = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                let (x0, y0, x1, y1) = bounds(x, y);
                let area = ((x1 - x0) * (y1 - y0)) as f64;
                let (a, b, c) = (ixx.window(x0, y0, x1, y1), ixy.window(x0, y0, x1, y1), iyy.window(x0, y0, x1, y1));
                let tr = 0.5 * (a + c);
                let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                let min_eig = (tr - disc) / area;
                let i = y * w + x;
                valid[i] = min_eig >= min_eigenvalue;
                let det = a * c - b * b;
                if valid[i] && det > 0.0 {
                    inverse[i] = Some((c / det, -b / det, a / det));
                }
            }
        }
        // Gauss–Newton on each window with the centre pixel's current flow.
        let next: Vec<(f64, f64)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (mut du, mut dv) = (u[i], v[i]);
                let Some((p, q, rr)) = inverse[i] else { return (du, dv) };
                let (x, y) = (i % w, i / w);
                let (x0, y0, x1, y1) = bounds(x, y);
                for _ in 0..iterations {
                    let (mut bx, mut by) = (0.0, 0.0);
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let j = yy * w + xx;
                            let e = t.sample(xx as f64 + du, yy as f64 + dv) - s.data[j];
                            bx += gx[j] * e;
                            by += gy[j] * e;
                        }
                    }
                    let (su, sv) = (p * bx + q * by, q * bx + rr * by);
                    du -= su;
                    dv -= sv;
                    if su * su + sv * sv < CONVERGED_STEP2 {
                        break;
                    }
                }
                (du, dv)
            })
            .collect();
        for (i, (a, b)) in next.into_iter().enumerate() {
            u[i] = a;
            v[i] = b;
        }
    }
    // Displacements beyond what the pyramid can capture are divergence.
    let reach = (r.max(1) << levels) as f64;
    for i in 0..u.len() {
        if !valid[i] || !u[i].is_finite() || !v[i].is_finite() || u[i].hypot(v[i]) > reach {
            valid[i] = false;
            u[i] = 0.0;
            v[i] = 0.0;
        }
    }
    Ok(FlowField {
        width: source.width,
        height: source.height,
        u,
        v,
        valid,
    })
}

/// Ground-truth flow from a render `current` of the mesh `current_vertices`
/// in `camera` to the same camera's view of `reference_vertices`
/// (`reference` is that view's framebuffer). Each covered pixel's surface
/// point keeps its triangle and barycentrics; pixels whose reference point is
/// hidden or behind the camera are invalid.
pub fn oracle_flow(
    reference: &FrameBuffer,
    current: &FrameBuffer,
    reference_vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
) -> FlowField {
    let mut flow = FlowField::zeros(current.width, current.height, false);
    for y in 0..current.height {
        for x in 0..current.width {
            let i = y * current.width + x;
            let Some(t) = current.covered(i) else { continue };
            let b = current.barycentric[i];
            let f = faces[t];
            let xr = reference_vertices[f[0]] * b[0] + reference_vertices[f[1]] * b[1] + reference_vertices[f[2]] * b[2];
            if !crate::render::point_visible(reference, reference_vertices, faces, camera, &xr, crate::texture::VISIBILITY_EPS) {
                continue;
            }
            let p = camera.project_point(&xr).pixel;
            flow.u[i] = p.x - (x as f64 + 0.5);
            flow.v[i] = p.y - (y as f64 + 0.5);
            flow.valid[i] = true;
        }
    }
    flow
}

/// Mean of `|F|` over pixels that are valid and inside `mask`, plus their count.
pub fn mean_flow_magnitude(flow: &FlowField, mask: &BinaryMask) -> Result<(f64, usize)> {
    if flow.width != mask.width || flow.height != mask.height {
        return Err(Error::ResolutionMismatch("flow vs mask".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..flow.u.len() {
        if flow.valid[i] && mask.data[i] {
            sum += flow.u[i].hypot(flow.v[i]);
            count += 1;
        }
    }
    Ok(if count == 0 { (0.0, 0) } else { (sum / count as f64, count) })
}
