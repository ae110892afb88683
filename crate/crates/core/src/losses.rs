//! Loss terms of the multi-view objective and their gradients.
//!
//! Every term is a mean over its support (landmarks, pairs, covisible
//! pixels); L1 terms use `sign(0) = 0` as their subgradient.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::decoder::surface_point;
use crate::covis::BinaryMask;
use crate::error::{Error, Result};
use crate::flow::{mean_flow_magnitude, FlowField};
use crate::render::FrameBuffer;

/// Smoothing inside `√(Σx² + ε)` for the regularizer; only keeps the
/// gradient defined at exactly zero, and shifts values by at most ε/(2‖x‖).
pub const NORM_EPS: f64 = 1e-24;

/// Smoothing of the flow surrogate norm, px². Keeps its gradient bounded by
/// `|d| / 1e-3` near a zero residual, so an exact fit is numerically stationary.
pub const FLOW_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub multiop: f64,
    pub lmk: f64,
    pub eye: f64,
    pub lip: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            multiop: 1.0,
            lmk: 1.0,
            eye: 1.0,
            lip: 0.5,
            reg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        for (name, w) in [("multiop", self.multiop), ("lmk", self.lmk), ("eye", self.eye), ("lip", self.lip), ("reg", self.reg)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invariant("LossWeights", format!("λ_{name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub multiop: f64,
    pub lmk: f64,
    pub eye: f64,
    pub lip: f64,
    pub reg: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.multiop * terms.multiop + weights.lmk * terms.lmk + weights.eye * terms.eye + weights.lip * terms.lip + weights.reg * terms.reg
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub lmk: f64,
    pub eye: f64,
    pub lip: f64,
    pub included_landmarks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: usize,
    pub target: usize,
    pub flow: f64,
    pub covisible_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub per_view: Vec<ViewReport>,
    pub pairs: Vec<PairReport>,
}

impl LossReport {
    pub fn new(terms: LossTerms, weights: &LossWeights, per_view: Vec<ViewReport>, pairs: Vec<PairReport>) -> Self {
        Self {
            total: total_loss(&terms, weights),
            terms,
            per_view,
            pairs,
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn l1(v: &Vector2<f64>) -> f64 {
    v.x.abs() + v.y.abs()
}

/// Landmark `i` participates iff its observed pixel lies inside MF.
pub fn landmark_inclusion(observed: &[Vector2<f64>], mf: &BinaryMask) -> Vec<bool> {
    observed
        .iter()
        .map(|p| {
            if p.x < 0.0 || p.y < 0.0 || p.x >= mf.width as f64 || p.y >= mf.height as f64 {
                return false;
            }
            mf.data[p.y.floor() as usize * mf.width + p.x.floor() as usize]
        })
        .collect()
}

/// Mean L1 reprojection error over included landmarks, and its gradient
/// with respect to `projected`.
pub fn landmark_loss_grad(observed: &[Vector2<f64>], projected: &[Vector2<f64>], include: &[bool]) -> (f64, Vec<Vector2<f64>>) {
    let mut grad = vec![Vector2::zeros(); projected.len()];
    let count = include.iter().filter(|&&b| b).count();
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..observed.len() {
        if !include[i] {
            continue;
        }
        let d = observed[i] - projected[i];
        sum += l1(&d);
        grad[i] = -Vector2::new(sign(d.x), sign(d.y)) * inv;
    }
    (sum * inv, grad)
}

pub fn landmark_loss(observed: &[Vector2<f64>], projected: &[Vector2<f64>], include: &[bool]) -> f64 {
    landmark_loss_grad(observed, projected, include).0
}

/// Mean L1 mismatch of relative offsets over index pairs (eyelids, lips),
/// and its gradient with respect to `projected`.
pub fn pair_offset_loss_grad(observed: &[Vector2<f64>], projected: &[Vector2<f64>], pairs: &[(usize, usize)]) -> (f64, Vec<Vector2<f64>>) {
    let mut grad = vec![Vector2::zeros(); projected.len()];
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut sum = 0.0;
    for &(i, j) in pairs {
        let d = (observed[i] - observed[j]) - (projected[i] - projected[j]);
        sum += l1(&d);
        let s = Vector2::new(sign(d.x), sign(d.y)) * inv;
        grad[i] -= s;
        grad[j] += s;
    }
    (sum * inv, grad)
}

pub fn eye_loss(observed: &[Vector2<f64>], projected: &[Vector2<f64>], eye_pairs: &[(usize, usize)]) -> f64 {
    pair_offset_loss_grad(observed, projected, eye_pairs).0
}

pub fn lip_loss(observed: &[Vector2<f64>], projected: &[Vector2<f64>], lip_pairs: &[(usize, usize)]) -> f64 {
    pair_offset_loss_grad(observed, projected, lip_pairs).0
}

fn smooth_norm_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let n = (x.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
    (n, x.iter().map(|v| v / n).collect())
}

/// `‖β‖ + ‖ψ‖ + ‖α‖` with ε-smoothed Euclidean norms, and the three gradients.
pub fn reg_loss_grad(beta: &[f64], psi: &[f64], alpha: &[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (nb, gb) = smooth_norm_grad(beta);
    let (np, gp) = smooth_norm_grad(psi);
    let (na, ga) = smooth_norm_grad(alpha);
    (nb + np + na, gb, gp, ga)
}

pub fn reg_loss(beta: &[f64], psi: &[f64], alpha: &[f64]) -> f64 {
    reg_loss_grad(beta, psi, alpha).0
}

/// Mean over ordered view pairs of the mean flow magnitude on each pair's
/// covisible mask. Returns the value and per-pair pixel counts.
pub fn multiview_flow_loss(pairs: &[(FlowField, BinaryMask)]) -> Result<(f64, Vec<usize>)> {
    if pairs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut sum = 0.0;
    let mut counts = Vec::with_capacity(pairs.len());
    for (flow, mask) in pairs {
        let (m, c) = mean_flow_magnitude(flow, mask)?;
        sum += m;
        counts.push(c);
    }
    Ok((sum / pairs.len() as f64, counts))
}

/// One covisible cross-render pixel frozen for the flow surrogate: the
/// surface point it shows and where the flow says that point belongs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowTarget {
    pub triangle: usize,
    pub bary: [f64; 3],
    pub target: Vector2<f64>,
}

/// Freezes the flow of one view pair into surrogate targets: every pixel `q`
/// of the cross-render that is covisible and has a valid flow contributes
/// its surface point and the target `q + F(q)`.
pub fn flow_targets(cross: &FrameBuffer, flow: &FlowField, mask: &BinaryMask) -> Vec<FlowTarget> {
    let mut out = Vec::new();
    for y in 0..cross.height {
        for x in 0..cross.width {
            let i = y * cross.width + x;
            let Some(t) = cross.covered(i) else { continue };
            if !(flow.valid[i] && mask.data[i]) {
                continue;
            }
            out.push(FlowTarget {
                triangle: t,
                bary: cross.barycentric[i],
                target: Vector2::new(x as f64 + 0.5, y as f64 + 0.5) + flow.at(i),
            });
        }
    }
    out
}

/// Fixed-flow surrogate `mean ‖π(X_q) − target_q‖` for one pair, with the
/// gradient of the mean with respect to each projected point `π(X_q)`.
/// The value is exact; the gradient uses `√(‖d‖² + FLOW_EPS)`.
pub fn flow_surrogate_grad(
    targets: &[FlowTarget],
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
) -> (f64, Vec<Vector2<f64>>) {
    if targets.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / targets.len() as f64;
    let mut sum = 0.0;
    let grads = targets
        .iter()
        .map(|t| {
            let x = surface_point(vertices, &faces[t.triangle], &t.bary);
            let d = camera.project_point(&x).pixel - t.target;
            sum += d.norm();
            d * (inv / (d.norm_squared() + FLOW_EPS).sqrt())
        })
        .collect();
    (sum * inv, grads)
}
