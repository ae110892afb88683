//! Head-model decoder: blendshapes, joint regression, pose correctives and
//! linear blend skinning, plus the matching reverse-mode pass.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::assets::{Blendshapes, DenseMatrix, FlameAssets, LandmarkBinding};
use crate::error::{Error, Result};
use crate::rotation::rodrigues_with_jacobian;

/// Shape, per-joint axis-angle pose (root first) and expression coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlameParams {
    pub beta: Vec<f64>,
    pub theta: Vec<Vector3<f64>>,
    pub psi: Vec<f64>,
}

impl FlameParams {
    pub fn zeros(assets: &FlameAssets) -> Self {
        Self {
            beta: vec![0.0; assets.n_shape()],
            theta: vec![Vector3::zeros(); assets.n_joints()],
            psi: vec![0.0; assets.n_expr()],
        }
    }

    pub fn check(&self, assets: &FlameAssets) -> Result<()> {
        if self.beta.len() != assets.n_shape() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries, model expects {}",
                self.beta.len(),
                assets.n_shape()
            )));
        }
        if self.psi.len() != assets.n_expr() {
            return Err(Error::DimensionMismatch(format!(
                "psi has {} entries, model expects {}",
                self.psi.len(),
                assets.n_expr()
            )));
        }
        if self.theta.len() != assets.n_joints() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} joints, model expects {}",
                self.theta.len(),
                assets.n_joints()
            )));
        }
        Ok(())
    }

    /// Same parameters with the root rotation removed.
    pub fn without_root(&self) -> Self {
        let mut p = self.clone();
        if let Some(r) = p.theta.first_mut() {
            *r = Vector3::zeros();
        }
        p
    }
}

/// Posed vertices with area-weighted unit vertex normals.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub vertex_normals: Vec<Vector3<f64>>,
}

/// `T̄ + S·β + E·ψ`.
pub fn shaped_template(assets: &FlameAssets, beta: &[f64], psi: &[f64]) -> Result<Vec<Vector3<f64>>> {
    if beta.len() != assets.n_shape() || psi.len() != assets.n_expr() {
        return Err(Error::DimensionMismatch(format!(
            "got {} shape / {} expression coefficients, model has {} / {}",
            beta.len(),
            psi.len(),
            assets.n_shape(),
            assets.n_expr()
        )));
    }
    let mut out = assets.template.clone();
    assets.shape_basis.accumulate(beta, &mut out);
    assets.expr_basis.accumulate(psi, &mut out);
    Ok(out)
}

/// Flattened `(R_k - I)` for every non-root joint, row-major per joint.
fn pose_feature(rotations: &[Matrix3<f64>]) -> Vec<f64> {
    let mut feat = Vec::with_capacity(9 * rotations.len().saturating_sub(1));
    for r in rotations.iter().skip(1) {
        let d = r - Matrix3::identity();
        for row in 0..3 {
            for col in 0..3 {
                feat.push(d[(row, col)]);
            }
        }
    }
    feat
}

/// Pose-corrective displacement driven by the non-root joint rotations.
pub fn pose_correctives(assets: &FlameAssets, theta: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let rotations: Vec<Matrix3<f64>> = theta.iter().map(|w| rodrigues_with_jacobian(w).0).collect();
    correctives_from_rotations(&assets.pose_basis, &rotations, assets.n_vertices())
}

fn correctives_from_rotations(
    basis: &Blendshapes,
    rotations: &[Matrix3<f64>],
    n_vertices: usize,
) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); n_vertices];
    let feat = pose_feature(rotations);
    if !feat.is_empty() {
        basis.accumulate(&feat, &mut out);
    }
    out
}

/// `J = regressor · vertices`.
pub fn regress_joints(regressor: &DenseMatrix, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    (0..regressor.rows)
        .map(|k| {
            regressor
                .row(k)
                .iter()
                .zip(vertices)
                .map(|(w, v)| v * *w)
                .sum()
        })
        .collect()
}

/// World transforms of every joint: `x ↦ A_k (x − J_k) + t_k`.
/// Skinning adds `Σ_k w_k [(A_k − I)(x − J_k) + (t_k − J_k)]` onto `x`, which
/// equals the usual weighted sum for convex weights and is exact at rest.
struct JointTransforms {
    local: Vec<Matrix3<f64>>,
    local_deriv: Vec<[Matrix3<f64>; 3]>,
    world_rot: Vec<Matrix3<f64>>,
    world_trans: Vec<Vector3<f64>>,
}

fn joint_transforms(
    joints: &[Vector3<f64>],
    theta: &[Vector3<f64>],
    parents: &[Option<usize>],
) -> JointTransforms {
    let k = parents.len();
    let mut local = Vec::with_capacity(k);
    let mut local_deriv = Vec::with_capacity(k);
    for w in theta {
        let (r, d) = rodrigues_with_jacobian(w);
        local.push(r);
        local_deriv.push(d);
    }
    let mut world_rot = Vec::with_capacity(k);
    let mut world_trans = Vec::with_capacity(k);
    for j in 0..k {
        match parents[j] {
            None => {
                world_rot.push(local[j]);
                world_trans.push(joints[j]);
            }
            Some(p) => {
                let a: Matrix3<f64> = world_rot[p] * local[j];
                let t: Vector3<f64> = world_rot[p] * (joints[j] - joints[p]) + world_trans[p];
                world_rot.push(a);
                world_trans.push(t);
            }
        }
    }
    JointTransforms {
        local,
        local_deriv,
        world_rot,
        world_trans,
    }
}

fn skin(
    rest: &[Vector3<f64>],
    joints: &[Vector3<f64>],
    weights: &DenseMatrix,
    xf: &JointTransforms,
) -> Vec<Vector3<f64>> {
    rest.iter()
        .enumerate()
        .map(|(v, x)| {
            let mut out = Vector3::zeros();
            for (k, w) in weights.row(v).iter().enumerate() {
                if *w != 0.0 {
                    let local = x - joints[k];
                    out += *w * ((xf.world_rot[k] * local - local) + (xf.world_trans[k] - joints[k]));
                }
            }
            x + out
        })
        .collect()
}

/// Linear blend skinning of rest-pose vertices (correctives already added).
pub fn lbs(
    shaped_vertices: &[Vector3<f64>],
    joints: &[Vector3<f64>],
    theta: &[Vector3<f64>],
    skinning_weights: &DenseMatrix,
    parents: &[Option<usize>],
) -> Vec<Vector3<f64>> {
    let xf = joint_transforms(joints, theta, parents);
    skin(shaped_vertices, joints, skinning_weights, &xf)
}

/// Unnormalized area-weighted normal accumulators (sum of face cross products).
fn normal_accumulators(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let c = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        for &i in f {
            acc[i] += c;
        }
    }
    acc
}

pub fn vertex_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    normal_accumulators(vertices, faces)
        .into_iter()
        .map(|m| {
            let n = m.norm();
            if n > 0.0 {
                m / n
            } else {
                Vector3::z()
            }
        })
        .collect()
}

/// Pulls a gradient on unit vertex normals back onto vertex positions.
pub fn vertex_normals_backward(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    grad_normals: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let acc = normal_accumulators(vertices, faces);
    let grad_acc: Vec<Vector3<f64>> = acc
        .iter()
        .zip(grad_normals)
        .map(|(m, g)| {
            let len = m.norm();
            if len == 0.0 {
                return Vector3::zeros();
            }
            let n = m / len;
            (g - n * n.dot(g)) / len
        })
        .collect();
    let mut out = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let gc: Vector3<f64> = f.iter().map(|&i| grad_acc[i]).sum();
        let e1 = vertices[f[1]] - vertices[f[0]];
        let e2 = vertices[f[2]] - vertices[f[0]];
        let g1 = e2.cross(&gc);
        let g2 = gc.cross(&e1);
        out[f[1]] += g1;
        out[f[2]] += g2;
        out[f[0]] -= g1 + g2;
    }
    out
}

/// Intermediates kept from a forward decode for the reverse pass.
pub struct DecodeTape {
    rest: Vec<Vector3<f64>>,
    joints: Vec<Vector3<f64>>,
    transforms: JointTransforms,
}

/// Gradient of a scalar with respect to the decoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub beta: Vec<f64>,
    pub theta: Vec<Vector3<f64>>,
    pub psi: Vec<f64>,
}

/// Full decode `M(β, θ, ψ)`.
pub fn decode(assets: &FlameAssets, params: &FlameParams) -> Result<PosedMesh> {
    decode_with_tape(assets, params).map(|(m, _)| m)
}

pub fn decode_with_tape(assets: &FlameAssets, params: &FlameParams) -> Result<(PosedMesh, DecodeTape)> {
    params.check(assets)?;
    let shaped = shaped_template(assets, &params.beta, &params.psi)?;
    let joints = regress_joints(&assets.joint_regressor, &shaped);
    let transforms = joint_transforms(&joints, &params.theta, &assets.kinematic_parents);
    let correctives = correctives_from_rotations(&assets.pose_basis, &transforms.local, assets.n_vertices());
    let rest: Vec<Vector3<f64>> = shaped.iter().zip(&correctives).map(|(s, c)| s + c).collect();
    let vertices = skin(&rest, &joints, &assets.skinning_weights, &transforms);
    let vertex_normals = vertex_normals(&vertices, &assets.faces);
    Ok((
        PosedMesh {
            vertices,
            vertex_normals,
        },
        DecodeTape {
            rest,
            joints,
            transforms,
        },
    ))
}

/// Reverse pass: maps `dL/d(vertices)` to `dL/d(β, θ, ψ)`.
pub fn decode_backward(assets: &FlameAssets, tape: &DecodeTape, grad_vertices: &[Vector3<f64>]) -> ParamGrad {
    let k = assets.n_joints();
    let xf = &tape.transforms;
    let weights = &assets.skinning_weights;

    let mut g_rest = grad_vertices.to_vec();
    let mut g_a = vec![Matrix3::zeros(); k];
    let mut g_t = vec![Vector3::zeros(); k];
    let mut g_joints = vec![Vector3::zeros(); k];
    for (v, g) in grad_vertices.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        for (j, w) in weights.row(v).iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let wg = g * *w;
            g_rest[v] += (xf.world_rot[j] - Matrix3::identity()).transpose() * wg;
            g_a[j] += wg * (tape.rest[v] - tape.joints[j]).transpose();
            g_t[j] += wg;
            g_joints[j] -= xf.world_rot[j].transpose() * wg;
        }
    }

    let mut g_local = vec![Matrix3::zeros(); k];
    for j in (0..k).rev() {
        match assets.kinematic_parents[j] {
            None => {
                g_local[j] += g_a[j];
                g_joints[j] += g_t[j];
            }
            Some(p) => {
                let ap = xf.world_rot[p];
                let ga = g_a[j];
                let gt = g_t[j];
                g_a[p] += ga * xf.local[j].transpose() + gt * (tape.joints[j] - tape.joints[p]).transpose();
                g_local[j] += ap.transpose() * ga;
                let gj = ap.transpose() * gt;
                g_joints[j] += gj;
                g_joints[p] -= gj;
                g_t[p] += gt;
            }
        }
    }

    if k > 1 {
        let g_feat = assets.pose_basis.transpose_apply(&g_rest);
        for j in 1..k {
            for row in 0..3 {
                for col in 0..3 {
                    g_local[j][(row, col)] += g_feat[9 * (j - 1) + 3 * row + col];
                }
            }
        }
    }

    let theta = (0..k)
        .map(|j| {
            let d = &xf.local_deriv[j];
            Vector3::new(
                g_local[j].component_mul(&d[0]).sum(),
                g_local[j].component_mul(&d[1]).sum(),
                g_local[j].component_mul(&d[2]).sum(),
            )
        })
        .collect();

    let mut g_shaped = g_rest;
    for j in 0..k {
        for (v, w) in assets.joint_regressor.row(j).iter().enumerate() {
            if *w != 0.0 {
                g_shaped[v] += g_joints[j] * *w;
            }
        }
    }
    ParamGrad {
        beta: assets.shape_basis.transpose_apply(&g_shaped),
        theta,
        psi: assets.expr_basis.transpose_apply(&g_shaped),
    }
}

pub fn surface_point(vertices: &[Vector3<f64>], face: &[usize; 3], bary: &[f64; 3]) -> Vector3<f64> {
    vertices[face[0]] * bary[0] + vertices[face[1]] * bary[1] + vertices[face[2]] * bary[2]
}

/// Barycentric landmark positions on the posed mesh.
pub fn embed_landmarks(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    embedding: &[LandmarkBinding],
) -> Vec<Vector3<f64>> {
    embedding
        .iter()
        .map(|lm| surface_point(vertices, &faces[lm.face], &lm.bary))
        .collect()
}

/// Scatters landmark gradients back onto the vertices they interpolate.
pub fn embed_landmarks_backward(
    faces: &[[usize; 3]],
    embedding: &[LandmarkBinding],
    grad_landmarks: &[Vector3<f64>],
    grad_vertices: &mut [Vector3<f64>],
) {
    for (lm, g) in embedding.iter().zip(grad_landmarks) {
        let f = faces[lm.face];
        for i in 0..3 {
            grad_vertices[f[i]] += g * lm.bary[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mini::make_mini_model;
    use crate::rotation::rodrigues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(assets: &FlameAssets, rng: &mut ChaCha8Rng, pose_scale: f64) -> FlameParams {
        let pose_scale = pose_scale.max(1e-12);
        FlameParams {
            beta: (0..assets.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            theta: (0..assets.n_joints())
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-pose_scale..pose_scale),
                        rng.gen_range(-pose_scale..pose_scale),
                        rng.gen_range(-pose_scale..pose_scale),
                    )
                })
                .collect(),
            psi: (0..assets.n_expr()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Triple-loop tensor contraction, independent of `Blendshapes::accumulate`.
    fn dense_shaped(assets: &FlameAssets, beta: &[f64], psi: &[f64]) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        for v in 0..assets.n_vertices() {
            let mut p = assets.template[v];
            for a in 0..3 {
                for (k, b) in beta.iter().enumerate() {
                    p[a] += assets.shape_basis.get(v, a, k) * b;
                }
                for (k, e) in psi.iter().enumerate() {
                    p[a] += assets.expr_basis.get(v, a, k) * e;
                }
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_params_decode_to_template() {
        let a = make_mini_model(0);
        let mesh = decode(&a, &FlameParams::zeros(&a)).unwrap();
        for (p, t) in mesh.vertices.iter().zip(&a.template) {
            assert!((p - t).norm() < 1e-15);
        }
        assert_eq!(mesh.vertices, a.template);
        assert_eq!(mesh.vertex_normals, vertex_normals(&a.template, &a.faces));
    }

    #[test]
    fn shaped_template_linearity_and_oracle() {
        let a = make_mini_model(1);
        let zero_b = vec![0.0; a.n_shape()];
        let zero_p = vec![0.0; a.n_expr()];
        assert_eq!(shaped_template(&a, &zero_b, &zero_p).unwrap(), a.template);

        let mut e1 = zero_b.clone();
        e1[0] = 1.0;
        let s = shaped_template(&a, &e1, &zero_p).unwrap();
        for v in 0..a.n_vertices() {
            for ax in 0..3 {
                let expected = a.template[v][ax] + a.shape_basis.get(v, ax, 0);
                assert!((s[v][ax] - expected).abs() < 1e-15);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&a, &mut rng, 0.0);
        let s = shaped_template(&a, &p.beta, &p.psi).unwrap();
        for (x, y) in s.iter().zip(dense_shaped(&a, &p.beta, &p.psi)) {
            assert!((x - y).norm() < 1e-14);
        }
        assert!(shaped_template(&a, &[0.0], &zero_p).is_err());
    }

    #[test]
    fn shaped_template_affine_combination() {
        let a = make_mini_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b1: Vec<f64> = (0..a.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..a.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let psi: Vec<f64> = (0..a.n_expr()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zb = vec![0.0; a.n_shape()];
        let zp = vec![0.0; a.n_expr()];
        let (ca, cb) = (0.7, -1.3);
        let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| ca * x + cb * y).collect();
        let lhs = shaped_template(&a, &mix, &psi).unwrap();
        let s1 = shaped_template(&a, &b1, &zp).unwrap();
        let s2 = shaped_template(&a, &b2, &zp).unwrap();
        let sp = shaped_template(&a, &zb, &psi).unwrap();
        let s0 = shaped_template(&a, &zb, &zp).unwrap();
        for v in 0..a.n_vertices() {
            let rhs = s1[v] * ca + s2[v] * cb + sp[v] - s0[v] * (ca + cb);
            assert!((lhs[v] - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_correctives_follow_convention() {
        let a = make_mini_model(0);
        assert!(pose_correctives(&a, &[Vector3::zeros(); 2]).iter().all(|d| *d == Vector3::zeros()));
        let root_only = [Vector3::new(0.3, -0.2, 0.5), Vector3::zeros()];
        assert!(pose_correctives(&a, &root_only).iter().all(|d| d.norm() == 0.0));

        let jaw = Vector3::new(0.25, 0.05, -0.1);
        let got = pose_correctives(&a, &[Vector3::zeros(), jaw]);
        let rm = rodrigues(&jaw) - Matrix3::identity();
        for v in 0..a.n_vertices() {
            for ax in 0..3 {
                let mut expected = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        expected += a.pose_basis.get(v, ax, 3 * r + c) * rm[(r, c)];
                    }
                }
                assert!((got[v][ax] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_regression_selection_mean_and_oracle() {
        let verts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, -1.0)).collect();
        let mut reg = DenseMatrix::zeros(2, 5);
        reg.set(0, 3, 1.0);
        for v in 0..5 {
            reg.set(1, v, 0.2);
        }
        let j = regress_joints(&reg, &verts);
        assert_eq!(j[0], verts[3]);
        assert!((j[1] - Vector3::new(2.0, 4.0, -1.0)).norm() < 1e-15);

        let a = make_mini_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&a, &mut rng, 0.0);
        let s = shaped_template(&a, &p.beta, &p.psi).unwrap();
        let j = regress_joints(&a.joint_regressor, &s);
        for k in 0..a.n_joints() {
            let mut e = Vector3::zeros();
            for v in 0..a.n_vertices() {
                e += s[v] * a.joint_regressor.get(k, v);
            }
            assert!((j[k] - e).norm() < 1e-15);
        }
    }

    #[test]
    fn lbs_identity_rigid_and_weight_independence() {
        let a = make_mini_model(0);
        let joints = regress_joints(&a.joint_regressor, &a.template);
        let posed = lbs(&a.template, &joints, &[Vector3::zeros(); 2], &a.skinning_weights, &a.kinematic_parents);
        assert_eq!(posed, a.template);

        // Single joint with all weight: rigid rotation about the joint.
        let mut w = DenseMatrix::zeros(a.n_vertices(), 1);
        for v in 0..a.n_vertices() {
            w.set(v, 0, 1.0);
        }
        let rot = Vector3::new(0.4, -0.7, 0.2);
        let j0 = vec![Vector3::new(0.01, -0.02, 0.03)];
        let posed = lbs(&a.template, &j0, &[rot], &w, &[None]);
        let r = rodrigues(&rot);
        for (p, x) in posed.iter().zip(&a.template) {
            assert!((p - (r * (x - j0[0]) + j0[0])).norm() < 1e-15);
        }

        // Vertices without jaw weight ignore the jaw rotation.
        let p1 = lbs(&a.template, &joints, &[Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0)], &a.skinning_weights, &a.kinematic_parents);
        for v in 0..a.n_vertices() {
            if a.skinning_weights.get(v, 1) == 0.0 {
                assert_eq!(p1[v], a.template[v]);
            }
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        let a = make_mini_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&a, &mut rng, 0.3);
        p.theta[0] = Vector3::zeros();
        let base = decode(&a, &p).unwrap();
        let shaped = shaped_template(&a, &p.beta, &p.psi).unwrap();
        let root = regress_joints(&a.joint_regressor, &shaped)[0];
        let w = Vector3::new(0.5, 1.1, -0.4);
        p.theta[0] = w;
        let rotated = decode(&a, &p).unwrap();
        let r = rodrigues(&w);
        for v in 0..a.n_vertices() {
            assert!((rotated.vertices[v] - (r * (base.vertices[v] - root) + root)).norm() < 1e-9);
            assert!((rotated.vertex_normals[v] - r * base.vertex_normals[v]).norm() < 1e-9);
        }
    }

    #[test]
    fn outputs_finite_up_to_half_turn() {
        let a = make_mini_model(0);
        let mut p = FlameParams::zeros(&a);
        p.theta[0] = Vector3::new(0.0, std::f64::consts::PI, 0.0);
        p.theta[1] = Vector3::new(std::f64::consts::PI, 0.0, 0.0);
        let m = decode(&a, &p).unwrap();
        assert!(m.vertices.iter().all(|v| v.iter().all(|x| x.is_finite())));
        for n in &m.vertex_normals {
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn landmarks_are_barycentric_combinations() {
        let a = make_mini_model(0);
        let lm = embed_landmarks(&a.template, &a.faces, &a.landmark_embedding);
        for (p, b) in lm.iter().zip(&a.landmark_embedding) {
            let f = a.faces[b.face];
            let e = a.template[f[0]] * b.bary[0] + a.template[f[1]] * b.bary[1] + a.template[f[2]] * b.bary[2];
            assert!((p - e).norm() < 1e-16);
        }
        let single = [LandmarkBinding { face: 5, bary: [1.0, 0.0, 0.0] }];
        assert_eq!(embed_landmarks(&a.template, &a.faces, &single)[0], a.template[a.faces[5][0]]);
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let a = make_mini_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&a, &mut rng, 0.4);
        let weights: Vec<Vector3<f64>> = (0..a.n_vertices())
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let objective = |p: &FlameParams| -> f64 {
            decode(&a, p).unwrap().vertices.iter().zip(&weights).map(|(v, w)| v.dot(w)).sum()
        };
        let (_, tape) = decode_with_tape(&a, &p).unwrap();
        let g = decode_backward(&a, &tape, &weights);
        let h = 1e-6;
        let check = |analytic: f64, fd: f64| {
            assert!((analytic - fd).abs() <= 1e-6 * analytic.abs().max(1e-3), "{analytic} vs {fd}");
        };
        for i in 0..a.n_shape() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.beta[i] += h;
            pm.beta[i] -= h;
            check(g.beta[i], (objective(&pp) - objective(&pm)) / (2.0 * h));
        }
        for i in 0..a.n_expr() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.psi[i] += h;
            pm.psi[i] -= h;
            check(g.psi[i], (objective(&pp) - objective(&pm)) / (2.0 * h));
        }
        for j in 0..a.n_joints() {
            for c in 0..3 {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.theta[j][c] += h;
                pm.theta[j][c] -= h;
                check(g.theta[j][c], (objective(&pp) - objective(&pm)) / (2.0 * h));
            }
        }
    }

    #[test]
    fn normals_backward_matches_finite_differences() {
        let a = make_mini_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let verts: Vec<Vector3<f64>> = a
            .template
            .iter()
            .map(|v| v + Vector3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)))
            .collect();
        let gn: Vec<Vector3<f64>> = (0..verts.len())
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = |v: &[Vector3<f64>]| -> f64 {
            vertex_normals(v, &a.faces).iter().zip(&gn).map(|(n, g)| n.dot(g)).sum()
        };
        let g = vertex_normals_backward(&verts, &a.faces, &gn);
        let h = 1e-7;
        for v in [0usize, 17, 80, 161] {
            for c in 0..3 {
                let mut vp = verts.clone();
                let mut vm = verts.clone();
                vp[v][c] += h;
                vm[v][c] -= h;
                let fd = (f(&vp) - f(&vm)) / (2.0 * h);
                assert!((fd - g[v][c]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g[v][c]);
            }
        }
    }
}
