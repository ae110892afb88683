//! Pinhole cameras, projection and landmark-based camera initialization.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{rodrigues, skew};

/// World-to-image pinhole camera. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraJson", try_from = "CameraJson")]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[3 * row + col] = c.rotation[(row, col)];
            }
        }
        CameraJson {
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<CameraJson> for Camera {
    type Error = String;

    fn try_from(j: CameraJson) -> std::result::Result<Self, String> {
        let cam = Camera {
            rotation: Matrix3::from_row_slice(&j.r),
            translation: Vector3::from(j.t),
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
        };
        cam.check().map_err(|e| e.to_string())?;
        Ok(cam)
    }
}

/// Projected point: pixel coordinates and camera-space depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

impl Camera {
    /// Default intrinsics: `f = max(width, height)`, principal point at the image centre.
    pub fn looking_from(rotation: Matrix3<f64>, translation: Vector3<f64>, width: usize, height: usize) -> Self {
        let f = width.max(height) as f64;
        Camera {
            rotation,
            translation,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Camera on a circle of `distance` around `target`, yawed by `yaw` radians
    /// about the world y axis, looking at the target with image-down = world −y.
    pub fn orbit(yaw: f64, pitch: f64, distance: f64, target: Vector3<f64>, width: usize, height: usize) -> Self {
        // Frontal camera looks along −z: x right, y down, z into the scene.
        let frontal = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let turn = rodrigues(&Vector3::new(pitch, 0.0, 0.0)) * rodrigues(&Vector3::new(0.0, yaw, 0.0));
        let rotation = frontal * turn.transpose();
        let translation = Vector3::new(0.0, 0.0, distance) - rotation * target;
        Camera::looking_from(rotation, translation, width, height)
    }

    pub fn check(&self) -> Result<()> {
        if (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max() > 1e-9
            || self.rotation.determinant() < 0.0
        {
            return Err(Error::invariant("camera", "rotation is not orthonormal"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invariant("camera", "focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invariant("camera", "zero-area image"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    #[inline]
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn project_camera_space(&self, xc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * xc.x / xc.z + self.cx, self.fy * xc.y / xc.z + self.cy)
    }

    #[inline]
    pub fn project_point(&self, x: &Vector3<f64>) -> Projection {
        let xc = self.to_camera(x);
        Projection {
            pixel: self.project_camera_space(&xc),
            depth: xc.z,
        }
    }

    /// `d(pixel)/d(camera-space point)` at `xc`.
    #[inline]
    pub fn pixel_jacobian_camera_space(&self, xc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / xc.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * xc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * xc.y * iz * iz,
        )
    }

    /// `d(pixel)/d(world point)`.
    pub fn pixel_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        self.pixel_jacobian_camera_space(&self.to_camera(x)) * self.rotation
    }

    /// Unit direction from a surface point towards the camera centre.
    pub fn view_direction(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (self.center() - x).normalize()
    }
}

/// Pinhole projection of many points; depth ≤ 0 is reported via [`Projection::in_front`].
pub fn project(camera: &Camera, points: &[Vector3<f64>]) -> Vec<Projection> {
    points.iter().map(|p| camera.project_point(p)).collect()
}

/// Result of [`estimate_initial_camera`].
#[derive(Clone, Debug)]
pub struct CameraEstimate {
    pub camera: Camera,
    /// Root-mean-square reprojection error in pixels.
    pub rmse: f64,
}

fn reprojection_rmse(camera: &Camera, l2d: &[Vector2<f64>], l3d: &[Vector3<f64>]) -> f64 {
    let sse: f64 = l2d
        .iter()
        .zip(l3d)
        .map(|(x, p)| (camera.project_point(p).pixel - x).norm_squared())
        .sum();
    (sse / l2d.len() as f64).sqrt()
}

/// Scaled-orthographic closed form lifted to a pinhole camera, then refined
/// with damped Gauss–Newton on the reprojection error. Focal stays at the
/// default `max(width, height)`.
pub fn estimate_initial_camera(
    landmarks2d: &[Vector2<f64>],
    landmarks3d: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> Result<CameraEstimate> {
    let n = landmarks2d.len();
    if n != landmarks3d.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} 2D landmarks but {} 3D landmarks",
            landmarks3d.len()
        )));
    }
    if n < 4 {
        return Err(Error::Degenerate(format!("{n} correspondences, need at least 4")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Degenerate("zero-area image".into()));
    }
    let mean3: Vector3<f64> = landmarks3d.iter().sum::<Vector3<f64>>() / n as f64;
    let mean2: Vector2<f64> = landmarks2d.iter().sum::<Vector2<f64>>() / n as f64;

    let mut cov = Matrix3::zeros();
    for p in landmarks3d {
        let d = p - mean3;
        cov += d * d.transpose();
    }
    let sv = cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sv[0] <= 0.0 || sv[1] < 1e-12 * sv[0] {
        return Err(Error::Degenerate("3D landmarks are collinear or coincident".into()));
    }
    let spread2: f64 = landmarks2d.iter().map(|x| (x - mean2).norm_squared()).sum();
    if spread2 < 1e-18 {
        return Err(Error::Degenerate("2D landmarks are coincident".into()));
    }

    // Affine fit x̃ = M X̃ via the pseudo-inverse of the 3D scatter.
    let mut rhs = Matrix2x3::zeros();
    for (x, p) in landmarks2d.iter().zip(landmarks3d) {
        rhs += (x - mean2) * (p - mean3).transpose();
    }
    let cov_pinv = cov
        .pseudo_inverse(1e-12 * sv[0])
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let m = rhs * cov_pinv;
    let md = DMatrix::from_fn(2, 3, |r, c| m[(r, c)]);
    let svd = md.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let scale = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    if scale <= 0.0 {
        return Err(Error::Degenerate("zero projection scale".into()));
    }
    let r2 = &u * &vt;
    let r1v = Vector3::new(r2[(0, 0)], r2[(0, 1)], r2[(0, 2)]);
    let r2v = Vector3::new(r2[(1, 0)], r2[(1, 1)], r2[(1, 2)]);
    let r3v = r1v.cross(&r2v);
    let rotation = Matrix3::from_rows(&[r1v.transpose(), r2v.transpose(), r3v.transpose()]);

    let mut camera = Camera::looking_from(rotation, Vector3::zeros(), width, height);
    let tz = camera.fx / scale;
    let centroid_cam = Vector3::new(
        (mean2.x - camera.cx) * tz / camera.fx,
        (mean2.y - camera.cy) * tz / camera.fy,
        tz,
    );
    camera.translation = centroid_cam - rotation * mean3;

    refine_pose(&mut camera, landmarks2d, landmarks3d);
    let rmse = reprojection_rmse(&camera, landmarks2d, landmarks3d);
    Ok(CameraEstimate { camera, rmse })
}

/// Levenberg–Marquardt over a left-multiplied rotation increment and the translation.
fn refine_pose(camera: &mut Camera, l2d: &[Vector2<f64>], l3d: &[Vector3<f64>]) {
    let mut lambda = 1e-3;
    let mut cost = reprojection_rmse(camera, l2d, l3d);
    for _ in 0..100 {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (x, p) in l2d.iter().zip(l3d) {
            let rp = camera.rotation * p;
            let xc = rp + camera.translation;
            if xc.z <= 0.0 {
                continue;
            }
            let r = camera.project_camera_space(&xc) - x;
            let jc = camera.pixel_jacobian_camera_space(&xc);
            let mut j = nalgebra::Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jc * -skew(&rp)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jc);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = camera.clone();
            trial.rotation = rodrigues(&Vector3::new(step[0], step[1], step[2])) * camera.rotation;
            trial.translation += Vector3::new(step[3], step[4], step[5]);
            let trial_cost = reprojection_rmse(&trial, l2d, l3d);
            if trial_cost.is_finite() && trial_cost < cost {
                let done = cost - trial_cost < 1e-12 * cost.max(1e-12);
                *camera = trial;
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // Re-orthonormalize accumulated increments.
    let svd = camera.rotation.svd(true, true);
    camera.rotation = svd.u.unwrap() * svd.v_t.unwrap();
}
