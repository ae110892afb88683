use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: f64 = 1.092_548_430_592_079_2;
pub const SH_C3: f64 = 0.315_391_565_252_520_05;
pub const SH_C4: f64 = 0.546_274_215_296_039_6;

/// Second-order spherical-harmonics lighting: 9 coefficients per colour channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SHLighting {
    pub coeffs: [Rgb; 9],
}

impl SHLighting {
    pub fn zeros() -> Self {
        Self { coeffs: [Rgb::zeros(); 9] }
    }

    /// Ambient-only lighting whose irradiance equals `level` in every direction.
    pub fn ambient(level: f64) -> Self {
        let mut l = Self::zeros();
        l.coeffs[0] = Rgb::repeat(level / SH_C0);
        l
    }

    pub fn irradiance(&self, basis: &[f64; 9]) -> Rgb {
        let mut e = Rgb::zeros();
        for k in 0..9 {
            e += self.coeffs[k] * basis[k];
        }
        e
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn as_flat(&self) -> Vec<f64> {
        self.coeffs.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let mut l = Self::zeros();
        for k in 0..9 {
            l.coeffs[k] = Rgb::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]);
        }
        l
    }
}

/// Real SH bands 0..=2 of a unit direction, in the order
/// `1, y, z, x, xy, yz, 3z²−1, xz, x²−y²` (each with its normalization constant).
pub fn sh_basis_unit(n: &Vector3<f64>) -> [f64; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Normalizes `n` first; near-zero input is degenerate.
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; 9]> {
    let len = n.norm();
    if !(len > 1e-12) {
        return Err(Error::Degenerate(format!("SH basis of near-zero normal {n:?}")));
    }
    Ok(sh_basis_unit(&(n / len)))
}

/// Derivatives of [`sh_basis_unit`] with respect to the direction components.
pub fn sh_basis_jacobian(n: &Vector3<f64>) -> [Vector3<f64>; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vector3::zeros(),
        Vector3::new(0.0, SH_C1, 0.0),
        Vector3::new(0.0, 0.0, SH_C1),
        Vector3::new(SH_C1, 0.0, 0.0),
        Vector3::new(SH_C2 * y, SH_C2 * x, 0.0),
        Vector3::new(0.0, SH_C2 * z, SH_C2 * y),
        Vector3::new(0.0, 0.0, 6.0 * SH_C3 * z),
        Vector3::new(SH_C2 * z, 0.0, SH_C2 * x),
        Vector3::new(2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0),
    ]
}

/// Per-texel `B = A ⊙ Σ_k l_k H_k(N)`.
pub fn shade(albedo: &Image, lighting: &SHLighting, normal_uv: &Image) -> Result<Image> {
    if !albedo.same_size(normal_uv) {
        return Err(Error::ResolutionMismatch(format!(
            "albedo {}x{} vs normal map {}x{}",
            albedo.width, albedo.height, normal_uv.width, normal_uv.height
        )));
    }
    let data = albedo
        .data
        .iter()
        .zip(&normal_uv.data)
        .map(|(a, n)| {
            let basis = sh_basis(n).unwrap_or([SH_C0, 0.0, 0.0, 0.0, 0.0, 0.0, -SH_C3, 0.0, 0.0]);
            a.component_mul(&lighting.irradiance(&basis))
        })
        .collect();
    Ok(Image {
        width: albedo.width,
        height: albedo.height,
        data,
    })
}
