//! JSON side files: landmarks, cameras, parameters, correspondences.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvflame_core::{Camera, FlameParams, Image, View};
use nalgebra::Vector2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const N_LANDMARKS: usize = 68;

/// `{"points": [[x, y], ...]}`, pixel coordinates with the origin top-left.
#[derive(Serialize, Deserialize)]
pub struct LandmarkFile {
    pub points: Vec<[f64; 2]>,
}

/// `{"pairs": [[predicted_vertex, ground_truth_vertex], ...]}`.
#[derive(Serialize, Deserialize)]
pub struct CorrespondenceFile {
    pub pairs: Vec<(usize, usize)>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Vector2<f64>>> {
    let file: LandmarkFile = read_json(path)?;
    if file.points.len() != N_LANDMARKS {
        bail!("{}: expected {N_LANDMARKS} landmarks, found {}", path.display(), file.points.len());
    }
    Ok(file.points.iter().map(|p| Vector2::new(p[0], p[1])).collect())
}

pub fn write_landmarks(path: &Path, points: &[Vector2<f64>]) -> Result<()> {
    write_json(path, &LandmarkFile { points: points.iter().map(|p| [p.x, p.y]).collect() })
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    read_json(path)
}

pub fn read_params(path: &Path) -> Result<FlameParams> {
    read_json(path)
}

/// One `--view image:landmarks[:camera]` argument.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub camera: Option<PathBuf>,
}

impl std::str::FromStr for ViewSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [img, lmk] => Ok(Self {
                image: img.into(),
                landmarks: lmk.into(),
                camera: None,
            }),
            [img, lmk, cam] => Ok(Self {
                image: img.into(),
                landmarks: lmk.into(),
                camera: Some(cam.into()),
            }),
            _ => Err(format!("expected image:landmarks[:camera], got `{s}`")),
        }
    }
}

impl ViewSpec {
    pub fn load(&self, index: usize) -> Result<View> {
        let image = Image::load_png(&self.image).with_context(|| format!("view {index}: cannot load image"))?;
        let landmarks = read_landmarks(&self.landmarks).with_context(|| format!("view {index}: cannot load landmarks"))?;
        let camera = self
            .camera
            .as_deref()
            .map(read_camera)
            .transpose()
            .with_context(|| format!("view {index}: cannot load camera"))?;
        Ok(View { image, landmarks, camera })
    }
}
