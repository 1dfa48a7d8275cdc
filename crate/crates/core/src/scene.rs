//! Scenes on disk: depth, intrinsics, instance mask, grasp labels and
//! (for synthetic scenes) the analytic objects.
//!
//! A scene directory holds `depth.png` (16-bit), `intrinsics.json`,
//! `labels.json`, `mask.png` (16-bit, object id + 1, 0 = background) and,
//! when known, `objects.json`.

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::cloud::{CloudError, DepthImage, Intrinsics, SceneCloud};
use crate::geometry::{Grasp, Vec3};
use crate::shapes::Primitive;

/// Per-pixel object ids shifted by one; zero is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl InstanceMask {
    pub fn new(width: u32, height: u32) -> Self {
        InstanceMask {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    /// Object id visible at `(u, v)`.
    pub fn object_at(&self, u: u32, v: u32) -> Option<u32> {
        let x = self.data[v as usize * self.width as usize + u as usize];
        (x > 0).then(|| x as u32 - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
    pub mask: InstanceMask,
    pub objects: Vec<Primitive>,
}

impl Scene {
    pub fn cloud(&self) -> Result<SceneCloud, CloudError> {
        SceneCloud::from_depth(&self.depth, &self.intrinsics)
    }
}

/// A ground-truth grasp with its object, friction grade and the contacts it
/// was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    #[serde(flatten)]
    pub grasp: Grasp,
    pub object_id: u32,
    pub mu_min: f64,
    /// `[p1, n1, p2, n2]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contacts: Option<[[f64; 3]; 4]>,
}

impl SceneLabel {
    pub fn contact_points(&self) -> Option<[(Vec3, Vec3); 2]> {
        self.contacts.map(|c| {
            [
                (Vec3::from(c[0]), Vec3::from(c[1])),
                (Vec3::from(c[2]), Vec3::from(c[3])),
            ]
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub grasps: Vec<SceneLabel>,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("mask is {got_w}x{got_h}, depth is {want_w}x{want_h}")]
    MaskMismatch { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    let bytes = fs::read(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| SceneError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), SceneError> {
    let bytes = serde_json::to_vec_pretty(v).expect("serialisable");
    fs::write(path, bytes).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_scene(dir: &Path, scene: &Scene, labels: &SceneLabels) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(|source| SceneError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    scene.depth.save_png(&dir.join("depth.png"))?;
    scene.intrinsics.save(&dir.join("intrinsics.json"))?;
    let mask: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(scene.mask.width, scene.mask.height, scene.mask.data.clone()).expect("buffer matches");
    mask.save(dir.join("mask.png"))?;
    write_json(&dir.join("labels.json"), labels)?;
    if !scene.objects.is_empty() {
        write_json(&dir.join("objects.json"), &scene.objects)?;
    }
    Ok(())
}

/// Loads a scene directory. `labels.json`, `mask.png` and `objects.json` are
/// optional; missing ones load empty.
pub fn load_scene(dir: &Path) -> Result<(Scene, SceneLabels), SceneError> {
    let intrinsics = Intrinsics::load(&dir.join("intrinsics.json"))?;
    let depth = DepthImage::load_png(&dir.join("depth.png"))?;
    let mask_path = dir.join("mask.png");
    let mask = if mask_path.exists() {
        let img = image::open(&mask_path)?.into_luma16();
        let (w, h) = img.dimensions();
        if (w, h) != (depth.width, depth.height) {
            return Err(SceneError::MaskMismatch {
                got_w: w,
                got_h: h,
                want_w: depth.width,
                want_h: depth.height,
            });
        }
        InstanceMask {
            width: w,
            height: h,
            data: img.into_raw(),
        }
    } else {
        InstanceMask::new(depth.width, depth.height)
    };
    let labels_path = dir.join("labels.json");
    let labels = if labels_path.exists() {
        read_json(&labels_path)?
    } else {
        SceneLabels::default()
    };
    let objects_path = dir.join("objects.json");
    let objects = if objects_path.exists() {
        read_json(&objects_path)?
    } else {
        Vec::new()
    };
    Ok((
        Scene {
            depth,
            intrinsics,
            mask,
            objects,
        },
        labels,
    ))
}

/// Scene directories directly under `root` (those holding `depth.png`),
/// sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>, SceneError> {
    if root.join("depth.png").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|source| SceneError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("depth.png").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
