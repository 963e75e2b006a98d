//! On-disk scene splits.
//!
//! ```text
//! DIR/<split>/features/000123.bin   [3, H, W] tensor
//! DIR/<split>/depth/000123.bin      [H, W] pseudo depth, 0 where invalid
//! DIR/<split>/labels/000123.txt     KITTI labels, lossless numbers
//! DIR/<split>/meta.json             config echo and content checksum
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::SceneConfig;
use super::generate::{generate_scene, Scene};
use super::kitti::{
    box_to_record, parse_kitti_label, record_to_box, write_kitti_label, NumberFormat,
};
use crate::error::{CoreError, Result};
use crate::geometry::Box2D;
use crate::tensor_io::{decode_tensor, encode_tensor};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regeneration {
    pub index: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: String,
    pub num_scenes: usize,
    /// The generator config of this split; its seed is already split-specific.
    pub config: SceneConfig,
    /// Scenes whose first placement attempt failed.
    pub regenerated: Vec<Regeneration>,
    /// sha256 over every data file, see [`directory_checksum`].
    pub checksum: String,
}

/// Generator seed of a named split, so that train and val never share scenes.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"skd-split");
    h.update(seed.to_le_bytes());
    h.update(split.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn file_stem(index: u64) -> String {
    format!("{index:06}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

/// Relative paths of all data files, sorted.
fn data_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for sub in ["features", "depth", "labels"] {
        let d = dir.join(sub);
        let entries = fs::read_dir(&d).map_err(|e| CoreError::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CoreError::io(&d, e))?;
            out.push(PathBuf::from(sub).join(entry.file_name()));
        }
    }
    out.sort();
    Ok(out)
}

/// sha256 over (relative path, length, bytes) of every data file in sorted order.
pub fn directory_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in data_files(dir)? {
        let bytes = read_file(&dir.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn label_text(scene: &Scene) -> Result<String> {
    let mut text = String::new();
    for (b3, b2) in scene.gt_boxes3d.iter().zip(&scene.ann_boxes2d) {
        let record = box_to_record(b3, b2, None)?;
        text.push_str(&write_kitti_label(&record, NumberFormat::Lossless));
        text.push('\n');
    }
    Ok(text)
}

/// Generate `count` scenes of `split` under `root/split` and write them.
pub fn write_split(
    root: &Path,
    base: &SceneConfig,
    split: &str,
    count: usize,
) -> Result<DatasetMeta> {
    base.validate()?;
    if split.is_empty() || split.contains(['/', '\\']) || split == "." || split == ".." {
        return Err(CoreError::contract(format!("invalid split name '{split}'")));
    }
    let config = SceneConfig {
        seed: split_seed(base.seed, split),
        ..base.clone()
    };
    let dir = root.join(split);
    for sub in ["features", "depth", "labels"] {
        let d = dir.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let scenes: Vec<Scene> = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(&config, i))
        .collect::<Result<_>>()?;
    scenes.par_iter().try_for_each(|scene| -> Result<()> {
        let stem = file_stem(scene.index);
        write_file(
            &dir.join("features").join(format!("{stem}.bin")),
            &encode_tensor(&scene.features),
        )?;
        write_file(
            &dir.join("depth").join(format!("{stem}.bin")),
            &encode_tensor(&scene.pseudo_depth),
        )?;
        write_file(
            &dir.join("labels").join(format!("{stem}.txt")),
            label_text(scene)?.as_bytes(),
        )
    })?;
    let regenerated = scenes
        .iter()
        .filter(|s| s.attempt > 0)
        .map(|s| Regeneration {
            index: s.index,
            attempt: s.attempt,
        })
        .collect();
    let meta = DatasetMeta {
        split: split.to_string(),
        num_scenes: count,
        config,
        regenerated,
        checksum: directory_checksum(&dir)?,
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&path, json.as_bytes())?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|source| CoreError::Json { path, source })
}

/// Refuse a split whose files do not hash to the recorded checksum.
pub fn verify_split(dir: &Path) -> Result<DatasetMeta> {
    let meta = read_meta(dir)?;
    let found = directory_checksum(dir)?;
    if found != meta.checksum {
        return Err(CoreError::Checksum {
            what: format!("dataset {}", dir.display()),
            expected: meta.checksum,
            found,
        });
    }
    Ok(meta)
}

pub fn load_scene(dir: &Path, meta: &DatasetMeta, index: u64) -> Result<Scene> {
    let cfg = &meta.config;
    let stem = file_stem(index);
    let features = decode_tensor(&read_file(
        &dir.join("features").join(format!("{stem}.bin")),
    )?)?;
    let pseudo_depth = decode_tensor(&read_file(&dir.join("depth").join(format!("{stem}.bin")))?)?;
    let (w, h) = (cfg.width(), cfg.height());
    if features.shape() != [3, h, w] || pseudo_depth.shape() != [h, w] {
        return Err(CoreError::contract(format!(
            "scene {index}: tensor shapes {:?} / {:?} do not match image size {w}x{h}",
            features.shape(),
            pseudo_depth.shape()
        )));
    }
    let label_path = dir.join("labels").join(format!("{stem}.txt"));
    let text = String::from_utf8(read_file(&label_path)?)
        .map_err(|_| CoreError::contract(format!("{} is not UTF-8", label_path.display())))?;
    let mut gt_boxes3d = Vec::new();
    let mut ann_boxes2d = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record = parse_kitti_label(line)?;
        gt_boxes3d.push(record_to_box(&record)?);
        ann_boxes2d.push(Box2D::from_array(record.bbox));
    }
    let valid_mask = pseudo_depth.data().iter().map(|&d| d > 0.0).collect();
    let attempt = meta
        .regenerated
        .iter()
        .find(|r| r.index == index)
        .map_or(0, |r| r.attempt);
    Ok(Scene {
        index,
        attempt,
        features,
        gt_boxes3d,
        ann_boxes2d,
        pseudo_depth,
        valid_mask,
    })
}

/// Verify and load a whole split.
pub fn load_split(root: &Path, split: &str) -> Result<(DatasetMeta, Vec<Scene>)> {
    let dir = root.join(split);
    let meta = verify_split(&dir)?;
    let scenes = (0..meta.num_scenes as u64)
        .into_par_iter()
        .map(|i| load_scene(&dir, &meta, i))
        .collect::<Result<_>>()?;
    Ok((meta, scenes))
}
