mod config;
mod dataset;
mod generate;
mod kitti;

pub use config::SceneConfig;
pub use dataset::{
    directory_checksum, load_scene, load_split, read_meta, split_seed, verify_split, write_split,
    DatasetMeta, Regeneration, META_FILE,
};
pub use generate::{generate_scene, render, scene_rng, Scene, PSEUDO_DEPTH_FLOOR};
pub use kitti::{
    box_to_record, observation_angle, parse_kitti_label, record_to_box, write_kitti_label,
    KittiLabelRecord, NumberFormat,
};
