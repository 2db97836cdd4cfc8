//! Deterministic synthetic interaction scenes: generation, rasterization,
//! target encoding and dataset files.

mod io;
mod scene;
mod targets;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, GridSpec};

pub use io::{read_dataset, raster_path, write_dataset, DatasetError};
pub use scene::{generate_dataset, generate_scene, render_scene, verb_for, GenerationError};
pub use targets::{encode_targets, TargetMaps};

/// Inclusive count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub grid: GridSpec,
    pub num_object_classes: usize,
    pub num_verbs: usize,
    pub humans_per_scene: CountRange,
    pub objects_per_scene: CountRange,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: GridSpec::new(16, 16, 4),
            num_object_classes: 3,
            num_verbs: 4,
            humans_per_scene: CountRange::new(1, 2),
            objects_per_scene: CountRange::new(1, 2),
            seed: 0,
        }
    }
}

/// Invalid configuration value, naming the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &str, reason: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_object_classes == 0 {
            return Err(ConfigError::new("data.num_object_classes", "must be at least 1"));
        }
        if self.num_verbs == 0 {
            return Err(ConfigError::new("data.num_verbs", "must be at least 1"));
        }
        if !self.grid.is_valid() {
            return Err(ConfigError::new("data.grid", "height, width and stride must be at least 1"));
        }
        if self.image_size != self.grid.width * self.grid.stride
            || self.image_size != self.grid.height * self.grid.stride
        {
            return Err(ConfigError::new(
                "data.image_size",
                format!(
                    "{} must equal grid width·stride and height·stride ({}·{}, {}·{})",
                    self.image_size,
                    self.grid.width,
                    self.grid.stride,
                    self.grid.height,
                    self.grid.stride
                ),
            ));
        }
        if self.humans_per_scene.min == 0 || self.humans_per_scene.min > self.humans_per_scene.max {
            return Err(ConfigError::new(
                "data.humans_per_scene",
                "needs 1 ≤ min ≤ max",
            ));
        }
        if self.objects_per_scene.min == 0 || self.objects_per_scene.min > self.objects_per_scene.max
        {
            return Err(ConfigError::new(
                "data.objects_per_scene",
                "needs 1 ≤ min ≤ max (every object is in one interaction)",
            ));
        }
        Ok(())
    }

    /// Channel count `1 + K + N` of the point heads.
    pub fn point_channels(&self) -> usize {
        1 + self.num_object_classes + self.num_verbs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectInstance {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub human: usize,
    pub object: usize,
    pub verb: usize,
}

/// Ground truth of one scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneSpec {
    pub humans: Vec<BBox>,
    pub objects: Vec<ObjectInstance>,
    pub interactions: Vec<Interaction>,
}

/// `3×size×size` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub size: usize,
    pub data: Vec<f32>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn blank(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; Self::CHANNELS * size * size],
        }
    }

    pub fn to_tensor(&self) -> crate::netops::Tensor {
        crate::netops::Tensor::new(
            &[Self::CHANNELS, self.size, self.size],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("raster dimensions")
    }
}

/// Scenes with their rendered images and the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub scenes: Vec<SceneSpec>,
    pub images: Vec<RasterImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Scenes `range` as their own dataset.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            config: self.config.clone(),
            scenes: self.scenes[range.clone()].to_vec(),
            images: self.images[range].to_vec(),
        }
    }
}
