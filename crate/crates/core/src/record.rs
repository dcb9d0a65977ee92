//! Machine-readable explanation output.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_match::{MatchedRegion, RegionMatch};
use crate::threshold::RelativeThreshold;
use crate::types::{PixelBox, SpatialCell};

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationMethod {
    Latent,
    Superpixel,
}

impl std::fmt::Display for ExplanationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExplanationMethod::Latent => "latent",
            ExplanationMethod::Superpixel => "superpixel",
        })
    }
}

/// Settings an explanation was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<RelativeThreshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<RelativeThreshold>,
    pub pool: usize,
    pub k_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
    pub saliency: String,
    pub seed: u64,
    /// Which class neighbour saliency is computed for.
    pub neighbor_class: String,
}

/// One test-image part and where it was matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    /// 1-based.
    pub rank: usize,
    pub test_box: PixelBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cell: Option<SpatialCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_segment: Option<usize>,
    pub test_saliency: f32,
    pub neighbor_row: usize,
    pub neighbor_pool_rank: usize,
    pub neighbor_image_path: String,
    pub neighbor_label: usize,
    pub neighbor_class: usize,
    pub neighbor_box: PixelBox,
    pub neighbor_region: MatchedRegion,
    pub distance: f32,
    pub neighbor_saliency: f32,
}

impl FeatureRecord {
    pub fn from_match(
        rank: usize,
        m: &RegionMatch,
        test_saliency: f32,
        test_cell: Option<SpatialCell>,
        test_segment: Option<usize>,
    ) -> Self {
        FeatureRecord {
            rank,
            test_box: m.test_box,
            test_cell,
            test_segment,
            test_saliency,
            neighbor_row: m.neighbor_row,
            neighbor_pool_rank: m.pool_rank,
            neighbor_image_path: m.image_path.clone(),
            neighbor_label: m.neighbor_label,
            neighbor_class: m.neighbor_class,
            neighbor_box: m.neighbor_box,
            neighbor_region: m.region,
            distance: m.distance,
            neighbor_saliency: m.neighbor_saliency,
        }
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub BTreeMap<String, f64>);

impl Timings {
    pub fn record(&mut self, stage: &str, since: Instant) {
        *self.0.entry(stage.to_string()).or_default() += since.elapsed().as_secs_f64();
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub schema: u32,
    pub test_image_path: String,
    pub predicted_class: usize,
    pub predicted_class_name: String,
    pub method: ExplanationMethod,
    pub config: ConfigSnapshot,
    pub features: Vec<FeatureRecord>,
    pub timings: Timings,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExplanationRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        test_image_path: &str,
        predicted_class: usize,
        predicted_class_name: String,
        method: ExplanationMethod,
        config: ConfigSnapshot,
        features: Vec<FeatureRecord>,
        timings: Timings,
        warnings: Vec<String>,
    ) -> Self {
        ExplanationRecord {
            schema: RECORD_SCHEMA,
            test_image_path: test_image_path.to_string(),
            predicted_class,
            predicted_class_name,
            method,
            config,
            features,
            timings,
            warnings,
        }
    }

    /// Copy with timings cleared, for comparing reruns.
    pub fn without_timings(&self) -> Self {
        ExplanationRecord {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: ExplanationRecord = serde_json::from_str(text)?;
        if record.schema != RECORD_SCHEMA {
            return Err(Error::InvalidValue(format!(
                "unsupported explanation schema {}",
                record.schema
            )));
        }
        Ok(record)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
