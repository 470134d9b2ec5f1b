//! Pipeline configuration file.
//!
//! TOML with one table per stage. Every key is optional and falls back to its default;
//! unknown tables and keys are rejected.
//!
//! ```toml
//! [tiling]
//! tile_size = 512
//! overlap = 64
//!
//! [annotate]
//! fill_tolerance = 0.15
//! road_margin = 0.10
//! undo_depth = 64
//!
//! [counting]
//! mean_px_lined = 40.0
//! mean_px_side_by_side = 40.0
//! min_blob_area = 12
//! elongation_threshold = 2.5
//!
//! [detect]
//! strides = [8, 4, 2]
//! anchors_per_level = 3
//! anchors = [[4.0, 6.0], [5.0, 8.0]]   # optional, (w, h) pairs
//! nms_iou = 0.3
//! min_score = 0.1
//! kmeans_seed = 0
//! kmeans_restarts = 10
//! kmeans_max_iter = 300
//!
//! [fusion]
//! t_high = 0.5
//! t_low = 0.2
//! overlap = { rule = "center-in-blob" }   # or { rule = "blob-iou", threshold = 0.3 }
//!
//! [eval]
//! iou_min = 0.3
//!
//! [service]
//! image_root = "images"
//! session_dir = "images/.sessions"        # optional
//! ui_dir = "ui/dist"                      # optional
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{FillSettings, DEFAULT_FILL_TOLERANCE, DEFAULT_ROAD_MARGIN, DEFAULT_UNDO_DEPTH};
use crate::counting::CountEstimatorConfig;
use crate::detect::{Anchor, KMeansConfig, DEFAULT_ANCHORS_PER_LEVEL, DEFAULT_NMS_IOU, DEFAULT_STRIDES};
use crate::eval::DEFAULT_IOU_MIN;
use crate::fusion::FusionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    pub tile_size: u32,
    pub overlap: u32,
}

impl Default for TilingSection {
    fn default() -> Self {
        Self {
            tile_size: 512,
            overlap: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSection {
    pub fill_tolerance: f64,
    pub road_margin: f64,
    pub undo_depth: usize,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            fill_tolerance: DEFAULT_FILL_TOLERANCE,
            road_margin: DEFAULT_ROAD_MARGIN,
            undo_depth: DEFAULT_UNDO_DEPTH,
        }
    }
}

impl AnnotateSection {
    pub fn fill_settings(&self) -> FillSettings {
        FillSettings {
            fill_tolerance: self.fill_tolerance,
            road_margin: self.road_margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub strides: Vec<u32>,
    pub anchors_per_level: usize,
    /// Fixed anchors as `[w, h]`; when absent they are computed from annotations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<[f64; 2]>>,
    pub nms_iou: f64,
    pub min_score: f64,
    pub kmeans_seed: u64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            strides: DEFAULT_STRIDES.to_vec(),
            anchors_per_level: DEFAULT_ANCHORS_PER_LEVEL,
            anchors: None,
            nms_iou: DEFAULT_NMS_IOU,
            min_score: 0.1,
            kmeans_seed: km.seed,
            kmeans_restarts: km.restarts,
            kmeans_max_iter: km.max_iter,
        }
    }
}

impl DetectSection {
    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            seed: self.kmeans_seed,
            restarts: self.kmeans_restarts,
            max_iter: self.kmeans_max_iter,
        }
    }

    pub fn anchors(&self) -> Option<Vec<Anchor>> {
        self.anchors
            .as_ref()
            .map(|v| v.iter().map(|&[w, h]| Anchor { w, h }).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_min: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { iou_min: DEFAULT_IOU_MIN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub image_root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            image_root: PathBuf::from("."),
            session_dir: None,
            ui_dir: None,
        }
    }
}

impl ServiceSection {
    pub fn session_dir(&self) -> PathBuf {
        self.session_dir
            .clone()
            .unwrap_or_else(|| self.image_root.join(".sessions"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tiling: TilingSection,
    pub annotate: AnnotateSection,
    pub counting: CountEstimatorConfig,
    pub detect: DetectSection,
    pub fusion: FusionConfig,
    pub eval: EvalSection,
    pub service: ServiceSection,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.tiling;
        if t.tile_size == 0 {
            return Err(invalid("tiling.tile_size must be positive"));
        }
        if t.overlap >= t.tile_size {
            return Err(invalid(format!(
                "tiling.overlap {} must be smaller than tile_size {}",
                t.overlap, t.tile_size
            )));
        }
        self.annotate
            .fill_settings()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.annotate.undo_depth == 0 {
            return Err(invalid("annotate.undo_depth must be positive"));
        }
        self.counting.validate().map_err(|e| invalid(e.to_string()))?;

        let d = &self.detect;
        if d.strides.is_empty() || d.strides.contains(&0) {
            return Err(invalid("detect.strides must be a non-empty list of positive integers"));
        }
        if d.anchors_per_level == 0 {
            return Err(invalid("detect.anchors_per_level must be positive"));
        }
        if let Some(anchors) = &d.anchors {
            if anchors.len() != d.strides.len() * d.anchors_per_level {
                return Err(invalid(format!(
                    "detect.anchors has {} entries, expected strides x anchors_per_level = {}",
                    anchors.len(),
                    d.strides.len() * d.anchors_per_level
                )));
            }
            if anchors.iter().any(|&[w, h]| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
                return Err(invalid("detect.anchors must have positive finite sizes"));
            }
        }
        if !(0.0..=1.0).contains(&d.nms_iou) || !(0.0..=1.0).contains(&d.min_score) {
            return Err(invalid("detect.nms_iou and detect.min_score must lie in [0, 1]"));
        }
        if d.kmeans_restarts == 0 || d.kmeans_max_iter == 0 {
            return Err(invalid("detect.kmeans_restarts and kmeans_max_iter must be positive"));
        }
        self.fusion.validate().map_err(|e| invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.iou_min) {
            return Err(invalid("eval.iou_min must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::OverlapRule;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.tiling.tile_size, 512);
        assert_eq!(cfg.detect.strides, vec![8, 4, 2]);
        assert_eq!(cfg.eval.iou_min, 0.3);
        assert_eq!(cfg.service.session_dir(), PathBuf::from("./.sessions"));
    }

    #[test]
    fn partial_sections_and_overlap_rule() {
        let cfg = PipelineConfig::parse(
            "[tiling]\noverlap = 32\n[fusion]\nt_low = 0.1\noverlap = { rule = \"blob-iou\", threshold = 0.4 }\n",
        )
        .unwrap();
        assert_eq!(cfg.tiling.tile_size, 512);
        assert_eq!(cfg.tiling.overlap, 32);
        assert_eq!(cfg.fusion.t_high, 0.5);
        assert_eq!(cfg.fusion.overlap, OverlapRule::BlobIou { threshold: 0.4 });
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(PipelineConfig::parse("[tiling]\nsize = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::parse("[render]\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "[tiling]\ntile_size = 64\noverlap = 64\n",
            "[annotate]\nfill_tolerance = 0.0\n",
            "[fusion]\nt_high = 0.2\nt_low = 0.3\n",
            "[detect]\nstrides = []\n",
            "[detect]\nanchors = [[1.0, 2.0]]\n",
            "[eval]\niou_min = 1.5\n",
            "[counting]\nmin_blob_area = 0\n",
        ] {
            assert!(matches!(PipelineConfig::parse(text), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = PipelineConfig::default();
        cfg.detect.anchors = Some(vec![[1.0, 2.0]; 9]);
        cfg.service.ui_dir = Some(PathBuf::from("ui"));
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
