//! Mixed detector/segmentation model.
//!
//! Confident detector boxes are kept as they are. Boxes in a lower confidence band survive
//! only when the segmentation mask agrees, i.e. the box matches one of its blobs. Fusion
//! filters detector output; it never adds boxes of its own.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::Blob;
use crate::detect::{Detection, Source};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
}

/// When a detection counts as confirmed by a blob.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum OverlapRule {
    /// The pixel holding the box center belongs to the blob.
    CenterInBlob,
    /// IoU between the box and the blob's bounding box reaches the threshold.
    BlobIou { threshold: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub t_high: f64,
    pub t_low: f64,
    pub overlap: OverlapRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            t_high: 0.5,
            t_low: 0.2,
            overlap: OverlapRule::CenterInBlob,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.t_high) || !unit(self.t_low) {
            return Err(FusionError::InvalidConfig("thresholds must lie in [0, 1]".into()));
        }
        if self.t_low > self.t_high {
            return Err(FusionError::InvalidConfig(format!(
                "t_low {} exceeds t_high {}",
                self.t_low, self.t_high
            )));
        }
        if let OverlapRule::BlobIou { threshold } = self.overlap {
            if !unit(threshold) {
                return Err(FusionError::InvalidConfig("blob IoU threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Pixel-to-blob lookup over the blobs' pixel sets.
struct BlobIndex<'a> {
    blobs: &'a [Blob],
    owner: HashMap<(u32, u32), usize>,
}

impl<'a> BlobIndex<'a> {
    fn new(blobs: &'a [Blob]) -> Self {
        let mut owner = HashMap::new();
        for (i, b) in blobs.iter().enumerate() {
            for &p in &b.pixels {
                owner.entry(p).or_insert(i);
            }
        }
        Self { blobs, owner }
    }

    fn matches(&self, d: &Detection, rule: OverlapRule) -> bool {
        match rule {
            OverlapRule::CenterInBlob => {
                let (cx, cy) = d.bbox.center();
                if cx < 0.0 || cy < 0.0 {
                    return false;
                }
                self.owner.contains_key(&(cx.floor() as u32, cy.floor() as u32))
            }
            OverlapRule::BlobIou { threshold } => self.blobs.iter().any(|b| {
                let v = d.bbox.iou(&b.bounds.to_f64());
                v > 0.0 && v >= threshold
            }),
        }
    }
}

/// Keeps `score >= t_high` detections, plus `t_low <= score < t_high` detections that match a
/// blob. Kept detections that match a blob are tagged [`Source::Fused`], the others
/// [`Source::Detector`]. Input order is preserved.
pub fn fuse(yolo: &[Detection], blobs: &[Blob], cfg: &FusionConfig) -> Result<Vec<Detection>, FusionError> {
    cfg.validate()?;
    let index = BlobIndex::new(blobs);
    let mut out = Vec::new();
    for d in yolo {
        if d.score < cfg.t_low {
            continue;
        }
        let matched = index.matches(d, cfg.overlap);
        if d.score >= cfg.t_high || matched {
            let source = if matched { Source::Fused } else { Source::Detector };
            out.push(Detection { source, ..*d });
        }
    }
    Ok(out)
}

pub fn fused_count(fused: &[Detection]) -> usize {
    fused.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxF;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, score: f64) -> Detection {
        Detection::new(BoxF::from_center(cx, cy, 4.0, 6.0), score, Source::Detector)
    }

    fn square_blob(x0: u32, y0: u32, side: u32) -> Blob {
        Blob::from_pixels((y0..y0 + side).flat_map(|y| (x0..x0 + side).map(move |x| (x, y))).collect())
    }

    #[test]
    fn branch_examples() {
        let cfg = FusionConfig {
            t_high: 0.6,
            t_low: 0.2,
            overlap: OverlapRule::CenterInBlob,
        };
        let blobs = vec![square_blob(10, 10, 6)];
        let out = fuse(&[det(50.0, 50.0, 0.9)], &blobs, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, Source::Detector);

        let out = fuse(&[det(12.5, 12.5, 0.3)], &blobs, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, Source::Fused);

        assert!(fuse(&[det(12.5, 12.5, 0.3)], &[], &cfg).unwrap().is_empty());
        assert!(fuse(&[det(12.5, 12.5, 0.1)], &blobs, &cfg).unwrap().is_empty());
        assert_eq!(fused_count(&[]), 0);
    }

    #[test]
    fn center_must_hit_blob_pixels_not_bounds() {
        // An L-shaped blob whose bounding box covers (3, 0) while its pixels do not.
        let blob = Blob::from_pixels(vec![(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (3, 2)]);
        let cfg = FusionConfig::default();
        let off = Detection::new(BoxF::from_center(3.5, 0.5, 2.0, 2.0), 0.3, Source::Detector);
        assert!(fuse(&[off], std::slice::from_ref(&blob), &cfg).unwrap().is_empty());
        let on = Detection::new(BoxF::from_center(3.5, 2.5, 2.0, 2.0), 0.3, Source::Detector);
        assert_eq!(fuse(&[on], &[blob], &cfg).unwrap().len(), 1);
    }

    #[test]
    fn blob_iou_rule() {
        let blob = square_blob(10, 10, 4);
        let cfg = FusionConfig {
            overlap: OverlapRule::BlobIou { threshold: 0.5 },
            ..Default::default()
        };
        let exact = Detection::new(BoxF::new(10.0, 10.0, 14.0, 14.0).unwrap(), 0.3, Source::Detector);
        let shifted = Detection::new(BoxF::new(12.0, 10.0, 16.0, 14.0).unwrap(), 0.3, Source::Detector);
        let out = fuse(&[exact, shifted], &[blob], &cfg).unwrap();
        assert_eq!(out, vec![Detection { source: Source::Fused, ..exact }]);
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let cfg = FusionConfig {
            t_high: 0.3,
            t_low: 0.4,
            ..Default::default()
        };
        assert!(matches!(fuse(&[], &[], &cfg), Err(FusionError::InvalidConfig(_))));
    }

    proptest! {
        #[test]
        fn fused_set_contains_confident_detections(
            scores in proptest::collection::vec(0u32..=10, 0..30),
            t_high in 0u32..=10,
        ) {
            let dets: Vec<_> = scores.iter().enumerate().map(|(i, &s)| det(3.0 + 7.0 * i as f64, 3.0, s as f64 / 10.0)).collect();
            let blobs = vec![square_blob(0, 0, 20)];
            let cfg = FusionConfig { t_high: t_high as f64 / 10.0, t_low: 0.0, overlap: OverlapRule::CenterInBlob };
            let out = fuse(&dets, &blobs, &cfg).unwrap();
            let confident = dets.iter().filter(|d| d.score >= cfg.t_high).count();
            prop_assert!(fused_count(&out) >= confident);
        }
    }
}
