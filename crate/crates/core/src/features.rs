//! Both descriptor channels computed from a single detector run.

use serde::{Deserialize, Serialize};

use crate::descriptor::{DescriptorKind, DescriptorSet};
use crate::error::Result;
use crate::freak::{self, PairSelection, PatternConfig, RetinalPattern};
use crate::image::GrayImage;
use crate::scale_space::{self, DetectorParams};
use crate::sift;

/// Everything that influences extraction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionParams {
    pub detector: DetectorParams,
    pub pattern: PatternConfig,
}

/// Which descriptor channels to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub sift: bool,
    pub freak: bool,
}

impl Channels {
    pub const BOTH: Channels = Channels { sift: true, freak: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// Unoriented detector keypoints shared by both channels.
    pub detected: usize,
    pub sift: DescriptorSet,
    pub freak: DescriptorSet,
}

impl ImageFeatures {
    pub fn channel(&self, kind: DescriptorKind) -> &DescriptorSet {
        match kind {
            DescriptorKind::Sift => &self.sift,
            DescriptorKind::Freak => &self.freak,
        }
    }
}

pub struct Extractor {
    pub params: ExtractionParams,
    pattern: RetinalPattern,
    pairs: PairSelection,
}

impl Extractor {
    pub fn new(params: ExtractionParams, pairs: PairSelection) -> Self {
        Extractor {
            pattern: freak::build_pattern_with(&params.pattern),
            params,
            pairs,
        }
    }

    /// Default parameters with the shipped FREAK pair selection.
    pub fn standard() -> Self {
        Self::new(ExtractionParams::default(), PairSelection::shipped().clone())
    }

    pub fn pairs(&self) -> &PairSelection {
        &self.pairs
    }

    pub fn extract(&self, img: &GrayImage) -> Result<ImageFeatures> {
        self.extract_channels(img, Channels::BOTH)
    }

    /// Unrequested channels come back empty.
    pub fn extract_channels(&self, img: &GrayImage, channels: Channels) -> Result<ImageFeatures> {
        let detection = scale_space::detect(img, &self.params.detector)?;
        let sift = if channels.sift {
            sift::describe(&detection.pyramid, &detection.keypoints).descriptors
        } else {
            DescriptorSet::empty(DescriptorKind::Sift)
        };
        let freak = if channels.freak {
            freak::describe(img, &detection.keypoints, &self.pattern, &self.pairs).descriptors
        } else {
            DescriptorSet::empty(DescriptorKind::Freak)
        };
        Ok(ImageFeatures {
            detected: detection.keypoints.len(),
            sift,
            freak,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn channels_match_standalone_extractors() {
        let img = synth::class_image(1, 192, 192, 4);
        let ex = Extractor::standard();
        let f = ex.extract(&img).unwrap();
        let params = DetectorParams::default();
        assert_eq!(f.sift, sift::extract_sift(&img, &params).unwrap().descriptors);
        let pattern = freak::build_pattern();
        let alone = freak::extract_freak(&img, &params, &pattern, PairSelection::shipped()).unwrap();
        assert_eq!(f.freak, alone.descriptors);
        assert!(f.sift.len() <= f.detected * 4 && f.freak.len() <= f.detected);
    }

    #[test]
    fn unrequested_channel_is_empty() {
        let img = synth::textured(160, 160, 2);
        let f = Extractor::standard()
            .extract_channels(&img, Channels { sift: false, freak: true })
            .unwrap();
        assert!(f.sift.is_empty());
        assert_eq!(f.sift.kind(), DescriptorKind::Sift);
        assert!(!f.freak.is_empty());
    }
}
