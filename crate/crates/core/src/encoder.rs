//! Per-image visual-word histograms and their late fusion into one `2Z` vector.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::descriptor::{DescriptorKind, DescriptorSet};
use crate::error::{Error, Result};
use crate::features::{Extractor, ImageFeatures};
use crate::format::{self, ENCODED_MAGIC};
use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordHistogram {
    pub counts: Vec<u32>,
    pub total: u32,
}

impl WordHistogram {
    pub fn zeros(z: usize) -> Self {
        WordHistogram {
            counts: vec![0; z],
            total: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    /// L1-normalized bins; an empty histogram stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        let t = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Counts how many descriptors fall on each word.
pub fn encode(cb: &Codebook, descriptors: &DescriptorSet) -> Result<WordHistogram> {
    let mut h = WordHistogram::zeros(cb.size());
    for w in cb.assign_all(descriptors)? {
        h.counts[w] += 1;
        h.total += 1;
    }
    Ok(h)
}

/// Which part of the fused representation a classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Fused,
    SiftOnly,
    FreakOnly,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 3] = [ChannelMode::Fused, ChannelMode::SiftOnly, ChannelMode::FreakOnly];

    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Fused => "fused",
            ChannelMode::SiftOnly => "sift_only",
            ChannelMode::FreakOnly => "freak_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fused" => Ok(ChannelMode::Fused),
            "sift_only" | "sift" => Ok(ChannelMode::SiftOnly),
            "freak_only" | "freak" => Ok(ChannelMode::FreakOnly),
            other => Err(Error::Parameter(format!("unknown channel mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `[normalize(h_freak) ‖ normalize(h_sift)]`, channel boundary at `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    z: usize,
    values: Vec<f64>,
}

impl FusedVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(Error::Data(format!("fused vector length {} is not 2Z", values.len())));
        }
        Ok(FusedVector {
            z: values.len() / 2,
            values,
        })
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn freak_half(&self) -> &[f64] {
        &self.values[..self.z]
    }

    pub fn sift_half(&self) -> &[f64] {
        &self.values[self.z..]
    }

    /// The slice a classifier in `mode` is trained on.
    pub fn view(&self, mode: ChannelMode) -> &[f64] {
        match mode {
            ChannelMode::Fused => &self.values,
            ChannelMode::SiftOnly => self.sift_half(),
            ChannelMode::FreakOnly => self.freak_half(),
        }
    }
}

pub fn fuse(h_freak: &WordHistogram, h_sift: &WordHistogram) -> Result<FusedVector> {
    if h_freak.size() != h_sift.size() {
        return Err(Error::DimensionMismatch {
            expected: h_freak.size(),
            found: h_sift.size(),
        });
    }
    let mut values = h_freak.normalized();
    values.extend(h_sift.normalized());
    FusedVector::from_values(values)
}

fn check_kinds(cb_freak: &Codebook, cb_sift: &Codebook) -> Result<()> {
    for (cb, kind) in [(cb_freak, DescriptorKind::Freak), (cb_sift, DescriptorKind::Sift)] {
        if cb.kind() != kind {
            return Err(Error::KindMismatch {
                expected: kind,
                found: cb.kind(),
            });
        }
    }
    Ok(())
}

pub fn encode_features(features: &ImageFeatures, cb_freak: &Codebook, cb_sift: &Codebook) -> Result<FusedVector> {
    check_kinds(cb_freak, cb_sift)?;
    fuse(&encode(cb_freak, &features.freak)?, &encode(cb_sift, &features.sift)?)
}

/// One detector run, both channels encoded and fused.
pub fn encode_image(
    img: &GrayImage,
    cb_freak: &Codebook,
    cb_sift: &Codebook,
    extractor: &Extractor,
) -> Result<FusedVector> {
    check_kinds(cb_freak, cb_sift)?;
    encode_features(&extractor.extract(img)?, cb_freak, cb_sift)
}

/// Labelled fused vectors for a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub z: usize,
    pub labels: Vec<u16>,
    pub vectors: Vec<FusedVector>,
}

impl EncodedCorpus {
    pub fn new(z: usize, labels: Vec<u16>, vectors: Vec<FusedVector>) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(Error::Data(format!(
                "{} labels for {} vectors",
                labels.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.z() != z) {
            return Err(Error::DimensionMismatch {
                expected: 2 * z,
                found: v.len(),
            });
        }
        Ok(EncodedCorpus { z, labels, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Values are stored as `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_header(w, ENCODED_MAGIC)?;
        w.write_u32::<LittleEndian>(self.z as u32)?;
        w.write_u32::<LittleEndian>(self.vectors.len() as u32)?;
        for (label, v) in self.labels.iter().zip(&self.vectors) {
            w.write_u16::<LittleEndian>(*label)?;
            for &x in v.values() {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        format::read_header(r, ENCODED_MAGIC)?;
        let z = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        let count = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        if z == 0 {
            return Err(Error::Format("encoded corpus with Z = 0".into()));
        }
        let mut labels = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        let mut row = vec![0f32; 2 * z];
        for _ in 0..count {
            labels.push(r.read_u16::<LittleEndian>().map_err(format::truncated)?);
            r.read_f32_into::<LittleEndian>(&mut row)
                .map_err(format::truncated)?;
            vectors.push(FusedVector::from_values(row.iter().map(|&x| x as f64).collect())?);
        }
        Self::new(z, labels, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut format::open(path)?)
    }
}
