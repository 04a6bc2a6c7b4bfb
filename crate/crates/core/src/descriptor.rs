//! Descriptor value types shared by the SIFT and FREAK channels.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, DESCRIPTORS_MAGIC};

pub const SIFT_DIM: usize = 128;
pub const FREAK_BITS: usize = 512;
pub const FREAK_WORDS: usize = FREAK_BITS / 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Sift,
    Freak,
}

impl DescriptorKind {
    /// Dimension of the float space the codebook clusters in.
    pub fn embedded_dim(self) -> usize {
        match self {
            DescriptorKind::Sift => SIFT_DIM,
            DescriptorKind::Freak => FREAK_BITS,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DescriptorKind::Sift => 0,
            DescriptorKind::Freak => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DescriptorKind::Sift),
            1 => Ok(DescriptorKind::Freak),
            t => Err(Error::Format(format!("unknown descriptor kind tag {t}"))),
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DescriptorKind::Sift => "sift",
            DescriptorKind::Freak => "freak",
        })
    }
}

/// 4×4 spatial cells × 8 orientation bins, unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftDescriptor(pub [f32; SIFT_DIM]);

impl SiftDescriptor {
    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// 512 comparison bits; bit `k` lives in word `k / 64` at position `k % 64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FreakDescriptor {
    words: [u64; FREAK_WORDS],
}

impl FreakDescriptor {
    pub fn zeros() -> Self {
        FreakDescriptor {
            words: [0; FREAK_WORDS],
        }
    }

    pub fn from_words(words: [u64; FREAK_WORDS]) -> Self {
        FreakDescriptor { words }
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.len() != FREAK_BITS {
            return Err(Error::DimensionMismatch {
                expected: FREAK_BITS,
                found: bits.len(),
            });
        }
        let mut d = Self::zeros();
        for (k, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            d.set(k);
        }
        Ok(d)
    }

    pub fn words(&self) -> &[u64; FREAK_WORDS] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, k: usize) -> bool {
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, k: usize) {
        self.words[k / 64] |= 1 << (k % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Embeds the bits as a 0.0/1.0 float vector.
    pub fn embed(&self) -> Vec<f32> {
        (0..FREAK_BITS)
            .map(|k| if self.bit(k) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn to_bytes(&self) -> [u8; FREAK_BITS / 8] {
        let mut out = [0u8; FREAK_BITS / 8];
        for (i, w) in self.words.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; FREAK_BITS / 8]) -> Self {
        let mut words = [0u64; FREAK_WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[i * 8..(i + 1) * 8]);
            *w = u64::from_le_bytes(b);
        }
        FreakDescriptor { words }
    }
}

/// The descriptors `d_1 … d_T` extracted from one image (or pooled over many).
#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorSet {
    Sift(Vec<SiftDescriptor>),
    Freak(Vec<FreakDescriptor>),
}

impl DescriptorSet {
    pub fn empty(kind: DescriptorKind) -> Self {
        match kind {
            DescriptorKind::Sift => DescriptorSet::Sift(Vec::new()),
            DescriptorKind::Freak => DescriptorSet::Freak(Vec::new()),
        }
    }

    pub fn kind(&self) -> DescriptorKind {
        match self {
            DescriptorSet::Sift(_) => DescriptorKind::Sift,
            DescriptorSet::Freak(_) => DescriptorKind::Freak,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DescriptorSet::Sift(v) => v.len(),
            DescriptorSet::Freak(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the descriptors at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> DescriptorSet {
        match self {
            DescriptorSet::Sift(v) => {
                DescriptorSet::Sift(indices.iter().map(|&i| v[i].clone()).collect())
            }
            DescriptorSet::Freak(v) => DescriptorSet::Freak(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Appends `other` to `self`; both sets must share a kind.
    pub fn extend(&mut self, other: &DescriptorSet) -> Result<()> {
        match (self, other) {
            (DescriptorSet::Sift(a), DescriptorSet::Sift(b)) => a.extend(b.iter().cloned()),
            (DescriptorSet::Freak(a), DescriptorSet::Freak(b)) => a.extend(b.iter().copied()),
            (a, b) => {
                return Err(Error::KindMismatch {
                    expected: a.kind(),
                    found: b.kind(),
                })
            }
        }
        Ok(())
    }

    /// Row `i` in the codebook's float space.
    pub fn embedded_row(&self, i: usize) -> Vec<f32> {
        match self {
            DescriptorSet::Sift(v) => v[i].0.to_vec(),
            DescriptorSet::Freak(v) => v[i].embed(),
        }
    }

    /// All rows in the codebook's float space, row-major.
    pub fn embed_all(&self) -> Vec<f32> {
        let dim = self.kind().embedded_dim();
        let mut out = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            out.extend(self.embedded_row(i));
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_header(w, DESCRIPTORS_MAGIC)?;
        w.write_u8(self.kind().tag())?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        match self {
            DescriptorSet::Sift(v) => {
                w.write_u32::<LittleEndian>(SIFT_DIM as u32)?;
                for d in v {
                    for &x in d.0.iter() {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
            }
            DescriptorSet::Freak(v) => {
                w.write_u32::<LittleEndian>(FREAK_BITS as u32)?;
                for d in v {
                    w.write_all(&d.to_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        format::read_header(r, DESCRIPTORS_MAGIC)?;
        let kind = DescriptorKind::from_tag(r.read_u8().map_err(format::truncated)?)?;
        let count = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(format::truncated)? as usize;
        match kind {
            DescriptorKind::Sift => {
                if dim != SIFT_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: SIFT_DIM,
                        found: dim,
                    });
                }
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut d = [0f32; SIFT_DIM];
                    r.read_f32_into::<LittleEndian>(&mut d)
                        .map_err(format::truncated)?;
                    out.push(SiftDescriptor(d));
                }
                Ok(DescriptorSet::Sift(out))
            }
            DescriptorKind::Freak => {
                if dim != FREAK_BITS {
                    return Err(Error::DimensionMismatch {
                        expected: FREAK_BITS,
                        found: dim,
                    });
                }
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut b = [0u8; FREAK_BITS / 8];
                    r.read_exact(&mut b).map_err(format::truncated)?;
                    out.push(FreakDescriptor::from_bytes(&b));
                }
                Ok(DescriptorSet::Freak(out))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::save_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut format::open(path)?)
    }
}
