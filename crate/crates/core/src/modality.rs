//! Modalities, their payload layouts and patch tokenization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids shared by every caption vocabulary.
pub mod tokens {
    pub const PAD: u32 = 0;
    pub const MASK: u32 = 1;
    pub const BEGIN: u32 = 2;
    pub const END: u32 = 3;
    /// First id available to ordinary tokens.
    pub const FIRST_FREE: u32 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityTag {
    Text,
    Image,
    Audio,
    Video,
    Depth,
    Normal,
}

impl ModalityTag {
    /// Knowledge modalities in canonical context order.
    pub const KNOWLEDGE: [ModalityTag; 5] = [
        ModalityTag::Image,
        ModalityTag::Audio,
        ModalityTag::Video,
        ModalityTag::Depth,
        ModalityTag::Normal,
    ];

    /// Caption groups in canonical order: depth and normal maps share the image caption.
    pub const CAPTION_GROUPS: [ModalityTag; 3] =
        [ModalityTag::Image, ModalityTag::Audio, ModalityTag::Video];

    /// Position in [`Self::KNOWLEDGE`], `None` for text.
    pub fn knowledge_index(self) -> Option<usize> {
        Self::KNOWLEDGE.iter().position(|&t| t == self)
    }

    pub fn caption_group(self) -> ModalityTag {
        match self {
            ModalityTag::Depth | ModalityTag::Normal => ModalityTag::Image,
            other => other,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ModalityTag::Text => "T",
            ModalityTag::Image => "I",
            ModalityTag::Audio => "A",
            ModalityTag::Video => "V",
            ModalityTag::Depth => "D",
            ModalityTag::Normal => "N",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        Some(match s {
            "T" => ModalityTag::Text,
            "I" => ModalityTag::Image,
            "A" => ModalityTag::Audio,
            "V" => ModalityTag::Video,
            "D" => ModalityTag::Depth,
            "N" => ModalityTag::Normal,
            _ => return None,
        })
    }

    pub fn to_byte(self) -> u8 {
        match self {
            ModalityTag::Text => 0,
            ModalityTag::Image => 1,
            ModalityTag::Audio => 2,
            ModalityTag::Video => 3,
            ModalityTag::Depth => 4,
            ModalityTag::Normal => 5,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => ModalityTag::Text,
            1 => ModalityTag::Image,
            2 => ModalityTag::Audio,
            3 => ModalityTag::Video,
            4 => ModalityTag::Depth,
            5 => ModalityTag::Normal,
            _ => return None,
        })
    }
}

/// Parses a comma-separated list such as `I,A,V` into canonical order.
pub fn parse_modalities(s: &str) -> Option<Vec<ModalityTag>> {
    let mut tags = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let tag = ModalityTag::from_short(part)?;
        if tag == ModalityTag::Text || tags.contains(&tag) {
            return None;
        }
        tags.push(tag);
    }
    tags.sort_by_key(|t| t.knowledge_index());
    Some(tags)
}

pub fn format_modalities(tags: &[ModalityTag]) -> String {
    tags.iter().map(|t| t.short()).collect::<Vec<_>>().join(",")
}

/// Payload layouts of the knowledge modalities.
///
/// Image, depth and normal maps are `channels × H × W`, audio is
/// `mel-bins × frames`, video is `frames × channels × H × W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityShapes {
    pub image: [usize; 3],
    pub audio: [usize; 2],
    pub video: [usize; 4],
    pub depth: [usize; 3],
    pub normal: [usize; 3],
}

impl Default for ModalityShapes {
    fn default() -> Self {
        Self {
            image: [3, 8, 8],
            audio: [8, 16],
            video: [2, 3, 8, 8],
            depth: [1, 8, 8],
            normal: [3, 8, 8],
        }
    }
}

impl ModalityShapes {
    pub fn layout(&self, tag: ModalityTag) -> Vec<usize> {
        match tag {
            ModalityTag::Image => self.image.to_vec(),
            ModalityTag::Audio => self.audio.to_vec(),
            ModalityTag::Video => self.video.to_vec(),
            ModalityTag::Depth => self.depth.to_vec(),
            ModalityTag::Normal => self.normal.to_vec(),
            ModalityTag::Text => Vec::new(),
        }
    }

    pub fn payload_len(&self, tag: ModalityTag) -> usize {
        self.layout(tag).iter().product()
    }

    /// Values in one flattened patch.
    pub fn patch_dim(&self, tag: ModalityTag, patch: usize) -> usize {
        let layout = self.layout(tag);
        match tag {
            ModalityTag::Audio => patch * patch,
            ModalityTag::Video => layout[1] * patch * patch,
            _ => layout[0] * patch * patch,
        }
    }

    /// Number of patch tokens a sample produces.
    pub fn token_count(&self, tag: ModalityTag, patch: usize) -> usize {
        let l = self.layout(tag);
        match tag {
            ModalityTag::Audio => (l[0] / patch) * (l[1] / patch),
            ModalityTag::Video => l[0] * (l[2] / patch) * (l[3] / patch),
            ModalityTag::Text => 0,
            _ => (l[1] / patch) * (l[2] / patch),
        }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if patch == 0 {
            return Err(Error::Invalid("patch size must be positive".into()));
        }
        for tag in ModalityTag::KNOWLEDGE {
            let layout = self.layout(tag);
            if layout.contains(&0) {
                return Err(Error::Invalid(format!("{tag:?} layout has a zero extent")));
            }
            let spatial: &[usize] = match tag {
                ModalityTag::Audio => &layout[..],
                ModalityTag::Video => &layout[2..],
                _ => &layout[1..],
            };
            for &extent in spatial {
                if extent % patch != 0 {
                    return Err(Error::PatchSize { tag, extent, patch });
                }
            }
        }
        Ok(())
    }
}

/// One raw sample of a knowledge modality with its caption tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySample {
    pub tag: ModalityTag,
    pub shape: Vec<usize>,
    pub payload: Vec<f32>,
    pub caption: Vec<u32>,
}

impl ModalitySample {
    pub fn check_layout(&self, shapes: &ModalityShapes) -> Result<()> {
        let expected = shapes.layout(self.tag);
        if self.shape != expected || self.payload.len() != expected.iter().product::<usize>() {
            return Err(Error::PayloadShape {
                tag: self.tag,
                expected,
                got: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Cuts a payload into non-overlapping `patch × patch` tiles, one row per
/// tile in raster order (video: frame by frame). Each row is flattened as
/// `(channel, y, x)`.
pub fn patchify(tag: ModalityTag, shape: &[usize], payload: &[f32], patch: usize) -> Result<Vec<Vec<f32>>> {
    let bad_shape = || Error::PayloadShape {
        tag,
        expected: Vec::new(),
        got: shape.to_vec(),
    };
    if payload.len() != shape.iter().product::<usize>() || patch == 0 {
        return Err(bad_shape());
    }
    // normalize to frames × channels × H × W
    let (frames, channels, height, width) = match (tag, shape) {
        (ModalityTag::Audio, &[h, w]) => (1, 1, h, w),
        (ModalityTag::Video, &[f, c, h, w]) => (f, c, h, w),
        (ModalityTag::Image | ModalityTag::Depth | ModalityTag::Normal, &[c, h, w]) => (1, c, h, w),
        _ => return Err(bad_shape()),
    };
    for extent in [height, width] {
        if extent % patch != 0 {
            return Err(Error::PatchSize { tag, extent, patch });
        }
    }
    let frame_len = channels * height * width;
    let mut rows = Vec::with_capacity(frames * (height / patch) * (width / patch));
    for f in 0..frames {
        let frame = &payload[f * frame_len..(f + 1) * frame_len];
        for py in 0..height / patch {
            for px in 0..width / patch {
                let mut row = Vec::with_capacity(channels * patch * patch);
                for c in 0..channels {
                    for y in 0..patch {
                        let base = c * height * width + (py * patch + y) * width + px * patch;
                        row.extend_from_slice(&frame[base..base + patch]);
                    }
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let s = ModalityShapes::default();
        assert_eq!(s.token_count(ModalityTag::Image, 4), 4);
        assert_eq!(s.token_count(ModalityTag::Video, 4), 8);
        assert_eq!(s.token_count(ModalityTag::Audio, 4), 8);
        assert_eq!(s.patch_dim(ModalityTag::Image, 4), 48);
        assert_eq!(s.patch_dim(ModalityTag::Depth, 4), 16);
    }

    #[test]
    fn patchify_raster_order() {
        // 1×4×4 ramp, patch 2: first tile holds values 0,1,4,5
        let payload: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let rows = patchify(ModalityTag::Depth, &[1, 4, 4], &payload, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(rows[3], vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let err = patchify(ModalityTag::Image, &[3, 6, 8], &vec![0.0; 144], 4).unwrap_err();
        assert!(matches!(err, Error::PatchSize { extent: 6, .. }));
    }

    #[test]
    fn modality_list_parsing() {
        let tags = parse_modalities("V, I,A").unwrap();
        assert_eq!(tags, vec![ModalityTag::Image, ModalityTag::Audio, ModalityTag::Video]);
        assert!(parse_modalities("I,I").is_none());
        assert!(parse_modalities("T").is_none());
        assert_eq!(format_modalities(&tags), "I,A,V");
    }
}
