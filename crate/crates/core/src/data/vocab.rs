use crate::modality::{tokens, ModalityTag};

/// Token layout of synthetic captions.
///
/// A caption is `[BEGIN, topic, category, digit_0, .., digit_{k-1}, END]`
/// where each digit token encodes one quantized latent coordinate together
/// with its coordinate index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub categories: usize,
    pub latent_dim: usize,
    pub levels: usize,
}

/// Latent coordinates are quantized over this symmetric range.
pub const LATENT_RANGE: f64 = 2.0;

impl Vocabulary {
    pub fn new(categories: usize, latent_dim: usize, levels: usize) -> Self {
        Self {
            categories,
            latent_dim,
            levels,
        }
    }

    fn topic_base(&self) -> u32 {
        tokens::FIRST_FREE
    }

    fn category_base(&self) -> u32 {
        self.topic_base() + ModalityTag::CAPTION_GROUPS.len() as u32
    }

    fn digit_base(&self) -> u32 {
        self.category_base() + self.categories as u32
    }

    /// Number of token ids in use.
    pub fn size(&self) -> usize {
        self.digit_base() as usize + self.latent_dim * self.levels
    }

    pub fn caption_len(&self) -> usize {
        self.latent_dim + 4
    }

    pub fn topic(&self, group: ModalityTag) -> u32 {
        let idx = ModalityTag::CAPTION_GROUPS
            .iter()
            .position(|&g| g == group.caption_group())
            .expect("knowledge modality");
        self.topic_base() + idx as u32
    }

    pub fn category(&self, c: usize) -> u32 {
        self.category_base() + c as u32
    }

    pub fn digit(&self, dim: usize, level: usize) -> u32 {
        self.digit_base() + (dim * self.levels + level) as u32
    }

    pub fn quantize(&self, x: f64) -> usize {
        let t = (x + LATENT_RANGE) / (2.0 * LATENT_RANGE) * self.levels as f64;
        (t.floor().max(0.0) as usize).min(self.levels - 1)
    }

    /// Center of a quantization bin.
    pub fn bin_center(&self, level: usize) -> f64 {
        -LATENT_RANGE + (level as f64 + 0.5) * 2.0 * LATENT_RANGE / self.levels as f64
    }

    pub fn caption(&self, group: ModalityTag, category: usize, latent: &[f64]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.caption_len());
        out.push(tokens::BEGIN);
        out.push(self.topic(group));
        out.push(self.category(category));
        out.extend(latent.iter().enumerate().map(|(i, &x)| self.digit(i, self.quantize(x))));
        out.push(tokens::END);
        out
    }

    /// Digit levels of a caption, in coordinate order; `None` if a coordinate is missing.
    pub fn decode_digits(&self, caption: &[u32]) -> Option<Vec<usize>> {
        let mut levels = vec![None; self.latent_dim];
        let base = self.digit_base();
        for &t in caption {
            if t >= base && ((t - base) as usize) < self.latent_dim * self.levels {
                let off = (t - base) as usize;
                levels[off / self.levels] = Some(off % self.levels);
            }
        }
        levels.into_iter().collect()
    }

    /// Category encoded in a caption, if present.
    pub fn decode_category(&self, caption: &[u32]) -> Option<usize> {
        caption
            .iter()
            .find(|&&t| t >= self.category_base() && t < self.digit_base())
            .map(|&t| (t - self.category_base()) as usize)
    }
}
