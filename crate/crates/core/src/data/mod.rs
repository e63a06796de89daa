//! Synthetic multimodal datasets, their file format, splitting and sampling.

pub(crate) mod io;
mod oracle;
mod sampler;
mod split;
mod synth;
mod vocab;

pub use io::{decode_dataset, encode_dataset, load_dataset, manifest_lines, save_dataset, write_manifest, DATASET_MAGIC, DATASET_VERSION};
pub use oracle::LatentOracle;
pub use sampler::{mix_weights, sample_joint, BatchSlot};
pub use split::{desk_ladder, stratified_counts, stratified_split, PAPER_LADDER};
pub use synth::{dataset_modalities, generate_all, generate_dataset, Split, SyntheticSpec, World};
pub use vocab::{Vocabulary, LATENT_RANGE};

use serde::{Deserialize, Serialize};

use crate::modality::{ModalitySample, ModalityTag};

/// One tuple of samples drawn from a single latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub category: u32,
    pub samples: Vec<ModalitySample>,
}

impl Record {
    pub fn sample(&self, tag: ModalityTag) -> Option<&ModalitySample> {
        self.samples.iter().find(|s| s.tag == tag)
    }

    pub fn tags(&self) -> Vec<ModalityTag> {
        self.samples.iter().map(|s| s.tag).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub id: String,
    pub records: Vec<Record>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn category_counts(&self) -> Vec<(u32, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.category).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }
}

/// A record restricted to a modality subset, ready for the model.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    /// Knowledge samples in canonical order.
    pub knowledge: Vec<&'a ModalitySample>,
    /// Captions of the covered caption groups, in canonical group order.
    pub captions: Vec<&'a [u32]>,
    /// Row of the sampling-embedding table.
    pub dataset: usize,
}

impl<'a> Example<'a> {
    /// Keeps the samples whose tag is in `subset`; `None` when nothing is left.
    pub fn from_record(record: &'a Record, subset: &[ModalityTag], dataset: usize) -> Option<Self> {
        let mut knowledge: Vec<&ModalitySample> = record
            .samples
            .iter()
            .filter(|s| s.tag != ModalityTag::Text && subset.contains(&s.tag))
            .collect();
        if knowledge.is_empty() {
            return None;
        }
        knowledge.sort_by_key(|s| s.tag.knowledge_index());
        let captions = ModalityTag::CAPTION_GROUPS
            .iter()
            .filter(|&&g| knowledge.iter().any(|s| s.tag.caption_group() == g))
            .filter_map(|&g| record.sample(g).map(|s| s.caption.as_slice()))
            .filter(|c| !c.is_empty())
            .collect::<Vec<_>>();
        if captions.is_empty() {
            return None;
        }
        Some(Self {
            knowledge,
            captions,
            dataset,
        })
    }

    /// Captions concatenated in canonical order.
    pub fn text(&self) -> Vec<u32> {
        self.captions.concat()
    }
}
