use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::vocab::Vocabulary;
use super::{PairDataset, Record};
use crate::config::{RunConfig, DATASET_IDS};
use crate::error::{Error, Result};
use crate::modality::{ModalitySample, ModalityShapes, ModalityTag};
use crate::rng::{hash_str, keyed_rng, stream};

/// Parameters of the synthetic world and its datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub latent_dim: usize,
    pub spread: f64,
    pub noise: f64,
    pub levels: usize,
    pub pair_size: usize,
    pub joint_size: usize,
    pub eval_size: usize,
    pub category_weights: Vec<f64>,
    pub shapes: ModalityShapes,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        Self {
            categories: d.categories,
            latent_dim: d.latent_dim,
            spread: d.spread,
            noise: d.noise,
            levels: d.levels,
            pair_size: d.pair_size,
            joint_size: d.joint_size,
            eval_size: d.eval_size,
            category_weights: d.category_weights.clone(),
            shapes: cfg.model.shapes.clone(),
            seed: cfg.train.seed,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.categories, self.latent_dim, self.levels)
    }

    fn validate(&self) -> Result<()> {
        if self.categories < 2 || self.latent_dim == 0 || self.levels < 2 {
            return Err(Error::Invalid(
                "need at least 2 categories, a positive latent dimension and 2 levels".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.spread >= 0.0) {
            return Err(Error::Invalid("noise and spread must be non-negative".into()));
        }
        if !self.category_weights.is_empty() {
            WeightedIndex::new(&self.category_weights)
                .map_err(|e| Error::Invalid(format!("category weights: {e}")))?;
            if self.category_weights.len() != self.categories {
                return Err(Error::Invalid("one category weight per category".into()));
            }
        }
        Ok(())
    }
}

/// Which partition a record belongs to. Partitions use disjoint random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

/// The hidden generative structure: category means and one linear map per modality.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: SyntheticSpec,
    /// `categories × latent_dim`.
    pub means: Vec<Vec<f64>>,
    /// Per knowledge modality, a row-major `payload_len × latent_dim` map.
    pub maps: [Vec<f64>; 5],
}

impl World {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let mut rng = keyed_rng(&[spec.seed, stream::WORLD]);
        let means = (0..spec.categories)
            .map(|_| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let scale = 1.0 / (k as f64).sqrt();
        let maps = ModalityTag::KNOWLEDGE.map(|tag| {
            let n = spec.shapes.payload_len(tag) * k;
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        });
        Ok(Self {
            spec: spec.clone(),
            means,
            maps,
        })
    }

    pub fn map(&self, tag: ModalityTag) -> &[f64] {
        &self.maps[tag.knowledge_index().expect("knowledge modality")]
    }

    /// Noise-free payload of `latent` in modality `tag`.
    pub fn render(&self, tag: ModalityTag, latent: &[f64]) -> Vec<f64> {
        let k = self.spec.latent_dim;
        self.map(tag)
            .chunks(k)
            .map(|row| row.iter().zip(latent).map(|(a, u)| a * u).sum())
            .collect()
    }

    fn category_of(&self, index: usize, rng: &mut impl Rng) -> usize {
        if self.spec.category_weights.is_empty() {
            index % self.spec.categories
        } else {
            WeightedIndex::new(&self.spec.category_weights)
                .expect("validated")
                .sample(rng)
        }
    }

    /// Draws `(category, latent)` of one record.
    pub fn latent(&self, dataset: &str, split: Split, index: usize) -> (usize, Vec<f64>) {
        let mut rng = self.record_rng(dataset, split, index);
        let c = self.category_of(index, &mut rng);
        let u = self.means[c]
            .iter()
            .map(|m| m + self.spec.spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (c, u)
    }

    fn record_rng(&self, dataset: &str, split: Split, index: usize) -> rand_chacha::ChaCha8Rng {
        keyed_rng(&[self.spec.seed, stream::RECORD, split.key(), hash_str(dataset), index as u64])
    }

    pub fn record(&self, dataset: &str, split: Split, index: usize) -> Result<Record> {
        let tags = dataset_modalities(dataset)?;
        let (category, latent) = self.latent(dataset, split, index);
        // payload noise uses its own stream so latents stay comparable across settings
        let mut rng = keyed_rng(&[
            self.spec.seed,
            stream::RECORD,
            split.key(),
            hash_str(dataset),
            index as u64,
            1,
        ]);
        let vocab = self.spec.vocabulary();
        let samples = tags
            .iter()
            .map(|&tag| {
                let payload = self
                    .render(tag, &latent)
                    .into_iter()
                    .map(|v| (v + self.spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                let caption = if tag.caption_group() == tag {
                    vocab.caption(tag, category, &latent)
                } else {
                    Vec::new()
                };
                ModalitySample {
                    tag,
                    shape: self.spec.shapes.layout(tag),
                    payload,
                    caption,
                }
            })
            .collect();
        Ok(Record {
            category: category as u32,
            samples,
        })
    }
}

/// Modalities present in each dataset's records.
pub fn dataset_modalities(id: &str) -> Result<Vec<ModalityTag>> {
    Ok(match id {
        "T-I" => vec![ModalityTag::Image],
        "T-A" => vec![ModalityTag::Audio],
        "T-V" => vec![ModalityTag::Video],
        "joint" => ModalityTag::KNOWLEDGE.to_vec(),
        other => return Err(Error::UnknownDataset(other.to_string())),
    })
}

/// Generates `size` records of dataset `id`.
pub fn generate_dataset(world: &World, id: &str, split: Split, size: usize) -> Result<PairDataset> {
    dataset_modalities(id)?;
    let records = (0..size)
        .map(|i| world.record(id, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairDataset {
        id: id.to_string(),
        records,
    })
}

/// The default layout: T-I, T-A, T-V and the joint tuple set for training,
/// then held-out T-I, T-A and T-V for evaluation.
pub fn generate_all(spec: &SyntheticSpec) -> Result<(Vec<PairDataset>, Vec<PairDataset>)> {
    let world = World::new(spec)?;
    let mut train = Vec::new();
    for id in DATASET_IDS {
        let size = if id == "joint" { spec.joint_size } else { spec.pair_size };
        train.push(generate_dataset(&world, id, Split::Train, size)?);
    }
    let eval = DATASET_IDS[..3]
        .iter()
        .map(|id| generate_dataset(&world, id, Split::Eval, spec.eval_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        let mut cfg = RunConfig::default();
        cfg.data.pair_size = 20;
        cfg.data.joint_size = 10;
        cfg.data.eval_size = 5;
        SyntheticSpec::from_config(&cfg)
    }

    #[test]
    fn deterministic() {
        let s = spec();
        let w = World::new(&s).unwrap();
        let a = generate_dataset(&w, "joint", Split::Train, 4).unwrap();
        let b = generate_dataset(&World::new(&s).unwrap(), "joint", Split::Train, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&w, "joint", Split::Eval, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_categories() {
        let s = spec();
        let w = World::new(&s).unwrap();
        let ds = generate_dataset(&w, "T-I", Split::Train, 37).unwrap();
        let mut counts = vec![0usize; s.categories];
        for r in &ds.records {
            counts[r.category as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn joint_records_share_captions_by_group() {
        let s = spec();
        let w = World::new(&s).unwrap();
        let r = w.record("joint", Split::Train, 3).unwrap();
        let tags: Vec<_> = r.samples.iter().map(|x| x.tag).collect();
        assert_eq!(tags, ModalityTag::KNOWLEDGE.to_vec());
        assert!(r.samples[3].caption.is_empty() && r.samples[4].caption.is_empty());
        let v = s.vocabulary();
        assert_eq!(v.decode_digits(&r.samples[0].caption), v.decode_digits(&r.samples[1].caption));
    }
}
