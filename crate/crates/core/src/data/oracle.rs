use nalgebra::DMatrix;

use super::synth::World;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::modality::{ModalitySample, ModalityTag};

/// Reference encoder that knows the generating maps.
///
/// Knowledge samples are mapped back to latent space by least squares;
/// both sides are then encoded as unit vectors over quantized digits, so a
/// record and its caption receive the same code whenever quantization agrees.
#[derive(Clone, Debug)]
pub struct LatentOracle {
    vocab: Vocabulary,
    latent_dim: usize,
    /// Per knowledge modality, the `latent_dim × payload_len` pseudo-inverse.
    pinv: Vec<DMatrix<f64>>,
}

impl LatentOracle {
    pub fn new(world: &World) -> Result<Self> {
        let k = world.spec.latent_dim;
        let pinv = ModalityTag::KNOWLEDGE
            .iter()
            .map(|&tag| {
                let map = world.map(tag);
                let a = DMatrix::from_row_slice(map.len() / k, k, map);
                a.pseudo_inverse(1e-12)
                    .map_err(|e| Error::Invalid(format!("pseudo-inverse of {tag:?} map: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocab: world.spec.vocabulary(),
            latent_dim: k,
            pinv,
        })
    }

    /// Least-squares latent of a knowledge sample.
    pub fn recover(&self, sample: &ModalitySample) -> Result<Vec<f64>> {
        let idx = sample
            .tag
            .knowledge_index()
            .ok_or_else(|| Error::Invalid("text has no latent map".into()))?;
        let p = &self.pinv[idx];
        if p.ncols() != sample.payload.len() {
            return Err(Error::PayloadShape {
                tag: sample.tag,
                expected: vec![p.ncols()],
                got: sample.shape.clone(),
            });
        }
        let x = nalgebra::DVector::from_iterator(sample.payload.len(), sample.payload.iter().map(|&v| v as f64));
        Ok((p * x).iter().copied().collect())
    }

    fn code(&self, levels: &[usize]) -> Vec<f32> {
        let mut v = vec![0.0f32; self.latent_dim * self.vocab.levels];
        let w = 1.0 / (self.latent_dim as f32).sqrt();
        for (dim, &l) in levels.iter().enumerate() {
            v[dim * self.vocab.levels + l] = w;
        }
        v
    }

    pub fn knowledge_code(&self, sample: &ModalitySample) -> Result<Vec<f32>> {
        let u = self.recover(sample)?;
        let levels: Vec<usize> = u.iter().map(|&x| self.vocab.quantize(x)).collect();
        Ok(self.code(&levels))
    }

    pub fn text_code(&self, caption: &[u32]) -> Result<Vec<f32>> {
        let levels = self
            .vocab
            .decode_digits(caption)
            .ok_or_else(|| Error::Invalid("caption lacks latent digits".into()))?;
        Ok(self.code(&levels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_dataset, Split, SyntheticSpec};

    #[test]
    fn noiseless_recovery_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.data.noise = 0.0;
        let spec = SyntheticSpec::from_config(&cfg);
        let world = World::new(&spec).unwrap();
        let oracle = LatentOracle::new(&world).unwrap();
        for i in 0..5 {
            let (_, u) = world.latent("joint", Split::Train, i);
            let r = world.record("joint", Split::Train, i).unwrap();
            for s in &r.samples {
                let got = oracle.recover(s).unwrap();
                for (a, b) in got.iter().zip(&u) {
                    assert!((a - b).abs() < 1e-4, "{:?}: {a} vs {b}", s.tag);
                }
            }
        }
        let ds = generate_dataset(&world, "T-A", Split::Train, 3).unwrap();
        let code = oracle.knowledge_code(&ds.records[0].samples[0]).unwrap();
        let text = oracle.text_code(&ds.records[0].samples[0].caption).unwrap();
        assert_eq!(code, text);
    }
}
