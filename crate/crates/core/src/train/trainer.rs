use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mico_autodiff::Tape;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{clip_global_norm, AdamW};
use super::schedule::lr_at;
use crate::config::{dataset_index, RunConfig};
use crate::data::{mix_weights, sample_joint, Example, PairDataset};
use crate::error::{Error, Result};
use crate::modality::ModalityTag;
use crate::model::MicoModel;
use crate::objectives::{total_loss, StepKey};

/// The datasets a run draws from, with their mixture weights.
///
/// Datasets whose records carry none of the configured modalities get
/// weight 0.
pub struct TrainingSet<'a> {
    datasets: Vec<&'a PairDataset>,
    rows: Vec<usize>,
    weights: Vec<f64>,
    subset: Vec<ModalityTag>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(datasets: &[&'a PairDataset], config: &RunConfig) -> Result<Self> {
        let subset = config.context.modalities.clone();
        let rows = datasets.iter().map(|d| dataset_index(&d.id)).collect::<Result<Vec<_>>>()?;
        let mix = if config.context.mix.is_empty() {
            Vec::new()
        } else {
            rows.iter().map(|&r| config.context.mix[r]).collect()
        };
        let mut weights = mix_weights(datasets, &mix);
        for (w, d) in weights.iter_mut().zip(datasets) {
            let usable = d.records.first().is_some_and(|r| r.tags().iter().any(|t| subset.contains(t)));
            if !usable {
                *w = 0.0;
            }
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Invalid(format!(
                "no dataset carries any of the modalities {}",
                crate::modality::format_modalities(&subset)
            )));
        }
        Ok(Self {
            datasets: datasets.to_vec(),
            rows,
            weights,
            subset,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The batch of step `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, size: usize, seed: u64, step: u64, distinct: bool) -> Result<Vec<Example<'a>>> {
        let slots = sample_joint(&self.datasets, &self.weights, size, seed, step, distinct)?;
        slots
            .into_iter()
            .map(|s| {
                let record = &self.datasets[s.source].records[s.record];
                Example::from_record(record, &self.subset, self.rows[s.source]).ok_or_else(|| {
                    Error::Invalid(format!(
                        "record {} of {} has no sample in the modality subset",
                        s.record, self.datasets[s.source].id
                    ))
                })
            })
            .collect()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsLine {
    pub step: u64,
    pub l_con: f64,
    pub l_match: f64,
    pub l_gen: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// A metrics line plus the smoothed total kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub metrics: MetricsLine,
    pub ema: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: MicoModel<f32>,
    pub optimizer: AdamW,
    /// Updates applied so far.
    pub step: u64,
    pub ema: Option<f64>,
}

/// Config sections a checkpoint must agree on to be resumed.
fn architecture_text(cfg: &RunConfig) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(s, _, _)| matches!(*s, "model" | "context" | "objectives"))
        .map(|(s, k, v)| format!("{s}.{k}={v}\n"))
        .collect()
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = MicoModel::new(&config.model, config.train.seed)?;
        let t = &config.train;
        let optimizer = AdamW::new(&model.params, t.beta1, t.beta2, t.eps, t.weight_decay);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            ema: None,
        })
    }

    /// Restores a checkpoint into a fresh model built from `config`.
    ///
    /// The model, context and objectives sections must match the config the
    /// checkpoint was written under. Nothing is modified on error.
    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        let saved = RunConfig::parse(&ckpt.config)?;
        let (want, have) = (architecture_text(&config), architecture_text(&saved));
        if want != have {
            let diff = want
                .lines()
                .zip(have.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("run has `{a}`, checkpoint has `{b}`"))
                .unwrap_or_else(|| "differing sections".into());
            return Err(Error::ParamMismatch(format!("config mismatch: {diff}")));
        }
        let mut trainer = Self::new(config)?;
        trainer.model.params.assign_from(&ckpt.params)?;
        ckpt.optimizer.check_shapes(&trainer.model.params)?;
        trainer.optimizer = ckpt.optimizer;
        trainer.step = ckpt.step;
        trainer.ema = ckpt.ema;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.serialize(),
            ema: self.ema,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Runs one update: forward, backward, clipping, AdamW, temperature clamp.
    pub fn train_step(&mut self, set: &TrainingSet) -> Result<StepRecord> {
        let started = Instant::now();
        let cfg = &self.config;
        let step = self.step + 1;
        let lr = lr_at(step as usize, &cfg.train);
        let items = set.batch(cfg.train.batch_size, cfg.train.seed, step, cfg.train.distinct)?;

        let mut tape = Tape::<f32>::new();
        let bound = self.model.bind(&mut tape, true);
        let key = StepKey {
            seed: cfg.train.seed,
            step,
        };
        let graph = total_loss(&self.model, &mut tape, &bound, &items, &cfg.objectives, cfg.context.mode, key)?;
        if !graph.breakdown.total.is_finite() {
            let at = tape
                .first_non_finite()
                .map(|(i, op)| format!("tape node {i} ({op})"))
                .unwrap_or_else(|| "the total loss".into());
            return Err(Error::NonFinite(format!("{at} at step {step}")));
        }
        let mut grads = tape.backward_scalar(graph.total)?;
        let mut flat: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        drop(tape);
        for (id, g) in self.model.params.ids().zip(&flat) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at step {step}",
                    self.model.params.name(id)
                )));
            }
        }
        let grad_norm = clip_global_norm(&mut flat, cfg.train.clip_norm);
        self.optimizer.update(&mut self.model.params, &flat, lr)?;
        let ceiling = cfg.model.tau_max.ln() as f32;
        let scale = self.model.params.get_mut(self.model.ids.heads.logit_scale);
        for v in scale.data_mut() {
            *v = v.min(ceiling);
        }

        let b = graph.breakdown;
        let decay = cfg.train.ema_decay;
        let ema = match self.ema {
            None => b.total,
            Some(e) => decay * e + (1.0 - decay) * b.total,
        };
        self.ema = Some(ema);
        self.step = step;
        let wall_ms = if cfg.train.wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(StepRecord {
            metrics: MetricsLine {
                step,
                l_con: b.l_con,
                l_match: b.l_match,
                l_gen: b.l_gen,
                total: b.total,
                lr,
                wall_ms,
            },
            ema,
            grad_norm,
        })
    }

    /// Trains until `config.train.steps`, writing `metrics.jsonl` and
    /// checkpoints into `out` when given. Returns the records of this call.
    pub fn run(&mut self, set: &TrainingSet, out: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut metrics = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(file)))
            }
            None => None,
        };
        let mut records = Vec::new();
        let every = self.config.train.checkpoint_every as u64;
        while (self.step as usize) < self.config.train.steps {
            let rec = self.train_step(set);
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    if let Some((path, w)) = metrics.as_mut() {
                        w.flush().map_err(|err| Error::io(path.as_path(), err))?;
                    }
                    return Err(e);
                }
            };
            if let Some((path, w)) = metrics.as_mut() {
                let line = serde_json::to_string(&rec.metrics).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                if every > 0 && self.step % every == 0 {
                    if let Some(dir) = out {
                        self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                    }
                }
            }
            on_step(&rec);
            records.push(rec);
        }
        if let Some((path, mut w)) = metrics {
            w.flush().map_err(|e| Error::io(&path, e))?;
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join("final.mick"))?;
            }
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.mick"))
}

/// Reads a metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                offset: i,
                reason: format!("metrics line {}: {e}", i + 1),
            })
        })
        .collect()
}
