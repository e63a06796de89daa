//! Run configuration and its sectioned `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! [train]
//! steps = 500
//! lr = 0.001
//! ```
//!
//! Sections are `[data]`, `[model]`, `[context]`, `[objectives]`, `[train]`
//! and `[eval]`. Every key has a default, so an empty file is valid. Unknown
//! sections and keys are rejected with the offending line number.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{format_modalities, parse_modalities, ModalityShapes, ModalityTag};

/// Source datasets, in the row order of the sampling-embedding table.
pub const DATASET_IDS: [&str; 4] = ["T-I", "T-A", "T-V", "joint"];

pub fn dataset_index(id: &str) -> Result<usize> {
    DATASET_IDS
        .iter()
        .position(|d| *d == id)
        .ok_or_else(|| Error::UnknownDataset(id.to_string()))
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Variant {
    ModalitySpecific => "modality_specific",
    UnifiedTextEncoder => "unified_text_encoder",
    SharedVitPlusText => "shared_vit_plus_text",
});

keyword_enum!(Projection {
    Mlp => "mlp",
    Linear => "linear",
});

keyword_enum!(ContextMode {
    SingleDataset => "single_dataset",
    MultiDataset => "multi_dataset",
});

keyword_enum!(MaskMode {
    Replace => "replace",
    TargetsOnly => "targets_only",
});

keyword_enum!(Schedule {
    LinearDecay => "linear_decay",
    Cosine => "cosine",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub categories: usize,
    pub latent_dim: usize,
    /// Standard deviation of latents around their category mean.
    pub spread: f64,
    /// Observation noise σ added to every payload.
    pub noise: f64,
    /// Quantization bins per latent coordinate in captions.
    pub levels: usize,
    /// Records in each of the T-I, T-A and T-V training sets.
    pub pair_size: usize,
    /// Records in the joint tuple set.
    pub joint_size: usize,
    /// Records in each held-out pair set.
    pub eval_size: usize,
    /// Relative category frequencies; empty means balanced.
    pub category_weights: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: 10,
            latent_dim: 8,
            spread: 0.5,
            noise: 0.1,
            levels: 16,
            pair_size: 1000,
            joint_size: 1000,
            eval_size: 200,
            category_weights: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    /// Longest single caption, including begin and end tokens.
    pub max_text_len: usize,
    pub patch: usize,
    pub proj_dim: usize,
    pub variant: Variant,
    pub projection: Projection,
    pub init_std: f64,
    pub tau_init: f64,
    pub tau_max: f64,
    pub ln_eps: f64,
    pub shapes: ModalityShapes,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab: 256,
            max_text_len: 32,
            patch: 4,
            proj_dim: 64,
            variant: Variant::SharedVitPlusText,
            projection: Projection::Mlp,
            init_std: 0.02,
            tau_init: 1.0 / 0.07,
            tau_max: 100.0,
            ln_eps: 1e-5,
            shapes: ModalityShapes::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("model.width must be a positive multiple of model.heads");
        }
        if self.mlp_ratio == 0 || self.proj_dim == 0 {
            return bad("model.mlp_ratio and model.proj_dim must be positive");
        }
        if self.vocab <= crate::modality::tokens::FIRST_FREE as usize {
            return bad("model.vocab must exceed the reserved token ids");
        }
        if self.max_text_len == 0 {
            return bad("model.max_text_len must be positive");
        }
        if !(self.tau_init > 0.0 && self.tau_max >= self.tau_init) {
            return bad("model.tau_init must be positive and at most model.tau_max");
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            return bad("model.init_std and model.ln_eps must be positive");
        }
        self.shapes.validate(self.patch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub mode: ContextMode,
    /// Knowledge modalities used for training, in canonical order.
    pub modalities: Vec<ModalityTag>,
    /// Sampling weights of T-I, T-A, T-V and joint; empty means proportional to size.
    pub mix: Vec<f64>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            mode: ContextMode::MultiDataset,
            modalities: ModalityTag::KNOWLEDGE.to_vec(),
            mix: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub con: bool,
    pub matching: bool,
    pub gen: bool,
    pub w_con: f64,
    pub w_match: f64,
    pub w_gen: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    /// Mined negatives per positive pair, alternating knowledge-side and text-side anchors.
    pub negatives: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            con: true,
            matching: true,
            gen: true,
            w_con: 1.0,
            w_match: 1.0,
            w_gen: 1.0,
            mask_ratio: 0.6,
            mask_mode: MaskMode::Replace,
            negatives: 2,
        }
    }
}

impl ObjectiveConfig {
    /// Parses a `+` or `,` separated subset of `con`, `match`, `gen`.
    pub fn set_enabled(&mut self, list: &str) -> std::result::Result<(), String> {
        let (mut con, mut matching, mut gen) = (false, false, false);
        for part in list.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "con" => con = true,
                "match" => matching = true,
                "gen" => gen = true,
                other => return Err(format!("unknown objective `{other}` (con, match, gen)")),
            }
        }
        if !(con || matching || gen) {
            return Err("at least one objective must be enabled".into());
        }
        (self.con, self.matching, self.gen) = (con, matching, gen);
        Ok(())
    }

    pub fn enabled_list(&self) -> String {
        let mut parts = Vec::new();
        if self.con {
            parts.push("con");
        }
        if self.matching {
            parts.push("match");
        }
        if self.gen {
            parts.push("gen");
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub ema_decay: f64,
    /// When false, `wall_ms` is written as 0 so metrics files are reproducible byte for byte.
    pub wall_clock: bool,
    /// Draw the records of one batch without repetition.
    pub distinct: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            schedule: Schedule::LinearDecay,
            warmup: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            checkpoint_every: 0,
            ema_decay: 0.98,
            wall_clock: true,
            distinct: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rerank_k: usize,
    pub beam: usize,
    pub max_decode_len: usize,
    /// Queries whose caption is decoded with beam search in the report.
    pub decode_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rerank_k: 50,
            beam: 3,
            max_decode_len: 16,
            decode_samples: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub context: ContextConfig,
    pub objectives: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 6] = ["data", "model", "context", "objectives", "train", "eval"];

fn parse_num<V: FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse_num)
        .collect()
}

fn format_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_dims<const N: usize>(v: &str) -> std::result::Result<[usize; N], String> {
    let dims: Vec<usize> = v
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected dimensions like 3x8x8, got `{v}`"))?;
    dims.try_into()
        .map_err(|_| format!("expected {N} dimensions, got `{v}`"))
}

fn format_dims(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl RunConfig {
    /// Every `(section, key, value)` triple in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let c = &self.context;
        let o = &self.objectives;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("data", "categories", d.categories.to_string()),
            ("data", "latent_dim", d.latent_dim.to_string()),
            ("data", "spread", d.spread.to_string()),
            ("data", "noise", d.noise.to_string()),
            ("data", "levels", d.levels.to_string()),
            ("data", "pair_size", d.pair_size.to_string()),
            ("data", "joint_size", d.joint_size.to_string()),
            ("data", "eval_size", d.eval_size.to_string()),
            ("data", "category_weights", format_list(&d.category_weights)),
            ("model", "width", m.width.to_string()),
            ("model", "layers", m.layers.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "mlp_ratio", m.mlp_ratio.to_string()),
            ("model", "vocab", m.vocab.to_string()),
            ("model", "max_text_len", m.max_text_len.to_string()),
            ("model", "patch", m.patch.to_string()),
            ("model", "proj_dim", m.proj_dim.to_string()),
            ("model", "variant", m.variant.to_string()),
            ("model", "projection", m.projection.to_string()),
            ("model", "init_std", m.init_std.to_string()),
            ("model", "tau_init", m.tau_init.to_string()),
            ("model", "tau_max", m.tau_max.to_string()),
            ("model", "ln_eps", m.ln_eps.to_string()),
            ("model", "image_shape", format_dims(&m.shapes.image)),
            ("model", "audio_shape", format_dims(&m.shapes.audio)),
            ("model", "video_shape", format_dims(&m.shapes.video)),
            ("model", "depth_shape", format_dims(&m.shapes.depth)),
            ("model", "normal_shape", format_dims(&m.shapes.normal)),
            ("context", "mode", c.mode.to_string()),
            ("context", "modalities", format_modalities(&c.modalities)),
            ("context", "mix", format_list(&c.mix)),
            ("objectives", "enabled", o.enabled_list()),
            ("objectives", "w_con", o.w_con.to_string()),
            ("objectives", "w_match", o.w_match.to_string()),
            ("objectives", "w_gen", o.w_gen.to_string()),
            ("objectives", "mask_ratio", o.mask_ratio.to_string()),
            ("objectives", "mask_mode", o.mask_mode.to_string()),
            ("objectives", "negatives", o.negatives.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "steps", t.steps.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "lr", t.lr.to_string()),
            ("train", "schedule", t.schedule.to_string()),
            ("train", "warmup", t.warmup.to_string()),
            ("train", "weight_decay", t.weight_decay.to_string()),
            ("train", "beta1", t.beta1.to_string()),
            ("train", "beta2", t.beta2.to_string()),
            ("train", "eps", t.eps.to_string()),
            ("train", "clip_norm", t.clip_norm.to_string()),
            ("train", "checkpoint_every", t.checkpoint_every.to_string()),
            ("train", "ema_decay", t.ema_decay.to_string()),
            ("train", "wall_clock", t.wall_clock.to_string()),
            ("train", "distinct", t.distinct.to_string()),
            ("eval", "rerank_k", e.rerank_k.to_string()),
            ("eval", "beam", e.beam.to_string()),
            ("eval", "max_decode_len", e.max_decode_len.to_string()),
            ("eval", "decode_samples", e.decode_samples.to_string()),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        let m = &mut self.model;
        let c = &mut self.context;
        let o = &mut self.objectives;
        let t = &mut self.train;
        let e = &mut self.eval;
        match (section, key) {
            ("data", "categories") => d.categories = parse_num(value)?,
            ("data", "latent_dim") => d.latent_dim = parse_num(value)?,
            ("data", "spread") => d.spread = parse_num(value)?,
            ("data", "noise") => d.noise = parse_num(value)?,
            ("data", "levels") => d.levels = parse_num(value)?,
            ("data", "pair_size") => d.pair_size = parse_num(value)?,
            ("data", "joint_size") => d.joint_size = parse_num(value)?,
            ("data", "eval_size") => d.eval_size = parse_num(value)?,
            ("data", "category_weights") => d.category_weights = parse_list(value)?,
            ("model", "width") => m.width = parse_num(value)?,
            ("model", "layers") => m.layers = parse_num(value)?,
            ("model", "heads") => m.heads = parse_num(value)?,
            ("model", "mlp_ratio") => m.mlp_ratio = parse_num(value)?,
            ("model", "vocab") => m.vocab = parse_num(value)?,
            ("model", "max_text_len") => m.max_text_len = parse_num(value)?,
            ("model", "patch") => m.patch = parse_num(value)?,
            ("model", "proj_dim") => m.proj_dim = parse_num(value)?,
            ("model", "variant") => m.variant = value.parse()?,
            ("model", "projection") => m.projection = value.parse()?,
            ("model", "init_std") => m.init_std = parse_num(value)?,
            ("model", "tau_init") => m.tau_init = parse_num(value)?,
            ("model", "tau_max") => m.tau_max = parse_num(value)?,
            ("model", "ln_eps") => m.ln_eps = parse_num(value)?,
            ("model", "image_shape") => m.shapes.image = parse_dims(value)?,
            ("model", "audio_shape") => m.shapes.audio = parse_dims(value)?,
            ("model", "video_shape") => m.shapes.video = parse_dims(value)?,
            ("model", "depth_shape") => m.shapes.depth = parse_dims(value)?,
            ("model", "normal_shape") => m.shapes.normal = parse_dims(value)?,
            ("context", "mode") => c.mode = value.parse()?,
            ("context", "modalities") => {
                c.modalities = parse_modalities(value)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| format!("expected a list of I, A, V, D, N, got `{value}`"))?
            }
            ("context", "mix") => c.mix = parse_list(value)?,
            ("objectives", "enabled") => o.set_enabled(value)?,
            ("objectives", "w_con") => o.w_con = parse_num(value)?,
            ("objectives", "w_match") => o.w_match = parse_num(value)?,
            ("objectives", "w_gen") => o.w_gen = parse_num(value)?,
            ("objectives", "mask_ratio") => o.mask_ratio = parse_num(value)?,
            ("objectives", "mask_mode") => o.mask_mode = value.parse()?,
            ("objectives", "negatives") => o.negatives = parse_num(value)?,
            ("train", "seed") => t.seed = parse_num(value)?,
            ("train", "steps") => t.steps = parse_num(value)?,
            ("train", "batch_size") => t.batch_size = parse_num(value)?,
            ("train", "lr") => t.lr = parse_num(value)?,
            ("train", "schedule") => t.schedule = value.parse()?,
            ("train", "warmup") => t.warmup = parse_num(value)?,
            ("train", "weight_decay") => t.weight_decay = parse_num(value)?,
            ("train", "beta1") => t.beta1 = parse_num(value)?,
            ("train", "beta2") => t.beta2 = parse_num(value)?,
            ("train", "eps") => t.eps = parse_num(value)?,
            ("train", "clip_norm") => t.clip_norm = parse_num(value)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse_num(value)?,
            ("train", "ema_decay") => t.ema_decay = parse_num(value)?,
            ("train", "wall_clock") => t.wall_clock = parse_bool(value)?,
            ("train", "distinct") => t.distinct = parse_bool(value)?,
            ("eval", "rerank_k") => e.rerank_k = parse_num(value)?,
            ("eval", "beam") => e.beam = parse_num(value)?,
            ("eval", "max_decode_len") => e.max_decode_len = parse_num(value)?,
            ("eval", "decode_samples") => e.decode_samples = parse_num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                match SECTIONS.iter().find(|s| **s == name) {
                    Some(s) => section = Some(s),
                    None => {
                        return Err(Error::Config {
                            line: line_no,
                            key: format!("[{name}]"),
                            reason: format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                        })
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    key: line.to_string(),
                    reason: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section else {
                return Err(Error::Config {
                    line: line_no,
                    key: key.to_string(),
                    reason: "key outside of any section".into(),
                });
            };
            cfg.set(sec, key, value).map_err(|reason| Error::Config {
                line: line_no,
                key: format!("{sec}.{key}"),
                reason,
            })?;
        }
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        self.model.validate()?;
        let d = &self.data;
        if d.categories < 2 {
            return bad("data.categories must be at least 2".into());
        }
        if d.latent_dim == 0 || d.levels < 2 {
            return bad("data.latent_dim must be positive and data.levels at least 2".into());
        }
        if !(d.noise >= 0.0 && d.spread >= 0.0) {
            return bad("data.noise and data.spread must be non-negative".into());
        }
        if !d.category_weights.is_empty()
            && (d.category_weights.len() != d.categories
                || d.category_weights.iter().any(|w| !(*w >= 0.0))
                || d.category_weights.iter().sum::<f64>() <= 0.0)
        {
            return bad("data.category_weights needs one non-negative weight per category".into());
        }
        let caption_len = d.latent_dim + 4;
        if caption_len > self.model.max_text_len {
            return bad(format!(
                "captions have {caption_len} tokens, above model.max_text_len {}",
                self.model.max_text_len
            ));
        }
        let needed = crate::data::Vocabulary::new(d.categories, d.latent_dim, d.levels).size();
        if needed > self.model.vocab {
            return bad(format!("captions need {needed} token ids, above model.vocab {}", self.model.vocab));
        }
        let c = &self.context;
        if !c.mix.is_empty() && (c.mix.len() != DATASET_IDS.len() || c.mix.iter().any(|w| !(*w >= 0.0))) {
            return bad("context.mix needs four non-negative weights (T-I, T-A, T-V, joint)".into());
        }
        let o = &self.objectives;
        if !(o.mask_ratio > 0.0 && o.mask_ratio < 1.0) {
            return bad("objectives.mask_ratio must lie strictly between 0 and 1".into());
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return bad("train.steps and train.batch_size must be at least 1".into());
        }
        if o.matching && t.batch_size < 2 {
            return bad("the matching objective needs train.batch_size of at least 2".into());
        }
        if !(t.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1) and train.eps be positive".into());
        }
        if !(t.weight_decay >= 0.0 && t.clip_norm >= 0.0) || !(0.0..1.0).contains(&t.ema_decay) {
            return bad("train.weight_decay, train.clip_norm must be non-negative and train.ema_decay in [0, 1)".into());
        }
        if self.eval.rerank_k == 0 || self.eval.beam == 0 || self.eval.max_decode_len == 0 {
            return bad("eval.rerank_k, eval.beam and eval.max_decode_len must be at least 1".into());
        }
        Ok(())
    }
}
