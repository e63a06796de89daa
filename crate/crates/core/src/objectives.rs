//! Contrastive, matching and masked-generation losses and their composition.

use mico_autodiff::{Scalar, Tape, Tensor, Var, BCE_EPS};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ContextMode, MaskMode, ObjectiveConfig};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{Branch, GenItem, MicoModel};
use crate::modality::tokens;
use crate::params::Bound;
use crate::rng::{keyed_rng, stream};

/// Scalar loss values of one step. Disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_match: f64,
    pub l_gen: f64,
    pub total: f64,
}

/// The symmetric contrastive loss and its two directional terms.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    /// `½·rows + ½·cols`.
    pub loss: Var,
    /// Mean cross-entropy of each knowledge row against all texts.
    pub rows: Var,
    /// Mean cross-entropy of each text column against all knowledge items.
    pub cols: Var,
}

/// Symmetric InfoNCE over `N_B` paired unit vectors with logits `τ·⟨v_z_i, v_t_j⟩`.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, vz: Var, vt: Var, tau: Var) -> Result<ContrastiveTerms> {
    let n = tape.shape(vz)[0];
    if n == 0 || tape.shape(vt)[0] != n {
        return Err(Error::Invalid(format!(
            "contrastive loss needs equal non-empty sets, got {:?} and {:?}",
            tape.shape(vz),
            tape.shape(vt)
        )));
    }
    let vt_t = tape.transpose(vt)?;
    let s = tape.matmul(vz, vt_t)?;
    let logits = tape.scale_by(s, tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let rows = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let cols = tape.cross_entropy(logits_t, &diag)?;
    let sum = tape.add(rows, cols)?;
    let loss = tape.scale(sum, 0.5);
    Ok(ContrastiveTerms { loss, rows, cols })
}

/// Mined negatives of one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// For knowledge anchor `i`, a non-matching text index.
    pub text_for_knowledge: Vec<usize>,
    /// For text anchor `j`, a non-matching knowledge index.
    pub knowledge_for_text: Vec<usize>,
}

fn draw_masked_softmax(rng: &mut impl Rng, scores: impl Iterator<Item = f64>, skip: usize) -> usize {
    let scores: Vec<f64> = scores.collect();
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == skip { 0.0 } else { (v - max).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        last = j;
        if u < w {
            return j;
        }
        u -= w;
    }
    last
}

/// Samples one off-diagonal index per row and per column of the row-major
/// `n × n` score matrix, with probability given by the softmax of that row
/// (column) after masking the diagonal.
pub fn mine_hard_negatives(scores: &[f64], n: usize, rng: &mut impl Rng) -> Result<HardNegatives> {
    if n < 2 {
        return Err(Error::Invalid("hard negatives need at least 2 pairs".into()));
    }
    if scores.len() != n * n {
        return Err(Error::Invalid(format!("score matrix has {} entries, expected {}", scores.len(), n * n)));
    }
    let text_for_knowledge = (0..n)
        .map(|i| draw_masked_softmax(rng, (0..n).map(|j| scores[i * n + j]), i))
        .collect();
    let knowledge_for_text = (0..n)
        .map(|j| draw_masked_softmax(rng, (0..n).map(|i| scores[i * n + j]), j))
        .collect();
    Ok(HardNegatives {
        text_for_knowledge,
        knowledge_for_text,
    })
}

/// Seeded form of [`mine_hard_negatives`].
pub fn mine_hard_negatives_seeded(scores: &[f64], n: usize, seed: u64) -> Result<HardNegatives> {
    mine_hard_negatives(scores, n, &mut keyed_rng(&[seed, stream::NEGATIVES]))
}

/// Index pairs `(knowledge, text)` and labels of a matching batch: all
/// positives, then `negatives` mined pairs per positive alternating between
/// knowledge anchors and text anchors.
pub fn matching_pairs(
    scores: &[f64],
    n: usize,
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let mut k: Vec<usize> = (0..n).collect();
    let mut t: Vec<usize> = (0..n).collect();
    let mut y = vec![1.0; n];
    let mut mined = None;
    for round in 0..negatives {
        if round % 2 == 0 {
            mined = Some(mine_hard_negatives(scores, n, rng)?);
        }
        let m = mined.as_ref().expect("mined on even rounds");
        for i in 0..n {
            if round % 2 == 0 {
                k.push(i);
                t.push(m.text_for_knowledge[i]);
            } else {
                k.push(m.knowledge_for_text[i]);
                t.push(i);
            }
            y.push(0.0);
        }
    }
    Ok((k, t, y))
}

/// Matching-loss diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchDiagnostics {
    /// Probabilities that hit the clamp.
    pub saturated: usize,
}

/// Mean binary negative log-likelihood of `p_v` against labels; `p_v` is
/// clamped to `[1e-7, 1 − 1e-7]` before the log.
pub fn matching_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[f64]) -> Result<(Var, MatchDiagnostics)> {
    let saturated = tape
        .value(probs)
        .data()
        .iter()
        .filter(|p| {
            let p = p.to_f64_lossy();
            !(BCE_EPS..=1.0 - BCE_EPS).contains(&p)
        })
        .count();
    let loss = tape.binary_cross_entropy(probs, labels)?;
    Ok((loss, MatchDiagnostics { saturated }))
}

/// A caption with its prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedCaption {
    /// Model input: the caption with targets replaced by the mask id (or untouched in targets-only mode).
    pub inputs: Vec<u32>,
    /// Target positions in increasing order.
    pub targets: Vec<usize>,
    /// Original tokens at the target positions.
    pub labels: Vec<u32>,
}

/// Number of targets for a caption of length `len`.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).min(len)
}

/// Selects `round(ratio·L)` positions uniformly without replacement.
pub fn mask_caption(caption: &[u32], ratio: f64, mode: MaskMode, rng: &mut impl Rng) -> Result<MaskedCaption> {
    if caption.is_empty() {
        return Err(Error::Invalid("cannot mask an empty caption".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = mask_count(caption.len(), ratio);
    let mut targets = sample(rng, caption.len(), count).into_vec();
    targets.sort_unstable();
    let labels = targets.iter().map(|&p| caption[p]).collect();
    let mut inputs = caption.to_vec();
    if mode == MaskMode::Replace {
        for &p in &targets {
            inputs[p] = tokens::MASK;
        }
    }
    Ok(MaskedCaption {
        inputs,
        targets,
        labels,
    })
}

/// Seeded form of [`mask_caption`].
pub fn mask_caption_seeded(caption: &[u32], ratio: f64, mode: MaskMode, seed: u64) -> Result<MaskedCaption> {
    mask_caption(caption, ratio, mode, &mut keyed_rng(&[seed, stream::MASK]))
}

/// Mean cross-entropy of target logits.
pub fn generation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Invalid("generation loss without targets".into()));
    }
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Randomness keys of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub step: u64,
}

/// Tape handles and values of a full forward pass.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub l_con: Option<Var>,
    pub l_match: Option<Var>,
    pub l_gen: Option<Var>,
    pub breakdown: LossBreakdown,
    pub match_diagnostics: MatchDiagnostics,
}

/// Masks every item's concatenated caption for one step.
pub fn mask_batch(items: &[Example], cfg: &ObjectiveConfig, key: StepKey) -> Result<Vec<MaskedCaption>> {
    items
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = keyed_rng(&[key.seed, stream::MASK, key.step, i as u64]);
            mask_caption(&ex.text(), cfg.mask_ratio, cfg.mask_mode, &mut rng)
        })
        .collect()
}

/// Generation logits for every target of every item, and the flat labels.
pub fn generation_logits<T: Scalar>(
    model: &MicoModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    knowledge: &crate::model::KnowledgeBatch,
    items: &[Example],
    masked: &[MaskedCaption],
    mode: ContextMode,
) -> Result<(Var, Vec<usize>)> {
    let gens = items
        .iter()
        .zip(masked)
        .enumerate()
        .map(|(i, (ex, m))| {
            Ok(GenItem {
                prefix: model.gen_prefix(tape, bound, knowledge, i)?,
                tokens: m.inputs.clone(),
                dataset: ex.dataset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = model.encode_text(tape, bound, &[], &gens, mode)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (m, &off) in masked.iter().zip(&text.gen_offsets) {
        for (&p, &l) in m.targets.iter().zip(&m.labels) {
            // position p is read off the row just before it
            rows.push(off + p - 1);
            labels.push(l as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no generation targets in batch".into()));
    }
    let h = tape.gather(text.hidden, &rows)?;
    let logits = model.ids.heads.gen_logits(tape, bound, h, model.config.ln_eps)?;
    Ok((logits, labels))
}

/// Full forward pass: contexts, encoders, heads and the enabled losses.
pub fn total_loss<T: Scalar>(
    model: &MicoModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    items: &[Example],
    cfg: &ObjectiveConfig,
    mode: ContextMode,
    key: StepKey,
) -> Result<LossGraph> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !(cfg.con || cfg.matching || cfg.gen) {
        return Err(Error::Invalid("no objective enabled".into()));
    }
    let heads = &model.ids.heads;
    let knowledge = model.encode_knowledge(tape, bound, items, mode)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let (mut l_con, mut l_match, mut l_gen) = (None, None, None);
    let mut diagnostics = MatchDiagnostics::default();

    if cfg.con || cfg.matching {
        let text = model.encode_text(tape, bound, items, &[], mode)?;
        let pooled_t = text.pooled.expect("contrastive items present");
        let vz = heads.project(tape, bound, knowledge.pooled, Branch::Knowledge)?;
        let vt = heads.project(tape, bound, pooled_t, Branch::Text)?;
        let tau = heads.tau(tape, bound);
        let con = contrastive_loss(tape, vz, vt, tau)?;
        if cfg.con {
            l_con = Some(con.loss);
            terms.push((con.loss, cfg.w_con));
        }
        if cfg.matching {
            let n = items.len();
            let tau_v = tape.value(tau).item().to_f64_lossy();
            let vz_v = tape.value(vz).clone();
            let vt_v = tape.value(vt).clone();
            let scores = similarity(&vz_v, &vt_v, tau_v);
            let mut rng = keyed_rng(&[key.seed, stream::NEGATIVES, key.step]);
            let (ki, ti, y) = matching_pairs(&scores, n, cfg.negatives, &mut rng)?;
            let k_rows = tape.gather(knowledge.pooled, &ki)?;
            let t_rows = tape.gather(pooled_t, &ti)?;
            let p = heads.match_prob(tape, bound, k_rows, t_rows)?;
            let (loss, diag) = matching_loss(tape, p, &y)?;
            diagnostics = diag;
            l_match = Some(loss);
            terms.push((loss, cfg.w_match));
        }
    }

    if cfg.gen {
        let masked = mask_batch(items, cfg, key)?;
        let (logits, labels) = generation_logits(model, tape, bound, &knowledge, items, &masked, mode)?;
        let loss = generation_loss(tape, logits, &labels)?;
        l_gen = Some(loss);
        terms.push((loss, cfg.w_gen));
    }

    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("at least one objective");
    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64_lossy());
    let breakdown = LossBreakdown {
        l_con: value(tape, l_con),
        l_match: value(tape, l_match),
        l_gen: value(tape, l_gen),
        total: tape.value(total).item().to_f64_lossy(),
    };
    Ok(LossGraph {
        total,
        l_con,
        l_match,
        l_gen,
        breakdown,
        match_diagnostics: diagnostics,
    })
}

/// Row-major `τ·⟨a_i, b_j⟩` for two sets of rows.
pub fn similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tau: f64) -> Vec<f64> {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
            out.push(tau * dot);
        }
    }
    out
}
