//! Multimodal context construction.
//!
//! Knowledge tokens of each modality first receive that modality's
//! intra-modal context rows `E_C` (restarting at 0), then the modality type
//! vector `E_M`. Segments are concatenated in canonical order and the shared
//! position table `E_Pos` is added over the whole concatenation. Captions are
//! concatenated the same way and receive the text position table `E'_Pos`.
//! In multi-dataset mode both branches of a pair also receive the same
//! sampling vector `E_Sam` of their source dataset.

use mico_autodiff::{Scalar, Tape, Var};
use rand::Rng;

use crate::config::{ContextMode, DATASET_IDS};
use crate::error::{Error, Result};
use crate::modality::{ModalityShapes, ModalityTag};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};

/// Handles of the learnable context tables inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextTables {
    /// `E_Pos`: `max_total_len × d`.
    pub pos: ParamId,
    /// `E'_Pos`: `max_text_total_len × d`.
    pub text_pos: ParamId,
    /// `E_M`: one row per knowledge modality in canonical order.
    pub modality: ParamId,
    /// `E_C`: per knowledge modality, `max_modal_len × d`.
    pub unimodal: [ParamId; 5],
    /// `E_Sam`: one row per source dataset.
    pub sampling: ParamId,
}

/// Row counts of the context tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextDims {
    pub width: usize,
    pub modal_lens: [usize; 5],
    pub max_text_total_len: usize,
    pub datasets: usize,
}

impl ContextDims {
    pub fn new(shapes: &ModalityShapes, patch: usize, width: usize, max_text_len: usize) -> Self {
        let mut modal_lens = [0; 5];
        for (slot, tag) in modal_lens.iter_mut().zip(ModalityTag::KNOWLEDGE) {
            *slot = shapes.token_count(tag, patch);
        }
        Self {
            width,
            modal_lens,
            max_text_total_len: max_text_len * ModalityTag::CAPTION_GROUPS.len(),
            datasets: DATASET_IDS.len(),
        }
    }

    pub fn max_total_len(&self) -> usize {
        self.modal_lens.iter().sum()
    }
}

impl ContextTables {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, dims: &ContextDims, std: f64) -> Self {
        let d = dims.width;
        let pos = store.add("context.pos", trunc_normal(rng, &[dims.max_total_len(), d], std));
        let text_pos = store.add("context.text_pos", trunc_normal(rng, &[dims.max_text_total_len, d], std));
        let modality = store.add("context.modality", trunc_normal(rng, &[5, d], std));
        let unimodal = ModalityTag::KNOWLEDGE.map(|tag| {
            let name = format!("context.unimodal.{}", tag.short());
            store.add(name, trunc_normal(rng, &[dims.modal_lens[tag.knowledge_index().unwrap()], d], std))
        });
        let sampling = store.add("context.sampling", trunc_normal(rng, &[dims.datasets, d], std));
        Self {
            pos,
            text_pos,
            modality,
            unimodal,
            sampling,
        }
    }
}

/// A run of `len` token embeddings of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingSequence {
    pub tokens: Var,
    pub tag: ModalityTag,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub tag: ModalityTag,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalContext {
    pub tokens: Var,
    pub segments: Vec<Segment>,
    pub mode: ContextMode,
}

impl MultimodalContext {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

fn check_len(what: &'static str, len: usize, max: usize) -> Result<()> {
    if len > max {
        return Err(Error::SequenceTooLong { what, len, max });
    }
    Ok(())
}

fn table_rows<T: Scalar>(tape: &Tape<T>, table: Var) -> usize {
    tape.shape(table)[0]
}

/// Adds rows `0..L` of the sequence's own `E_C` table.
pub fn add_unimodal_context<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    tables: &ContextTables,
    seq: EmbeddingSequence,
) -> Result<EmbeddingSequence> {
    let idx = seq
        .tag
        .knowledge_index()
        .ok_or_else(|| Error::Invalid("text sequences carry no unimodal context table".into()))?;
    let table = bound[tables.unimodal[idx]];
    check_len("unimodal context", seq.len, table_rows(tape, table))?;
    let rows = tape.rows(table, 0, seq.len)?;
    let tokens = tape.add(seq.tokens, rows)?;
    Ok(EmbeddingSequence { tokens, ..seq })
}

/// Concatenates knowledge sequences in canonical order, adding each segment's
/// `E_M` vector and the global `E_Pos` rows.
pub fn fuse_modalities<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    tables: &ContextTables,
    seqs: &[EmbeddingSequence],
    mode: ContextMode,
) -> Result<MultimodalContext> {
    if seqs.is_empty() {
        return Err(Error::Invalid("a context needs at least one modality".into()));
    }
    let mut ordered: Vec<EmbeddingSequence> = seqs.to_vec();
    for s in &ordered {
        if s.tag == ModalityTag::Text {
            return Err(Error::Invalid("text belongs to the text context".into()));
        }
    }
    ordered.sort_by_key(|s| s.tag.knowledge_index());
    for pair in ordered.windows(2) {
        if pair[0].tag == pair[1].tag {
            return Err(Error::DuplicateModality(pair[0].tag));
        }
    }
    let total: usize = ordered.iter().map(|s| s.len).sum();
    let pos_table = bound[tables.pos];
    check_len("multimodal context", total, table_rows(tape, pos_table))?;

    let mut parts = Vec::with_capacity(ordered.len());
    let mut segments = Vec::with_capacity(ordered.len());
    let mut start = 0;
    for s in &ordered {
        let m = tape.rows(bound[tables.modality], s.tag.knowledge_index().unwrap(), 1)?;
        parts.push(tape.add_row(s.tokens, m)?);
        segments.push(Segment {
            tag: s.tag,
            start,
            len: s.len,
        });
        start += s.len;
    }
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let pos = tape.rows(pos_table, 0, total)?;
    let tokens = tape.add(joined, pos)?;
    Ok(MultimodalContext { tokens, segments, mode })
}

/// Concatenates caption embeddings in canonical group order and adds `E'_Pos`.
pub fn fuse_text<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    tables: &ContextTables,
    captions: &[EmbeddingSequence],
) -> Result<EmbeddingSequence> {
    if captions.is_empty() {
        return Err(Error::Invalid("a text context needs at least one caption".into()));
    }
    let total: usize = captions.iter().map(|s| s.len).sum();
    let table = bound[tables.text_pos];
    check_len("text context", total, table_rows(tape, table))?;
    let parts: Vec<Var> = captions.iter().map(|s| s.tokens).collect();
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let pos = tape.rows(table, 0, total)?;
    let tokens = tape.add(joined, pos)?;
    Ok(EmbeddingSequence {
        tokens,
        tag: ModalityTag::Text,
        len: total,
    })
}

/// Adds the `E_Sam` row of `dataset` to every token of `tokens`.
///
/// Call it on the knowledge context and on the text context of a pair with
/// the same dataset so both receive the identical vector.
pub fn attach_sampling_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    tables: &ContextTables,
    tokens: Var,
    dataset: usize,
) -> Result<Var> {
    let table = bound[tables.sampling];
    if dataset >= table_rows(tape, table) {
        return Err(Error::UnknownDataset(format!("#{dataset}")));
    }
    let row = tape.rows(table, dataset, 1)?;
    Ok(tape.add_row(tokens, row)?)
}

/// Applies the mode rule: `E_Sam` only in multi-dataset mode.
pub fn apply_mode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    tables: &ContextTables,
    tokens: Var,
    mode: ContextMode,
    dataset: usize,
) -> Result<Var> {
    match mode {
        ContextMode::SingleDataset => Ok(tokens),
        ContextMode::MultiDataset => attach_sampling_embedding(tape, bound, tables, tokens, dataset),
    }
}
