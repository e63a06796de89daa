use mico_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::decode::{beam_decode, greedy_decode, log_softmax, Decoded, Scorer};
use super::retrieval::{retrieval_report, Direction, RetrievalReport};
use crate::config::{dataset_index, ContextMode, MaskMode, RunConfig};
use crate::data::{Example, LatentOracle, PairDataset};
use crate::error::{Error, Result};
use crate::modality::{tokens, ModalityTag};
use crate::model::{Branch, GenItem, MicoModel};
use crate::objectives::{generation_logits, mask_caption, MaskedCaption};
use crate::rng::{keyed_rng, stream};

/// Items evaluated per tape.
const CHUNK: usize = 32;

/// Every record of an evaluation set, with all of its knowledge samples.
pub fn eval_examples(ds: &PairDataset) -> Result<Vec<Example<'_>>> {
    let row = dataset_index(&ds.id)?;
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Example::from_record(r, &ModalityTag::KNOWLEDGE, row)
                .ok_or_else(|| Error::Invalid(format!("record {i} of {} has no captioned sample", ds.id)))
        })
        .collect()
}

/// Pooled and projected representations of a set of items.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub pooled_knowledge: Tensor<f32>,
    pub pooled_text: Tensor<f32>,
    pub vz: Tensor<f32>,
    pub vt: Tensor<f32>,
    pub tau: f64,
}

fn push_rows(dst: &mut Vec<Vec<f32>>, t: &Tensor<f32>) {
    dst.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
}

pub fn embed_examples(model: &MicoModel<f32>, items: &[Example], mode: ContextMode) -> Result<Embeddings> {
    if items.is_empty() {
        return Err(Error::Invalid("nothing to embed".into()));
    }
    let heads = &model.ids.heads;
    let (mut pk, mut pt, mut vz, mut vt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut tau = 0.0;
    for chunk in items.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let k = model.encode_knowledge(&mut tape, &bound, chunk, mode)?;
        let t = model.encode_text(&mut tape, &bound, chunk, &[], mode)?;
        let t_pooled = t.pooled.expect("text items present");
        let z = heads.project(&mut tape, &bound, k.pooled, Branch::Knowledge)?;
        let w = heads.project(&mut tape, &bound, t_pooled, Branch::Text)?;
        let tv = heads.tau(&mut tape, &bound);
        tau = tape.value(tv).item() as f64;
        push_rows(&mut pk, tape.value(k.pooled));
        push_rows(&mut pt, tape.value(t_pooled));
        push_rows(&mut vz, tape.value(z));
        push_rows(&mut vt, tape.value(w));
    }
    Ok(Embeddings {
        pooled_knowledge: Tensor::from_rows(&pk)?,
        pooled_text: Tensor::from_rows(&pt)?,
        vz: Tensor::from_rows(&vz)?,
        vt: Tensor::from_rows(&vt)?,
        tau,
    })
}

/// Matching-head probability for each `(knowledge row, text row)` pair.
pub fn match_scores(model: &MicoModel<f32>, emb: &Embeddings, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(256) {
        let k: Vec<Vec<f32>> = chunk.iter().map(|&(i, _)| emb.pooled_knowledge.row(i).to_vec()).collect();
        let t: Vec<Vec<f32>> = chunk.iter().map(|&(_, j)| emb.pooled_text.row(j).to_vec()).collect();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let kv = tape.constant(Tensor::from_rows(&k)?);
        let tv = tape.constant(Tensor::from_rows(&t)?);
        let p = model.ids.heads.match_prob(&mut tape, &bound, kv, tv)?;
        out.extend(tape.value(p).data().iter().map(|&x| x as f64));
    }
    Ok(out)
}

/// Both retrieval directions over one paired set.
pub fn evaluate_retrieval(
    model: &MicoModel<f32>,
    ds: &PairDataset,
    mode: ContextMode,
    rerank_k: usize,
    rerank: bool,
) -> Result<Vec<RetrievalReport>> {
    let items = eval_examples(ds)?;
    let emb = embed_examples(model, &items, mode)?;
    let mut t2k = |q: usize, cands: &[usize]| {
        let pairs: Vec<_> = cands.iter().map(|&c| (c, q)).collect();
        match_scores(model, &emb, &pairs)
    };
    let first = retrieval_report(
        &ds.id,
        Direction::TextToKnowledge,
        &emb.vt,
        &emb.vz,
        emb.tau,
        rerank_k,
        if rerank { Some(&mut t2k) } else { None },
    )?;
    let mut k2t = |q: usize, cands: &[usize]| {
        let pairs: Vec<_> = cands.iter().map(|&c| (q, c)).collect();
        match_scores(model, &emb, &pairs)
    };
    let second = retrieval_report(
        &ds.id,
        Direction::KnowledgeToText,
        &emb.vz,
        &emb.vt,
        emb.tau,
        rerank_k,
        if rerank { Some(&mut k2t) } else { None },
    )?;
    Ok(vec![first, second])
}

/// Retrieval with the reference encoder: digit codes on both sides, and
/// code agreement as the matching score.
pub fn oracle_retrieval(oracle: &LatentOracle, ds: &PairDataset, rerank_k: usize) -> Result<Vec<RetrievalReport>> {
    let items = eval_examples(ds)?;
    let mut k = Vec::with_capacity(items.len());
    let mut t = Vec::with_capacity(items.len());
    for ex in &items {
        k.push(oracle.knowledge_code(ex.knowledge[0])?);
        t.push(oracle.text_code(ex.captions[0])?);
    }
    let (k, t) = (Tensor::from_rows(&k)?, Tensor::from_rows(&t)?);
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum::<f64>();
    let mut t2k = |q: usize, c: &[usize]| Ok(c.iter().map(|&c| dot(t.row(q), k.row(c))).collect());
    let first = retrieval_report(&ds.id, Direction::TextToKnowledge, &t, &k, 1.0, rerank_k, Some(&mut t2k))?;
    let mut k2t = |q: usize, c: &[usize]| Ok(c.iter().map(|&c| dot(k.row(q), t.row(c))).collect());
    let second = retrieval_report(&ds.id, Direction::KnowledgeToText, &k, &t, 1.0, rerank_k, Some(&mut k2t))?;
    Ok(vec![first, second])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedAccuracy {
    pub dataset: String,
    pub targets: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Masks item `i` with the stream `(seed, EVAL, i)`.
pub fn eval_masks(items: &[Example], ratio: f64, mask_mode: MaskMode, seed: u64) -> Result<Vec<MaskedCaption>> {
    items
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = keyed_rng(&[seed, stream::EVAL, i as u64]);
            mask_caption(&ex.text(), ratio, mask_mode, &mut rng)
        })
        .collect()
}

/// Fraction of masked caption tokens whose argmax prediction is exact.
pub fn masked_caption_accuracy(
    model: &MicoModel<f32>,
    name: &str,
    items: &[Example],
    ratio: f64,
    mask_mode: MaskMode,
    mode: ContextMode,
    seed: u64,
) -> Result<MaskedAccuracy> {
    let masks = eval_masks(items, ratio, mask_mode, seed)?;
    let (mut targets, mut correct) = (0, 0);
    for (chunk, mchunk) in items.chunks(CHUNK).zip(masks.chunks(CHUNK)) {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let k = model.encode_knowledge(&mut tape, &bound, chunk, mode)?;
        let (logits, labels) = generation_logits(model, &mut tape, &bound, &k, chunk, mchunk, mode)?;
        let l = tape.value(logits);
        for (r, &label) in labels.iter().enumerate() {
            let row = l.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            targets += 1;
            correct += usize::from(best == label);
        }
    }
    Ok(MaskedAccuracy {
        dataset: name.to_string(),
        targets,
        correct,
        accuracy: if targets == 0 { 0.0 } else { correct as f64 / targets as f64 },
    })
}

/// Next-token distribution of the generation stream, conditioned on one
/// item's knowledge prefix.
pub struct ModelScorer<'m> {
    model: &'m MicoModel<f32>,
    prefix: Tensor<f32>,
    dataset: usize,
    mode: ContextMode,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m MicoModel<f32>, item: &Example, mode: ContextMode) -> Result<Self> {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let k = model.encode_knowledge(&mut tape, &bound, std::slice::from_ref(item), mode)?;
        let p = model.gen_prefix(&mut tape, &bound, &k, 0)?;
        Ok(Self {
            model,
            prefix: tape.value(p).clone(),
            dataset: item.dataset,
            mode,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn vocab(&self) -> usize {
        self.model.config.vocab
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.model.bind(&mut tape, false);
        let p = tape.constant(self.prefix.clone());
        let gens = [GenItem {
            prefix: p,
            tokens: prefix.to_vec(),
            dataset: self.dataset,
        }];
        let text = self.model.encode_text(&mut tape, &bound, &[], &gens, self.mode)?;
        let row = tape.rows(text.hidden, text.gen_offsets[0] + prefix.len() - 1, 1)?;
        let logits = self
            .model
            .ids
            .heads
            .gen_logits(&mut tape, &bound, row, self.model.config.ln_eps)?;
        let raw: Vec<f64> = tape.value(logits).data().iter().map(|&x| x as f64).collect();
        Ok(log_softmax(&raw))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSample {
    pub dataset: String,
    pub index: usize,
    pub reference: Vec<u32>,
    pub beam: Decoded,
    pub greedy: Decoded,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: Vec<RetrievalReport>,
    pub masked_accuracy: Vec<MaskedAccuracy>,
    pub decoded: Vec<DecodeSample>,
    /// Mean text-to-knowledge R@1 over the sets, before and after rerank.
    pub mean_r1_pre: f64,
    pub mean_r1_post: f64,
}

/// Mean text-to-knowledge R@1 over reports.
pub fn mean_r1(reports: &[RetrievalReport], post: bool) -> f64 {
    let picked: Vec<f64> = reports
        .iter()
        .filter(|r| r.direction == Direction::TextToKnowledge)
        .map(|r| if post { r.post.r1 } else { r.pre.r1 })
        .collect();
    if picked.is_empty() {
        0.0
    } else {
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

/// Retrieval, masked accuracy and beam decoding over every evaluation set.
pub fn evaluate(model: &MicoModel<f32>, config: &RunConfig, sets: &[&PairDataset], decode: bool) -> Result<EvalReport> {
    let mode = config.context.mode;
    let e = &config.eval;
    let mut retrieval = Vec::new();
    let mut masked_accuracy = Vec::new();
    let mut decoded = Vec::new();
    for ds in sets {
        retrieval.extend(evaluate_retrieval(model, ds, mode, e.rerank_k, config.objectives.matching)?);
        let items = eval_examples(ds)?;
        if config.objectives.gen {
            let o = &config.objectives;
            masked_accuracy.push(masked_caption_accuracy(
                model,
                &ds.id,
                &items,
                o.mask_ratio,
                o.mask_mode,
                mode,
                config.train.seed,
            )?);
        }
        if decode && config.objectives.gen {
            for (index, item) in items.iter().enumerate().take(e.decode_samples) {
                let mut scorer = ModelScorer::new(model, item, mode)?;
                let start = [tokens::BEGIN];
                let beam = beam_decode(&mut scorer, &start, Some(tokens::END), e.beam, e.max_decode_len)?;
                let greedy = greedy_decode(&mut scorer, &start, Some(tokens::END), e.max_decode_len)?;
                // decoding stops at the first end token, so compare with the first caption
                let reference = item.captions[0][1..].to_vec();
                decoded.push(DecodeSample {
                    dataset: ds.id.clone(),
                    index,
                    exact: beam.tokens == reference,
                    reference,
                    beam,
                    greedy,
                });
            }
        }
    }
    Ok(EvalReport {
        mean_r1_pre: mean_r1(&retrieval, false),
        mean_r1_post: mean_r1(&retrieval, true),
        retrieval,
        masked_accuracy,
        decoded,
    })
}
