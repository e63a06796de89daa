//! Patch embedders, encoder stacks and heads.

mod encoder;
mod heads;

use std::sync::Arc;

pub use encoder::{BlockIds, LinearIds, NormIds, StackIds};
pub use heads::{Branch, HeadIds, ProjectorIds};

use mico_autodiff::{AttentionBlock, AttentionLayout, AttentionMask, Scalar, Tape, Tensor, Var};

use crate::config::{ContextMode, ModelConfig, Variant};
use crate::context::{
    add_unimodal_context, apply_mode, fuse_modalities, fuse_text, ContextDims, ContextTables, EmbeddingSequence,
    MultimodalContext,
};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::modality::{patchify, ModalitySample, ModalityTag};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::rng::{keyed_rng, stream};

/// Handles of every parameter group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    /// Patch projections in canonical knowledge order.
    pub patch: [LinearIds; 5],
    pub token_embed: ParamId,
    pub tables: ContextTables,
    pub cls_knowledge: ParamId,
    pub cls_text: ParamId,
    /// One shared stack, one per modality, or none when the text stack encodes everything.
    pub knowledge_stacks: Vec<StackIds>,
    pub text_stack: StackIds,
    pub heads: HeadIds,
}

#[derive(Clone, Debug)]
pub struct MicoModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ids: ModelIds,
}

/// Encoded knowledge side of a batch.
#[derive(Clone, Debug)]
pub struct KnowledgeBatch {
    /// Final-normed hidden rows of every stack, packed.
    pub hidden: Var,
    /// One pooled row per item.
    pub pooled: Var,
    /// Per item, rows of `hidden` holding its tokens in context order (no CLS).
    pub token_rows: Vec<Vec<usize>>,
}

/// A causal generation stream: knowledge prefix followed by caption tokens.
#[derive(Clone, Debug)]
pub struct GenItem {
    pub prefix: Var,
    pub tokens: Vec<u32>,
    pub dataset: usize,
}

#[derive(Clone, Debug)]
pub struct TextBatch {
    pub hidden: Var,
    /// Pooled rows of the contrastive items, if any.
    pub pooled: Option<Var>,
    /// Per generation item, the row of its first caption token.
    pub gen_offsets: Vec<usize>,
}

fn cat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(tape.concat(parts, 0)?)
    }
}

impl<T: Scalar> MicoModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let (d, std) = (cfg.width, cfg.init_std);
        let mut rng = keyed_rng(&[seed, stream::INIT]);
        let mut store = ParamStore::<T>::new();
        let patch = ModalityTag::KNOWLEDGE.map(|tag| {
            let pd = cfg.shapes.patch_dim(tag, cfg.patch);
            LinearIds::register(&mut store, &mut rng, &format!("patch.{}", tag.short()), pd, d, std, true)
        });
        let token_embed = store.add("embed.token", trunc_normal(&mut rng, &[cfg.vocab, d], std));
        let dims = ContextDims::new(&cfg.shapes, cfg.patch, d, cfg.max_text_len);
        let tables = ContextTables::register(&mut store, &mut rng, &dims, std);
        let cls_knowledge = store.add("cls.knowledge", trunc_normal(&mut rng, &[1, d], std));
        let cls_text = store.add("cls.text", trunc_normal(&mut rng, &[1, d], std));
        let mut stack = |store: &mut ParamStore<T>, name: &str| {
            StackIds::register(store, &mut rng, name, cfg.layers, d, cfg.mlp_ratio, std)
        };
        let knowledge_stacks = match cfg.variant {
            Variant::SharedVitPlusText => vec![stack(&mut store, "encoder.knowledge")],
            Variant::ModalitySpecific => ModalityTag::KNOWLEDGE
                .iter()
                .map(|t| stack(&mut store, &format!("encoder.{}", t.short())))
                .collect(),
            Variant::UnifiedTextEncoder => Vec::new(),
        };
        let text_stack = stack(&mut store, "encoder.text");
        let heads = HeadIds::register(&mut store, &mut rng, &cfg);
        Ok(Self {
            config: cfg,
            params: store,
            ids: ModelIds {
                patch,
                token_embed,
                tables,
                cls_knowledge,
                cls_text,
                knowledge_stacks,
                text_stack,
                heads,
            },
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> MicoModel<U> {
        MicoModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Scalar parameter count of one stack.
    pub fn stack_numel(&self, stack: &StackIds) -> usize {
        self.params.numel_with_prefix(&format!("{}.", stack.name))
    }

    /// The stack that encodes knowledge modality `tag`.
    pub fn knowledge_stack(&self, tag: ModalityTag) -> &StackIds {
        match self.config.variant {
            Variant::SharedVitPlusText => &self.ids.knowledge_stacks[0],
            Variant::ModalitySpecific => &self.ids.knowledge_stacks[tag.knowledge_index().expect("knowledge modality")],
            Variant::UnifiedTextEncoder => &self.ids.text_stack,
        }
    }

    fn eps(&self) -> f64 {
        self.config.ln_eps
    }

    fn layout(&self, blocks: Vec<AttentionBlock>) -> Arc<AttentionLayout> {
        Arc::new(AttentionLayout::new(self.config.heads, blocks))
    }

    /// Runs `stack` over one sequence with the given mask. Returns raw block
    /// outputs without the head norms.
    pub fn encode_sequence(&self, tape: &mut Tape<T>, bound: &Bound, stack: &StackIds, x: Var, mask: AttentionMask) -> Result<Var> {
        let len = tape.shape(x)[0];
        if tape.shape(x).get(1) != Some(&self.config.width) {
            return Err(Error::Invalid(format!(
                "sequence width {:?} differs from model width {}",
                tape.shape(x),
                self.config.width
            )));
        }
        let layout = self.layout(vec![AttentionBlock { start: 0, len, mask }]);
        stack.forward(tape, bound, x, &layout, self.eps())
    }

    /// Linear projection of each flattened patch plus the patcher bias.
    pub fn patch_embed(&self, tape: &mut Tape<T>, bound: &Bound, sample: &ModalitySample) -> Result<EmbeddingSequence> {
        let idx = sample
            .tag
            .knowledge_index()
            .ok_or_else(|| Error::Invalid("text has no patch embedder".into()))?;
        sample.check_layout(&self.config.shapes)?;
        let rows = patchify(sample.tag, &sample.shape, &sample.payload, self.config.patch)?;
        let len = rows.len();
        let pd = rows[0].len();
        let data = rows
            .iter()
            .flatten()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        let x = tape.constant(Tensor::new(vec![len, pd], data)?);
        let tokens = self.ids.patch[idx].apply(tape, bound, x)?;
        Ok(EmbeddingSequence {
            tokens,
            tag: sample.tag,
            len,
        })
    }

    /// Token-embedding lookup of one caption.
    pub fn embed_caption(&self, tape: &mut Tape<T>, bound: &Bound, caption: &[u32], max_len: usize) -> Result<EmbeddingSequence> {
        if caption.is_empty() {
            return Err(Error::Invalid("empty caption".into()));
        }
        if caption.len() > max_len {
            return Err(Error::CaptionTooLong {
                len: caption.len(),
                max: max_len,
            });
        }
        let vocab = self.config.vocab;
        let ids = caption
            .iter()
            .map(|&t| {
                if (t as usize) < vocab {
                    Ok(t as usize)
                } else {
                    Err(Error::TokenOutOfRange { id: t, vocab })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = tape.gather(bound[self.ids.token_embed], &ids)?;
        Ok(EmbeddingSequence {
            tokens,
            tag: ModalityTag::Text,
            len: ids.len(),
        })
    }

    /// Builds the knowledge context of one item.
    pub fn knowledge_context(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        samples: &[&ModalitySample],
        dataset: usize,
        mode: ContextMode,
    ) -> Result<MultimodalContext> {
        let seqs = samples
            .iter()
            .map(|s| {
                let seq = self.patch_embed(tape, bound, s)?;
                add_unimodal_context(tape, bound, &self.ids.tables, seq)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = fuse_modalities(tape, bound, &self.ids.tables, &seqs, mode)?;
        ctx.tokens = apply_mode(tape, bound, &self.ids.tables, ctx.tokens, mode, dataset)?;
        Ok(ctx)
    }

    /// Builds the text context of one item from its captions.
    pub fn text_context(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        captions: &[&[u32]],
        dataset: usize,
        mode: ContextMode,
    ) -> Result<EmbeddingSequence> {
        let seqs = captions
            .iter()
            .map(|c| self.embed_caption(tape, bound, c, self.config.max_text_len))
            .collect::<Result<Vec<_>>>()?;
        let mut seq = fuse_text(tape, bound, &self.ids.tables, &seqs)?;
        seq.tokens = apply_mode(tape, bound, &self.ids.tables, seq.tokens, mode, dataset)?;
        Ok(seq)
    }

    /// Text context of an already concatenated token stream (used for generation).
    fn stream_context(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[u32], dataset: usize, mode: ContextMode) -> Result<EmbeddingSequence> {
        let cap = self.config.max_text_len * ModalityTag::CAPTION_GROUPS.len();
        let seq = self.embed_caption(tape, bound, tokens, cap)?;
        let mut seq = fuse_text(tape, bound, &self.ids.tables, &[seq])?;
        seq.tokens = apply_mode(tape, bound, &self.ids.tables, seq.tokens, mode, dataset)?;
        Ok(seq)
    }

    /// Encodes the knowledge side of every item in one packed pass per stack.
    pub fn encode_knowledge(&self, tape: &mut Tape<T>, bound: &Bound, items: &[Example], mode: ContextMode) -> Result<KnowledgeBatch> {
        if items.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let contexts = items
            .iter()
            .map(|ex| self.knowledge_context(tape, bound, &ex.knowledge, ex.dataset, mode))
            .collect::<Result<Vec<_>>>()?;
        let cls = bound[self.ids.cls_knowledge];
        let norm = self.ids.heads.knowledge_norm;

        if self.config.variant != Variant::ModalitySpecific {
            let stack = self.knowledge_stack(ModalityTag::Image).clone();
            let mut parts = Vec::with_capacity(2 * items.len());
            let mut blocks = Vec::with_capacity(items.len());
            let mut cls_rows = Vec::with_capacity(items.len());
            let mut token_rows = Vec::with_capacity(items.len());
            let mut offset = 0;
            for ctx in &contexts {
                let len = ctx.len();
                parts.push(cls);
                parts.push(ctx.tokens);
                blocks.push(AttentionBlock {
                    start: offset,
                    len: len + 1,
                    mask: AttentionMask::Full,
                });
                cls_rows.push(offset);
                token_rows.push((offset + 1..offset + 1 + len).collect());
                offset += len + 1;
            }
            let x = cat(tape, &parts)?;
            let layout = self.layout(blocks);
            let out = stack.forward(tape, bound, x, &layout, self.eps())?;
            let hidden = norm.apply(tape, bound, out, self.eps())?;
            let pooled = tape.gather(hidden, &cls_rows)?;
            return Ok(KnowledgeBatch {
                hidden,
                pooled,
                token_rows,
            });
        }

        // one stack per modality; each sees [CLS; its own segment]
        let mut outputs = Vec::new();
        let mut cls_rows: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
        let mut seg_rows: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); items.len()];
        let mut global = 0;
        for (k, tag) in ModalityTag::KNOWLEDGE.iter().enumerate() {
            let mut parts = Vec::new();
            let mut blocks = Vec::new();
            let mut offset = 0;
            for (i, ctx) in contexts.iter().enumerate() {
                let Some(seg) = ctx.segments.iter().find(|s| s.tag == *tag) else {
                    continue;
                };
                parts.push(cls);
                parts.push(tape.rows(ctx.tokens, seg.start, seg.len)?);
                blocks.push(AttentionBlock {
                    start: offset,
                    len: seg.len + 1,
                    mask: AttentionMask::Full,
                });
                cls_rows[i].push(global + offset);
                let rows = (global + offset + 1..global + offset + 1 + seg.len).collect();
                seg_rows[i].push((seg.start, rows));
                offset += seg.len + 1;
            }
            if parts.is_empty() {
                continue;
            }
            let x = cat(tape, &parts)?;
            let layout = self.layout(blocks);
            let out = self.ids.knowledge_stacks[k].forward(tape, bound, x, &layout, self.eps())?;
            outputs.push(norm.apply(tape, bound, out, self.eps())?);
            global += offset;
        }
        let hidden = cat(tape, &outputs)?;
        let all_cls: Vec<usize> = cls_rows.iter().flatten().copied().collect();
        let gathered = tape.gather(hidden, &all_cls)?;
        let mut avg = vec![T::zero(); items.len() * all_cls.len()];
        let mut col = 0;
        for (i, rows) in cls_rows.iter().enumerate() {
            let w = T::from_f64_lossy(1.0 / rows.len() as f64);
            for _ in rows {
                avg[i * all_cls.len() + col] = w;
                col += 1;
            }
        }
        let avg = tape.constant(Tensor::new(vec![items.len(), all_cls.len()], avg)?);
        let pooled = tape.matmul(avg, gathered)?;
        let token_rows = seg_rows
            .into_iter()
            .map(|mut segs| {
                segs.sort_by_key(|s| s.0);
                segs.into_iter().flat_map(|s| s.1).collect()
            })
            .collect();
        Ok(KnowledgeBatch {
            hidden,
            pooled,
            token_rows,
        })
    }

    /// Generation prefix of one item: its knowledge tokens mapped into the text stream.
    pub fn gen_prefix(&self, tape: &mut Tape<T>, bound: &Bound, knowledge: &KnowledgeBatch, item: usize) -> Result<Var> {
        let rows = tape.gather(knowledge.hidden, &knowledge.token_rows[item])?;
        self.ids.heads.gen_prefix(tape, bound, rows)
    }

    /// Encodes contrastive text items (bidirectional, with CLS) and generation
    /// streams (prefix then causal text) in one packed pass of the text stack.
    pub fn encode_text(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        items: &[Example],
        gens: &[GenItem],
        mode: ContextMode,
    ) -> Result<TextBatch> {
        if items.is_empty() && gens.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let cls = bound[self.ids.cls_text];
        let mut parts = Vec::new();
        let mut blocks = Vec::new();
        let mut cls_rows = Vec::with_capacity(items.len());
        let mut gen_offsets = Vec::with_capacity(gens.len());
        let mut offset = 0;
        for ex in items {
            let seq = self.text_context(tape, bound, &ex.captions, ex.dataset, mode)?;
            parts.push(cls);
            parts.push(seq.tokens);
            blocks.push(AttentionBlock {
                start: offset,
                len: seq.len + 1,
                mask: AttentionMask::Full,
            });
            cls_rows.push(offset);
            offset += seq.len + 1;
        }
        for g in gens {
            let seq = self.stream_context(tape, bound, &g.tokens, g.dataset, mode)?;
            let p = tape.shape(g.prefix)[0];
            parts.push(g.prefix);
            parts.push(seq.tokens);
            blocks.push(AttentionBlock {
                start: offset,
                len: p + seq.len,
                mask: AttentionMask::Causal { prefix: p },
            });
            gen_offsets.push(offset + p);
            offset += p + seq.len;
        }
        let x = cat(tape, &parts)?;
        let layout = self.layout(blocks);
        let stack = self.ids.text_stack.clone();
        let out = stack.forward(tape, bound, x, &layout, self.eps())?;
        let hidden = self.ids.heads.text_norm.apply(tape, bound, out, self.eps())?;
        let pooled = if cls_rows.is_empty() {
            None
        } else {
            Some(tape.gather(hidden, &cls_rows)?)
        };
        Ok(TextBatch {
            hidden,
            pooled,
            gen_offsets,
        })
    }

    /// Standalone caption encoding: embeddings plus text positions through the
    /// text stack, causal or bidirectional, without CLS or head norms.
    pub fn encode_caption(&self, tape: &mut Tape<T>, bound: &Bound, caption: &[u32], causal: bool) -> Result<Var> {
        let seq = self.embed_caption(tape, bound, caption, self.config.max_text_len)?;
        let seq = fuse_text(tape, bound, &self.ids.tables, &[seq])?;
        let mask = if causal {
            AttentionMask::Causal { prefix: 0 }
        } else {
            AttentionMask::Full
        };
        let stack = self.ids.text_stack.clone();
        self.encode_sequence(tape, bound, &stack, seq.tokens, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parameter_accounting() {
        let mut cfg = ModelConfig {
            width: 16,
            heads: 2,
            ..ModelConfig::default()
        };
        let shared = MicoModel::<f32>::new(&cfg, 1).unwrap();
        cfg.variant = Variant::ModalitySpecific;
        let specific = MicoModel::<f32>::new(&cfg, 1).unwrap();
        cfg.variant = Variant::UnifiedTextEncoder;
        let unified = MicoModel::<f32>::new(&cfg, 1).unwrap();
        let stack = shared.stack_numel(&shared.ids.text_stack);
        assert_eq!(specific.params.numel(), shared.params.numel() + 4 * stack);
        assert_eq!(unified.params.numel() + stack, shared.params.numel());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let a = MicoModel::<f32>::new(&cfg, 5).unwrap();
        let b = MicoModel::<f32>::new(&cfg, 5).unwrap();
        let c = MicoModel::<f32>::new(&cfg, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let bias = a.params.id("patch.I.bias").unwrap();
        assert!(a.params.get(bias).data().iter().all(|&v| v == 0.0));
        let tau = a.params.get(a.ids.heads.logit_scale).item();
        assert!((tau.exp() - 1.0 / 0.07).abs() < 1e-3);
    }
}
