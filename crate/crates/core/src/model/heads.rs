use mico_autodiff::{Scalar, Tape, Tensor, Var};
use rand::Rng;

use super::encoder::{LinearIds, NormIds};
use crate::config::{ModelConfig, Projection};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

/// Which side of the dual encoder a representation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Knowledge,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProjectorIds {
    /// `d → d`, gelu, `d → proj_dim`.
    Mlp { hidden: LinearIds, out: LinearIds },
    /// Bias-free `d → proj_dim`.
    Linear { out: LinearIds },
}

impl ProjectorIds {
    fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let (d, p, std) = (cfg.width, cfg.proj_dim, cfg.init_std);
        match cfg.projection {
            Projection::Mlp => ProjectorIds::Mlp {
                hidden: LinearIds::register(store, rng, &format!("{name}.hidden"), d, d, std, true),
                out: LinearIds::register(store, rng, &format!("{name}.out"), d, p, std, true),
            },
            Projection::Linear => ProjectorIds::Linear {
                out: LinearIds::register(store, rng, &format!("{name}.out"), d, p, std, false),
            },
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            ProjectorIds::Mlp { hidden, out } => {
                let h = hidden.apply(tape, bound, x)?;
                let h = tape.gelu(h);
                out.apply(tape, bound, h)
            }
            ProjectorIds::Linear { out } => out.apply(tape, bound, x),
        }
    }
}

/// Output heads: final norms, projections, temperature, matching and generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub knowledge_norm: NormIds,
    pub text_norm: NormIds,
    pub proj_knowledge: ProjectorIds,
    pub proj_text: ProjectorIds,
    /// τ is `exp` of this scalar.
    pub logit_scale: ParamId,
    pub match_hidden: LinearIds,
    pub match_out: LinearIds,
    /// Maps knowledge tokens into the text stream as a generation prefix.
    pub gen_prefix: LinearIds,
    pub gen_dense: LinearIds,
    pub gen_norm: NormIds,
    pub gen_decoder: LinearIds,
}

impl HeadIds {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let (d, v, std) = (cfg.width, cfg.vocab, cfg.init_std);
        Self {
            knowledge_norm: NormIds::register(store, "head.knowledge_norm", d),
            text_norm: NormIds::register(store, "head.text_norm", d),
            proj_knowledge: ProjectorIds::register(store, rng, "head.proj_knowledge", cfg),
            proj_text: ProjectorIds::register(store, rng, "head.proj_text", cfg),
            logit_scale: store.add(
                "head.logit_scale",
                Tensor::new(vec![1], vec![T::from_f64_lossy(cfg.tau_init.ln())]).expect("scalar"),
            ),
            match_hidden: LinearIds::register(store, rng, "head.match.hidden", 2 * d, d, std, true),
            match_out: LinearIds::register(store, rng, "head.match.out", d, 1, std, true),
            gen_prefix: LinearIds::register(store, rng, "head.gen.prefix", d, d, std, true),
            gen_dense: LinearIds::register(store, rng, "head.gen.dense", d, d, std, true),
            gen_norm: NormIds::register(store, "head.gen.norm", d),
            gen_decoder: LinearIds::register(store, rng, "head.gen.decoder", d, v, std, true),
        }
    }

    /// Projects pooled rows of one branch and scales them to unit norm.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, pooled: Var, branch: Branch) -> Result<Var> {
        let p = match branch {
            Branch::Knowledge => &self.proj_knowledge,
            Branch::Text => &self.proj_text,
        };
        let y = p.apply(tape, bound, pooled)?;
        Ok(tape.l2_normalize(y))
    }

    /// The learnable temperature τ as a one-element var.
    pub fn tau<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound) -> Var {
        tape.exp(bound[self.logit_scale])
    }

    /// `p_v` for each row pair of pooled knowledge and text representations.
    pub fn match_prob<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, knowledge: Var, text: Var) -> Result<Var> {
        let x = tape.concat(&[knowledge, text], 1)?;
        let h = self.match_hidden.apply(tape, bound, x)?;
        let h = tape.gelu(h);
        let z = self.match_out.apply(tape, bound, h)?;
        Ok(tape.sigmoid(z))
    }

    pub fn gen_prefix<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, tokens: Var) -> Result<Var> {
        self.gen_prefix.apply(tape, bound, tokens)
    }

    /// Vocabulary logits from text-stream hidden rows.
    pub fn gen_logits<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, rows: Var, eps: f64) -> Result<Var> {
        let h = self.gen_dense.apply(tape, bound, rows)?;
        let h = tape.gelu(h);
        let h = self.gen_norm.apply(tape, bound, h, eps)?;
        self.gen_decoder.apply(tape, bound, h)
    }
}
