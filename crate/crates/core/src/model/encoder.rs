use std::sync::Arc;

use mico_autodiff::{AttentionLayout, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};

/// Gain and bias of a layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, eps: f64) -> Result<Var> {
        Ok(tape.layer_norm(x, bound[self.gain], bound[self.bias], eps)?)
    }
}

/// Weight and bias of an affine map `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        match self.bias {
            Some(b) => Ok(tape.add_row(y, bound[b])?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub attn_norm: NormIds,
    pub qkv: LinearIds,
    pub out: LinearIds,
    pub mlp_norm: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// A stack of pre-norm transformer blocks. There is no closing norm, so an
/// empty stack is the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackIds {
    pub name: String,
    pub blocks: Vec<BlockIds>,
}

impl StackIds {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        layers: usize,
        d: usize,
        mlp_ratio: usize,
        std: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                BlockIds {
                    attn_norm: NormIds::register(store, &format!("{p}.attn_norm"), d),
                    qkv: LinearIds::register(store, rng, &format!("{p}.qkv"), d, 3 * d, std, true),
                    out: LinearIds::register(store, rng, &format!("{p}.out"), d, d, std, true),
                    mlp_norm: NormIds::register(store, &format!("{p}.mlp_norm"), d),
                    fc1: LinearIds::register(store, rng, &format!("{p}.fc1"), d, mlp_ratio * d, std, true),
                    fc2: LinearIds::register(store, rng, &format!("{p}.fc2"), mlp_ratio * d, d, std, true),
                }
            })
            .collect();
        Self {
            name: name.to_string(),
            blocks,
        }
    }

    /// Runs every block over packed rows; attention stays inside the layout's blocks.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        layout: &Arc<AttentionLayout>,
        eps: f64,
    ) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            let h = b.attn_norm.apply(tape, bound, x, eps)?;
            let qkv = b.qkv.apply(tape, bound, h)?;
            let a = tape.attention(qkv, Arc::clone(layout))?;
            let o = b.out.apply(tape, bound, a)?;
            x = tape.add(x, o)?;
            let h = b.mlp_norm.apply(tape, bound, x, eps)?;
            let f = b.fc1.apply(tape, bound, h)?;
            let f = tape.gelu(f);
            let f = b.fc2.apply(tape, bound, f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}
