//! Named parameters and the residual blocks shared by encoder and decoder.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and iterated in
//! sorted order, so optimizer sweeps are deterministic. During a forward
//! pass each parameter is bound onto the tape once per tape via
//! [`Bindings`]; after `backward`, [`Bindings::harvest`] folds leaf
//! gradients back into the store (accumulating across calls, which is what
//! batching relies on).

use crate::num::{NumError, Shape, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown parameter '{0}'")]
    Missing(String),
    #[error("duplicate parameter '{0}'")]
    Duplicate(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Default, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::Duplicate(name.to_string()));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries.get(name).ok_or_else(|| NnError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.entries.get_mut(name).ok_or_else(|| NnError::Missing(name.to_string()))
    }

    /// Sorted name iteration — the backbone of optimizer determinism.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|t| t.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    // ---- initializers ----------------------------------------------------

    /// Glorot-uniform weight matrix.
    pub fn add_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(Shape::new(rows, cols), values, true)?)
    }

    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        requires_grad: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(Shape::new(rows, cols), values, requires_grad)?)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), NnError> {
        self.insert(name, Tensor::zeros(rows, cols, true))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), NnError> {
        let t = Tensor::new(Shape::new(rows, cols), vec![1.0; rows * cols], true)?;
        self.insert(name, t)
    }
}

/// Per-tape cache of bound parameters: name -> leaf Var. Binding the same
/// name twice reuses the leaf so batch gradients accumulate on one node.
#[derive(Default)]
pub struct Bindings {
    bound: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = tape.leaf_from(store.get(name)?);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Fold tape gradients back into the store (accumulating). Frozen
    /// parameters are skipped — they never receive gradient.
    pub fn harvest(&self, tape: &Tape, store: &mut ParamStore) -> Result<(), NnError> {
        for (name, &var) in &self.bound {
            if let Some(g) = tape.grad(var) {
                let t = store.get_mut(name)?;
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

/// Everything a forward pass needs in one place.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub binds: &'a mut Bindings,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, binds: &'a mut Bindings) -> Ctx<'a> {
        Ctx { tape, store, binds }
    }

    pub fn p(&mut self, name: &str) -> Result<Var, NnError> {
        self.binds.bind(self.tape, self.store, name)
    }
}

// ---- blocks -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearParams {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<LinearParams, NnError> {
        let p = LinearParams {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            in_dim,
            out_dim,
        };
        store.add_xavier(&p.w, in_dim, out_dim, rng)?;
        store.add_zeros(&p.b, 1, out_dim)?;
        Ok(p)
    }

    /// Weights and bias all zero — heads start at neutral outputs.
    pub fn init_zero(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<LinearParams, NnError> {
        let p = LinearParams {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            in_dim,
            out_dim,
        };
        store.add_zeros(&p.w, in_dim, out_dim)?;
        store.add_zeros(&p.b, 1, out_dim)?;
        Ok(p)
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let w = ctx.p(&self.w)?;
        let b = ctx.p(&self.b)?;
        Ok(ctx.tape.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    gain: String,
    bias: String,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<LayerNormParams, NnError> {
        let p = LayerNormParams { gain: format!("{prefix}.gain"), bias: format!("{prefix}.bias") };
        store.add_ones(&p.gain, 1, dim)?;
        store.add_zeros(&p.bias, 1, dim)?;
        Ok(p)
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let g = ctx.p(&self.gain)?;
        let b = ctx.p(&self.bias)?;
        Ok(ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Pre-norm residual attention block: `x + Wo·MHA(LN(x)Wq, kv·Wk, kv·Wv)`.
/// Self-attention when `kv` is `x`, cross-attention otherwise.
#[derive(Debug, Clone)]
pub struct AttnBlockParams {
    ln: LayerNormParams,
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    pub heads: usize,
}

impl AttnBlockParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<AttnBlockParams, NnError> {
        Ok(AttnBlockParams {
            ln: LayerNormParams::init(store, &format!("{prefix}.ln"), dim)?,
            wq: LinearParams::init(store, rng, &format!("{prefix}.wq"), dim, dim)?,
            wk: LinearParams::init(store, rng, &format!("{prefix}.wk"), dim, dim)?,
            wv: LinearParams::init(store, rng, &format!("{prefix}.wv"), dim, dim)?,
            wo: LinearParams::init(store, rng, &format!("{prefix}.wo"), dim, dim)?,
            heads,
        })
    }

    pub fn apply(
        &self,
        ctx: &mut Ctx,
        x: Var,
        kv: Var,
        mask: Option<&crate::num::Mask>,
    ) -> Result<Var, NnError> {
        let xn = self.ln.apply(ctx, x)?;
        let q = self.wq.apply(ctx, xn)?;
        let k = self.wk.apply(ctx, kv)?;
        let v = self.wv.apply(ctx, kv)?;
        let att = ctx.tape.attention(q, k, v, mask, self.heads)?;
        let out = self.wo.apply(ctx, att)?;
        Ok(ctx.tape.add(x, out)?)
    }

    /// Self-attention where queries, keys, and values are all `x` (keys and
    /// values are taken from the normalized input as well).
    pub fn apply_self(
        &self,
        ctx: &mut Ctx,
        x: Var,
        mask: Option<&crate::num::Mask>,
    ) -> Result<Var, NnError> {
        let xn = self.ln.apply(ctx, x)?;
        let q = self.wq.apply(ctx, xn)?;
        let k = self.wk.apply(ctx, xn)?;
        let v = self.wv.apply(ctx, xn)?;
        let att = ctx.tape.attention(q, k, v, mask, self.heads)?;
        let out = self.wo.apply(ctx, att)?;
        Ok(ctx.tape.add(x, out)?)
    }
}

/// Pre-norm residual feed-forward block: `x + W2·tanh(W1·LN(x))`.
#[derive(Debug, Clone)]
pub struct FfnParams {
    ln: LayerNormParams,
    w1: LinearParams,
    w2: LinearParams,
}

impl FfnParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<FfnParams, NnError> {
        Ok(FfnParams {
            ln: LayerNormParams::init(store, &format!("{prefix}.ln"), dim)?,
            w1: LinearParams::init(store, rng, &format!("{prefix}.w1"), dim, hidden)?,
            w2: LinearParams::init(store, rng, &format!("{prefix}.w2"), hidden, dim)?,
        })
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let xn = self.ln.apply(ctx, x)?;
        let h = self.w1.apply(ctx, xn)?;
        let h = ctx.tape.tanh(h);
        let out = self.w2.apply(ctx, h)?;
        Ok(ctx.tape.add(x, out)?)
    }
}

/// Two-layer tanh MLP head. The output affine starts at zero when
/// `zero_last` is set, so untrained heads emit exactly-neutral values.
#[derive(Debug, Clone)]
pub struct MlpParams {
    l1: LinearParams,
    l2: LinearParams,
}

impl MlpParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        zero_last: bool,
    ) -> Result<MlpParams, NnError> {
        let l1 = LinearParams::init(store, rng, &format!("{prefix}.l1"), in_dim, hidden)?;
        let l2 = if zero_last {
            LinearParams::init_zero(store, &format!("{prefix}.l2"), hidden, out_dim)?
        } else {
            LinearParams::init(store, rng, &format!("{prefix}.l2"), hidden, out_dim)?
        };
        Ok(MlpParams { l1, l2 })
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let h = self.l1.apply(ctx, x)?;
        let h = ctx.tape.tanh(h);
        self.l2.apply(ctx, h)
    }
}
