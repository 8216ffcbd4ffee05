//! Layer building blocks recorded onto a [`Ctx`].

use kvlp_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Ctx, Group, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Where layer normalization sits relative to each residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    /// `x + f(LN(x))`
    #[default]
    Pre,
    /// `LN(x + f(x))`
    Post,
}

/// `x · W + b` with `W: in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        group: Group,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(&format!("{path}.w"), Tensor::normal([d_in, d_out], std, rng), group, true);
        let b = bias.then(|| store.add(&format!("{path}.b"), Tensor::zeros([1, d_out]), group, false));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                Ok(ctx.g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d: usize, group: Group) -> Self {
        LayerNorm {
            gain: store.add(&format!("{path}.gain"), Tensor::ones([1, d]), group, false),
            bias: store.add(&format!("{path}.bias"), Tensor::zeros([1, d]), group, false),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        Ok(ctx.g.layer_norm(x, g, b, T::lit(LN_EPS))?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        path: &str,
        d: usize,
        hidden: usize,
        d_out: usize,
        group: Group,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{path}.fc1"), d, hidden, group, true, rng),
            fc2: Linear::new(store, &format!("{path}.fc2"), hidden, d_out, group, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention,
/// `softmax(Q·Kᵀ/√d_k)·V` per head followed by an output projection.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        path: &str,
        d: usize,
        heads: usize,
        group: Group,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        Attention {
            q: Linear::new(store, &format!("{path}.q"), d, d, group, true, rng),
            k: Linear::new(store, &format!("{path}.k"), d, d, group, true, rng),
            v: Linear::new(store, &format!("{path}.v"), d, d, group, true, rng),
            o: Linear::new(store, &format!("{path}.o"), d, d, group, true, rng),
            heads,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`. When the context
    /// captures attention, the head-averaged weights are stored under `site`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, xq: Var, xkv: Var, site: &str) -> Result<Var> {
        let q = self.q.forward(ctx, xq)?;
        let k = self.k.forward(ctx, xkv)?;
        let v = self.v.forward(ctx, xkv)?;
        let d = ctx.g.shape(q)[1];
        let dk = d / self.heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut avg: Option<Tensor<T>> = None;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.g.slice(q, 1, h * dk, dk)?,
                    ctx.g.slice(k, 1, h * dk, dk)?,
                    ctx.g.slice(v, 1, h * dk, dk)?,
                )
            };
            let s = ctx.g.matmul_nt(qh, kh)?;
            let s = ctx.g.scale(s, scale)?;
            let a = ctx.g.softmax(s, 1)?;
            if ctx.is_capturing() {
                let w = ctx.g.value(a);
                avg = Some(match avg {
                    None => w.clone(),
                    Some(mut acc) => {
                        acc.data_mut().iter_mut().zip(w.data()).for_each(|(x, &y)| *x += y);
                        acc
                    }
                });
            }
            outs.push(ctx.g.matmul(a, vh)?);
        }
        if let Some(mut acc) = avg {
            let hn = T::lit(self.heads as f64);
            acc.data_mut().iter_mut().for_each(|x| *x /= hn);
            ctx.record_attention(|| site.to_string(), acc);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.g.concat(&outs, 1)? };
        self.o.forward(ctx, cat)
    }
}

/// Residual sub-layer `x + f(·)` with normalization placed per `order`.
/// `f` receives the (possibly normalized) input.
pub fn residual<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    order: NormOrder,
    norm: &LayerNorm,
    x: Var,
    f: impl FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    match order {
        NormOrder::Pre => {
            let n = norm.forward(ctx, x)?;
            let y = f(ctx, n)?;
            Ok(ctx.g.add(x, y)?)
        }
        NormOrder::Post => {
            let y = f(ctx, x)?;
            let s = ctx.g.add(x, y)?;
            norm.forward(ctx, s)
        }
    }
}
