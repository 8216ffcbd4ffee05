//! Dual-stream co-attention fusion with an entity stream that reads from the
//! vision stream and writes into the text stream through the matching matrix.

use kvlp_tensor::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{residual, Attention, FeedForward, LayerNorm, NormOrder};
use crate::params::{Ctx, Group, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Reasoning-using-knowledge: run the entity stream and add `P·H^ec`.
    pub rk_enabled: bool,
    /// Divide each nonzero row of `P` by its sum.
    pub row_normalize_p: bool,
    pub norm: NormOrder,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            rk_enabled: true,
            row_normalize_p: false,
            norm: NormOrder::Pre,
        }
    }
}

/// Self-attention, cross-attention and feed-forward for one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamBlock {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub cross_attn: Attention,
    /// Normalizes the queries (pre-norm) or the residual sum (post-norm).
    pub ln_cross_q: LayerNorm,
    /// Normalizes keys/values; pre-norm only.
    pub ln_cross_kv: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl StreamBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, path: &str, cfg: &FusionConfig, rng: &mut R) -> Self {
        let (d, g) = (cfg.width, Group::Rest);
        StreamBlock {
            self_attn: Attention::new(store, &format!("{path}.self_attn"), d, cfg.heads, g, rng),
            ln_self: LayerNorm::new(store, &format!("{path}.ln_self"), d, g),
            cross_attn: Attention::new(store, &format!("{path}.cross_attn"), d, cfg.heads, g, rng),
            ln_cross_q: LayerNorm::new(store, &format!("{path}.ln_cross_q"), d, g),
            ln_cross_kv: LayerNorm::new(store, &format!("{path}.ln_cross_kv"), d, g),
            ffn: FeedForward::new(store, &format!("{path}.ffn"), d, d * cfg.ffn_mult, d, g, rng),
            ln_ffn: LayerNorm::new(store, &format!("{path}.ln_ffn"), d, g),
        }
    }

    pub fn self_step<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, order: NormOrder, site: &str) -> Result<Var> {
        let a = self.self_attn;
        residual(ctx, order, &self.ln_self, x, |c, n| a.forward(c, n, n, site))
    }

    /// Queries from `x`, keys and values from `other`.
    pub fn cross_step<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        other: Var,
        order: NormOrder,
        site: &str,
    ) -> Result<Var> {
        match order {
            NormOrder::Pre => {
                let q = self.ln_cross_q.forward(ctx, x)?;
                let kv = self.ln_cross_kv.forward(ctx, other)?;
                let y = self.cross_attn.forward(ctx, q, kv, site)?;
                Ok(ctx.g.add(x, y)?)
            }
            NormOrder::Post => {
                let y = self.cross_attn.forward(ctx, x, other, site)?;
                let s = ctx.g.add(x, y)?;
                self.ln_cross_q.forward(ctx, s)
            }
        }
    }

    pub fn ffn_step<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, order: NormOrder) -> Result<Var> {
        let f = self.ffn;
        residual(ctx, order, &self.ln_ffn, x, |c, n| f.forward(c, n))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionLayer {
    pub vision: StreamBlock,
    pub text: StreamBlock,
    pub entity: StreamBlock,
    /// Post-norm only: normalizes `P·H^ec + H^lc`.
    pub ln_fuse: LayerNorm,
}

impl FusionLayer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, path: &str, cfg: &FusionConfig, rng: &mut R) -> Self {
        FusionLayer {
            vision: StreamBlock::new(store, &format!("{path}.vision"), cfg, rng),
            text: StreamBlock::new(store, &format!("{path}.text"), cfg, rng),
            entity: StreamBlock::new(store, &format!("{path}.entity"), cfg, rng),
            ln_fuse: LayerNorm::new(store, &format!("{path}.ln_fuse"), cfg.width, Group::Rest),
        }
    }
}

/// Vision and text after self- and cross-attention, before the feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct CoAttention {
    pub vs: Var,
    pub ls: Var,
    pub vc: Var,
    pub lc: Var,
}

pub fn co_attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &FusionLayer,
    hv: Var,
    hl: Var,
    order: NormOrder,
    site: &str,
) -> Result<CoAttention> {
    let vs = layer.vision.self_step(ctx, hv, order, &format!("{site}.image_self"))?;
    let ls = layer.text.self_step(ctx, hl, order, &format!("{site}.text_self"))?;
    let vc = layer.vision.cross_step(ctx, vs, ls, order, &format!("{site}.image_text"))?;
    let lc = layer.text.cross_step(ctx, ls, vs, order, &format!("{site}.text_image"))?;
    Ok(CoAttention { vs, ls, vc, lc })
}

/// Plain co-attention layer: both streams with their feed-forwards.
pub fn co_attention_layer<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &FusionLayer,
    hv: Var,
    hl: Var,
    order: NormOrder,
) -> Result<(Var, Var)> {
    let co = co_attention(ctx, layer, hv, hl, order, "fusion")?;
    let zv = layer.vision.ffn_step(ctx, co.vc, order)?;
    let zl = layer.text.ffn_step(ctx, co.lc, order)?;
    Ok((zv, zl))
}

/// Entity self-attention followed by cross-attention onto `vs`.
pub fn entity_stream_step<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    block: &StreamBlock,
    he: Var,
    vs: Var,
    order: NormOrder,
    site: &str,
) -> Result<Var> {
    let es = block.self_step(ctx, he, order, &format!("{site}.entity_self"))?;
    block.cross_step(ctx, es, vs, order, &format!("{site}.entity_image"))
}

/// `P·H^ec + H^lc`; `p` is `(N_l+2) × N_es`.
pub fn fuse_text_with_entities<T: Scalar>(ctx: &mut Ctx<'_, T>, ec: Var, lc: Var, p: Var) -> Result<Var> {
    let routed = ctx.g.matmul(p, ec)?;
    Ok(ctx.g.add(routed, lc)?)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub zv: Var,
    pub zl: Var,
    /// `None` when the entity stream did not run.
    pub ze: Option<Var>,
}

/// Entity inputs: projected entity rows and the padded matching matrix.
#[derive(Clone, Copy, Debug)]
pub struct EntityInput {
    pub he: Var,
    pub p: Var,
}

pub fn fusion_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layers: &[FusionLayer],
    hv: Var,
    hl: Var,
    entities: Option<EntityInput>,
    cfg: &FusionConfig,
) -> Result<FusionOutput> {
    let order = cfg.norm;
    let entities = if cfg.rk_enabled { entities } else { None };
    let (mut v, mut l) = (hv, hl);
    let mut e = entities.map(|x| x.he);
    for (i, layer) in layers.iter().enumerate() {
        let site = format!("fusion.{i}");
        let co = co_attention(ctx, layer, v, l, order, &site)?;
        v = layer.vision.ffn_step(ctx, co.vc, order)?;
        let fused = match (e, entities) {
            (Some(he), Some(inp)) => {
                let ec = entity_stream_step(ctx, &layer.entity, he, co.vs, order, &site)?;
                e = Some(layer.entity.ffn_step(ctx, ec, order)?);
                let sum = fuse_text_with_entities(ctx, ec, co.lc, inp.p)?;
                match order {
                    NormOrder::Pre => sum,
                    NormOrder::Post => layer.ln_fuse.forward(ctx, sum)?,
                }
            }
            _ => co.lc,
        };
        l = layer.text.ffn_step(ctx, fused, order)?;
    }
    Ok(FusionOutput { zv: v, zl: l, ze: e })
}
