//! Patch and token embeddings and the two uni-modal transformer stacks.

use kvlp_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{residual, Attention, FeedForward, LayerNorm, Linear, NormOrder};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::text::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
    pub norm: NormOrder,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 8,
            width: 64,
            vision_layers: 2,
            text_layers: 2,
            heads: 4,
            vocab_size: 128,
            max_text_len: 40,
            ffn_mult: 4,
            norm: NormOrder::Pre,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, p
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary smaller than the special tokens".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Flattened patches, one row per patch in row-major grid order; each row
/// holds the patch pixels in (row, column, channel) order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Tensor<T>,
}

impl<T: Scalar> PatchGrid<T> {
    /// `pixels` is `height×width×channels`, row-major, values in `[0, 1]`.
    pub fn from_pixels(pixels: &[f32], height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "{} pixels for a {}x{}x{} image",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Argument(format!("{}x{} image, patch {}", height, width, patch)));
        }
        let (gh, gw) = (height / patch, width / patch);
        let pd = patch * patch * channels;
        let mut data = Vec::with_capacity(gh * gw * pd);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((py * patch + y) * width + px * patch + x) * channels;
                        data.extend(pixels[base..base + channels].iter().map(|&v| T::lit(v as f64)));
                    }
                }
            }
        }
        let patches = Tensor::from_vec([gh * gw, pd], data)?;
        if !patches.is_finite() {
            return Err(Error::Argument("non-finite pixel".into()));
        }
        Ok(PatchGrid { patches })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// Pre- or post-norm transformer block: self-attention then feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, path: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let g = Group::Encoder;
        EncoderLayer {
            attn: Attention::new(store, &format!("{path}.attn"), d, cfg.heads, g, rng),
            ln_attn: LayerNorm::new(store, &format!("{path}.ln_attn"), d, g),
            ffn: FeedForward::new(store, &format!("{path}.ffn"), d, d * cfg.ffn_mult, d, g, rng),
            ln_ffn: LayerNorm::new(store, &format!("{path}.ln_ffn"), d, g),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, order: NormOrder, site: &str) -> Result<Var> {
        let attn = self.attn;
        let x = residual(ctx, order, &self.ln_attn, x, |c, n| attn.forward(c, n, n, site))?;
        let ffn = self.ffn;
        residual(ctx, order, &self.ln_ffn, x, |c, n| ffn.forward(c, n))
    }
}

/// Runs a stack of encoder layers; zero layers is the identity.
pub fn encode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    layers: &[EncoderLayer],
    order: NormOrder,
    site: &str,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(ctx, h, order, &format!("{site}.{i}"))?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub mask_token: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: NormOrder,
}

impl VisionEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, g) = (cfg.width, Group::Encoder);
        VisionEncoder {
            patch_proj: Linear::new(store, "vision.patch_proj", cfg.patch_dim(), d, g, true, rng),
            cls: store.add("vision.cls", Tensor::normal([1, d], 0.02, rng), g, false),
            pos: store.add("vision.pos", Tensor::normal([cfg.num_patches() + 1, d], 0.02, rng), g, false),
            mask_token: store.add("vision.mask_token", Tensor::normal([1, d], 0.02, rng), g, false),
            layers: (0..cfg.vision_layers)
                .map(|i| EncoderLayer::new(store, &format!("vision.layer{i}"), cfg, rng))
                .collect(),
            norm: cfg.norm,
        }
    }

    /// `[x_cls; patches·E + b] + pos`, shape `(N_v + 1) × D`. Patch rows listed
    /// in `masked` are replaced by the learned mask token before the position
    /// embeddings are added.
    pub fn embed<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, grid: &PatchGrid<T>, masked: &[usize]) -> Result<Var> {
        let n = grid.num_patches();
        let pos = ctx.p(self.pos);
        if ctx.g.shape(pos)[0] != n + 1 {
            return Err(kvlp_tensor::TensorError::Shape {
                op: "embed_image",
                detail: format!("{} patches for a {}-row position table", n, ctx.g.shape(pos)[0]),
            }
            .into());
        }
        let x = ctx.constant(grid.patches.clone())?;
        let mut emb = self.patch_proj.forward(ctx, x)?;
        if !masked.is_empty() {
            let d = ctx.g.shape(emb)[1];
            let mut keep = Tensor::ones([n, d]);
            let mut pick = Tensor::zeros([n, 1]);
            for &i in masked {
                if i >= n {
                    return Err(Error::Argument(format!("masked patch {} of {}", i, n)));
                }
                keep.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                pick.row_mut(i)[0] = T::one();
            }
            let keep = ctx.constant(keep)?;
            let pick = ctx.constant(pick)?;
            let token = ctx.p(self.mask_token);
            let kept = ctx.g.mul(emb, keep)?;
            let filled = ctx.g.matmul(pick, token)?;
            emb = ctx.g.add(kept, filled)?;
        }
        let cls = ctx.p(self.cls);
        let seq = ctx.g.concat(&[cls, emb], 0)?;
        Ok(ctx.g.add(seq, pos)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, grid: &PatchGrid<T>, masked: &[usize]) -> Result<Var> {
        let x = self.embed(ctx, grid, masked)?;
        encode(ctx, x, &self.layers, self.norm, "vision")
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: NormOrder,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, g) = (cfg.width, Group::Encoder);
        TextEncoder {
            tokens: store.add("text.tokens", Tensor::normal([cfg.vocab_size, d], 0.02, rng), g, false),
            pos: store.add("text.pos", Tensor::normal([cfg.max_text_len + 2, d], 0.02, rng), g, false),
            layers: (0..cfg.text_layers)
                .map(|i| EncoderLayer::new(store, &format!("text.layer{i}"), cfg, rng))
                .collect(),
            norm: cfg.norm,
            max_len: cfg.max_text_len,
        }
    }

    /// `[x_cls; token rows; x_sep] + pos`, shape `(N_l + 2) × D`.
    pub fn embed<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = ctx.p(self.tokens);
        let v = ctx.g.shape(table)[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        if ids.len() > self.max_len {
            return Err(Error::Argument(format!(
                "{} tokens exceed the maximum text length {}",
                ids.len(),
                self.max_len
            )));
        }
        let mut seq = Vec::with_capacity(ids.len() + 2);
        seq.push(Vocab::CLS_ID);
        seq.extend_from_slice(ids);
        seq.push(Vocab::SEP_ID);
        let x = ctx.g.gather(table, &seq)?;
        let pos = ctx.p(self.pos);
        let pos = ctx.g.slice(pos, 0, 0, seq.len())?;
        Ok(ctx.g.add(x, pos)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Var> {
        let x = self.embed(ctx, ids)?;
        encode(ctx, x, &self.layers, self.norm, "text")
    }
}
