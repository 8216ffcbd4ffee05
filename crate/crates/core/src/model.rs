//! The full model: encoders, entity projection, fusion, alignment weights and
//! the task heads.

use kvlp_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, PatchGrid, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fusion_forward, EntityInput, FusionConfig, FusionLayer, FusionOutput};
use crate::kb::MatchMatrix;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::rng::{fnv1a, substream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Entity embedding width.
    pub entity_dim: usize,
    /// Rows of the entity table.
    pub n_entities: usize,
    /// Score alignment against the pre-aggregation entity vectors.
    pub align_pre_gat: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let f = &self.fusion;
        if f.width != self.encoder.width {
            return Err(Error::Config(format!(
                "fusion width {} differs from encoder width {}",
                f.width, self.encoder.width
            )));
        }
        if f.heads == 0 || !f.width.is_multiple_of(f.heads) {
            return Err(Error::Config(format!("fusion width {} not divisible by {} heads", f.width, f.heads)));
        }
        if self.entity_dim == 0 {
            return Err(Error::Config("entity_dim must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the architecture, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

/// LN → linear prediction head.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub ln: LayerNorm,
    pub out: Linear,
}

impl Head {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = self.ln.forward(ctx, x)?;
        self.out.forward(ctx, n)
    }
}

/// Two-layer perceptron over `[LN(z^v_0); LN(z^l_0)]`.
#[derive(Clone, Copy, Debug)]
pub struct PairHead {
    pub ln_v: LayerNorm,
    pub ln_l: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PairHead {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, zv: Var, zl: Var) -> Result<Var> {
        let v = ctx.g.slice(zv, 0, 0, 1)?;
        let l = ctx.g.slice(zl, 0, 0, 1)?;
        let v = self.ln_v.forward(ctx, v)?;
        let l = self.ln_l.forward(ctx, l)?;
        let x = ctx.g.concat(&[v, l], 1)?;
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Index of the "matched" class in the pair head output.
pub const MATCHED: usize = 1;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: Vec<FusionLayer>,
    /// Frozen aggregated entity table, `N_e × D_e`.
    pub entities: ParamId,
    /// Frozen table used for alignment (the same id unless `align_pre_gat`).
    pub align_entities: ParamId,
    /// `D_e × D` entity projection into the fusion width.
    pub w_proj: ParamId,
    /// `D_e × D` image-knowledge and text-knowledge bilinear weights.
    pub w_vk: ParamId,
    pub w_lk: ParamId,
    pub mlm: Head,
    pub mim: Head,
    pub itm: PairHead,
}

impl<T: Scalar> Model<T> {
    /// `entities` are the aggregated entity vectors; `pre_gat` is required
    /// when the config aligns against the pre-aggregation table.
    pub fn new(cfg: ModelConfig, entities: Tensor<T>, pre_gat: Option<Tensor<T>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (n_e, d_e, d) = (cfg.n_entities, cfg.entity_dim, cfg.encoder.width);
        let check = |t: &Tensor<T>, what: &str| {
            if t.shape() != [n_e, d_e] {
                Err(Error::Config(format!("{what} table has shape {:?}, expected [{n_e}, {d_e}]", t.shape())))
            } else {
                Ok(())
            }
        };
        check(&entities, "entity")?;
        let mut rng = substream(seed, "init", 0);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let text = TextEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let fusion = (0..cfg.fusion.layers)
            .map(|i| FusionLayer::new(&mut store, &format!("fusion.layer{i}"), &cfg.fusion, &mut rng))
            .collect();
        let ent_id = store.add_frozen("kg.entities", entities);
        let align_entities = if cfg.align_pre_gat {
            let t = pre_gat.ok_or_else(|| Error::Config("align_pre_gat needs the pre-aggregation table".into()))?;
            check(&t, "pre-aggregation entity")?;
            store.add_frozen("kg.entities_pre_gat", t)
        } else {
            ent_id
        };
        let xavier = |rows: usize, cols: usize, rng: &mut crate::rng::Rng| {
            Tensor::normal([rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
        };
        let w_proj = store.add("kg.w_proj", xavier(d_e, d, &mut rng), Group::Rest, true);
        let w_vk = store.add("align.w_vk", xavier(d_e, d, &mut rng), Group::Rest, true);
        let w_lk = store.add("align.w_lk", xavier(d_e, d, &mut rng), Group::Rest, true);
        let g = Group::Rest;
        let mlm = Head {
            ln: LayerNorm::new(&mut store, "head.mlm.ln", d, g),
            out: Linear::new(&mut store, "head.mlm.out", d, cfg.encoder.vocab_size, g, true, &mut rng),
        };
        let mim = Head {
            ln: LayerNorm::new(&mut store, "head.mim.ln", d, g),
            out: Linear::new(&mut store, "head.mim.out", d, cfg.encoder.patch_dim(), g, true, &mut rng),
        };
        let itm = PairHead {
            ln_v: LayerNorm::new(&mut store, "head.itm.ln_v", d, g),
            ln_l: LayerNorm::new(&mut store, "head.itm.ln_l", d, g),
            fc1: Linear::new(&mut store, "head.itm.fc1", 2 * d, d, g, true, &mut rng),
            fc2: Linear::new(&mut store, "head.itm.fc2", d, 2, g, true, &mut rng),
        };
        Ok(Model {
            cfg,
            store,
            vision,
            text,
            fusion,
            entities: ent_id,
            align_entities,
            w_proj,
            w_vk,
            w_lk,
            mlm,
            mim,
            itm,
        })
    }

    pub fn ctx(&self) -> Ctx<'_, T> {
        Ctx::new(&self.store)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            fusion: self.fusion.clone(),
            entities: self.entities,
            align_entities: self.align_entities,
            w_proj: self.w_proj,
            w_vk: self.w_vk,
            w_lk: self.w_lk,
            mlm: self.mlm,
            mim: self.mim,
            itm: self.itm,
        }
    }

    /// `H^v`, with the listed patches replaced by the mask token.
    pub fn encode_image(&self, ctx: &mut Ctx<'_, T>, grid: &PatchGrid<T>, masked: &[usize]) -> Result<Var> {
        self.vision.forward(ctx, grid, masked)
    }

    /// `H^l` over `[CLS] ids [SEP]`.
    pub fn encode_text(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Var> {
        self.text.forward(ctx, ids)
    }

    /// Projected entity rows `E[ids] · W_proj`, or `None` for no entities.
    pub fn entity_stream(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Option<Var>> {
        if ids.is_empty() {
            return Ok(None);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.n_entities) {
            return Err(Error::Argument(format!("entity row {} of {}", bad, self.cfg.n_entities)));
        }
        let table = ctx.p(self.entities);
        let rows = ctx.g.gather(table, ids)?;
        let w = ctx.p(self.w_proj);
        Ok(Some(ctx.g.matmul(rows, w)?))
    }

    /// Fusion over encoder outputs. `entities` are entity-table rows, one per
    /// column of `matching`.
    pub fn fuse(
        &self,
        ctx: &mut Ctx<'_, T>,
        hv: Var,
        hl: Var,
        entities: &[usize],
        matching: &MatchMatrix,
    ) -> Result<FusionOutput> {
        let input = if self.cfg.fusion.rk_enabled && !entities.is_empty() {
            if matching.cols() != entities.len() || matching.rows() + 2 != ctx.g.shape(hl)[0] {
                return Err(kvlp_tensor::TensorError::Shape {
                    op: "fuse",
                    detail: format!(
                        "matching matrix {}x{} for {} entities and a {}-row text stream",
                        matching.rows(),
                        matching.cols(),
                        entities.len(),
                        ctx.g.shape(hl)[0]
                    ),
                }
                .into());
            }
            let he = self.entity_stream(ctx, entities)?.expect("nonempty");
            let p = ctx.constant(matching.to_padded_tensor(self.cfg.fusion.row_normalize_p))?;
            Some(EntityInput { he, p })
        } else {
            None
        };
        fusion_forward(ctx, &self.fusion, hv, hl, input, &self.cfg.fusion)
    }

    /// Alignment logits `h₀ · Wᵀ · Eᵀ`, shape `1 × N_e`, for the image
    /// (`w_vk`) or text (`w_lk`) aggregate row of an encoder output.
    pub fn alignment_logits(&self, ctx: &mut Ctx<'_, T>, h: Var, w: ParamId) -> Result<Var> {
        let h0 = ctx.g.slice(h, 0, 0, 1)?;
        let w = ctx.p(w);
        let proj = ctx.g.matmul_nt(h0, w)?;
        let e = ctx.p(self.align_entities);
        Ok(ctx.g.matmul_nt(proj, e)?)
    }

    /// Pair head logits `1 × 2` from fused outputs.
    pub fn itm_logits(&self, ctx: &mut Ctx<'_, T>, out: &FusionOutput) -> Result<Var> {
        self.itm.forward(ctx, out.zv, out.zl)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_elements()
    }
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
