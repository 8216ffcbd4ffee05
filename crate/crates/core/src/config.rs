//! Flat key/value run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::fusion::FusionConfig;
use crate::kge::TransEConfig;
use crate::model::ModelConfig;
use crate::nn::NormOrder;
use crate::objectives::{Knowledge, LossWeights, Replacement};
use crate::synth::GeneratorConfig;
use crate::train::{AdamWConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// Corpus directory (`corpus.jsonl`, images, and the full KB tables).
    pub corpus: Option<PathBuf>,
    /// Directory with the extracted sub-KB tables.
    pub kb: Option<PathBuf>,
    /// Directory with `kge.bin` / `kge.json`.
    pub kge: Option<PathBuf>,
    /// Pre-trained checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint directory to resume pre-training from.
    pub resume: Option<PathBuf>,

    pub n_entities: usize,
    pub n_relations: usize,
    pub triple_density: f64,
    pub n_pairs: usize,
    pub entities_per_pair: usize,
    pub image_size: usize,
    pub n_fillers: usize,
    pub fillers_min: usize,
    pub fillers_max: usize,
    pub max_name_tokens: usize,

    pub kge_dim: usize,
    pub kge_margin: f64,
    pub kge_lr: f64,
    pub kge_epochs: usize,
    pub kge_neg_per_pos: usize,
    pub gat_slope: f64,

    pub width: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
    pub norm: NormOrder,
    pub row_normalize_p: bool,
    pub align_pre_gat: bool,

    pub ak: bool,
    pub rk: bool,
    pub lk: bool,

    pub steps: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub replacement: Replacement,
    /// 0 sums the alignment loss over every entity.
    pub align_neg_cap: usize,
    pub itm_neg_prob: f64,
    pub w_mlm: f64,
    pub w_mim: f64,
    pub w_itm: f64,
    pub w_vk: f64,
    pub w_lk: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,

    pub ft_steps: usize,
    pub ft_batch: usize,
    pub ft_lr: f64,
    pub ft_negatives: usize,
    /// Entity id whose presence is the classification label.
    pub cls_entity: Option<String>,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub cls_hidden: usize,

    /// Split used for evaluation pools.
    pub eval_split: String,
    pub max_pool: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let t = TransEConfig::default();
        let e = EncoderConfig::default();
        let tc = TrainConfig::default();
        RunConfig {
            seed: 0,
            corpus: None,
            kb: None,
            kge: None,
            checkpoint: None,
            resume: None,
            n_entities: g.n_entities,
            n_relations: g.n_relations,
            triple_density: g.triple_density,
            n_pairs: g.n_pairs,
            entities_per_pair: g.entities_per_pair,
            image_size: g.image_size,
            n_fillers: g.n_fillers,
            fillers_min: g.fillers_min,
            fillers_max: g.fillers_max,
            max_name_tokens: g.max_name_tokens,
            kge_dim: t.dim,
            kge_margin: t.margin,
            kge_lr: t.lr,
            kge_epochs: t.epochs,
            kge_neg_per_pos: t.neg_per_pos,
            gat_slope: 0.2,
            width: e.width,
            heads: e.heads,
            vision_layers: e.vision_layers,
            text_layers: e.text_layers,
            fusion_layers: 2,
            patch_size: e.patch_size,
            max_text_len: e.max_text_len,
            ffn_mult: e.ffn_mult,
            norm: NormOrder::Pre,
            row_normalize_p: false,
            align_pre_gat: false,
            ak: true,
            rk: true,
            lk: true,
            steps: tc.steps,
            batch_size: tc.batch_size,
            lr_encoder: tc.adamw.lr_encoder,
            lr_rest: tc.adamw.lr_rest,
            weight_decay: tc.adamw.weight_decay,
            warmup_fraction: tc.warmup_fraction,
            clip_norm: tc.clip_norm,
            replacement: Replacement::Mask,
            align_neg_cap: 0,
            itm_neg_prob: tc.itm_neg_prob,
            w_mlm: 1.0,
            w_mim: 1.0,
            w_itm: 1.0,
            w_vk: 1.0,
            w_lk: 1.0,
            checkpoint_every: 0,
            ft_steps: 200,
            ft_batch: 4,
            ft_lr: 1e-3,
            ft_negatives: 15,
            cls_entity: None,
            cls_epochs: 30,
            cls_lr: 1e-2,
            cls_hidden: 64,
            eval_split: "test".into(),
            max_pool: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            triple_density: self.triple_density,
            n_pairs: self.n_pairs,
            entities_per_pair: self.entities_per_pair,
            image_size: self.image_size,
            patch_size: self.patch_size,
            n_fillers: self.n_fillers,
            fillers_min: self.fillers_min,
            fillers_max: self.fillers_max,
            max_name_tokens: self.max_name_tokens,
            seed: self.seed,
        }
    }

    pub fn transe(&self) -> TransEConfig {
        TransEConfig {
            dim: self.kge_dim,
            margin: self.kge_margin,
            lr: self.kge_lr,
            epochs: self.kge_epochs,
            neg_per_pos: self.kge_neg_per_pos,
            seed: self.seed,
        }
    }

    pub fn knowledge(&self) -> Knowledge {
        Knowledge {
            ak: self.ak,
            rk: self.rk,
            lk: self.lk,
        }
    }

    pub fn model(&self, vocab_size: usize, n_entities: usize, entity_dim: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: self.image_size,
                image_width: self.image_size,
                channels: 1,
                patch_size: self.patch_size,
                width: self.width,
                vision_layers: self.vision_layers,
                text_layers: self.text_layers,
                heads: self.heads,
                vocab_size,
                max_text_len: self.max_text_len,
                ffn_mult: self.ffn_mult,
                norm: self.norm,
            },
            fusion: FusionConfig {
                layers: self.fusion_layers,
                width: self.width,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                rk_enabled: self.rk,
                row_normalize_p: self.row_normalize_p,
                norm: self.norm,
            },
            entity_dim,
            n_entities,
            align_pre_gat: self.align_pre_gat,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adamw: AdamWConfig {
                lr_encoder: self.lr_encoder,
                lr_rest: self.lr_rest,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            warmup_fraction: self.warmup_fraction,
            clip_norm: self.clip_norm,
            knowledge: self.knowledge(),
            replacement: self.replacement,
            align_neg_cap: (self.align_neg_cap > 0).then_some(self.align_neg_cap),
            itm_neg_prob: self.itm_neg_prob,
            weights: LossWeights {
                mlm: self.w_mlm,
                mim: self.w_mim,
                itm: self.w_itm,
                l_vk: self.w_vk,
                l_lk: self.w_lk,
            },
            seed: self.seed,
        }
    }

    /// A required path key, with a configuration error naming it when unset.
    pub fn path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "corpus" => &self.corpus,
            "kb" => &self.kb,
            "kge" => &self.kge,
            "checkpoint" => &self.checkpoint,
            "resume" => &self.resume,
            _ => return Err(Error::Config(format!("unknown path key {key}"))),
        };
        p.as_deref().ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("stepz = 3"), Err(Error::Config(_))));
        let c = RunConfig::from_toml("steps = 3\nnorm = \"post\"\nlk = false").unwrap();
        assert_eq!((c.steps, c.norm, c.lk), (3, NormOrder::Post, false));
    }
}
