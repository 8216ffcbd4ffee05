//! The joint pre-training step and loop.

use std::fmt::Write as _;
use std::path::Path;

use kvlp_tensor::{Scalar, TensorError, Var};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, IoContext, Result};
use crate::model::Model;
use crate::objectives::{
    alignment_loss_graph, apply_token_mask, entity_labels, itm_loss, mim_loss, mlm_loss, plan_masks, total_loss,
    Components, Knowledge, LossWeights, MaskPlan, Replacement,
};
use crate::params::{Ctx, Grads};
use crate::rng::substream;
use crate::train::optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub warmup_fraction: f64,
    /// Global gradient norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub knowledge: Knowledge,
    pub replacement: Replacement,
    /// Negatives per alignment sum; `None` sums over every entity.
    pub align_neg_cap: Option<usize>,
    pub itm_neg_prob: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            adamw: AdamWConfig::default(),
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            knowledge: Knowledge::ALL,
            replacement: Replacement::Mask,
            align_neg_cap: None,
            itm_neg_prob: 0.5,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.steps, self.warmup_fraction)
    }
}

/// Batch-mean loss components of one step (disabled components are 0).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub mlm: f64,
    pub mim: f64,
    pub itm: f64,
    pub l_vk: f64,
    pub l_lk: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,mlm,mim,itm,l_vk,l_lk,total";

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.mlm, self.mim, self.itm, self.l_vk, self.l_lk, self.total
        )
    }
}

/// Everything drawn at random for one sample in one step.
#[derive(Clone, Debug)]
pub struct SampleDraw {
    pub plan: MaskPlan,
    pub masked_ids: Vec<usize>,
    /// Batch position of the text shown for matching (itself when matched).
    pub presented: usize,
    pub matched: bool,
}

fn tag(component: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            component: component.to_string(),
            step,
        },
        other => other,
    }
}

/// Records one sample's losses: a masked pass for MLM/MIM and a clean pass
/// over the image with the presented text for ITM and alignment.
pub fn sample_components<T: Scalar, R: Rng>(
    ctx: &mut Ctx<'_, T>,
    model: &Model<T>,
    sample: &Sample<T>,
    presented: &Sample<T>,
    draw: &SampleDraw,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<Components<Var>> {
    let mut out = Components::default();

    let hv = model.encode_image(ctx, &sample.grid, &draw.plan.patches)?;
    let hl = model.encode_text(ctx, &draw.masked_ids)?;
    let fused = model.fuse(ctx, hv, hl, &sample.mention_entities(), &sample.linked.match_matrix())?;
    let targets: Vec<usize> = draw.plan.tokens.iter().map(|&i| sample.ids[i]).collect();
    out.mlm = mlm_loss(ctx, &model.mlm, fused.zl, &draw.plan.tokens, &targets).map_err(tag("mlm", step))?;
    out.mim = mim_loss(ctx, &model.mim, fused.zv, &draw.plan.patches, &sample.grid.patches).map_err(tag("mim", step))?;

    let hv = model.encode_image(ctx, &sample.grid, &[])?;
    let hl = model.encode_text(ctx, &presented.ids)?;
    let fused = model.fuse(ctx, hv, hl, &presented.mention_entities(), &presented.linked.match_matrix())?;
    let logits = model.itm_logits(ctx, &fused)?;
    out.itm = Some(itm_loss(ctx, logits, draw.matched).map_err(tag("itm", step))?);

    if cfg.knowledge.ak {
        let n = model.cfg.n_entities;
        let lv = model.alignment_logits(ctx, hv, model.w_vk)?;
        let y = entity_labels::<T>(&sample.entities, n);
        out.l_vk = Some(alignment_loss_graph(ctx, lv, &y, cfg.align_neg_cap, rng).map_err(tag("l_vk", step))?);
        let ll = model.alignment_logits(ctx, hl, model.w_lk)?;
        let y = entity_labels::<T>(&presented.entities, n);
        out.l_lk = Some(alignment_loss_graph(ctx, ll, &y, cfg.align_neg_cap, rng).map_err(tag("l_lk", step))?);
    }
    Ok(out)
}

/// Training state over a fixed training set.
pub struct Trainer<'d, T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Next step to run.
    pub step: usize,
    pub data: Vec<&'d Sample<T>>,
    /// Steps where some sample had nothing to mask for MLM.
    pub empty_mlm: usize,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, data: Vec<&'d Sample<T>>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        if cfg.knowledge.rk != model.cfg.fusion.rk_enabled {
            return Err(Error::Config("knowledge.rk disagrees with the model's fusion config".into()));
        }
        let opt = AdamW::new(cfg.adamw, &model.store);
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: 0,
            data,
            empty_mlm: 0,
        })
    }

    /// Training-set indices for `step`, drawn without replacement.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = substream(self.cfg.seed, "batch", step as u64);
        let b = self.cfg.batch_size.min(self.data.len());
        index::sample(&mut rng, self.data.len(), b).into_vec()
    }

    pub fn draw(&self, step: usize, batch: &[usize], pos: usize) -> SampleDraw {
        let mut rng = substream(self.cfg.seed, "sample", ((step as u64) << 20) | pos as u64);
        let s = self.data[batch[pos]];
        let plan = plan_masks(
            &s.linked,
            s.grid.num_patches(),
            self.cfg.knowledge.lk,
            self.cfg.replacement,
            &mut rng,
        );
        let masked_ids = apply_token_mask(&s.ids, &plan, self.model.cfg.encoder.vocab_size, &mut rng);
        let swap = batch.len() > 1 && rng.gen_bool(self.cfg.itm_neg_prob);
        let presented = if swap {
            let k = rng.gen_range(0..batch.len() - 1);
            if k >= pos {
                k + 1
            } else {
                k
            }
        } else {
            pos
        };
        SampleDraw {
            plan,
            masked_ids,
            presented,
            matched: !swap,
        }
    }

    /// Forward and backward over one batch, summing gradients in batch order.
    pub fn compute_step(&mut self, step: usize) -> Result<(Grads<T>, StepReport)> {
        let batch = self.batch_indices(step);
        let mut grads = Grads::new(self.model.store.len());
        let inv = T::one() / T::lit(batch.len() as f64);
        let mut rep = StepReport {
            step,
            ..StepReport::default()
        };
        for pos in 0..batch.len() {
            let draw = self.draw(step, &batch, pos);
            let sample = self.data[batch[pos]];
            let presented = self.data[batch[draw.presented]];
            let mut rng = substream(self.cfg.seed, "align", ((step as u64) << 20) | pos as u64);
            let mut ctx = Ctx::new(&self.model.store);
            let parts = sample_components(&mut ctx, &self.model, sample, presented, &draw, &self.cfg, step, &mut rng)?;
            if parts.mlm.is_none() {
                self.empty_mlm += 1;
                log::warn!("step {step}: sample {} has no maskable tokens", sample.id);
            }
            let total = total_loss(&mut ctx, &parts, &self.cfg.weights).map_err(tag("total", step))?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| ctx.g.value(v).item().as_f64());
            let n = batch.len() as f64;
            rep.mlm += value(parts.mlm) / n;
            rep.mim += value(parts.mim) / n;
            rep.itm += value(parts.itm) / n;
            rep.l_vk += value(parts.l_vk) / n;
            rep.l_lk += value(parts.l_lk) / n;
            rep.total += value(Some(total)) / n;
            let scaled = ctx.g.scale(total, inv)?;
            ctx.backward_into(scaled, &mut grads)?;
        }
        Ok((grads, rep))
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let (mut grads, mut rep) = self.compute_step(step)?;
        for (name, v) in [
            ("mlm", rep.mlm),
            ("mim", rep.mim),
            ("itm", rep.itm),
            ("l_vk", rep.l_vk),
            ("l_lk", rep.l_lk),
            ("total", rep.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: name.into(),
                    step,
                });
            }
        }
        rep.grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        let factor = self.cfg.schedule().factor(step);
        rep.lr = self.cfg.adamw.lr_rest * factor;
        self.opt.step(&mut self.model.store, &grads, factor, &[])?;
        self.step += 1;
        Ok(rep)
    }
}

/// Appends rows to a metrics file, writing the header for a new file.
pub fn write_metrics(path: &Path, rows: &[StepReport], append: bool) -> Result<()> {
    let mut body = String::new();
    if !append || !path.exists() {
        body.push_str(METRICS_HEADER);
        body.push('\n');
    }
    for r in rows {
        let _ = writeln!(body, "{}", r.csv_row());
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .at(path)?;
    f.write_all(body.as_bytes()).at(path)
}

/// Keeps the header and rows for steps before `step`.
pub fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let body = std::fs::read_to_string(path).at(path)?;
    let mut out = String::new();
    for (i, line) in body.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).at(path)
}
