//! Pair scoring, recall@K ranking and retrieval fine-tuning.

use kvlp_tensor::{Reduction, Scalar, Tensor, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, MATCHED};
use crate::params::{Ctx, Grads, Group};
use crate::rng::substream;
use crate::train::optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Text query, image candidates.
    T2i,
    /// Image query, text candidates.
    I2t,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub mode: String,
    pub pool: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RetrievalReport {
    pub fn is_monotone(&self) -> bool {
        self.r1 <= self.r5 && self.r5 <= self.r10 && self.r10 <= 1.0
    }

    pub const CSV_HEADER: &'static str = "direction,mode,pool,r1,r5,r10";

    pub fn csv_row(&self) -> String {
        let d = match self.direction {
            Direction::T2i => "t2i",
            Direction::I2t => "i2t",
        };
        format!("{},{},{},{},{},{}", d, self.mode, self.pool, self.r1, self.r5, self.r10)
    }
}

/// 0-based rank of `truth` among `scores`, higher first; ties go to the
/// lower candidate index.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < truth))
        .count()
}

/// Recall@{1,5,10} in both directions from `scores[i][j]` = score of image
/// `i` with text `j`; pair `k` is image `k` with text `k`.
pub fn rank_retrieval(scores: &[Vec<f64>], mode: &str) -> Result<[RetrievalReport; 2]> {
    let n = scores.len();
    let kmax = RECALL_KS[RECALL_KS.len() - 1];
    if n < kmax {
        return Err(Error::Argument(format!("pool of {n} is smaller than K = {kmax}")));
    }
    if scores.iter().any(|r| r.len() != n) {
        return Err(Error::Argument("score matrix is not square".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite score".into()));
    }
    let report = |direction, ranks: Vec<usize>| {
        let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
        RetrievalReport {
            direction,
            mode: mode.to_string(),
            pool: n,
            r1: at(1),
            r5: at(5),
            r10: at(10),
        }
    };
    let t2i = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| scores[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let i2t = (0..n).map(|i| rank_of(&scores[i], i)).collect();
    Ok([report(Direction::T2i, t2i), report(Direction::I2t, i2t)])
}

/// Matched-class logit for image features `hv` with the text of `text`.
pub fn pair_logits<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    model: &Model<T>,
    hv: Var,
    hl: Var,
    text: &Sample<T>,
) -> Result<Var> {
    let out = model.fuse(ctx, hv, hl, &text.mention_entities(), &text.linked.match_matrix())?;
    model.itm_logits(ctx, &out)
}

fn inference_ctx<T: Scalar>(model: &Model<T>) -> Ctx<'_, T> {
    Ctx::new(&model.store).freeze_group(Group::Encoder).freeze_group(Group::Rest)
}

/// Score of the image of `image` with the text of `text`.
pub fn score_pair<T: Scalar>(model: &Model<T>, image: &Sample<T>, text: &Sample<T>) -> Result<T> {
    let mut ctx = inference_ctx(model);
    let hv = model.encode_image(&mut ctx, &image.grid, &[])?;
    let hl = model.encode_text(&mut ctx, &text.ids)?;
    let logits = pair_logits(&mut ctx, model, hv, hl, text)?;
    Ok(ctx.g.value(logits).at(0, MATCHED))
}

/// Encoder outputs for every sample's image and text.
pub fn encode_all<T: Scalar>(model: &Model<T>, samples: &[&Sample<T>]) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ctx = inference_ctx(model);
        let hv = model.encode_image(&mut ctx, &s.grid, &[])?;
        let hl = model.encode_text(&mut ctx, &s.ids)?;
        images.push(ctx.g.value(hv).clone());
        texts.push(ctx.g.value(hl).clone());
    }
    Ok((images, texts))
}

/// `scores[i][j]`: image of sample `i` with the text of sample `j`.
pub fn score_matrix<T: Scalar>(model: &Model<T>, samples: &[&Sample<T>]) -> Result<Vec<Vec<f64>>> {
    let (images, texts) = encode_all(model, samples)?;
    let n = samples.len();
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut ctx = inference_ctx(model);
            let hv = ctx.constant(images[i].clone())?;
            let hl = ctx.constant(texts[j].clone())?;
            let logits = pair_logits(&mut ctx, model, hv, hl, samples[j])?;
            scores[i][j] = ctx.g.value(logits).at(0, MATCHED).as_f64();
        }
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub negatives: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            negatives: 15,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Negative text indices for item `i`: `k` distinct others.
fn negatives<R: rand::Rng>(n: usize, i: usize, k: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, n - 1, k)
        .into_iter()
        .map(|j| if j >= i { j + 1 } else { j })
        .collect()
}

/// Cross-entropy over `[positive, negatives…]` matched logits for each item;
/// the positive is candidate 0. Encoders stay frozen (their outputs are
/// computed once); fusion, projection and the pair head are updated.
/// Returns the per-step mean loss.
pub fn finetune_retrieval<T: Scalar>(
    model: &mut Model<T>,
    train: &[&Sample<T>],
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if train.len() < cfg.negatives + 1 {
        return Err(Error::Argument(format!(
            "{} training pairs cannot supply {} negatives",
            train.len(),
            cfg.negatives
        )));
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let (images, texts) = encode_all(model, train)?;
    let adam = AdamWConfig {
        lr_encoder: 0.0,
        lr_rest: cfg.lr,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam, &model.store);
    let schedule = Schedule::new(cfg.steps, cfg.warmup_fraction);
    let mut trace = Vec::with_capacity(cfg.steps);
    let n = train.len();
    let b = cfg.batch_size.min(n);
    for step in 0..cfg.steps {
        let mut rng = substream(cfg.seed, "ft-batch", step as u64);
        let batch = index::sample(&mut rng, n, b).into_vec();
        let mut grads = Grads::new(model.store.len());
        let mut mean = 0.0;
        for &i in &batch {
            let cands: Vec<usize> = std::iter::once(i).chain(negatives(n, i, cfg.negatives, &mut rng)).collect();
            let mut ctx = Ctx::new(&model.store).freeze_group(Group::Encoder);
            let hv = ctx.constant(images[i].clone())?;
            let mut cols = Vec::with_capacity(cands.len());
            for &j in &cands {
                let hl = ctx.constant(texts[j].clone())?;
                let logits = pair_logits(&mut ctx, model, hv, hl, train[j])?;
                cols.push(ctx.g.slice(logits, 1, MATCHED, 1)?);
            }
            let row = ctx.g.concat(&cols, 1)?;
            let loss = ctx.g.cross_entropy(row, &[0], Reduction::Mean)?;
            mean += ctx.g.value(loss).item().as_f64() / b as f64;
            let scaled = ctx.g.scale(loss, T::lit(1.0 / b as f64))?;
            ctx.backward_into(scaled, &mut grads)?;
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut model.store, &grads, schedule.factor(step), &[Group::Encoder])?;
        trace.push(mean);
    }
    Ok(trace)
}
