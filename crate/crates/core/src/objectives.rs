//! Masking plans and the pre-training losses.

use kvlp_tensor::{Reduction, Scalar, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::LinkedText;
use crate::model::{Head, MATCHED};
use crate::params::Ctx;
use crate::text::Vocab;

pub const MLM_RATIO: f64 = 0.15;
pub const MIM_RATIO: f64 = 0.75;

/// Which knowledge injection designs are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knowledge {
    /// Aligning through knowledge: the two alignment losses.
    pub ak: bool,
    /// Reasoning using knowledge: the entity stream in fusion.
    pub rk: bool,
    /// Learning from knowledge: entity-span masking.
    pub lk: bool,
}

impl Knowledge {
    pub const ALL: Knowledge = Knowledge { ak: true, rk: true, lk: true };
    pub const NONE: Knowledge = Knowledge { ak: false, rk: false, lk: false };

    /// The eight flag combinations, none first and all last.
    pub fn grid() -> [Knowledge; 8] {
        let k = |ak, rk, lk| Knowledge { ak, rk, lk };
        [
            k(false, false, false),
            k(true, false, false),
            k(false, true, false),
            k(false, false, true),
            k(true, true, false),
            k(true, false, true),
            k(false, true, true),
            k(true, true, true),
        ]
    }
}

/// How masked token positions are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    /// Always `[MASK]`.
    #[default]
    Mask,
    /// 80% `[MASK]`, 10% random word, 10% unchanged.
    Bert,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MaskPlan {
    /// Masked content-token positions (0-based, excluding `[CLS]`), ascending.
    pub tokens: Vec<usize>,
    /// Masked patch indices, ascending.
    pub patches: Vec<usize>,
    /// Mention indices whose spans were masked; empty for random masking.
    pub sampled_mentions: Vec<usize>,
    pub replacement: Replacement,
}

/// Entity-span masking: mentions are drawn uniformly without replacement and
/// masked whole until at least `ratio · N_l` tokens are covered. Texts
/// without mentions fall back to [`random_mask`].
pub fn knowledge_mask<R: Rng>(linked: &LinkedText, ratio: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let n = linked.num_tokens();
    if linked.mentions.is_empty() {
        return (random_mask(n, ratio, rng), Vec::new());
    }
    let target = ratio * n as f64;
    let mut order: Vec<usize> = (0..linked.mentions.len()).collect();
    order.shuffle(rng);
    let mut tokens = Vec::new();
    let mut sampled = Vec::new();
    for m in order {
        if tokens.len() as f64 >= target {
            break;
        }
        let span = linked.mentions[m];
        tokens.extend(span.start..span.end);
        sampled.push(m);
    }
    tokens.sort_unstable();
    sampled.sort_unstable();
    (tokens, sampled)
}

/// `max(1, round(ratio · n))` distinct positions, or none for empty input.
pub fn random_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Exactly `round(ratio · n)` distinct patch indices.
pub fn image_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Builds the full plan for one sample.
pub fn plan_masks<R: Rng>(
    linked: &LinkedText,
    n_patches: usize,
    lk: bool,
    replacement: Replacement,
    rng: &mut R,
) -> MaskPlan {
    let (tokens, sampled_mentions) = if lk {
        knowledge_mask(linked, MLM_RATIO, rng)
    } else {
        (random_mask(linked.num_tokens(), MLM_RATIO, rng), Vec::new())
    };
    let patches = image_mask(n_patches, MIM_RATIO, rng);
    MaskPlan {
        tokens,
        patches,
        sampled_mentions,
        replacement,
    }
}

/// Token ids with masked positions replaced per the plan's policy.
pub fn apply_token_mask<R: Rng>(ids: &[usize], plan: &MaskPlan, vocab_size: usize, rng: &mut R) -> Vec<usize> {
    let mut out = ids.to_vec();
    for &i in &plan.tokens {
        out[i] = match plan.replacement {
            Replacement::Mask => Vocab::MASK_ID,
            Replacement::Bert => {
                let u: f64 = rng.gen();
                if u < 0.8 || vocab_size <= Vocab::SPECIALS {
                    Vocab::MASK_ID
                } else if u < 0.9 {
                    rng.gen_range(Vocab::SPECIALS..vocab_size)
                } else {
                    ids[i]
                }
            }
        };
    }
    out
}

/// Sigmoid probabilities `σ(e_iᵀ W_vk h^v)` and `σ(e_iᵀ W_lk h^l)` for every
/// entity row. Plain evaluation, used for diagnostics.
pub fn alignment_scores<T: Scalar>(
    h_v: &[T],
    h_l: &[T],
    entities: &Tensor<T>,
    w_vk: &Tensor<T>,
    w_lk: &Tensor<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let probs = |h: &[T], w: &Tensor<T>| -> Result<Vec<T>> {
        if w.shape() != [entities.cols(), h.len()] {
            return Err(kvlp_tensor::TensorError::Shape {
                op: "alignment_scores",
                detail: format!("weight {:?} for entity width {} and feature width {}", w.shape(), entities.cols(), h.len()),
            }
            .into());
        }
        let hv = Tensor::from_vec([h.len(), 1], h.to_vec())?;
        let wh = w.matmul(&hv)?;
        let logits = entities.matmul(&wh)?;
        Ok(logits.data().iter().map(|&z| kvlp_tensor::sigmoid(z)).collect())
    };
    Ok((probs(h_v, w_vk)?, probs(h_l, w_lk)?))
}

/// Summed binary cross-entropy of probabilities against 0/1 labels.
pub fn bce_sum<T: Scalar>(p: &[T], labels: &[T]) -> T {
    p.iter()
        .zip(labels)
        .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
        .sum()
}

/// Plain-value alignment losses for both modalities.
pub fn alignment_loss<T: Scalar>(p_v: &[T], p_l: &[T], labels_v: &[T], labels_l: &[T]) -> (T, T) {
    (bce_sum(p_v, labels_v), bce_sum(p_l, labels_l))
}

/// 0/1 label vector over `n` entity rows.
pub fn entity_labels<T: Scalar>(present: &[usize], n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n];
    for &i in present {
        y[i] = T::one();
    }
    y
}

/// Summed BCE over alignment logits. With `cap`, only the positives plus a
/// seeded uniform subset of at most `cap` negatives enter the sum.
pub fn alignment_loss_graph<T: Scalar, R: Rng>(
    ctx: &mut Ctx<'_, T>,
    logits: Var,
    labels: &[T],
    cap: Option<usize>,
    rng: &mut R,
) -> Result<Var> {
    match cap {
        Some(c) => {
            let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == T::zero()).collect();
            if neg.len() <= c {
                return Ok(ctx.g.bce_with_logits(logits, labels, Reduction::Sum)?);
            }
            let mut keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != T::zero()).collect();
            keep.extend(index::sample(rng, neg.len(), c).into_iter().map(|j| neg[j]));
            keep.sort_unstable();
            let row = ctx.g.transpose(logits)?;
            let picked = ctx.g.gather(row, &keep)?;
            let y: Vec<T> = keep.iter().map(|&i| labels[i]).collect();
            Ok(ctx.g.bce_with_logits(picked, &y, Reduction::Sum)?)
        }
        None => Ok(ctx.g.bce_with_logits(logits, labels, Reduction::Sum)?),
    }
}

/// Mean cross-entropy over masked positions. `None` when nothing is masked.
pub fn mlm_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    head: &Head,
    zl: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<Option<Var>> {
    if positions.is_empty() {
        return Ok(None);
    }
    if positions.len() != targets.len() {
        return Err(Error::Argument(format!("{} masked positions, {} targets", positions.len(), targets.len())));
    }
    // Row 0 of the text stream is [CLS].
    let rows: Vec<usize> = positions.iter().map(|&p| p + 1).collect();
    let picked = ctx.g.gather(zl, &rows)?;
    let logits = head.forward(ctx, picked)?;
    Ok(Some(ctx.g.cross_entropy(logits, targets, Reduction::Mean)?))
}

/// Mean squared error of reconstructed masked patches. `None` when no patch
/// is masked.
pub fn mim_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    head: &Head,
    zv: Var,
    masked: &[usize],
    patches: &Tensor<T>,
) -> Result<Option<Var>> {
    if masked.is_empty() {
        return Ok(None);
    }
    let rows: Vec<usize> = masked.iter().map(|&p| p + 1).collect();
    let picked = ctx.g.gather(zv, &rows)?;
    let pred = head.forward(ctx, picked)?;
    let mut target = Vec::with_capacity(masked.len() * patches.cols());
    for &m in masked {
        target.extend_from_slice(patches.row(m));
    }
    let target = ctx.constant(Tensor::from_vec([masked.len(), patches.cols()], target)?)?;
    Ok(Some(ctx.g.mse(pred, target)?))
}

/// Two-way cross-entropy of pair logits (`1 × 2`) against matched/unmatched.
pub fn itm_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, matched: bool) -> Result<Var> {
    let target = if matched { MATCHED } else { 1 - MATCHED };
    Ok(ctx.g.cross_entropy(logits, &[target], Reduction::Mean)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub mim: f64,
    pub itm: f64,
    pub l_vk: f64,
    pub l_lk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mlm: 1.0,
            mim: 1.0,
            itm: 1.0,
            l_vk: 1.0,
            l_lk: 1.0,
        }
    }
}

/// Loss components of one sample; disabled or empty components are `None`.
#[derive(Clone, Copy, Debug)]
pub struct Components<V> {
    pub mlm: Option<V>,
    pub mim: Option<V>,
    pub itm: Option<V>,
    pub l_vk: Option<V>,
    pub l_lk: Option<V>,
}

impl<V> Default for Components<V> {
    fn default() -> Self {
        Components {
            mlm: None,
            mim: None,
            itm: None,
            l_vk: None,
            l_lk: None,
        }
    }
}

impl<V: Copy> Components<V> {
    pub fn weighted(&self, w: &LossWeights) -> [(Option<V>, f64); 5] {
        [
            (self.mlm, w.mlm),
            (self.mim, w.mim),
            (self.itm, w.itm),
            (self.l_vk, w.l_vk),
            (self.l_lk, w.l_lk),
        ]
    }
}

/// `Σ w_i · L_i` over the present components; zero if none.
pub fn total_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, parts: &Components<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, wi) in parts.weighted(w) {
        let Some(v) = v else { continue };
        let term = ctx.g.scale(v, T::lit(wi))?;
        acc = Some(match acc {
            None => term,
            Some(a) => ctx.g.add(a, term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => ctx.constant(Tensor::scalar(T::zero())),
    }
}
