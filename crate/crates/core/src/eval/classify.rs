//! Classification on frozen fused features.

use kvlp_tensor::{Reduction, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Linear;
use crate::params::{Ctx, Grads, Group, ParamStore};
use crate::rng::substream;
use crate::train::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub multi_label: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 30,
            lr: 1e-2,
            hidden: 64,
            multi_label: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub n_classes: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Loss before the first update.
    pub initial_loss: f64,
    /// Full-batch loss per epoch, before that epoch's update.
    pub train_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// `[z^v_0 ; z^l_0]` for one sample with its own text.
pub fn pair_features<T: Scalar>(model: &Model<T>, sample: &Sample<T>) -> Result<Vec<T>> {
    let mut ctx = Ctx::new(&model.store).freeze_group(Group::Encoder).freeze_group(Group::Rest);
    let hv = model.encode_image(&mut ctx, &sample.grid, &[])?;
    let hl = model.encode_text(&mut ctx, &sample.ids)?;
    let out = model.fuse(&mut ctx, hv, hl, &sample.mention_entities(), &sample.linked.match_matrix())?;
    let mut f = ctx.g.value(out.zv).row(0).to_vec();
    f.extend_from_slice(ctx.g.value(out.zl).row(0));
    Ok(f)
}

/// Two-layer perceptron head. The output layer starts at zero, so initial
/// predictions are uniform.
struct Mlp {
    store: ParamStore<f64>,
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "classifier-init", 0);
        let mut store = ParamStore::new();
        let fc1 = Linear::new(&mut store, "fc1", d_in, hidden, Group::Rest, true, &mut rng);
        let fc2 = Linear::new(&mut store, "fc2", hidden, classes, Group::Rest, true, &mut rng);
        store.value_mut(fc2.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        Mlp { store, fc1, fc2 }
    }

    /// Logits for a feature matrix, and the loss against `labels` if given.
    fn run(
        &self,
        x: &Tensor<f64>,
        labels: Option<&[Vec<usize>]>,
        multi: bool,
        grads: Option<&mut Grads<f64>>,
    ) -> Result<(Tensor<f64>, f64)> {
        let mut ctx = Ctx::new(&self.store);
        let xv = ctx.constant(x.clone())?;
        let h = self.fc1.forward(&mut ctx, xv)?;
        let h = ctx.g.gelu(h)?;
        let z = self.fc2.forward(&mut ctx, h)?;
        let mut loss_value = 0.0;
        if let Some(labels) = labels {
            let c = ctx.g.shape(z)[1];
            let loss = if multi {
                let mut y = vec![0.0; labels.len() * c];
                for (r, ls) in labels.iter().enumerate() {
                    for &l in ls {
                        y[r * c + l] = 1.0;
                    }
                }
                ctx.g.bce_with_logits(z, &y, Reduction::Mean)?
            } else {
                let t: Vec<usize> = labels.iter().map(|l| l[0]).collect();
                ctx.g.cross_entropy(z, &t, Reduction::Mean)?
            };
            loss_value = ctx.g.value(loss).item();
            if let Some(g) = grads {
                ctx.backward_into(loss, g)?;
            }
        }
        Ok((ctx.g.value(z).clone(), loss_value))
    }
}

fn accuracy(logits: &Tensor<f64>, labels: &[Vec<usize>], multi: bool) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, ls)| {
            let row = logits.row(*r);
            if multi {
                let pred: Vec<usize> = (0..row.len()).filter(|&c| row[c] > 0.0).collect();
                let mut want = (*ls).clone();
                want.sort_unstable();
                want.dedup();
                pred == want
            } else {
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == ls[0]
            }
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn features<T: Scalar>(model: &Model<T>, samples: &[&Sample<T>]) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| pair_features(model, s).map(|f| f.iter().map(|v| v.as_f64()).collect()))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros([0, 2 * model.cfg.encoder.width]));
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Trains a two-layer head on frozen fused features with full-batch AdamW
/// and reports accuracy on `eval`. Single-label tasks use one label per
/// sample and cross-entropy; multi-label tasks use binary cross-entropy.
pub fn finetune_classifier<T: Scalar>(
    model: &Model<T>,
    train: &[&Sample<T>],
    train_labels: &[Vec<usize>],
    eval: &[&Sample<T>],
    eval_labels: &[Vec<usize>],
    n_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierReport> {
    if train.is_empty() || train.len() != train_labels.len() || eval.len() != eval_labels.len() {
        return Err(Error::Argument("samples and labels differ in number".into()));
    }
    for ls in train_labels.iter().chain(eval_labels) {
        if (!cfg.multi_label && ls.len() != 1) || ls.iter().any(|&l| l >= n_classes) {
            return Err(Error::Argument(format!("label {:?} does not fit {} classes", ls, n_classes)));
        }
    }
    let xtr = features(model, train)?;
    let xev = features(model, eval)?;
    let mut mlp = Mlp::new(xtr.cols(), cfg.hidden, n_classes, cfg.seed);
    let adam = AdamWConfig {
        lr_rest: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam, &mlp.store);
    let (_, initial_loss) = mlp.run(&xtr, Some(train_labels), cfg.multi_label, None)?;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut g = Grads::new(mlp.store.len());
        let (_, l) = mlp.run(&xtr, Some(train_labels), cfg.multi_label, Some(&mut g))?;
        train_loss.push(l);
        opt.step(&mut mlp.store, &g, 1.0, &[])?;
    }
    let (ztr, _) = mlp.run(&xtr, None, cfg.multi_label, None)?;
    let acc_ev = if eval.is_empty() {
        0.0
    } else {
        let (zev, _) = mlp.run(&xev, None, cfg.multi_label, None)?;
        accuracy(&zev, eval_labels, cfg.multi_label)
    };
    Ok(ClassifierReport {
        n_classes,
        train_size: train.len(),
        eval_size: eval.len(),
        initial_loss,
        train_loss,
        train_accuracy: accuracy(&ztr, train_labels, cfg.multi_label),
        accuracy: acc_ev,
    })
}

/// Binary labels: 1 when `entity_row` is mentioned in the sample's text.
pub fn presence_labels<T>(samples: &[&Sample<T>], entity_row: usize) -> Vec<Vec<usize>> {
    samples
        .iter()
        .map(|s| vec![usize::from(s.entities.contains(&entity_row))])
        .collect()
}
