//! Knowledge-graph embeddings: TransE training with margin ranking and
//! uniform head/tail corruption, single-head graph attention aggregation over
//! the undirected neighborhood, and the on-disk embedding format.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use kvlp_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::kb::Triple;
use crate::rng::substream;

/// Entity and relation vectors, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbeddings<T> {
    pub entities: Tensor<T>,
    pub relations: Tensor<T>,
}

impl<T: Scalar> KgEmbeddings<T> {
    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn score(&self, t: Triple) -> T {
        distance(self.entities.row(t.head), self.relations.row(t.relation), self.entities.row(t.tail))
    }
}

/// `‖h + r − t‖₂`; lower means more plausible.
pub fn transe_score<T: Scalar>(h: &[T], r: &[T], t: &[T]) -> Result<T> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(kvlp_tensor::TensorError::Shape {
            op: "transe_score",
            detail: format!("widths {}, {}, {}", h.len(), r.len(), t.len()),
        }
        .into());
    }
    Ok(distance(h, r, t))
}

fn distance<T: Scalar>(h: &[T], r: &[T], t: &[T]) -> T {
    h.iter()
        .zip(r)
        .zip(t)
        .map(|((&a, &b), &c)| {
            let u = a + b - c;
            u * u
        })
        .sum::<T>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub neg_per_pos: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 32,
            margin: 1.0,
            lr: 0.01,
            epochs: 200,
            neg_per_pos: 1,
            seed: 0,
        }
    }
}

fn renormalize_rows<T: Scalar>(m: &mut Tensor<T>) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::one() {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
    }
}

/// Projects entity rows into the closed unit ball.
pub fn renormalize_entities<T: Scalar>(emb: &mut KgEmbeddings<T>) {
    renormalize_rows(&mut emb.entities);
}

/// Uniform init in `±6/√dim`, relations scaled to unit norm, entities
/// projected into the unit ball.
pub fn init_embeddings<T: Scalar>(n_entities: usize, n_relations: usize, cfg: &TransEConfig) -> KgEmbeddings<T> {
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut rng = substream(cfg.seed, "transe-init", 0);
    let entities = Tensor::uniform([n_entities, cfg.dim], -bound, bound, &mut rng);
    let mut relations: Tensor<T> = Tensor::uniform([n_relations, cfg.dim], -bound, bound, &mut rng);
    for i in 0..n_relations {
        let row = relations.row_mut(i);
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    let mut emb = KgEmbeddings { entities, relations };
    renormalize_entities(&mut emb);
    emb
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransETrace {
    pub epoch_loss: Vec<f64>,
}

/// Margin-ranking TransE by per-triple SGD. Entities are projected into the
/// unit ball after every epoch.
pub fn train_transe<T: Scalar>(
    n_entities: usize,
    n_relations: usize,
    triples: &[Triple],
    cfg: &TransEConfig,
) -> Result<(KgEmbeddings<T>, TransETrace)> {
    if triples.is_empty() {
        return Err(Error::Argument("TransE needs at least one triple".into()));
    }
    if let Some(t) = triples
        .iter()
        .find(|t| t.head >= n_entities || t.tail >= n_entities || t.relation >= n_relations)
    {
        return Err(Error::Argument(format!("triple {:?} out of range", t)));
    }
    let mut emb = init_embeddings::<T>(n_entities, n_relations, cfg);
    let mut trace = TransETrace::default();
    let margin = T::lit(cfg.margin);
    let lr = T::lit(cfg.lr);
    let d = cfg.dim;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut gpos = vec![T::zero(); d];
    let mut gneg = vec![T::zero(); d];

    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "transe-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let pos = triples[k];
            for _ in 0..cfg.neg_per_pos {
                let neg = corrupt(pos, n_entities, &mut rng);
                let dp = emb.score(pos);
                let dn = emb.score(neg);
                let loss = margin + dp - dn;
                if loss <= T::zero() {
                    continue;
                }
                total += loss.as_f64();
                unit_residual(&emb, pos, dp, &mut gpos);
                unit_residual(&emb, neg, dn, &mut gneg);
                // d loss = d(dp) - d(dn)
                apply(&mut emb, pos, &gpos, lr);
                apply(&mut emb, neg, &gneg, -lr);
            }
        }
        renormalize_entities(&mut emb);
        trace.epoch_loss.push(total);
    }
    Ok((emb, trace))
}

fn corrupt<R: Rng>(t: Triple, n: usize, rng: &mut R) -> Triple {
    let head_side = rng.gen_bool(0.5);
    let orig = if head_side { t.head } else { t.tail };
    let mut e = rng.gen_range(0..n);
    if n > 1 {
        while e == orig {
            e = rng.gen_range(0..n);
        }
    }
    if head_side {
        Triple { head: e, ..t }
    } else {
        Triple { tail: e, ..t }
    }
}

fn unit_residual<T: Scalar>(emb: &KgEmbeddings<T>, t: Triple, dist: T, out: &mut [T]) {
    let (h, r, tl) = (emb.entities.row(t.head), emb.relations.row(t.relation), emb.entities.row(t.tail));
    for i in 0..out.len() {
        out[i] = if dist > T::zero() {
            (h[i] + r[i] - tl[i]) / dist
        } else {
            T::zero()
        };
    }
}

/// Descends `step · grad(dist)` for one triple's three rows.
fn apply<T: Scalar>(emb: &mut KgEmbeddings<T>, t: Triple, u: &[T], step: T) {
    for (i, &g) in u.iter().enumerate() {
        emb.entities.row_mut(t.head)[i] -= step * g;
        emb.relations.row_mut(t.relation)[i] -= step * g;
        emb.entities.row_mut(t.tail)[i] += step * g;
    }
}

/// Fraction of triples whose true tail ranks first among all entities, with
/// other known true tails for the same (head, relation) filtered out. Ties
/// count against the true tail.
pub fn filtered_tail_hits_at_1<T: Scalar>(emb: &KgEmbeddings<T>, triples: &[Triple]) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let known: HashSet<Triple> = triples.iter().copied().collect();
    let mut hits = 0;
    for &t in triples {
        let s_true = emb.score(t);
        let beaten = (0..emb.num_entities()).filter(|&c| c != t.tail).any(|c| {
            let cand = Triple { tail: c, ..t };
            !known.contains(&cand) && emb.score(cand) <= s_true
        });
        if !beaten {
            hits += 1;
        }
    }
    hits as f64 / triples.len() as f64
}

/// Single-head graph attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttentionParams<T> {
    /// `D×D`, applied as `transform · e`.
    pub transform: Tensor<T>,
    /// Length `2·D`: first half scores the center node, second half the neighbor.
    pub attention: Tensor<T>,
    pub leaky_slope: T,
}

impl<T: Scalar> GraphAttentionParams<T> {
    /// Identity transform with a small seeded attention vector.
    pub fn init(dim: usize, leaky_slope: f64, seed: u64) -> Self {
        let mut rng = substream(seed, "gat-init", 0);
        GraphAttentionParams {
            transform: Tensor::eye(dim),
            attention: Tensor::normal([2 * dim], 0.1, &mut rng),
            leaky_slope: T::lit(leaky_slope),
        }
    }
}

/// Aggregated representations with the attention coefficients used.
#[derive(Clone, Debug, PartialEq)]
pub struct GatOutput<T> {
    pub representations: Tensor<T>,
    /// Per node: (neighbor, coefficient), neighbors in ascending order.
    pub attention: Vec<Vec<(usize, T)>>,
}

/// Undirected neighborhoods from the triples, each with a self-loop.
pub fn neighborhoods(n: usize, triples: &[Triple]) -> Vec<BTreeSet<usize>> {
    let mut nb: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for t in triples {
        nb[t.head].insert(t.tail);
        nb[t.tail].insert(t.head);
    }
    nb
}

pub fn gat_aggregate<T: Scalar>(
    entities: &Tensor<T>,
    triples: &[Triple],
    params: &GraphAttentionParams<T>,
) -> Result<GatOutput<T>> {
    let (n, d) = (entities.rows(), entities.cols());
    if params.transform.shape() != [d, d] || params.attention.len() != 2 * d {
        return Err(Error::Argument(format!(
            "graph attention parameters do not match embedding width {}",
            d
        )));
    }
    // rows z_j = transform · e_j
    let z = entities.matmul(&params.transform.transpose()?)?;
    let a = params.attention.data();
    let self_part: Vec<T> = (0..n).map(|i| dotp(&a[..d], z.row(i))).collect();
    let nb_part: Vec<T> = (0..n).map(|j| dotp(&a[d..], z.row(j))).collect();
    let mut out = Tensor::zeros([n, d]);
    let mut attention = Vec::with_capacity(n);
    for (i, nbrs) in neighborhoods(n, triples).into_iter().enumerate() {
        let logits: Vec<T> = nbrs
            .iter()
            .map(|&j| {
                let x = self_part[i] + nb_part[j];
                if x > T::zero() {
                    x
                } else {
                    params.leaky_slope * x
                }
            })
            .collect();
        let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let zsum: T = exps.iter().copied().sum();
        let mut coeffs = Vec::with_capacity(nbrs.len());
        for (&j, &e) in nbrs.iter().zip(&exps) {
            let alpha = e / zsum;
            coeffs.push((j, alpha));
            for (o, &zj) in out.row_mut(i).iter_mut().zip(z.row(j)) {
                *o += alpha * zj;
            }
        }
        attention.push(coeffs);
    }
    Ok(GatOutput {
        representations: out,
        attention,
    })
}

fn dotp<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Linear map of aggregated entity rows into the fusion width.
pub fn project_entities<T: Scalar>(aggregated: &Tensor<T>, w_proj: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(aggregated.matmul(w_proj)?)
}

pub const KGE_BIN: &str = "kge.bin";
pub const KGE_MANIFEST: &str = "kge.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgeManifest {
    pub n_e: usize,
    pub n_r: usize,
    pub d_e: usize,
    pub entity_ids: Vec<String>,
    pub relation_ids: Vec<String>,
}

/// Writes `kge.bin` (little-endian f32 entity rows then relation rows) and
/// `kge.json` into `dir`.
pub fn save_kge<T: Scalar>(
    dir: &Path,
    emb: &KgEmbeddings<T>,
    entity_ids: &[String],
    relation_ids: &[String],
) -> Result<()> {
    if entity_ids.len() != emb.num_entities() || relation_ids.len() != emb.num_relations() {
        return Err(Error::Argument("id lists do not match embedding rows".into()));
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let mut bytes = Vec::with_capacity(4 * (emb.entities.len() + emb.relations.len()));
    for &v in emb.entities.data().iter().chain(emb.relations.data()) {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::write(dir.join(KGE_BIN), bytes).at(dir.join(KGE_BIN))?;
    let manifest = KgeManifest {
        n_e: emb.num_entities(),
        n_r: emb.num_relations(),
        d_e: emb.dim(),
        entity_ids: entity_ids.to_vec(),
        relation_ids: relation_ids.to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(KGE_MANIFEST), json).at(dir.join(KGE_MANIFEST))
}

pub fn load_kge<T: Scalar>(dir: &Path) -> Result<(KgEmbeddings<T>, KgeManifest)> {
    let mp = dir.join(KGE_MANIFEST);
    let manifest: KgeManifest = serde_json::from_str(&std::fs::read_to_string(&mp).at(&mp)?)?;
    let bp = dir.join(KGE_BIN);
    let bytes = std::fs::read(&bp).at(&bp)?;
    let ne = manifest.n_e * manifest.d_e;
    let nr = manifest.n_r * manifest.d_e;
    if bytes.len() != 4 * (ne + nr)
        || manifest.entity_ids.len() != manifest.n_e
        || manifest.relation_ids.len() != manifest.n_r
    {
        return Err(Error::Format {
            file: KGE_BIN.into(),
            line: 0,
            msg: "size does not match manifest".into(),
        });
    }
    let vals: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let entities = Tensor::from_vec([manifest.n_e, manifest.d_e], vals[..ne].to_vec())?;
    let relations = Tensor::from_vec([manifest.n_r, manifest.d_e], vals[ne..].to_vec())?;
    Ok((KgEmbeddings { entities, relations }, manifest))
}
