//! Shared fixtures and plain-`Vec` reference implementations for the
//! integration tests. Nothing here calls into the tensor engine's ops.
#![allow(dead_code)]

use kvlp_core::data::{Sample, Split};
use kvlp_core::encoders::{EncoderConfig, PatchGrid};
use kvlp_core::fusion::FusionConfig;
use kvlp_core::kb::{link_entities, Entity, KnowledgeBase, Relation, Triple};
use kvlp_core::model::{Model, ModelConfig};
use kvlp_core::nn::{Attention, LayerNorm, Linear, NormOrder, LN_EPS};
use kvlp_core::params::ParamStore;
use kvlp_core::text::{tokenize, Vocab};
use kvlp_core::fusion::StreamBlock;
use kvlp_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn tr(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn softmax_rows(a: &M) -> M {
    a.iter()
        .map(|r| {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &M) -> M {
    let y = mm(x, &mat(store.value(l.w)));
    match l.b {
        Some(b) => {
            let b = store.value(b).row(0).to_vec();
            y.into_iter().map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect()).collect()
        }
        None => y,
    }
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &M) -> M {
    let g = store.value(ln.gain).row(0);
    let b = store.value(ln.bias).row(0);
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mu) / sd * g[i] + b[i]).collect()
        })
        .collect()
}

/// Multi-head attention and the head-averaged weights.
pub fn attention(store: &ParamStore<f64>, a: &Attention, xq: &M, xkv: &M) -> (M, M) {
    let q = linear(store, &a.q, xq);
    let k = linear(store, &a.k, xkv);
    let v = linear(store, &a.v, xkv);
    let d = q[0].len();
    let dk = d / a.heads;
    let mut cat = vec![Vec::new(); q.len()];
    let mut avg = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..a.heads {
        let (qh, kh, vh) = (cols(&q, h * dk, dk), cols(&k, h * dk, dk), cols(&v, h * dk, dk));
        let s: M = mm(&qh, &tr(&kh))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x / (dk as f64).sqrt()).collect())
            .collect();
        let w = softmax_rows(&s);
        for (i, r) in w.iter().enumerate() {
            for (j, x) in r.iter().enumerate() {
                avg[i][j] += x / a.heads as f64;
            }
        }
        for (i, r) in mm(&w, &vh).into_iter().enumerate() {
            cat[i].extend(r);
        }
    }
    (linear(store, &a.o, &cat), avg)
}

pub fn ffn(store: &ParamStore<f64>, f: &kvlp_core::nn::FeedForward, x: &M) -> M {
    let h: M = linear(store, &f.fc1, x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(store, &f.fc2, &h)
}

/// Four entities, one two-token name, one synonym.
pub fn tiny_kb() -> KnowledgeBase {
    let e = |id: &str, name: &str, syn: &[&str]| Entity {
        id: id.into(),
        canonical_name: name.into(),
        synonyms: syn.iter().map(|s| s.to_string()).collect(),
    };
    KnowledgeBase::new(
        vec![
            e("E0", "red apple", &["apple"]),
            e("E1", "tree", &[]),
            e("E2", "sky", &["heaven"]),
            e("E3", "river", &[]),
        ],
        vec![Relation {
            id: "R0".into(),
            name: "near".into(),
        }],
        vec![
            Triple { head: 0, relation: 0, tail: 1 },
            Triple { head: 1, relation: 0, tail: 3 },
        ],
    )
    .unwrap()
}

pub const TINY_TEXTS: [&str; 4] = [
    "a red apple hangs from the tree",
    "the sky above a river",
    "nothing to see here",
    "apple and apple under heaven",
];

pub fn tiny_vocab() -> Vocab {
    let toks: Vec<Vec<String>> = TINY_TEXTS.iter().map(|t| tokenize(t)).collect();
    Vocab::build(toks.iter().map(Vec::as_slice))
}

pub fn tiny_config(vocab: usize, norm: NormOrder, rk: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            width: 8,
            vision_layers: 1,
            text_layers: 1,
            heads: 2,
            vocab_size: vocab,
            max_text_len: 12,
            ffn_mult: 2,
            norm,
        },
        fusion: FusionConfig {
            layers: 1,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            rk_enabled: rk,
            row_normalize_p: false,
            norm,
        },
        entity_dim: 6,
        n_entities: 4,
        align_pre_gat: false,
    }
}

pub fn random_table(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::normal([rows, cols], 0.5, &mut rng)
}

pub fn tiny_model(norm: NormOrder, rk: bool) -> Model<f64> {
    let cfg = tiny_config(tiny_vocab().len(), norm, rk);
    Model::new(cfg, random_table(4, 6, 11), None, 5).unwrap()
}

pub fn random_pixels(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

/// Sample `i` of [`TINY_TEXTS`] with a seeded 8×8 image; entity rows are KB rows.
pub fn tiny_sample(i: usize) -> Sample<f64> {
    let kb = tiny_kb();
    let vocab = tiny_vocab();
    let tokens = tokenize(TINY_TEXTS[i]);
    let linked = link_entities(&tokens, &kb);
    let mut entities = linked.entity_ids();
    entities.sort_unstable();
    entities.dedup();
    Sample {
        id: format!("s{i}"),
        split: Split::Train,
        grid: PatchGrid::from_pixels(&random_pixels(64, 100 + i as u64), 8, 8, 1, 4).unwrap(),
        ids: vocab.encode(&tokens),
        linked,
        entities,
    }
}

use kvlp_core::objectives::{apply_token_mask, plan_masks, total_loss, Knowledge};
use kvlp_core::params::{Ctx, Grads};
use kvlp_core::train::pretrain::{sample_components, SampleDraw, TrainConfig};

/// Fixed masking draw for `sample`, presenting `presented`'s text.
pub fn fixed_draw(sample: &Sample<f64>, vocab: usize, lk: bool, presented: usize, matched: bool) -> SampleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let plan = plan_masks(&sample.linked, sample.grid.num_patches(), lk, Default::default(), &mut rng);
    let masked_ids = apply_token_mask(&sample.ids, &plan, vocab, &mut rng);
    SampleDraw {
        plan,
        masked_ids,
        presented,
        matched,
    }
}

/// Total pre-training loss of one sample, accumulating gradients when asked.
pub fn sample_loss(
    model: &Model<f64>,
    sample: &Sample<f64>,
    presented: &Sample<f64>,
    draw: &SampleDraw,
    knowledge: Knowledge,
    grads: Option<&mut Grads<f64>>,
) -> f64 {
    let cfg = TrainConfig {
        knowledge,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = Ctx::new(&model.store);
    let parts = sample_components(&mut ctx, model, sample, presented, draw, &cfg, 0, &mut rng).unwrap();
    let total = total_loss(&mut ctx, &parts, &cfg.weights).unwrap();
    if let Some(g) = grads {
        ctx.backward_into(total, g).unwrap();
    }
    ctx.g.value(total).item()
}

/// Largest relative error between backprop gradients and central
/// differences over every trainable parameter element (or a strided subset
/// of at most `per_param` elements per tensor), with the offending path.
pub fn model_gradcheck(
    model: &Model<f64>,
    per_param: usize,
    loss: impl Fn(&Model<f64>, Option<&mut Grads<f64>>) -> f64,
) -> (f64, String, usize) {
    let mut grads = Grads::new(model.store.len());
    loss(model, Some(&mut grads));
    let mut probe = model.clone();
    let h = 1e-5;
    let (mut worst, mut at, mut checked) = (0.0f64, String::new(), 0);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get(id);
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let stride = n.div_ceil(per_param).max(1);
        for e in (0..n).step_by(stride) {
            let orig = p.value.data()[e];
            probe.store.value_mut(id).data_mut()[e] = orig + h;
            let up = loss(&probe, None);
            probe.store.value_mut(id).data_mut()[e] = orig - h;
            let down = loss(&probe, None);
            probe.store.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[e]);
            let err = kvlp_tensor::gradcheck::rel_err(analytic, numeric);
            checked += 1;
            if err > worst {
                worst = err;
                at = format!("{}[{}] analytic {:e} numeric {:e}", p.path, e, analytic, numeric);
            }
        }
    }
    (worst, at, checked)
}

// Pre-norm reference forward passes.

pub fn pre_block_self(s: &ParamStore<f64>, b: &StreamBlock, x: &M) -> M {
    add(x, &attention(s, &b.self_attn, &layer_norm(s, &b.ln_self, x), &layer_norm(s, &b.ln_self, x)).0)
}

pub fn pre_block_cross(s: &ParamStore<f64>, b: &StreamBlock, x: &M, other: &M) -> M {
    let q = layer_norm(s, &b.ln_cross_q, x);
    let kv = layer_norm(s, &b.ln_cross_kv, other);
    add(x, &attention(s, &b.cross_attn, &q, &kv).0)
}

pub fn pre_block_ffn(s: &ParamStore<f64>, b: &StreamBlock, x: &M) -> M {
    add(x, &ffn(s, &b.ffn, &layer_norm(s, &b.ln_ffn, x)))
}

pub fn text_embedding(model: &Model<f64>, ids: &[usize]) -> M {
    let s = &model.store;
    let tokens = mat(s.value(model.text.tokens));
    let pos = mat(s.value(model.text.pos));
    let mut seq = vec![Vocab::CLS_ID];
    seq.extend_from_slice(ids);
    seq.push(Vocab::SEP_ID);
    seq.iter()
        .enumerate()
        .map(|(p, &t)| tokens[t].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect()
}

pub fn image_embedding(model: &Model<f64>, patches: &M, masked: &[usize]) -> M {
    let s = &model.store;
    let v = &model.vision;
    let mut emb = linear(s, &v.patch_proj, patches);
    for &i in masked {
        emb[i] = s.value(v.mask_token).row(0).to_vec();
    }
    let mut seq = vec![s.value(v.cls).row(0).to_vec()];
    seq.extend(emb);
    add(&seq, &mat(s.value(v.pos)))
}

pub fn encoder(model: &Model<f64>, layers: &[kvlp_core::encoders::EncoderLayer], x: M) -> M {
    let s = &model.store;
    layers.iter().fold(x, |h, l| {
        let n = layer_norm(s, &l.ln_attn, &h);
        let h = add(&h, &attention(s, &l.attn, &n, &n).0);
        add(&h, &ffn(s, &l.ffn, &layer_norm(s, &l.ln_ffn, &h)))
    })
}

pub struct Fused {
    pub zv: M,
    pub zl: M,
    pub ze: Option<M>,
}

/// One fusion layer per entry, pre-norm, with the entity stream when
/// `entities` is nonempty.
pub fn fusion(model: &Model<f64>, hv: M, hl: M, entities: &[usize], p: &M) -> Fused {
    let s = &model.store;
    let table = mat(s.value(model.entities));
    let proj = mat(s.value(model.w_proj));
    let mut e: Option<M> = (!entities.is_empty()).then(|| {
        let rows: M = entities.iter().map(|&i| table[i].clone()).collect();
        mm(&rows, &proj)
    });
    let (mut v, mut l) = (hv, hl);
    for layer in &model.fusion {
        let vs = pre_block_self(s, &layer.vision, &v);
        let ls = pre_block_self(s, &layer.text, &l);
        let vc = pre_block_cross(s, &layer.vision, &vs, &ls);
        let lc = pre_block_cross(s, &layer.text, &ls, &vs);
        v = pre_block_ffn(s, &layer.vision, &vc);
        let fused = match &e {
            Some(he) => {
                let es = pre_block_self(s, &layer.entity, he);
                let ec = pre_block_cross(s, &layer.entity, &es, &vs);
                e = Some(pre_block_ffn(s, &layer.entity, &ec));
                add(&mm(p, &ec), &lc)
            }
            None => lc,
        };
        l = pre_block_ffn(s, &layer.text, &fused);
    }
    Fused { zv: v, zl: l, ze: e }
}


use kvlp_core::config::RunConfig;
use kvlp_core::pipeline::{extract_kb, gen_corpus, train_kge};

/// Generates a small corpus, extracts its KB and trains embeddings under
/// `dir`, returning a run config for a width-16, one-layer model.
pub fn small_run(dir: &std::path::Path, seed: u64) -> RunConfig {
    let mut run = RunConfig {
        seed,
        n_entities: 8,
        n_relations: 2,
        triple_density: 0.2,
        n_pairs: 40,
        image_size: 16,
        patch_size: 8,
        n_fillers: 12,
        fillers_min: 3,
        fillers_max: 6,
        kge_dim: 8,
        kge_epochs: 20,
        width: 16,
        heads: 2,
        vision_layers: 1,
        text_layers: 1,
        fusion_layers: 1,
        ffn_mult: 2,
        steps: 6,
        batch_size: 4,
        ..RunConfig::default()
    };
    let corpus = dir.join("corpus");
    let kb = dir.join("kb");
    let kge = dir.join("kge");
    gen_corpus(&run, &corpus).unwrap();
    extract_kb(&corpus, &kb).unwrap();
    train_kge(&kb, &run, &kge).unwrap();
    run.corpus = Some(corpus);
    run.kb = Some(kb);
    run.kge = Some(kge);
    run
}
