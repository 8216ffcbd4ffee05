//! File-level stages: corpus generation, KB extraction, KGE training, model
//! setup and pre-training.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use kvlp_tensor::Scalar;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{read_corpus, Dataset, Split};
use crate::error::{Error, IoContext, Result};
use crate::kb::{corpus_entity_set, link_entities, KnowledgeBase, Triple};
use crate::kge::{
    filtered_tail_hits_at_1, gat_aggregate, load_kge, save_kge, train_transe, GraphAttentionParams, KgEmbeddings,
};
use crate::model::Model;
use crate::synth::{generate_corpus, CorpusManifest};
use crate::text::{tokenize, Vocab};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use crate::train::pretrain::{truncate_metrics, write_metrics, StepReport, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn gen_corpus(run: &RunConfig, out: &Path) -> Result<CorpusManifest> {
    generate_corpus(&run.generator(), out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtractReport {
    pub texts: usize,
    pub kb_entities: usize,
    pub kept_entities: usize,
    pub kb_triples: usize,
    pub kept_triples: usize,
}

/// Links every corpus text and writes the sub-KB over the linked entities.
pub fn extract_kb(corpus: &Path, out: &Path) -> Result<ExtractReport> {
    let kb = KnowledgeBase::load(corpus)?;
    let records = read_corpus(corpus)?;
    let linked: Vec<_> = records.iter().map(|r| link_entities(&tokenize(&r.text), &kb)).collect();
    let keep = corpus_entity_set(&linked);
    let sub = kb.restrict(&keep)?;
    sub.save(out)?;
    Ok(ExtractReport {
        texts: records.len(),
        kb_entities: kb.num_entities(),
        kept_entities: sub.num_entities(),
        kb_triples: kb.num_triples(),
        kept_triples: sub.num_triples(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct KgeReport {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub final_epoch_loss: f64,
    pub filtered_hits_at_1: f64,
}

pub fn train_kge(kb_dir: &Path, run: &RunConfig, out: &Path) -> Result<KgeReport> {
    let kb = KnowledgeBase::load(kb_dir)?;
    let (emb, trace) = train_transe::<f64>(kb.num_entities(), kb.relations().len(), kb.triples(), &run.transe())?;
    let ids: Vec<String> = kb.entities().iter().map(|e| e.id.clone()).collect();
    let rel_ids: Vec<String> = kb.relations().iter().map(|r| r.id.clone()).collect();
    save_kge(out, &emb, &ids, &rel_ids)?;
    Ok(KgeReport {
        entities: kb.num_entities(),
        relations: kb.relations().len(),
        triples: kb.num_triples(),
        final_epoch_loss: trace.epoch_loss.last().copied().unwrap_or(0.0),
        filtered_hits_at_1: filtered_tail_hits_at_1(&emb, kb.triples()),
    })
}

/// KB triples re-indexed into embedding-table rows; triples touching an
/// entity without a row are dropped.
pub fn triples_in_rows(kb: &KnowledgeBase, ids: &[String]) -> Vec<Triple> {
    let row: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    kb.triples()
        .iter()
        .filter_map(|t| {
            let h = row.get(kb.entities()[t.head].id.as_str())?;
            let tl = row.get(kb.entities()[t.tail].id.as_str())?;
            Some(Triple {
                head: *h,
                relation: t.relation,
                tail: *tl,
            })
        })
        .collect()
}

/// Aggregated entity table and the raw one, both in embedding-row order.
pub fn entity_tables<T: Scalar>(
    kb: &KnowledgeBase,
    emb: &KgEmbeddings<T>,
    ids: &[String],
    run: &RunConfig,
) -> Result<(kvlp_tensor::Tensor<T>, kvlp_tensor::Tensor<T>)> {
    let triples = triples_in_rows(kb, ids);
    let params = GraphAttentionParams::init(emb.dim(), run.gat_slope, run.seed);
    let gat = gat_aggregate(&emb.entities, &triples, &params)?;
    Ok((gat.representations, emb.entities.clone()))
}

fn kb_dir(run: &RunConfig) -> Result<&Path> {
    match &run.kb {
        Some(p) => Ok(p),
        None => run.path("corpus"),
    }
}

/// A freshly initialized model and its linked dataset.
pub fn setup<T: Scalar>(run: &RunConfig, vocab: Option<Vocab>) -> Result<(Model<T>, Dataset<T>)> {
    let corpus = run.path("corpus")?;
    let kb = KnowledgeBase::load(kb_dir(run)?)?;
    let (emb, manifest) = load_kge::<T>(run.path("kge")?)?;
    let (table, raw) = entity_tables(&kb, &emb, &manifest.entity_ids, run)?;
    let data = Dataset::load(corpus, &kb, &manifest.entity_ids, vocab, run.patch_size)?;
    if data.max_text_len() > run.max_text_len {
        return Err(Error::Config(format!(
            "corpus has a {}-token text; max_text_len is {}",
            data.max_text_len(),
            run.max_text_len
        )));
    }
    let cfg = run.model(data.vocab.len(), manifest.n_e, manifest.d_e);
    let model = Model::new(cfg, table, run.align_pre_gat.then_some(raw), run.seed)?;
    Ok((model, data))
}

/// A checkpointed model with the corpus linked against its vocabulary and
/// entity order.
pub fn load_trained<T: Scalar>(run: &RunConfig, checkpoint: &Path) -> Result<(Model<T>, Dataset<T>, Manifest)> {
    let ckpt = load_checkpoint::<T>(checkpoint, None)?;
    let kb = KnowledgeBase::load(kb_dir(run)?)?;
    let data = Dataset::load(
        run.path("corpus")?,
        &kb,
        &ckpt.manifest.entity_ids,
        Some(ckpt.vocab),
        ckpt.model.cfg.encoder.patch_size,
    )?;
    Ok((ckpt.model, data, ckpt.manifest))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub reports: Vec<StepReport>,
    pub checkpoint: PathBuf,
    pub empty_mlm: usize,
}

/// Runs pre-training into `out`: `metrics.csv`, periodic `ckpt-<step>`
/// directories and the final `checkpoint`. With `run.resume` set, training
/// continues from that checkpoint and the metrics file keeps its earlier rows.
pub fn pretrain(run: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    std::fs::create_dir_all(out).at(out)?;
    let metrics = out.join(METRICS_FILE);
    let resume = match &run.resume {
        Some(dir) => Some(load_checkpoint::<f32>(dir, None)?),
        None => None,
    };
    let (model, data) = setup::<f32>(run, resume.as_ref().map(|c| c.vocab.clone()))?;
    let tc = run.train();
    let train = data.split(Split::Train);
    let mut trainer = Trainer::new(model, tc.clone(), train)?;
    match resume {
        Some(ckpt) => {
            if ckpt.manifest.config_hash != trainer.model.cfg.hash() {
                return Err(Error::Compatibility("resume checkpoint was trained with another model config".into()));
            }
            if ckpt.manifest.train != tc {
                return Err(Error::Compatibility("resume checkpoint was trained with another training config".into()));
            }
            trainer.model = ckpt.model;
            trainer.opt = ckpt.opt;
            trainer.step = ckpt.manifest.step;
            if metrics.exists() {
                truncate_metrics(&metrics, trainer.step)?;
            } else {
                write_metrics(&metrics, &[], false)?;
            }
        }
        None => write_metrics(&metrics, &[], false)?,
    }
    let mut reports = Vec::new();
    while trainer.step < tc.steps {
        let rep = trainer.train_step()?;
        write_metrics(&metrics, &[rep], true)?;
        log::info!(
            "step {} lr {:.2e} mlm {:.4} mim {:.4} itm {:.4} vk {:.4} lk {:.4} total {:.4}",
            rep.step,
            rep.lr,
            rep.mlm,
            rep.mim,
            rep.itm,
            rep.l_vk,
            rep.l_lk,
            rep.total
        );
        reports.push(rep);
        if run.checkpoint_every > 0 && trainer.step % run.checkpoint_every == 0 && trainer.step < tc.steps {
            let dir = out.join(format!("ckpt-{}", trainer.step));
            save_checkpoint(&dir, &trainer.model, &trainer.opt, &tc, trainer.step, &data.vocab, &data.entity_ids)?;
        }
    }
    let dir = out.join(CHECKPOINT_DIR);
    save_checkpoint(&dir, &trainer.model, &trainer.opt, &tc, trainer.step, &data.vocab, &data.entity_ids)?;
    Ok(PretrainOutcome {
        reports,
        checkpoint: dir,
        empty_mlm: trainer.empty_mlm,
    })
}
