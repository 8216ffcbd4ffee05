//! `kvlp`: corpus generation, knowledge extraction, embedding training,
//! pre-training, fine-tuning and evaluation from the command line.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvlp_core::config::RunConfig;
use kvlp_core::data::{Dataset, Split};
use kvlp_core::eval::{
    dump_diagnostics, eval_pool, finetune_classifier, finetune_retrieval, presence_labels, run_ablation, zero_shot,
    ClassifierConfig, FinetuneConfig, RetrievalReport,
};
use kvlp_core::kb::{link_entities, KnowledgeBase};
use kvlp_core::kge::load_kge;
use kvlp_core::pipeline::{extract_kb, gen_corpus, load_trained, pretrain, train_kge, METRICS_FILE};
use kvlp_core::text::tokenize;
use kvlp_core::train::checkpoint::save_checkpoint;
use kvlp_core::train::AdamW;
use serde_json::json;

use report::{Report, Violations};

#[derive(Parser, Debug)]
#[command(name = "kvlp", version, about = "Knowledge-enhanced vision-language pre-training on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML run configuration; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory; overrides `corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Extracted knowledge-base directory; overrides `kb`.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Directory holding kge.bin and kge.json; overrides `kge`.
    #[arg(long)]
    kge: Option<PathBuf>,
    /// Pre-trained checkpoint directory; overrides `checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image-text corpus and its knowledge base.
    GenCorpus(Common),
    /// Link the corpus texts and keep the knowledge-base rows they mention.
    ExtractKb(Common),
    /// Train TransE embeddings on the extracted knowledge base.
    TrainKge(Common),
    /// Joint pre-training; writes metrics.csv and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint directory; overrides `resume`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Task fine-tuning on top of a pre-trained checkpoint.
    Finetune {
        #[arg(value_enum)]
        task: Task,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot retrieval on the evaluation split.
    Evaluate(Common),
    /// Pre-train and evaluate every on/off combination of the knowledge designs.
    Ablate(Common),
    /// Alignment scores, fusion attention maps and embeddings for one sample.
    DumpDiagnostics {
        #[command(flatten)]
        common: Common,
        /// Sample id; defaults to the first sample of the evaluation split.
        #[arg(long)]
        sample: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Task {
    Retrieval,
    Classify,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut run = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        run.seed = s;
    }
    for (slot, flag) in [
        (&mut run.corpus, &c.corpus),
        (&mut run.kb, &c.kb),
        (&mut run.kge, &c.kge),
        (&mut run.checkpoint, &c.checkpoint),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(run)
}

fn prepare(c: &Common) -> Result<RunConfig> {
    let run = load_config(c)?;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    std::fs::write(c.out.join("config.toml"), run.to_toml())?;
    Ok(run)
}

fn retrieval_csv(reports: &[RetrievalReport]) -> String {
    let mut s = format!("{}\n", RetrievalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn check_recall(v: &mut Violations, reports: &[RetrievalReport]) {
    for r in reports {
        v.check(r.is_monotone(), format!("{:?} {} recall not monotone: {} {} {}", r.direction, r.mode, r.r1, r.r5, r.r10));
    }
}

fn cmd_gen_corpus(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let manifest = gen_corpus(&run, &c.out)?;
    let kb = KnowledgeBase::load(&c.out)?;
    let mut v = Violations::default();
    let mut missed = 0;
    for r in kvlp_core::data::read_corpus(&c.out)? {
        let linked = link_entities(&tokenize(&r.text), &kb);
        let found: Vec<&str> = linked.mentions.iter().map(|m| kb.entities()[m.entity].id.as_str()).collect();
        missed += manifest.gold[&r.id].iter().filter(|g| !found.contains(&g.as_str())).count();
    }
    v.check(missed == 0, format!("{missed} gold entities not found by the linker"));
    let csv = format!(
        "pairs,train,val,test,gold_missed\n{},{},{},{},{}\n",
        manifest.pairs,
        manifest.splits.get("train").unwrap_or(&0),
        manifest.splits.get("val").unwrap_or(&0),
        manifest.splits.get("test").unwrap_or(&0),
        missed
    );
    Ok(Report::new("gen_corpus", json!({ "pairs": manifest.pairs, "splits": manifest.splits, "gold_missed": missed }), csv, v))
}

fn cmd_extract_kb(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let rep = extract_kb(run.path("corpus")?, &c.out)?;
    let mut v = Violations::default();
    v.check(rep.kept_entities <= rep.kb_entities, "kept more entities than the KB holds");
    v.check(rep.kept_triples <= rep.kb_triples, "kept more triples than the KB holds");
    let csv = format!(
        "texts,kb_entities,kept_entities,kb_triples,kept_triples\n{},{},{},{},{}\n",
        rep.texts, rep.kb_entities, rep.kept_entities, rep.kb_triples, rep.kept_triples
    );
    Ok(Report::new("extract_kb", serde_json::to_value(&rep)?, csv, v))
}

fn cmd_train_kge(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let kb_dir = match &run.kb {
        Some(p) => p.clone(),
        None => run.path("corpus")?.to_path_buf(),
    };
    let rep = train_kge(&kb_dir, &run, &c.out)?;
    let (emb, _) = load_kge::<f64>(&c.out)?;
    let mut v = Violations::default();
    let worst = (0..emb.entities.rows())
        .map(|i| emb.entities.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    v.check(worst <= 1.0 + 1e-6, format!("entity norm {worst} exceeds 1"));
    v.check(emb.entities.is_finite() && emb.relations.is_finite(), "non-finite embedding");
    let csv = format!(
        "entities,relations,triples,final_epoch_loss,filtered_hits_at_1\n{},{},{},{},{}\n",
        rep.entities, rep.relations, rep.triples, rep.final_epoch_loss, rep.filtered_hits_at_1
    );
    Ok(Report::new("train_kge", serde_json::to_value(&rep)?, csv, v))
}

fn cmd_pretrain(c: &Common, resume: &Option<PathBuf>) -> Result<Report> {
    let mut run = prepare(c)?;
    if resume.is_some() {
        run.resume.clone_from(resume);
    }
    let out = pretrain(&run, &c.out)?;
    let mut v = Violations::default();
    v.check(out.reports.iter().all(|r| r.total.is_finite()), "non-finite loss");
    let last = out.reports.last().copied().unwrap_or_default();
    let csv = std::fs::read_to_string(c.out.join(METRICS_FILE))?;
    Ok(Report::new(
        "pretrain",
        json!({
            "steps_run": out.reports.len(),
            "final": {
                "step": last.step, "mlm": last.mlm, "mim": last.mim, "itm": last.itm,
                "l_vk": last.l_vk, "l_lk": last.l_lk, "total": last.total,
            },
            "samples_without_mlm_targets": out.empty_mlm,
            "checkpoint": out.checkpoint,
        }),
        csv,
        v,
    ))
}

fn checkpoint_dir(run: &RunConfig) -> Result<&Path> {
    Ok(run.path("checkpoint")?)
}

fn cmd_finetune_retrieval(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let (mut model, data, manifest) = load_trained::<f32>(&run, checkpoint_dir(&run)?)?;
    let pool = eval_pool(&data, &run)?;
    let before = zero_shot(&model, &pool, "zero-shot")?;
    let train = data.split(Split::Train);
    let cfg = FinetuneConfig {
        steps: run.ft_steps,
        batch_size: run.ft_batch,
        lr: run.ft_lr,
        negatives: run.ft_negatives,
        seed: run.seed,
        ..FinetuneConfig::default()
    };
    let trace = finetune_retrieval(&mut model, &train, &cfg)?;
    let after = zero_shot(&model, &pool, "fine-tuned")?;
    let opt = AdamW::new(manifest.train.adamw, &model.store);
    save_checkpoint(&c.out.join("checkpoint"), &model, &opt, &manifest.train, manifest.step, &data.vocab, &data.entity_ids)?;
    let reports: Vec<RetrievalReport> = before.into_iter().chain(after).collect();
    let mut v = Violations::default();
    check_recall(&mut v, &reports);
    v.check(trace.iter().all(|l| l.is_finite()), "non-finite fine-tuning loss");
    Ok(Report::new(
        "finetune_retrieval",
        json!({ "reports": reports, "loss": trace, "config": cfg }),
        retrieval_csv(&reports),
        v,
    ))
}

/// Entity row mentioned by the most training texts.
fn most_common_entity(data: &Dataset<f32>) -> usize {
    let mut counts = vec![0usize; data.entity_ids.len()];
    for s in data.split(Split::Train) {
        for &e in &s.entities {
            counts[e] += 1;
        }
    }
    (0..counts.len()).fold(0, |b, e| if counts[e] > counts[b] { e } else { b })
}

fn cmd_finetune_classify(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let (model, data, _) = load_trained::<f32>(&run, checkpoint_dir(&run)?)?;
    let row = match &run.cls_entity {
        Some(id) => data
            .entity_ids
            .iter()
            .position(|e| e == id)
            .with_context(|| format!("cls_entity {id} has no embedding row"))?,
        None => most_common_entity(&data),
    };
    let train = data.split(Split::Train);
    let eval = eval_pool(&data, &run)?;
    let (ytr, yev) = (presence_labels(&train, row), presence_labels(&eval, row));
    let cfg = ClassifierConfig {
        epochs: run.cls_epochs,
        lr: run.cls_lr,
        hidden: run.cls_hidden,
        multi_label: false,
        seed: run.seed,
    };
    let rep = finetune_classifier(&model, &train, &ytr, &eval, &yev, 2, &cfg)?;
    let positives = yev.iter().filter(|l| l[0] == 1).count();
    let majority = positives.max(yev.len() - positives) as f64 / yev.len().max(1) as f64;
    let mut v = Violations::default();
    v.check((0.0..=1.0).contains(&rep.accuracy), "accuracy outside [0, 1]");
    v.check(rep.train_loss.iter().all(|l| l.is_finite()), "non-finite classifier loss");
    let csv = format!(
        "entity,train_size,eval_size,initial_loss,final_loss,train_accuracy,accuracy,majority_baseline\n{},{},{},{},{},{},{},{}\n",
        data.entity_ids[row],
        rep.train_size,
        rep.eval_size,
        rep.initial_loss,
        rep.train_loss.last().copied().unwrap_or(f64::NAN),
        rep.train_accuracy,
        rep.accuracy,
        majority
    );
    Ok(Report::new(
        "finetune_classify",
        json!({ "entity": data.entity_ids[row], "report": rep, "majority_baseline": majority }),
        csv,
        v,
    ))
}

fn cmd_evaluate(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let (model, data, _) = load_trained::<f32>(&run, checkpoint_dir(&run)?)?;
    let pool = eval_pool(&data, &run)?;
    let reports = zero_shot(&model, &pool, "zero-shot")?.to_vec();
    let mut v = Violations::default();
    check_recall(&mut v, &reports);
    Ok(Report::new(
        "evaluate",
        json!({ "split": run.eval_split, "reports": reports }),
        retrieval_csv(&reports),
        v,
    ))
}

fn cmd_ablate(c: &Common) -> Result<Report> {
    let run = prepare(c)?;
    let rep = run_ablation(&run, &c.out)?;
    let mut v = Violations::default();
    for row in &rep.rows {
        check_recall(&mut v, &[row.t2i.clone(), row.i2t.clone()]);
    }
    if !rep.full_at_least_none {
        log::warn!("full model ranks below the knowledge-free model on T2I R@1");
    }
    Ok(Report::new("ablation", serde_json::to_value(&rep)?, rep.to_csv(), v))
}

fn cmd_dump(c: &Common, sample: &Option<String>) -> Result<Report> {
    let run = prepare(c)?;
    let (model, data, _) = load_trained::<f32>(&run, checkpoint_dir(&run)?)?;
    let s = match sample {
        Some(id) => data
            .samples
            .iter()
            .find(|s| &s.id == id)
            .with_context(|| format!("no sample {id}"))?,
        None => *eval_pool(&data, &run)?.first().context("evaluation split is empty")?,
    };
    let summary = dump_diagnostics(&model, s, &data.entity_ids, &c.out)?;
    let mut v = Violations::default();
    for f in summary.files.iter().filter(|f| f.starts_with("attention_")) {
        let body = std::fs::read_to_string(c.out.join(f))?;
        for line in body.lines() {
            let sum: f64 = line.split(',').map(|x| x.parse::<f64>().unwrap_or(f64::NAN)).sum();
            v.check((sum - 1.0).abs() <= 1e-4, format!("{f}: attention row sums to {sum}"));
        }
    }
    let csv = format!(
        "sample,n_tokens,n_mentions,n_patches,text_entity_ranks\n{},{},{},{},{}\n",
        summary.sample,
        summary.n_tokens,
        summary.n_mentions,
        summary.n_patches,
        summary.text_entity_ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("|")
    );
    Ok(Report::new("diagnostics", serde_json::to_value(&summary)?, csv, v))
}

fn run(cli: Cli) -> Result<Report> {
    match &cli.command {
        Command::GenCorpus(c) => cmd_gen_corpus(c),
        Command::ExtractKb(c) => cmd_extract_kb(c),
        Command::TrainKge(c) => cmd_train_kge(c),
        Command::Pretrain { common, resume } => cmd_pretrain(common, resume),
        Command::Finetune { task: Task::Retrieval, common } => cmd_finetune_retrieval(common),
        Command::Finetune { task: Task::Classify, common } => cmd_finetune_classify(common),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::DumpDiagnostics { common, sample } => cmd_dump(common, sample),
    }
}

fn out_dir(cli: &Cli) -> &Path {
    match &cli.command {
        Command::GenCorpus(c)
        | Command::ExtractKb(c)
        | Command::TrainKge(c)
        | Command::Evaluate(c)
        | Command::Ablate(c)
        | Command::Pretrain { common: c, .. }
        | Command::Finetune { common: c, .. }
        | Command::DumpDiagnostics { common: c, .. } => &c.out,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = out_dir(&cli).to_path_buf();
    let report = match run(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = report.write(&out) {
        eprintln!("error: writing report: {e:#}");
        return ExitCode::from(1);
    }
    if report.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        for m in &report.violations.messages {
            eprintln!("invariant violated: {m}");
        }
        ExitCode::from(2)
    }
}
