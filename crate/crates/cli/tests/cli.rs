use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
n_entities = 8
n_relations = 2
triple_density = 0.2
n_pairs = 120
image_size = 16
patch_size = 8
n_fillers = 12
fillers_min = 3
fillers_max = 6
kge_dim = 8
kge_epochs = 20
width = 16
heads = 2
vision_layers = 1
text_layers = 1
fusion_layers = 1
ffn_mult = 2
steps = 4
batch_size = 4
ft_steps = 2
ft_batch = 2
ft_negatives = 3
cls_epochs = 3
cls_hidden = 8
"#;

fn kvlp(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_kvlp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) {
    let out = kvlp(args);
    assert!(out.status.success(), "kvlp {:?} exited with {:?}", args, out.status.code());
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    assert!(dir.join(format!("{name}.csv")).exists(), "{name}.csv missing");
    let body = std::fs::read_to_string(dir.join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&body).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (corpus, kb, kge, pre) = (d.join("corpus"), d.join("kb"), d.join("kge"), d.join("pre"));
    let c = s(&cfg);

    ok(&["gen-corpus", "--config", c, "--seed", "3", "--out", s(&corpus)]);
    let r = report(&corpus, "gen_corpus");
    assert_eq!(r["report"]["gold_missed"], 0);
    assert_eq!(r["invariants_ok"], true);

    ok(&["extract-kb", "--config", c, "--out", s(&kb), "--corpus", s(&corpus)]);
    report(&kb, "extract_kb");
    ok(&["train-kge", "--config", c, "--seed", "3", "--out", s(&kge), "--kb", s(&kb)]);
    report(&kge, "train_kge");

    let paths = ["--corpus", s(&corpus), "--kb", s(&kb), "--kge", s(&kge)];
    let mut args = vec!["pretrain", "--config", c, "--seed", "3", "--out", s(&pre)];
    args.extend(paths);
    ok(&args);
    let r = report(&pre, "pretrain");
    assert_eq!(r["report"]["steps_run"], 4);
    assert!(pre.join("metrics.csv").exists());

    let ckpt = pre.join("checkpoint");
    for (cmd, out, name) in [
        (vec!["evaluate"], d.join("eval"), "evaluate"),
        (vec!["finetune", "retrieval"], d.join("ft"), "finetune_retrieval"),
        (vec!["finetune", "classify"], d.join("cls"), "finetune_classify"),
        (vec!["dump-diagnostics"], d.join("diag"), "diagnostics"),
    ] {
        let mut args = cmd.clone();
        args.extend(["--config", c, "--seed", "3", "--out", s(&out), "--checkpoint", s(&ckpt)]);
        args.extend(paths);
        ok(&args);
        assert_eq!(report(&out, name)["invariants_ok"], true, "{name}");
    }
    assert!(d.join("diag").join("alignment.csv").exists());

    let abl = d.join("ablate");
    let mut args = vec!["ablate", "--config", c, "--seed", "3", "--out", s(&abl)];
    args.extend(paths);
    ok(&args);
    assert_eq!(report(&abl, "ablation")["report"]["rows"].as_array().unwrap().len(), 8);
    assert!(d.join("ft").join("checkpoint").join("params.bin").exists());
}

#[test]
fn same_seed_pretraining_is_reproducible_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = s(&cfg);
    let (corpus, kb, kge) = (d.join("corpus"), d.join("kb"), d.join("kge"));
    ok(&["gen-corpus", "--config", c, "--out", s(&corpus)]);
    ok(&["extract-kb", "--config", c, "--out", s(&kb), "--corpus", s(&corpus)]);
    ok(&["train-kge", "--config", c, "--out", s(&kge), "--kb", s(&kb)]);
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        ok(&[
            "pretrain", "--config", c, "--seed", "11", "--out", s(&out), "--corpus", s(&corpus), "--kb", s(&kb), "--kge",
            s(&kge),
        ]);
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn missing_inputs_fail_with_a_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kvlp(&["extract-kb", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = kvlp(&["gen-corpus", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}
