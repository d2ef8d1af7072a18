use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use arclab::arc::{AdapterBank, ArcConfig};
use arclab::checkpoint::Checkpoint;
use arclab::vit::{BackboneConfig, BackboneWeights};
use arclab::Rng;

fn arclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arclab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SHORT_RUN: &str = r#"{
  "arc": { "bottleneck": 8 },
  "train": { "epochs": 20, "warmup_epochs": 2, "lr": 0.015 },
  "task": { "layout": "collinear", "separation": 0.02 },
  "io": { "seed": 3 }
}"#;

#[test]
fn count_prints_arc_total() {
    let o = arclab(&["count", "--method", "arc", "--D", "768", "--L", "12", "--Dprime", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, ["arc", "768", "12", "96432", "0"]);
}

#[test]
fn count_csv_and_sweeps() {
    let o = arclab(&["count", "--method", "arc", "--Dprime", "50", "--sweep", "backbones", "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "label,D,L,finetune,inference");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], "ViT-L,1024,24,153952,0");

    let o = arclab(&["count", "--method", "lora", "--D", "768", "--L", "4", "--Dprime", "8", "--w", "2", "--sweep", "layers", "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let finetune: Vec<u64> = out.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(finetune.len(), 4);
    // constant per-layer cost
    assert!(finetune.windows(2).all(|w| w[1] - w[0] == finetune[0]));
}

#[test]
fn count_rejects_bad_knobs() {
    assert_eq!(arclab(&["count", "--method", "arc", "--D", "768", "--L", "12"]).status.code(), Some(2));
    assert_eq!(arclab(&["count", "--method", "nope", "--D", "768", "--L", "12", "--Dprime", "5"]).status.code(), Some(2));
    assert_eq!(arclab(&["count", "--method", "arc", "--Dprime", "5"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    for (body, key) in [
        (r#"{"arc": {"bottleneck": 8}, "trian": {}}"#, "trian"),
        (r#"{"arc": {"bottleneck": 8, "botleneck": 4}}"#, "botleneck"),
        (r#"{"arc": {"bottleneck": 8}, "io": {"seeed": 1}}"#, "seeed"),
    ] {
        let cfg = write_config(dir.path(), body);
        let o = arclab(&["train", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
    }
    // a value that parses but fails validation
    let cfg = write_config(dir.path(), r#"{"arc": {"bottleneck": 50}}"#);
    assert_eq!(arclab(&["gradcheck", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn identity_checkpoint_verifies_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let bb = BackboneConfig::toy();
    let arc = ArcConfig::default().with_bottleneck(4);
    let weights = BackboneWeights::random(&bb, &mut Rng::new(1)).unwrap();
    let mut bank = AdapterBank::init(&arc, &bb, &mut Rng::new(2)).unwrap();
    let names: Vec<String> = bank.tensors().keys().cloned().collect();
    for n in names.iter().filter(|n| n.ends_with(".coeff") || n.ends_with(".bias")) {
        bank.tensor_mut(n).unwrap().data_mut().fill(0.0);
    }
    bank.set_training(false);
    let ckpt = dir.path().join("model.arcl");
    Checkpoint::from_model(&weights, Some(&bank), &arc).save(&ckpt).unwrap();
    let effective = serde_json::json!({ "backbone": bb, "arc": arc });
    fs::write(dir.path().join("effective_config.json"), effective.to_string()).unwrap();

    let fused = dir.path().join("fused.arcl");
    let o = arclab(&["fuse", "--checkpoint", ckpt.to_str().unwrap(), "--out", fused.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = arclab(&["verify", "--checkpoint", ckpt.to_str().unwrap(), "--fused", fused.to_str().unwrap(), "--trials", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "max_deviation\t0e0");

    // swapping in an unrelated backbone must fail the check
    let other = BackboneWeights::random(&bb, &mut Rng::new(9)).unwrap();
    Checkpoint::from_model(&other, None, &arc).save(&fused).unwrap();
    let o = arclab(&["verify", "--checkpoint", ckpt.to_str().unwrap(), "--fused", fused.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_fuse_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_RUN);
    let run = dir.path().join("run");
    let o = arclab(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,lr,loss,accuracy");
    assert_eq!(loss.lines().count(), 21);

    // the echo is complete and reruns to the same curve
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("effective_config.json")).unwrap()).unwrap();
    for section in ["backbone", "arc", "train", "task", "io"] {
        assert!(echo.get(section).is_some(), "{section}");
    }
    assert_eq!(echo["arc"]["dropout_rate"], 0.1);
    assert_eq!(echo["io"]["out_dir"], run.to_str().unwrap());
    let rerun = dir.path().join("rerun");
    let o = arclab(&["train", "--config", run.join("effective_config.json").to_str().unwrap(), "--out", rerun.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(rerun.join("loss.csv")).unwrap(), loss);
    assert_eq!(fs::read(rerun.join("model.arcl")).unwrap(), fs::read(run.join("model.arcl")).unwrap());

    let ckpt = run.join("model.arcl");
    let fused_dir = dir.path().join("deploy");
    fs::create_dir_all(&fused_dir).unwrap();
    let fused = fused_dir.join("fused.arcl");
    let o = arclab(&["fuse", "--checkpoint", ckpt.to_str().unwrap(), "--out", fused.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fused_dir.join("effective_config.json").exists());
    assert!(Checkpoint::load(&fused).unwrap().fused);

    let o = arclab(&["verify", "--checkpoint", ckpt.to_str().unwrap(), "--fused", fused.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dev: f64 = stdout(&o).trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(dev <= 1e-10);

    // fusing a fused checkpoint is refused; a corrupt file is an I/O-class error
    let again = dir.path().join("again.arcl");
    let o = arclab(&["fuse", "--checkpoint", fused.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = arclab(&["fuse", "--checkpoint", ckpt.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn spectrum_on_full_rank_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"arc": {"variant": "full_rank", "dropout_rate": 0.0}, "train": {"epochs": 5, "warmup_epochs": 1}}"#,
    );
    let run = dir.path().join("run");
    let o = arclab(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec_dir = dir.path().join("spectra");
    let o = arclab(&[
        "spectrum",
        "--checkpoint",
        run.join("model.arcl").to_str().unwrap(),
        "--bins",
        "10",
        "--out",
        spec_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o);
    assert!(summary.starts_with("layer,group,site,effective_rank,top10_energy,s_max"));
    assert!(spec_dir.join("spectrum_summary.csv").exists());
    assert!(spec_dir.join("spectrum_l1_before_mha.csv").exists());
    let hist = fs::read_to_string(spec_dir.join("spectrum_l3_before_ffn.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);

    // bottleneck runs have nothing to analyse
    let cfg = write_config(dir.path(), SHORT_RUN.replace("\"epochs\": 20", "\"epochs\": 2").as_str());
    let run2 = dir.path().join("run2");
    assert!(arclab(&["train", "--config", &cfg, "--out", run2.to_str().unwrap()]).status.success());
    let o = arclab(&["spectrum", "--checkpoint", run2.join("model.arcl").to_str().unwrap(), "--out", spec_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"arc": {"bottleneck": 4, "sharing": "non_intra_non_inter"}}"#);
    let o = arclab(&["gradcheck", "--config", &cfg, "--tol", "1e-5"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("overall"));
    // an impossible tolerance fails the check, not the run
    let o = arclab(&["gradcheck", "--config", &cfg, "--tol", "0"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn divergent_training_aborts_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"arc": {"bottleneck": 8}, "train": {"lr": 1e200, "weight_decay": 0.0, "epochs": 10, "warmup_epochs": 0, "schedule": "constant"}}"#,
    );
    let o = arclab(&["train", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"));
}
