use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use conststyle::artifacts::{self, load_model, load_unified, save_model, save_unified};
use conststyle::commands::open_dataset;
use conststyle::tensor::Tensor;
use conststyle_core::datagen::{generate_dataset, make_domain_family};
use conststyle_core::pipeline::{train, TrainConfig};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conststyle")).args(args).env_remove("CSTYLE_THREADS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: [&str; 6] = ["--set", "epochs=2", "--set", "initial_epochs=1", "--set", "update_interval=1"];

#[test]
fn gen_train_eval_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let m1 = tmp.path().join("m1");

    let out = bin(&["gen-data", "--domains", "4", "--classes", "4", "--per-cell", "5", "--seed", "7", "--out", p(&d1)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["data.cstn", "manifest.csv", "domains.csv", "run.ini"] {
        assert!(d1.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(d1.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("sample_id,class_label,domain_id,offset\n0,0,0,25\n1,0,0,3097\n"));
    assert_eq!(manifest.lines().count(), 81);
    let data = open_dataset(&d1).unwrap();
    assert_eq!(data.len(), 80);
    assert_eq!(data.domain_ids, vec![0, 1, 2, 3]);
    assert!(data.cell_counts().iter().all(|&c| c == 5));
    assert!(!d1.join(".lock").exists());

    let mut args = vec!["train", "--data", p(&d1), "--mode", "conststyle", "--holdout", "3", "--seed", "7", "--out", p(&m1)];
    args.extend(FAST);
    let out = bin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(m1.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,mode,loss,train_acc,refresh,barycenter_residual"));
    assert!(lines.next().unwrap().starts_with("1,erm,"));
    assert!(lines.next().unwrap().starts_with("2,conststyle,"));
    let run = fs::read_to_string(m1.join("run.ini")).unwrap();
    for key in ["epochs = 2", "holdout = 3", "seed = 7", "alpha = 0.6", "unified_method = average", "learning_rate = 0.05"] {
        assert!(run.contains(key), "{key} missing from manifest");
    }

    let out = bin(&["eval", "--model", p(&m1), "--data", p(&d1), "--domain", "3", "--alpha", "0.6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("domain_id,alpha,n,correct,accuracy,frechet_to_unified"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["3", "0.6", "20"]);
    assert!(row[5].parse::<f64>().unwrap() >= 0.0);
    assert!(lines.next().is_none());

    // re-running the manifest reproduces the log byte for byte
    let m2 = tmp.path().join("m2");
    let out = bin(&["train", "--config", p(&m1.join("run.ini")), "--data", p(&d1), "--out", p(&m2)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train_log.csv", "model.cstn", "unified.cstn"] {
        assert_eq!(fs::read(m1.join(f)).unwrap(), fs::read(m2.join(f)).unwrap(), "{f}");
    }

    let sweep = tmp.path().join("alpha");
    let out = bin(&["ablate-alpha", "--model", p(&m1), "--data", p(&d1), "--domain", "3", "--out", p(&sweep)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(sweep.join("alpha_sweep.csv")).unwrap().lines().count(), 12);

    let diag = tmp.path().join("diag");
    let out = bin(&["diagnose", "--model", p(&m1), "--data", p(&d1), "--out", p(&diag)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(diag.join("diagnose.csv")).unwrap();
    assert_eq!(rows.lines().next(), Some("domain_id,d_mu,d_sigma,frechet"));
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn sweeps_write_keyed_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&bin(&["gen-data", "--domains", "3", "--levels", "0,1,2", "--classes", "2", "--per-cell", "3", "--out", p(&d)])), 0);

    let loo = tmp.path().join("loo");
    let mut args = vec!["loo", "--data", p(&d), "--out", p(&loo), "--mode", "erm"];
    args.extend(FAST);
    let out = bin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(loo.join("loo.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "holdout,domain_id,alpha,n,correct,accuracy,frechet_to_unified");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,0,1,6,"));
    assert!(lines[4].starts_with("average,,1,,,"));

    let cl = tmp.path().join("cl");
    let mut args = vec!["ablate-clusters", "--data", p(&d), "--counts", "1,2", "--holdout", "1", "--out", p(&cl)];
    args.extend(FAST);
    let out = bin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(cl.join("cluster_sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_clusters,domain_id,alpha,n,correct,accuracy,frechet_to_unified");
    assert!(lines[1].starts_with("1,1,0.6,6,") && lines[2].starts_with("2,1,0.6,6,"));

    let dist = tmp.path().join("dist");
    let mut args = vec!["distances", "--data", p(&d), "--base", "0", "--out", p(&dist)];
    args.extend(FAST);
    let out = bin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dist.join("distances.csv")).unwrap();
    assert!(text.starts_with("domain_id,shift_level,erm_frechet,erm_accuracy,conststyle_frechet,conststyle_accuracy\n0,0,"));
    assert_eq!(text.lines().count(), 4);

    let sc = tmp.path().join("sc");
    let mut args = vec!["scale", "--data", p(&d), "--sizes", "6,12,18", "--out", p(&sc)];
    args.extend(FAST);
    let out = bin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(sc.join("scale.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("size,seconds_per_epoch"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let missing = tmp.path().join("nope");

    let out = bin(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    let out = bin(&["gen-data", "--out", p(&d), "--bogus"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&bin(&["--help"])), 0);

    assert_eq!(code(&bin(&["gen-data", "--classes", "2", "--per-cell", "2", "--out", p(&d)])), 0);
    let out = bin(&["eval", "--model", p(&missing), "--data", p(&d)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));

    let out = bin(&["gen-data", "--set", "epoch=3", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
    let out = bin(&["gen-data", "--classes", "9", "--out", p(&tmp.path().join("y"))]);
    assert_eq!(code(&out), 1);
    let out = bin(&["train", "--data", p(&d), "--holdout", "9", "--out", p(&tmp.path().join("m"))]);
    assert_eq!(code(&out), 1);

    fs::write(d.join(".lock"), "1").unwrap();
    let out = bin(&["gen-data", "--out", p(&d)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));

    let out = Command::new(env!("CARGO_BIN_EXE_conststyle"))
        .args(["gen-data", "--out", p(&tmp.path().join("z"))])
        .env("CSTYLE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn artifact_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let fam = make_domain_family(2, &[0.0, 1.0], 3).unwrap();
    let data = generate_dataset(&fam, 3, 4, 4).unwrap();
    let cfg = TrainConfig { epochs: 2, initial_epochs: 1, update_interval: 1, n_clusters: 2, batch_size: 8, ..Default::default() };
    let model = train(&data, &cfg).unwrap();

    let path = tmp.path().join("model.cstn");
    save_model(&path, &model.net).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.architecture(), model.net.architecture());
    let narrowed: Vec<f64> = model.net.params().iter().map(|&v| f64::from(v as f32)).collect();
    assert_eq!(loaded.params(), narrowed.as_slice());
    save_model(&path, &loaded).unwrap();
    assert_eq!(load_model(&path).unwrap(), loaded);

    let u = model.unified.unwrap();
    let upath = tmp.path().join("unified.cstn");
    save_unified(&upath, &u).unwrap();
    let back = load_unified(&upath).unwrap();
    assert_eq!(back.method, u.method);
    assert_eq!(back.style.dim(), 16);
    let bytes = fs::read(&upath).unwrap();
    save_unified(&upath, &back).unwrap();
    assert_eq!(fs::read(&upath).unwrap(), bytes);
    assert_eq!(Tensor::load(&upath).unwrap().dims, vec![18, 16]);

    let ddir = tmp.path().join("data");
    fs::create_dir(&ddir).unwrap();
    artifacts::save_dataset(&ddir, &data, &fam).unwrap();
    let reloaded = artifacts::load_dataset(&ddir, 3, 4).unwrap();
    assert_eq!(reloaded.len(), data.len());
    for (a, b) in reloaded.samples.iter().zip(&data.samples) {
        assert_eq!((a.class_label, a.domain_id), (b.class_label, b.domain_id));
        assert!(a.input.as_slice().iter().zip(b.input.as_slice()).all(|(x, y)| *x == f64::from(*y as f32)));
    }
    let bytes = fs::read(ddir.join("data.cstn")).unwrap();
    artifacts::save_dataset(&ddir, &reloaded, &fam).unwrap();
    assert_eq!(fs::read(ddir.join("data.cstn")).unwrap(), bytes);
    assert_eq!(artifacts::load_shift_levels(&ddir).unwrap(), vec![(0, 0.0), (1, 1.0)]);
}
