use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hvae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hvae(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL_GEN: [&str; 10] = [
    "--set", "epochs=2", "--set", "widths=4,8", "--set", "latent_dim=4", "--set", "batch_size=3", "--set",
    "hmc.steps=2",
];

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom-gen", "--train", "6", "--test", "4", "--set", "height=16", "--set", "width=16", "--out", "ph"]);
    assert!(d.join("ph/train.csv").exists() && d.join("ph/test.csv").exists());

    let mut args = vec!["train", "--data", "ph/train.csv", "--out", "gen"];
    args.extend(SMALL_GEN);
    let text = ok(d, &args);
    assert!(text.contains("recon_mse"));
    let loss = fs::read_to_string(d.join("gen/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,total,recon_image,recon_mask,kinetic,initial_logq,prior_logp,recon_mse\n"));

    ok(d, &["sample", "--model", "gen/model.ckpt", "--count", "5", "--seed", "2", "--out", "s1"]);
    ok(d, &["sample", "--model", "gen/model.ckpt", "--count", "5", "--seed", "2", "--out", "s2"]);
    assert_eq!(
        fs::read(d.join("s1/pairs/synthetic-000004_mask.imgf")).unwrap(),
        fs::read(d.join("s2/pairs/synthetic-000004_mask.imgf")).unwrap()
    );
    assert!(d.join("s1/preview/synthetic-000000_image.pgm").exists());

    ok(d, &[
        "seg-train", "--real", "ph/train.csv", "--test", "ph/test.csv", "--synthetic", "s1/synthetic.csv",
        "--synthetic-count", "3", "--set", "epochs=2", "--set", "depth=2", "--set", "base_width=4", "--out", "seg",
    ]);
    assert!(fs::read_to_string(d.join("seg/dsc.csv")).unwrap().starts_with("epoch,loss,dsc\n"));

    let report = ok(d, &[
        "eval", "--generated", "s1/synthetic.csv", "--reference", "ph/test.csv", "--runs", "2", "--segmenter",
        "seg/model.ckpt", "--out", "ev",
    ]);
    assert!(report.starts_with("run,metric,value\n"));
    assert!(report.contains("mean,ssim,"));
    assert!(report.contains("tumor_colocalization"));
    assert!(d.join("ev/report.csv").exists());
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom-gen", "--train", "3", "--test", "0", "--set", "height=16", "--set", "width=16", "--out", "ph"]);
    fs::write(d.join("gen.cfg"), "# small\nmodel_kind=vae\nepochs=5\nwidths=4,8\nlatent_dim=4\n").unwrap();
    ok(d, &["train", "--data", "ph/train.csv", "--config", "gen.cfg", "--set", "epochs=1", "--out", "g"]);
    let loss = fs::read_to_string(d.join("g/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom-gen", "--train", "3", "--test", "0", "--set", "height=16", "--set", "width=16", "--out", "ph"]);
    assert_eq!(code(&hvae(d, &["train", "--data", "ph/train.csv", "--set", "epochs=0"])), 2);
    assert_eq!(code(&hvae(d, &["train", "--data", "ph/train.csv", "--set", "colour=red"])), 2);
    assert_eq!(code(&hvae(d, &["frobnicate"])), 2);
    fs::write(d.join("broken.csv"), "id,image,mask,split\nx,none.pgm,none.pgm,train\n").unwrap();
    assert_eq!(code(&hvae(d, &["train", "--data", "broken.csv"])), 3);
    assert_eq!(code(&hvae(d, &["sample", "--model", "ph/train.csv"])), 3);
    let mut args = vec!["train", "--data", "ph/train.csv", "--set", "learning_rate=1e300", "--set", "model_kind=vae"];
    args.extend(["--set", "epochs=4", "--set", "widths=4,8", "--set", "latent_dim=4", "--out", "nan"]);
    let out = hvae(d, &args);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&hvae(d, &["train", "--data", "missing.csv"])), 5);
}
