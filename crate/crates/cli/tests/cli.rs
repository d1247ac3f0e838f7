use std::path::Path;
use std::process::{Command, Output};

use spark_core::data::{load_ppm, save_ppm, synth_record};
use spark_core::training::{Checkpoint, CheckpointKind};

fn spark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spark"))
        .args(args)
        .output()
        .expect("spawn spark")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_pretrain(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "pretrain",
        "--synth",
        "16",
        "--out",
        out,
        "--image-size",
        "32",
        "--patch",
        "16",
        "--widths",
        "4,8",
        "--batch",
        "4",
        "--peak-lr",
        "0.01",
    ];
    args.extend_from_slice(extra);
    spark(&args)
}

#[test]
fn pretrain_writes_artifacts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_pretrain(dir.path(), &["--variant", "zero-out"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("\"variant\": \"zero-out\""));
    assert!(text.contains("\"masking\": \"zero-out\""));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,loss");
    assert_eq!(lines.len(), 1 + 4);
    assert!(dir.path().join("config.json").exists());
    assert!(dir.path().join("ckpt_last.sprk").exists());
}

#[test]
fn rerun_reproduces_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(tiny_pretrain(a.path(), &["--seed", "3"]).status.success());
    assert!(tiny_pretrain(b.path(), &["--seed", "3"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"batch_size": 2, "seed": 9}, "model": {"mask": {"ratio": 0.5}}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = tiny_pretrain(&out, &["--config", cfg.to_str().unwrap(), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["batch_size"], 4);
    assert_eq!(echoed["train"]["seed"], 9);
    assert_eq!(echoed["model"]["mask"]["ratio"], 0.5);
}

#[test]
fn invalid_mask_ratio_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_pretrain(dir.path(), &["--mask-ratio", "1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ratio"));
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(spark(&["--help"]).status.code(), Some(0));
    assert_eq!(spark(&["pretrain"]).status.code(), Some(1));
    assert_eq!(spark(&["bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.sprk");
    let o = spark(&[
        "convert",
        "--ckpt",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reconstruct_from_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny_pretrain(dir.path(), &["--max-steps", "0"]).status.success());
    let img_path = dir.path().join("in.ppm");
    let img = synth_record(40, 5, 0).unwrap().pixels;
    save_ppm(&img_path, &img).unwrap();
    let out = dir.path().join("rec");
    let o = spark(&[
        "reconstruct",
        "--ckpt",
        dir.path().join("ckpt_last.sprk").to_str().unwrap(),
        "--image",
        img_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let masked = load_ppm(out.join("masked_input.ppm")).unwrap();
    let recon = load_ppm(out.join("reconstruction.ppm")).unwrap();
    let comp = load_ppm(out.join("composite.ppm")).unwrap();
    for t in [&masked, &recon, &comp] {
        assert_eq!(t.shape(), &[3, 32, 32]);
    }
    // Patches the masked input kept intact are visible; the composite must copy them.
    let input = spark_core::data::crop(&img, 4, 4, 32).unwrap();
    let idx = |c: usize, r: usize, col: usize| (c * 32 + r) * 32 + col;
    let mut visible = 0;
    for (pr, pc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let px: Vec<usize> = (0..3)
            .flat_map(|c| (0..16).flat_map(move |r| (0..16).map(move |col| idx(c, pr * 16 + r, pc * 16 + col))))
            .collect();
        if px.iter().all(|&i| masked.data()[i] == input.data()[i]) {
            visible += 1;
            assert!(px.iter().all(|&i| comp.data()[i] == input.data()[i]));
        } else {
            assert!(px.iter().all(|&i| masked.data()[i] == 0.0));
        }
    }
    assert!(visible > 0 && visible < 4);
    assert!(stdout(&o).contains("masked mse"));
}

#[test]
fn convert_exports_encoder_only() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny_pretrain(dir.path(), &["--max-steps", "2"]).status.success());
    let out = dir.path().join("conv");
    let o = spark(&[
        "convert",
        "--ckpt",
        dir.path().join("ckpt_last.sprk").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
    let path = out.join("encoder.sprk");
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.kind, CheckpointKind::Encoder);
    assert!(ckpt.params.iter().all(|(_, p)| p.name.starts_with("encoder.")));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
}

#[test]
fn flops_table_schema_and_full_ratio() {
    let o = spark(&["flops"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,scale,sparse_macs,dense_macs,ratio"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 5));
    let stem_ratio: f64 = rows.iter().find(|r| r[1] == "4" && r[0].contains("block")).unwrap()[4]
        .parse()
        .unwrap();
    assert!(stem_ratio > 0.30 && stem_ratio <= 0.40, "{stem_ratio}");

    let o = spark(&["flops", "--mask-ratio", "0", "--image-size", "64", "--stages", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for l in stdout(&o).lines().skip(1).filter(|l| l.contains("block")) {
        assert!(l.ends_with(",1.000000"), "{l}");
    }
}

#[test]
fn verify_erosion_prints_profile() {
    let o = spark(&["verify", "--suite", "erosion"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("suite erosion: PASS"));
    assert!(spark(&["verify", "--suite", "nope"]).status.code() == Some(1));
}

#[test]
fn resume_continues_metrics_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_pretrain(dir.path(), &["--epochs", "2", "--checkpoint-every", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let full = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(full.lines().count(), 1 + 8);
    let ckpt = dir.path().join("ckpt_step000003.sprk");
    let o = spark(&[
        "pretrain",
        "--resume",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let steps: Vec<&str> = resumed.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6", "7", "8"]);
    // Parameters round-trip through f32, so later losses agree closely.
    for (a, b) in full.lines().zip(resumed.lines()).skip(1) {
        let loss = |l: &str| l.rsplit(',').next().unwrap().parse::<f64>().unwrap();
        assert!((loss(a) - loss(b)).abs() < 1e-3, "{a} vs {b}");
    }
}
