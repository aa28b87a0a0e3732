use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tagforge")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn tagforge")
}

fn tmpdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("tagforge_cli_{name}"));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tiny_cfg(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(
        &p,
        "train.steps = 2\nscene.width = 96\nscene.height = 96\nscene.layouts = 0\n\
         train.messages_per_iter = 4\ntrain.max_fg_rois = 4\ntrain.max_bg_rois = 4\n\
         train.rpn_batch_per_class = 8\n",
    )
    .unwrap();
    p
}

#[test]
fn dict_is_deterministic_and_enforces_capacity() {
    let d = tmpdir("dict");
    let a = run(&d, &["--seed", "5", "dict", "--n-bits", "8", "--count", "16", "--out", "a.txt"]);
    assert!(a.status.success());
    let b = run(&d, &["--seed", "5", "dict", "--n-bits", "8", "--count", "16", "--out", "b.txt"]);
    assert!(b.status.success());
    assert_eq!(std::fs::read(d.join("a.txt")).unwrap(), std::fs::read(d.join("b.txt")).unwrap());

    let all = run(&d, &["dict", "--n-bits", "4", "--all", "--out", "all.txt"]);
    assert!(all.status.success());
    assert_eq!(std::fs::read_to_string(d.join("all.txt")).unwrap().lines().count(), 16);

    let over = run(&d, &["dict", "--n-bits", "4", "--count", "20", "--out", "x.txt"]);
    assert_eq!(over.status.code(), Some(2), "capacity violation must exit 2");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = tmpdir("badcfg");
    std::fs::write(d.join("bad.cfg"), "no.such.key = 1\n").unwrap();
    let out = run(
        &d,
        &["--config", "bad.cfg", "train", "--out-dir", "run"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no.such.key"), "stderr names the offending key: {err}");
}

#[test]
fn train_render_detect_eval_pipeline() {
    let d = tmpdir("pipeline");
    let cfg = tiny_cfg(&d);
    let cfg = cfg.to_str().unwrap();

    let t = run(
        &d,
        &["--preset", "desk", "--config", cfg, "--seed", "9", "train", "--out-dir", "run",
          "--checkpoint-every", "0"],
    );
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(d.join("run/checkpoint_final.ckpt").exists());
    assert!(d.join("run/config.txt").exists(), "config echo is written beside artifacts");
    assert!(d.join("run/metrics.txt").exists());

    // rendering twice with one seed must produce identical annotations
    for out in ["ds1", "ds2"] {
        let r = run(
            &d,
            &["--preset", "desk", "--config", cfg, "--seed", "9", "render", "--samples", "3",
              "--checkpoint", "run/checkpoint_final.ckpt", "--out-dir", out],
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(
        std::fs::read(d.join("ds1/annotations.txt")).unwrap(),
        std::fs::read(d.join("ds2/annotations.txt")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("ds1/scene_00000.png")).unwrap(),
        std::fs::read(d.join("ds2/scene_00000.png")).unwrap()
    );

    let dict = run(&d, &["--seed", "9", "dict", "--n-bits", "8", "--count", "16",
                         "--out", "dict.txt"]);
    assert!(dict.status.success());

    let det = run(
        &d,
        &["detect", "--checkpoint", "run/checkpoint_final.ckpt", "--dict", "dict.txt",
          "--out", "dets.txt", "--overlay", "ov",
          "ds1/scene_00000.png", "ds1/scene_00001.png", "ds1/scene_00002.png"],
    );
    assert!(det.status.success(), "{}", String::from_utf8_lossy(&det.stderr));
    assert!(d.join("dets.txt").exists());
    assert_eq!(std::fs::read_dir(d.join("ov")).unwrap().count(), 3, "one overlay per input");

    let ev = run(&d, &["eval", "--gt", "ds1/annotations.txt", "--dets", "dets.txt",
                       "--sweep", "0.5:0.05:1.0"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = String::from_utf8_lossy(&ev.stdout);
    assert!(text.contains("ap50="));
    assert_eq!(text.matches("sweep ").count(), 11, "11-row sweep curve");
}

#[test]
fn export_markers_rejects_bit_width_mismatch() {
    let d = tmpdir("export");
    let cfg = tiny_cfg(&d);
    let cfg = cfg.to_str().unwrap();
    let t = run(
        &d,
        &["--preset", "desk", "--config", cfg, "train", "--out-dir", "run",
          "--checkpoint-every", "0"],
    );
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    run(&d, &["dict", "--n-bits", "4", "--all", "--out", "d4.txt"]);
    let bad = run(
        &d,
        &["export-markers", "--checkpoint", "run/checkpoint_final.ckpt", "--dict", "d4.txt"],
    );
    assert_eq!(bad.status.code(), Some(2), "bit-width mismatch must exit 2");

    run(&d, &["dict", "--n-bits", "8", "--count", "4", "--out", "d8.txt"]);
    let ok = run(
        &d,
        &["export-markers", "--checkpoint", "run/checkpoint_final.ckpt", "--dict", "d8.txt",
          "--out-dir", "m", "--upscale", "4"],
    );
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(std::fs::read_dir(d.join("m")).unwrap().count(), 4);
    // re-export must be byte-identical
    let again = run(
        &d,
        &["export-markers", "--checkpoint", "run/checkpoint_final.ckpt", "--dict", "d8.txt",
          "--out-dir", "m2", "--upscale", "4"],
    );
    assert!(again.status.success());
    assert_eq!(
        std::fs::read(d.join("m/marker_0.png")).unwrap(),
        std::fs::read(d.join("m2/marker_0.png")).unwrap()
    );
}
