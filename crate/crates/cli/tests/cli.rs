use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn lhrcnn(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_lhrcnn"))
        .args(args)
        .env_remove("LHRCNN_SEED")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of a `#= key=value` line.
fn key(out: &str, k: &str) -> Option<String> {
    let prefix = format!("#= {k}=");
    out.lines().find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    for args in [&["flops", "--bogus"][..], &["--nope"], &["frobnicate"], &["demo-infer", "--image", "x"]] {
        let o = lhrcnn(args, "");
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    assert_eq!(lhrcnn(&["nms", "--iou-thresh"], "").status.code(), Some(2));
    assert_eq!(lhrcnn(&["nms", "--iou-thresh", "1.5"], "").status.code(), Some(1));
}

#[test]
fn nms_on_empty_input_is_empty() {
    let o = lhrcnn(&["nms"], "");
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn nms_prints_kept_indices_in_score_order() {
    let input = "0.7 20 20 30 30\n# comment\n0.9 0 0 10 10\n\n0.8 1 1 10 10\n";
    let o = lhrcnn(&["nms", "--iou-thresh", "0.5"], input);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "1\n0\n");
    let o = lhrcnn(&["nms", "--iou-thresh", "0.9"], input);
    assert_eq!(stdout(&o), "1\n2\n0\n");
}

#[test]
fn nms_rejects_malformed_lines() {
    for bad in ["0.9 0 0 10\n", "0.9 0 0 10 x\n", "0.9 0 0 10 NaN\n"] {
        let o = lhrcnn(&["nms"], bad);
        assert_eq!(o.status.code(), Some(1), "{bad:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    }
}

#[test]
fn flops_reports_backbone_band_and_claims() {
    let o = lhrcnn(&["flops", "--backbone", "xception", "--input", "224"], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    let macs: f64 = key(&out, "backbone_xception_224x224.macs").unwrap().parse().unwrap();
    assert!((macs / 145e6 - 1.0).abs() <= 0.10);
    assert!(out.contains("±10%"));
    assert!(out.contains("1 MAC = 1 FLOP"));
    assert_eq!(key(&out, "flops.passed").as_deref(), Some("true"));
    assert!(out.contains("3969 = 81·7·7"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn flops_at_other_sizes_skips_the_band() {
    let o = lhrcnn(&["flops", "--input", "320"], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0));
    assert!(key(&out, "backbone.passed").is_none());
    assert!(key(&out, "backbone_xception_320x320.macs").is_some());
}

#[test]
fn oracle_passes() {
    let o = lhrcnn(&["oracle"], "");
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(key(&stdout(&o), "oracle.passed").as_deref(), Some("true"));
}

#[test]
fn gradcheck_passes() {
    let o = lhrcnn(&["gradcheck"], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    for suite in ["conv2d", "fully_connected", "large_sep_conv", "roi_align", "head", "full_loss"] {
        assert_eq!(key(&out, &format!("{suite}.passed")).as_deref(), Some("true"), "{suite}");
    }
}

#[test]
fn seed_env_overrides_flag() {
    let run = |env: Option<&str>, seed: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lhrcnn"));
        c.args(["scene", "--out", "/dev/null", "--seed", seed]).env_remove("LHRCNN_SEED");
        if let Some(v) = env {
            c.env("LHRCNN_SEED", v);
        }
        c.output().unwrap()
    };
    let a = run(None, "5");
    let b = run(Some("5"), "99");
    let c = run(None, "99");
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
    assert_eq!(run(Some("abc"), "1").status.code(), Some(1));
}

#[test]
fn bad_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "no.such.key = 3\n").unwrap();
    let o = lhrcnn(&["--config", path.to_str().unwrap(), "flops"], "");
    assert_eq!(o.status.code(), Some(1));
    let o = lhrcnn(&["flops", "--config", "/does/not/exist"], "");
    assert_eq!(o.status.code(), Some(1));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_save_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let o = lhrcnn(&["demo-train", "--iters", "3", "--eval", "2", "--out", path(&w)], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert_eq!(key(&out, "train.iters").as_deref(), Some("3"));
    assert_eq!(std::fs::read_to_string(w.join("losses.txt")).unwrap().lines().count(), 3);
    assert!(w.join("config.txt").exists());

    let again = stdout(&lhrcnn(&["demo-train", "--iters", "3", "--eval", "0"], ""));
    assert_eq!(key(&out, "train.loss_digest"), key(&again, "train.loss_digest"));

    let img = dir.path().join("scene.lht");
    assert_eq!(lhrcnn(&["scene", "--out", path(&img), "--seed", "2"], "").status.code(), Some(0));
    let o = lhrcnn(&["demo-infer", "--image", path(&img), "--weights", path(&w)], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(key(&out, "detections").is_some());
    assert_eq!(key(&out, "structure.passed").as_deref(), Some("true"));

    let cfg = dir.path().join("cfg.txt");
    std::fs::copy(w.join("config.txt"), &cfg).unwrap();
    let o = lhrcnn(&["--config", path(&cfg), "demo-infer", "--image", path(&img), "--weights", path(&w)], "");
    assert_eq!(o.status.code(), Some(0));

    let o = lhrcnn(&["demo-infer", "--image", path(&dir.path().join("missing.lht")), "--weights", path(&w)], "");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_flag_fails_an_undertrained_model() {
    let o = lhrcnn(&["demo-train", "--iters", "2", "--eval", "2", "--check"], "");
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(1), "{out}");
    assert!(out.contains("FAIL demo_train"));
}

#[test]
fn warp_pools_a_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.lht");
    let t = lighthead_tensor(&[1, 490, 4, 4]);
    std::fs::write(&feats, t).unwrap();
    let rois = dir.path().join("rois.txt");
    std::fs::write(&rois, "0 0 0 32 32\n0 8 8 40 56\n").unwrap();
    let out = dir.path().join("o.lht");
    let o = lhrcnn(&["warp", "--features", path(&feats), "--rois", path(&rois), "--out", path(&out)], "");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(key(&stdout(&o), "warp.dims").as_deref(), Some("[2, 10, 7, 7]"));
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"LHT1");
    assert_eq!(bytes.len(), 4 + 4 + 4 * 4 + 4 * 2 * 10 * 49);
    let o = lhrcnn(&["warp", "--features", path(&feats), "--rois", path(&rois), "--mode", "roi-pool", "--out", path(&out)], "");
    assert_eq!(key(&stdout(&o), "warp.dims").as_deref(), Some("[2, 490, 7, 7]"));
}

/// LHT1 bytes of a ramp tensor.
fn lighthead_tensor(dims: &[u32]) -> Vec<u8> {
    let mut b = b"LHT1".to_vec();
    b.extend((dims.len() as u32).to_le_bytes());
    for d in dims {
        b.extend(d.to_le_bytes());
    }
    let n: u32 = dims.iter().product();
    for i in 0..n {
        b.extend(((i % 13) as f32 * 0.1).to_le_bytes());
    }
    b
}
