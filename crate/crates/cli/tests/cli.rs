use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qenet::dataset::{frame_file, save_clip_dir};
use qenet::{Frame, Tensor, Variant};

fn qenet(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qenet"));
    cmd.args(args).env("QENET_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two 4-frame clips of smoothly drifting texture.
fn dataset(root: &Path) {
    for (k, id) in ["00001/0001", "00001/0002"].iter().enumerate() {
        let frames: Vec<Frame> = (0..4)
            .map(|t| {
                let px = Tensor::from_fn(3, 32, 32, |c, y, x| {
                    let u = (x + t + 3 * k) as f32 / 32.0;
                    let v = y as f32 / 32.0;
                    0.5 + 0.35 * ((6.0 * u + 4.0 * v + c as f32).sin() * (3.0 * v).cos())
                });
                Frame::new(px, t, Variant::Original)
            })
            .collect();
        save_clip_dir(&root.join(id), &frames).unwrap();
    }
}

struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        dataset(&dir.join("clips"));
        fs::write(dir.join("test.txt"), "00001/0001\n00001/0002\n").unwrap();
        fs::write(
            dir.join("train.toml"),
            format!(
                "enhancer_width = 4\nresblocks = 1\nflow_base = 2\nepochs = 1\ncrop = 0\nlr0 = 0.0001\nindex = \"{}\"\n",
                s(&dir.join("index.json"))
            ),
        )
        .unwrap();
        Workspace { _tmp: tmp, dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

#[test]
fn full_workflow() {
    let ws = Workspace::new();
    let (clips, decoded) = (ws.p("clips"), ws.p("decoded"));
    ok(&qenet(&["encode", "--qp", "37", "--loop-filters", "off", "--in", s(&clips), "--out", s(&decoded)], &[]));
    assert!(decoded.join("qp37/00001/0002").join(frame_file(3)).is_file());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(decoded.join("qp37/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["provenance"]["qp"]["layer"], "flag");
    assert_eq!(run["config"]["provenance"]["encoder_template"]["layer"], "default");

    let index = ws.p("index.json");
    ok(&qenet(
        &[
            "prepare",
            "--root",
            s(&clips),
            "--decoded-root",
            s(&decoded),
            "--qp",
            "37",
            "--split-list",
            s(&ws.p("test.txt")),
            "--out",
            s(&index),
        ],
        &[],
    ));

    let ck = ws.p("ck");
    let cfg = ws.p("train.toml");
    let env = [("QENET_CHECKPOINT_DIR", s(&ck))];
    ok(&qenet(&["train", "--qp", "37", "--stage", "sf", "--config", s(&cfg)], &env));
    let sf = ck.join("sf-qp37-latest.qck");
    assert!(sf.is_file());
    let out = qenet(&["train", "--qp", "37", "--stage", "mf", "--config", s(&cfg)], &env);
    assert_eq!(out.status.code(), Some(1), "mf needs sf weights");
    ok(&qenet(&["train", "--qp", "37", "--stage", "mf", "--config", s(&cfg), "--resume", s(&sf)], &env));
    let mf = ck.join("mf-qp37-latest.qck");
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(ck.join("run-mf-qp37.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["provenance"]["checkpoint_dir"]["var"], "QENET_CHECKPOINT_DIR");
    assert_eq!(run["config"]["provenance"]["enhancer_width"]["layer"], "file");

    let (enh, enh_sf, again) = (ws.p("enh"), ws.p("enh_sf"), ws.p("enh_again"));
    let input = decoded.join("qp37");
    ok(&qenet(&["enhance", "--in", s(&input), "--out", s(&enh), "--checkpoint", s(&mf)], &[]));
    ok(&qenet(&["enhance", "--in", s(&input), "--out", s(&enh_sf), "--checkpoint", s(&mf), "--single-frame"], &[]));
    ok(&qenet(&["enhance", "--in", s(&input), "--out", s(&again), "--checkpoint", s(&mf)], &[]));
    for t in 0..4 {
        let f = format!("00001/0001/{}", frame_file(t));
        assert!(enh_sf.join(&f).is_file());
        assert_eq!(fs::read(enh.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap());
    }

    let mf_arg = format!("MF={}", s(&enh));
    let sf_arg = format!("SF={}", s(&enh_sf));
    let out = qenet(&["eval", "--index", s(&index), "--outputs", &sf_arg, "--outputs", &mf_arg, "--format", "markdown"], &[]);
    ok(&out);
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| QP | HEVC | SF | MF |"), "{md}");

    let rows = ws.p("rows.json");
    fs::write(&rows, r#"[{"method":"HEVC-LF","qp":37,"psnr_db":31.98,"ssim":0.929}]"#).unwrap();
    let report = ws.p("eval.json");
    ok(&qenet(
        &["eval", "--index", s(&index), "--outputs", &mf_arg, "--baseline-rows", s(&rows), "--format", "json", "--out", s(&report)],
        &[],
    ));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["clip_count"], 2);
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 3);

    let out = qenet(&["report", s(&report), "--baseline", "HEVC", "--format", "markdown"], &[]);
    ok(&out);
    assert!(String::from_utf8(out.stdout).unwrap().contains("Difference vs HEVC"));

    let mut stale = parsed.clone();
    stale["schema_version"] = 99.into();
    let stale_path = ws.p("stale.json");
    fs::write(&stale_path, stale.to_string()).unwrap();
    assert_eq!(qenet(&["report", s(&report), s(&stale_path)], &[]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(qenet(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(qenet(&["encode", "--qp", "33", "--loop-filters", "on", "--in", "a", "--out", "b"], &[]).status.code(), Some(2));
    assert_eq!(qenet(&["train", "--qp", "32"], &[]).status.code(), Some(2));
    assert_eq!(qenet(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn runtime_failures_leave_no_outputs() {
    let ws = Workspace::new();
    let out = ws.p("enhanced");
    let res = qenet(&["enhance", "--in", s(&ws.p("clips")), "--out", s(&out), "--checkpoint", s(&ws.p("missing.qck"))], &[]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
    let err = String::from_utf8_lossy(&res.stderr);
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["level"], "ERROR");
    assert_eq!(line["event"], "failed");

    let dec = ws.p("dec");
    let res = qenet(
        &["encode", "--qp", "32", "--loop-filters", "on", "--in", s(&ws.p("clips")), "--out", s(&dec)],
        &[("QENET_ENCODER_TEMPLATE", "ffmpeg -i {input} {output}")],
    );
    assert_eq!(res.status.code(), Some(1));
    assert!(!dec.join("qp32").exists());
}
