use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use croco::io::{read_crdp, read_ppm, write_crdp, RawMap};
use croco::pairs::{covisibility_ratio, load_scene_dir, read_manifest, resolve, save_scene_dir, DEFAULT_TAU};
use croco::synth;

fn croco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_croco")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = croco(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let o = croco(args);
    assert_eq!(
        o.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn loss_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn flops_table_lists_both_variants() {
    let out = ok(&["flops"]);
    assert!(out.contains("crossblock") && out.contains("catblock"), "{out}");
    // encoder column at ViT-Base
    assert!(out.contains("34.71"), "{out}");
}

#[test]
fn pretrain_smoke_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--set",
        "synth.count=4",
        "--set",
        "model.norm_targets=false",
    ]);
    let manifest = data.join("pairs.jsonl");
    assert_eq!(read_manifest(&manifest).unwrap().len(), 4);

    let run = tmp.path().join("run");
    let common = [
        "--set",
        "train.steps=500",
        "--set",
        "train.batch=2",
        "--set",
        "optim.base_lr=1e-3",
        "--set",
        "train.warmup_steps=20",
        "--set",
        "train.checkpoint_every=250",
    ];
    let m = format!("data.manifest={}", p(&manifest));
    let mut args = vec!["pretrain", "--out", p(&run), "--set", &m];
    args.extend(common);
    ok(&args);
    let rows = loss_rows(&run);
    assert_eq!(rows.len(), 500);
    let loss = |r: &str| r.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    let head: f64 = rows[..50].iter().map(|r| loss(r)).sum::<f64>() / 50.0;
    let tail: f64 = rows[450..].iter().map(|r| loss(r)).sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(run.join("checkpoint_000250.ckpt").exists() && run.join("checkpoint.ckpt").exists());
    assert!(fs::read_to_string(run.join("config.txt"))
        .unwrap()
        .contains("train.steps = 500"));

    // resuming from step 250 reproduces the remaining losses exactly
    let resumed = tmp.path().join("resumed");
    let r = format!("train.resume={}", p(&run.join("checkpoint_000250.ckpt")));
    let mut args = vec!["pretrain", "--out", p(&resumed), "--set", &m, "--set", &r];
    args.extend(common);
    ok(&args);
    assert_eq!(loss_rows(&resumed), rows[250..].to_vec());

    // refuses a non-empty output folder without --force
    let mut args = vec!["pretrain", "--out", p(&run), "--set", &m, "--set", "train.steps=1"];
    let err = fails_with(&args, 2);
    assert!(err.contains("--force"), "{err}");
    args.push("--force");
    ok(&args);
}

#[test]
fn config_errors_exit_2() {
    let err = fails_with(&["flops", "--set", "model.mask_ratio=1.5"], 2);
    assert!(err.contains("masking ratio"), "{err}");
    fails_with(&["flops", "--set", "no.such.key=1"], 2);
    fails_with(&["flops", "--set", "missing-equals"], 2);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "seed = 3\nmodel.patch = banana\n").unwrap();
    let err = fails_with(&["flops", "--config", p(&cfg)], 2);
    assert!(err.contains("line 2"), "{err}");
    fails_with(&["pretrain"], 2);
}

#[test]
fn missing_pair_fails_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("pairs.jsonl");
    fs::write(
        &manifest,
        "{\"path_view1\":\"gone1.ppm\",\"path_view2\":\"gone2.ppm\",\"covis\":0.7}\n",
    )
    .unwrap();
    let m = format!("data.manifest={}", p(&manifest));
    let err = fails_with(&["pretrain", "--out", p(&tmp.path().join("o")), "--set", &m], 3);
    assert!(err.contains("gone1.ppm"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn reconstruct_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", p(&data), "--set", "synth.count=1"]);
    let run = tmp.path().join("run");
    let m = format!("data.manifest={}", p(&data.join("pairs.jsonl")));
    ok(&["pretrain", "--out", p(&run), "--set", &m, "--set", "train.steps=2"]);
    let ck = format!("init.checkpoint={}", p(&run.join("checkpoint.ckpt")));
    let v1 = format!("reconstruct.view1={}", p(&data.join("pair0000_1.ppm")));
    let v2 = format!("reconstruct.view2={}", p(&data.join("pair0000_2.ppm")));
    let base = ["--set", ck.as_str(), "--set", v1.as_str(), "--set", v2.as_str()];

    let zero = tmp.path().join("zero");
    let mut args = vec!["reconstruct", "--out", p(&zero), "--set", "reconstruct.mask_ratio=0"];
    args.extend(base);
    ok(&args);
    let bytes = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&zero, "composite.ppm"), bytes(&zero, "target.ppm"));
    assert_eq!(
        bytes(&zero, "target.ppm"),
        fs::read(data.join("pair0000_1.ppm")).unwrap()
    );

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let mut args = vec!["reconstruct", "--out", p(d), "--seed", "11"];
        args.extend(base);
        ok(&args);
    }
    for f in ["reference.ppm", "masked.ppm", "composite.ppm", "target.ppm"] {
        assert_eq!(bytes(&a, f), bytes(&b, f), "{f}");
        let img = read_ppm(a.join(f)).unwrap();
        assert_eq!((img.height, img.width), (64, 64));
    }
    assert_ne!(bytes(&a, "composite.ppm"), bytes(&a, "target.ppm"));

    // a different architecture is rejected
    let other = tmp.path().join("c");
    let mut args = vec!["reconstruct", "--out", p(&other), "--set", "model.enc_dim=32"];
    args.extend(base);
    let err = fails_with(&args, 3);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn covis_manifest_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth",
        "--out",
        p(&scene),
        "--set",
        "synth.kind=scene",
        "--set",
        "synth.count=6",
        "--set",
        "synth.size=48",
    ]);
    let out = tmp.path().join("covis");
    let dir = format!("covis.scene_dir={}", p(&scene));
    ok(&[
        "covis",
        "--out",
        p(&out),
        "--set",
        &dir,
        "--set",
        "covis.lo=0.2",
        "--set",
        "covis.hi=1.0",
    ]);
    let manifest = out.join("pairs.jsonl");
    let entries = read_manifest(&manifest).unwrap();
    assert!(!entries.is_empty());
    let views = load_scene_dir(&scene).unwrap();
    let find = |path: &str| {
        views
            .iter()
            .find(|v| Path::new(&v.name) == resolve(&manifest, path))
            .unwrap()
    };
    for e in &entries {
        let c = covisibility_ratio(find(&e.path_view1), find(&e.path_view2), DEFAULT_TAU)
            .unwrap()
            .covis;
        assert_eq!(c, e.covis);
        assert!((0.2..=1.0).contains(&c));
    }
    let stats = fs::read_to_string(out.join("pair_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), entries.len() + 1);
}

#[test]
fn covis_identical_views_keeps_all_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let (v, _) = synth::translated_pair(32, (0.0, 0.0), 1).unwrap();
    save_scene_dir(&scene, &[v.clone(), v.clone(), v.clone(), v]).unwrap();
    let out = tmp.path().join("covis");
    let dir = format!("covis.scene_dir={}", p(&scene));
    ok(&[
        "covis",
        "--out",
        p(&out),
        "--set",
        &dir,
        "--set",
        "covis.lo=0.9",
        "--set",
        "covis.hi=1.0",
    ]);
    assert_eq!(read_manifest(out.join("pairs.jsonl")).unwrap().len(), 6);

    // a truncated depth header is reported with its byte offset
    fs::write(scene.join("view002.crdp"), b"CRDP\x20\0").unwrap();
    let err = fails_with(&["covis", "--out", p(&tmp.path().join("x")), "--set", &dir], 3);
    assert!(err.contains("view002.crdp") && err.contains("byte 6"), "{err}");
}

#[test]
fn eval_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.crdp");
    let flow = RawMap::new(2, 2, 2, vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    write_crdp(&gt, &flow).unwrap();
    let g = format!("eval.gt={}", p(&gt));
    let same = format!("eval.pred={}", p(&gt));
    let out = ok(&["eval", "--set", &g, "--set", &same]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["aepe"], 0.0);

    let shifted = tmp.path().join("pred.crdp");
    let moved = RawMap::new(
        2,
        2,
        2,
        flow.data
            .iter()
            .enumerate()
            .map(|(i, x)| x + [3.0, 4.0][i % 2])
            .collect(),
    )
    .unwrap();
    write_crdp(&shifted, &moved).unwrap();
    let pr = format!("eval.pred={}", p(&shifted));
    let dir = tmp.path().join("m");
    ok(&["eval", "--out", p(&dir), "--set", &g, "--set", &pr]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(v["aepe"], 5.0);

    let err = fails_with(
        &[
            "eval",
            "--set",
            &format!("eval.gt={}", p(&tmp.path().join("nope.crdp"))),
            "--set",
            &pr,
        ],
        3,
    );
    assert!(err.contains("nope.crdp"), "{err}");
    let err = fails_with(&["eval", "--set", "eval.kind=depth", "--set", &g, "--set", &same], 3);
    assert!(err.contains("channel"), "{err}");

    let depth = tmp.path().join("d.crdp");
    write_crdp(&depth, &RawMap::new(1, 3, 1, vec![1.0, 2.0, 4.0]).unwrap()).unwrap();
    let d = format!("eval.gt={}", p(&depth));
    let dp = format!("eval.pred={}", p(&depth));
    let v: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--set", "eval.kind=depth", "--set", &d, "--set", &dp])).unwrap();
    assert_eq!(v["delta1"], 1.0);
    assert_eq!(v["l1x1000"], 0.0);
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--set",
        "eval.kind=disparity",
        "--set",
        &d,
        "--set",
        &dp,
    ]))
    .unwrap();
    assert_eq!(v["bad3"], 0.0);
}

#[test]
fn finetune_flow_runs_and_writes_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("flow");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--set",
        "synth.kind=flow",
        "--set",
        "synth.count=2",
        "--set",
        "synth.size=96",
    ]);
    let run = tmp.path().join("run");
    let d = format!("flow.data_dir={}", p(&data));
    ok(&[
        "finetune-flow",
        "--out",
        p(&run),
        "--set",
        &d,
        "--set",
        "train.steps=5",
        "--set",
        "flow.jitter=0.2",
    ]);
    for k in ["0000", "0001"] {
        let pred = read_crdp(run.join(format!("{k}_pred.crdp"))).unwrap();
        assert_eq!((pred.height, pred.width, pred.channels), (96, 96, 2));
    }
    let v: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert!(v["aepe"].as_f64().unwrap().is_finite());
    assert!(run.join("flow.ckpt").exists());

    // a one-channel flow file is rejected
    write_crdp(
        data.join("0001_flow.crdp"),
        &RawMap::new(96, 96, 1, vec![0.0; 96 * 96]).unwrap(),
    )
    .unwrap();
    let err = fails_with(&["finetune-flow", "--out", p(&tmp.path().join("bad")), "--set", &d], 3);
    assert!(err.contains("channel"), "{err}");
}

#[test]
fn finetune_flow_overfits_constant_shifts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("flow");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--set",
        "synth.kind=flow",
        "--set",
        "synth.count=8",
        "--set",
        "synth.size=64",
    ]);
    let run = tmp.path().join("run");
    let d = format!("flow.data_dir={}", p(&data));
    ok(&[
        "finetune-flow",
        "--out",
        p(&run),
        "--set",
        &d,
        "--set",
        "train.steps=3000",
        "--set",
        "optim.base_lr=6e-4",
        "--set",
        "train.warmup_steps=100",
        "--set",
        "train.batch=4",
    ]);
    // recompute the error from the written predictions
    let mut total = 0.0;
    for k in 0..8 {
        let pred = read_crdp(run.join(format!("{k:04}_pred.crdp"))).unwrap();
        let gt = read_crdp(data.join(format!("{k:04}_flow.crdp"))).unwrap();
        let e: f64 = pred
            .data
            .chunks(2)
            .zip(gt.data.chunks(2))
            .map(|(a, b)| ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64))
            .sum();
        total += e / (64.0 * 64.0);
    }
    let aepe = total / 8.0;
    assert!(aepe < 0.5, "AEPE {aepe}");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert!((v["aepe"].as_f64().unwrap() - aepe).abs() < 1e-9);
}
