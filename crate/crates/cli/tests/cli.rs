use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tamperscope");

const TINY_CONFIG: &str = r#"
epochs = 1
batch_size_groups = 4
input_size = 32
patch_size = 8
feature_dim = 16
num_heads = 2
mlp_hidden = 16
embed_dim = 8
projection_hidden = 8
scl_cap = 64
val_fraction = 0.0
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Scenes, masks and tampered images under `dir`; returns the gen-data manifest.
fn dataset(dir: &Path, count: usize, seed: &str) -> std::path::PathBuf {
    let scenes = dir.join("scenes");
    let masks = dir.join("masks/manifest.json");
    let data = dir.join("data");
    ok(&[
        "gen-scenes",
        "--out",
        p(&scenes),
        "--count",
        &count.to_string(),
        "--size",
        "48",
        "--seed",
        seed,
    ]);
    ok(&[
        "gen-masks",
        "--input",
        p(&scenes),
        "--manifest",
        p(&masks),
        "--seed",
        seed,
    ]);
    ok(&[
        "gen-data",
        "--manifest",
        p(&masks),
        "--out",
        p(&data),
        "--seed",
        seed,
    ]);
    data.join("manifest.json")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_masks_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    ok(&[
        "gen-scenes",
        "--out",
        p(&scenes),
        "--count",
        "3",
        "--size",
        "48",
    ]);
    let a = tmp.path().join("a/manifest.json");
    let b = tmp.path().join("b/manifest.json");
    ok(&[
        "gen-masks",
        "--input",
        p(&scenes),
        "--manifest",
        p(&a),
        "--seed",
        "4",
    ]);
    ok(&[
        "gen-masks",
        "--input",
        p(&scenes),
        "--manifest",
        p(&b),
        "--seed",
        "4",
    ]);
    let (ja, jb) = (json(&a), json(&b));
    assert_eq!(ja["entries"].as_array().unwrap().len(), 3);
    assert_eq!(ja, jb);
    assert!(tmp.path().join("a/rejections.json").is_file());
}

#[test]
fn gen_data_writes_one_image_per_entry_and_inpainter() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 5, "1");
    let data = manifest.parent().unwrap();
    let m = json(&manifest);
    let tampered: usize = m["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["tampered"].as_array().unwrap().len())
        .sum();
    assert_eq!(tampered, 10);
    let pngs = walk_pngs(data);
    assert_eq!(pngs, 10);
    assert_eq!(
        json(&data.join("failures.json")).as_array().unwrap().len(),
        0
    );

    // Second run reuses everything.
    let masks = tmp.path().join("masks/manifest.json");
    let out = ok(&[
        "gen-data",
        "--manifest",
        p(&masks),
        "--out",
        p(data),
        "--seed",
        "1",
        "--skip-existing",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("10 reused"), "{text}");
    assert_eq!(json(&manifest), m);
}

fn walk_pngs(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            n += walk_pngs(&path);
        } else if path.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

#[test]
fn unreachable_inpainter_is_recorded_as_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    let masks = tmp.path().join("masks/manifest.json");
    ok(&[
        "gen-scenes",
        "--out",
        p(&scenes),
        "--count",
        "2",
        "--size",
        "32",
    ]);
    ok(&["gen-masks", "--input", p(&scenes), "--manifest", p(&masks)]);
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = tmp.path().join("inpainters.toml");
    std::fs::write(
        &cfg,
        format!("presets = [\"pi-smooth\"]\n[service]\ninpainter_url = \"http://127.0.0.1:{port}/\"\ntimeout_secs = 2.0\n"),
    )
    .unwrap();
    let out_dir = tmp.path().join("data");
    ok(&[
        "gen-data",
        "--manifest",
        p(&masks),
        "--out",
        p(&out_dir),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(
        json(&out_dir.join("failures.json"))
            .as_array()
            .unwrap()
            .len(),
        2
    );

    // Only the dead service: every attempt fails.
    std::fs::write(
        &cfg,
        format!("[service]\ninpainter_url = \"http://127.0.0.1:{port}/\"\ntimeout_secs = 2.0\n"),
    )
    .unwrap();
    let out = run(&[
        "gen-data",
        "--manifest",
        p(&masks),
        "--out",
        p(&tmp.path().join("d2")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_infer_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 4, "2");
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run_dir = tmp.path().join("run");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&run_dir),
        "--config",
        p(&cfg),
    ]);
    let ckpt = run_dir.join("checkpoint.json");
    for f in ["checkpoint.json", "metrics.csv", "config.toml"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }

    let image = tmp.path().join("scenes/scene_00000.png");
    let map = tmp.path().join("map.png");
    let raw = tmp.path().join("map.json");
    let out = ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--out",
        p(&map),
        "--raw",
        p(&raw),
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("score "), "{text}");
    assert!(
        text.contains("TAMPERED") || text.contains("ORIGINAL"),
        "{text}"
    );
    let (w, h) = image::image_dimensions(&map).unwrap();
    assert_eq!((w, h), image::image_dimensions(&image).unwrap());

    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    for e in [&e1, &e2] {
        ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--out",
            p(e),
            "--perturb",
            "jpeg:70",
        ]);
    }
    for f in ["report.json", "report.csv"] {
        assert_eq!(
            std::fs::read(e1.join(f)).unwrap(),
            std::fs::read(e2.join(f)).unwrap(),
            "{f}"
        );
    }

    let bad = run(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--out",
        p(&e1),
        "--perturb",
        "jpeg:55",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablate_writes_a_report_per_row() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), 4, "3");
    let sweep = tmp.path().join("sweep.toml");
    std::fs::write(
        &sweep,
        format!(
            "[base]\n{TINY_CONFIG}\n[[row]]\nname = \"full\"\n\n[[row]]\nname = \"k1\"\nk = 1\n\n[[row]]\nname = \"no-scl\"\n[row.ablation]\nscl_mode = \"off\"\n"
        ),
    )
    .unwrap();
    let out = tmp.path().join("ablate");
    ok(&[
        "ablate",
        "--config",
        p(&sweep),
        "--manifest",
        p(&manifest),
        "--eval-manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    for row in ["full", "k1", "no-scl"] {
        assert!(out.join(row).join("report.json").is_file(), "{row}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);

    let single = tmp.path().join("single");
    ok(&[
        "ablate",
        "--config",
        p(&sweep),
        "--manifest",
        p(&manifest),
        "--eval-manifest",
        p(&manifest),
        "--out",
        p(&single),
        "--ablation-row",
        "k1",
    ]);
    assert!(single.join("k1/report.json").is_file());
    assert!(!single.join("full").exists());
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = run(&["train", "--manifest", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn every_command_has_help() {
    for cmd in [
        "gen-scenes",
        "gen-masks",
        "gen-data",
        "train",
        "infer",
        "eval",
        "ablate",
    ] {
        let out = ok(&[cmd, "--help"]);
        assert!(!out.stdout.is_empty(), "{cmd}");
    }
    ok(&["--help"]);
}
