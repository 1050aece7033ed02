use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_idpaint");

fn idpaint(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = idpaint(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3

[geometry]
image_size = 32
latent_factor = 4

[schedule]
steps = 8
beta_start = 0.001
beta_end = 0.2

[autoencoder]
latent_channels = 4
widths = [4, 4, 4]
steps = 3
batch_size = 4

[encoder]
widths = [4, 4, 4, 4]
feature_dim = 8
embedding_dim = 8
steps = 3
batch_size = 4

[backbone]
widths = [8, 8, 8]
time_dim = 8
temb_dim = 8
groups = 4
steps = 3
batch_size = 4

[branch]
seed_channels = 8

[train]
batch_size = 2
steps = 4
checkpoint_every = 2
regions = ["eyes"]

[eval.kid]
subset_size = 4
subsets = 2
"#;

/// Corpus, masks and frozen components produced through the binary itself.
struct Workspace {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let base = root.join("base.toml");
        std::fs::write(&base, TINY).unwrap();
        let corpus = root.join("corpus");
        ok(&[
            "synth-faces",
            "--config",
            s(&base),
            "--out",
            s(&corpus),
            "--identities",
            "3",
            "--per-identity",
            "2",
        ]);
        let data = root.join("data");
        let printed = ok(&[
            "make-masks",
            "--config",
            s(&base),
            "--images",
            s(&corpus.join("images")),
            "--landmarks",
            s(&corpus.join("landmarks")),
            "--out",
            s(&data),
        ]);
        let manifest = PathBuf::from(printed.trim());
        assert!(manifest.is_file());
        let m = s(&manifest);
        ok(&[
            "pretrain-vae",
            "--config",
            s(&base),
            "--manifest",
            m,
            "--out",
            s(&root.join("vae")),
        ]);
        ok(&[
            "pretrain-encoder",
            "--config",
            s(&base),
            "--manifest",
            m,
            "--out",
            s(&root.join("enc")),
        ]);
        let with_ae = root.join("with_ae.toml");
        std::fs::write(
            &with_ae,
            format!("{TINY}\n[paths]\nautoencoder = \"vae/autoencoder.ckpt\"\n"),
        )
        .unwrap();
        ok(&[
            "pretrain-backbone",
            "--config",
            s(&with_ae),
            "--manifest",
            m,
            "--out",
            s(&root.join("bb")),
        ]);
        let config = root.join("run.toml");
        std::fs::write(
            &config,
            format!(
                "{TINY}\n[paths]\nmanifest = \"{m}\"\nautoencoder = \"vae/autoencoder.ckpt\"\nencoder = \"enc/encoder.ckpt\"\nbackbone = \"bb/backbone.ckpt\"\n"
            ),
        )
        .unwrap();
        Self {
            _dir: dir,
            root,
            config,
            manifest,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn image(&self, name: &str) -> PathBuf {
        self.path("corpus/images").join(format!("{name}.png"))
    }

    fn mask(&self, name: &str, region: &str) -> PathBuf {
        let m = std::fs::read_to_string(&self.manifest).unwrap();
        let line = m
            .lines()
            .find(|l| l.contains(&format!("{name}.png")))
            .unwrap();
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let p = PathBuf::from(row[format!("{region}_mask")].as_str().unwrap());
        if p.is_absolute() {
            p
        } else {
            self.manifest.parent().unwrap().join(p)
        }
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&idpaint(&[])), 2);
    assert_eq!(code(&idpaint(&["train", "--bogus"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[geometry]\nimage_size = 30\n").unwrap();
    let out = idpaint(&[
        "synth-faces",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(
        code(&idpaint(&[
            "synth-faces",
            "--config",
            s(&cfg),
            "--out",
            s(dir.path())
        ])),
        2
    );
}

#[test]
fn missing_data_exits_with_three_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("nowhere");
    let out = idpaint(&[
        "make-masks",
        "--images",
        s(&gone),
        "--landmarks",
        s(&gone),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere"), "{err}");
    let line = err.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["exit_code"], 3);
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&[
        "synth-faces",
        "--out",
        s(&corpus),
        "--identities",
        "2",
        "--per-identity",
        "2",
    ]);
    let out = dir.path().join("masks");
    let printed = ok(&[
        "make-masks",
        "--images",
        s(&corpus.join("images")),
        "--landmarks",
        s(&corpus.join("landmarks")),
        "--out",
        s(&out),
        "--dry-run",
    ]);
    assert!(printed.contains("4 faces valid"), "{printed}");
    assert!(!out.exists());
}

#[test]
fn pipeline_trains_resumes_inpaints_and_evaluates() {
    let ws = Workspace::new();
    let cfg = s(&ws.config);

    // Pretraining is a pure function of config and seed.
    let again = ws.path("vae2");
    ok(&["pretrain-vae", "--config", cfg, "--out", s(&again)]);
    assert_eq!(
        json(ws.path("vae/autoencoder.json"))["content_hash"],
        json(again.join("autoencoder.json"))["content_hash"]
    );

    let fresh = ws.path("fresh");
    let out = idpaint(&["train", "--config", cfg, "--out", s(&fresh), "--resume"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to resume"));
    assert!(!fresh.join("branch.ckpt").exists());

    let full = ws.path("full");
    ok(&["train", "--config", cfg, "--out", s(&full)]);
    let part = ws.path("part");
    ok(&["train", "--config", cfg, "--out", s(&part), "--steps", "2"]);
    ok(&["train", "--out", s(&part), "--resume", "--steps", "4"]);
    assert_eq!(
        read(full.join("branch.ckpt")),
        read(part.join("branch.ckpt"))
    );
    assert_eq!(read(full.join("log.jsonl")), read(part.join("log.jsonl")));
    let ckpt = full.join("branch.ckpt");

    // An all-zero mask leaves the image untouched, byte for byte.
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero.png");
    image::GrayImage::new(32, 32).save(&zero).unwrap();
    let one = ws.path("one");
    let img = ws.image("id000_00");
    ok(&[
        "inpaint",
        "--config",
        cfg,
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&img),
        "--mask",
        s(&zero),
        "--ref-image",
        s(&ws.image("id001_00")),
        "--out",
        s(&one),
    ]);
    let a = image::open(&img).unwrap().to_rgb8();
    let b = image::open(one.join("inpainted.png")).unwrap().to_rgb8();
    assert_eq!(a.as_raw(), b.as_raw());

    // A real mask: deterministic per seed.
    let mask = ws.mask("id000_00", "eyes");
    let run = |dir: &str, seed: &str| {
        let d = ws.path(dir);
        ok(&[
            "inpaint",
            "--config",
            cfg,
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&img),
            "--mask",
            s(&mask),
            "--ref-image",
            s(&ws.image("id001_00")),
            "--seed",
            seed,
            "--out",
            s(&d),
        ]);
        read(d.join("inpainted.png"))
    };
    assert_eq!(run("r1", "5"), run("r2", "5"));
    assert_ne!(run("r1", "5"), run("r3", "6"));

    // Grid over three identities.
    let grid = ws.path("grid");
    let names = ["id000_00", "id001_00", "id002_00"];
    let mut args = vec![
        "inpaint",
        "--config",
        cfg,
        "--checkpoint",
        s(&ckpt),
        "--grid",
        "--out",
        s(&grid),
    ];
    let imgs: Vec<PathBuf> = names.iter().map(|n| ws.image(n)).collect();
    let masks: Vec<PathBuf> = names.iter().map(|n| ws.mask(n, "eyes")).collect();
    for (i, m) in imgs.iter().zip(&masks) {
        args.extend(["--image", s(i), "--mask", s(m)]);
    }
    ok(&args);
    let g = json(grid.join("grid.json"));
    assert_eq!(g["similarity"].as_array().unwrap().len(), 3);
    assert!(grid.join("grid_2_1.png").is_file());

    // Manifest inpainting feeds evaluation.
    let batch = ws.path("batch");
    ok(&[
        "inpaint",
        "--config",
        cfg,
        "--baseline",
        "--manifest",
        s(&ws.manifest),
        "--out",
        s(&batch),
    ]);
    let report = ws.path("report");
    ok(&[
        "evaluate",
        "--config",
        cfg,
        "--run",
        s(&batch),
        "--out",
        s(&report),
    ]);
    let r = json(report.join("report.json"));
    assert_eq!(r["counts"]["rows"], 6);
    assert_eq!(r["counts"]["evaluated"], 6);

    // Ground truth scored against itself.
    let selfrun = ws.path("self");
    std::fs::create_dir_all(&selfrun).unwrap();
    for e in std::fs::read_dir(ws.path("corpus/images")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "png") {
            std::fs::copy(&p, selfrun.join(p.file_name().unwrap())).unwrap();
        }
    }
    let selfreport = ws.path("selfreport");
    ok(&[
        "evaluate",
        "--config",
        cfg,
        "--run",
        s(&selfrun),
        "--out",
        s(&selfreport),
    ]);
    let r = json(selfreport.join("report.json"));
    assert!((r["id_similarity"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(r["fid"].as_f64().unwrap().abs() < 1e-6);

    let analysis = ws.path("analysis");
    ok(&["analyze-masks", "--config", cfg, "--out", s(&analysis)]);
    let csv = String::from_utf8(read(analysis.join("suppression.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 3);

    // Structured log records.
    let log = ws.path("log.jsonl");
    ok(&[
        "--log",
        s(&log),
        "evaluate",
        "--config",
        cfg,
        "--run",
        s(&selfrun),
        "--out",
        s(&ws.path("again")),
    ]);
    for line in String::from_utf8(read(&log)).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string());
    }
}

#[test]
fn inpaint_rejects_ambiguous_identity_sources() {
    let ws = Workspace::new();
    let cfg = s(&ws.config);
    let img = ws.image("id000_00");
    let mask = ws.mask("id000_00", "eyes");
    let out = idpaint(&[
        "inpaint",
        "--config",
        cfg,
        "--baseline",
        "--image",
        s(&img),
        "--mask",
        s(&mask),
        "--out",
        s(&ws.path("x")),
    ]);
    assert_eq!(code(&out), 2);
    let emb = ws.path("e.json");
    std::fs::write(&emb, "[1, 0, 0]").unwrap();
    let out = idpaint(&[
        "inpaint",
        "--config",
        cfg,
        "--baseline",
        "--image",
        s(&img),
        "--mask",
        s(&mask),
        "--embedding",
        s(&emb),
        "--out",
        s(&ws.path("x")),
    ]);
    assert_eq!(code(&out), 2);
    std::fs::write(&emb, "[0, 0, 0, 0, 0, 0, 0, 0]").unwrap();
    let out = idpaint(&[
        "inpaint",
        "--config",
        cfg,
        "--baseline",
        "--image",
        s(&img),
        "--mask",
        s(&mask),
        "--embedding",
        s(&emb),
        "--out",
        s(&ws.path("x")),
    ]);
    assert_eq!(code(&out), 4);
}
