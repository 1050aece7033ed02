mod logging;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Tensor;
use clap::{Args, Parser, Subcommand};
use idpaint_core::autoencoder::{reconstruction_mae, train_autoencoder, Autoencoder};
use idpaint_core::backbone::pretrain_backbone;
use idpaint_core::checkpoint::file_hash;
use idpaint_core::config::RunConfig;
use idpaint_core::control::ControlBranch;
use idpaint_core::emask::{analyze_suppression, build_dataset};
use idpaint_core::eval::{evaluate, generated_path};
use idpaint_core::identity::{pretrain_encoder, similarity, IdentityEmbedding, RecognitionEncoder};
use idpaint_core::imageio::{load_image, load_mask, save_image};
use idpaint_core::manifest::{Manifest, Region};
use idpaint_core::pipeline::{embed, identity_grid, inpaint_batch, run_training, schedule, Frozen};
use idpaint_core::toyface::{generate, write_corpus, ToyFaceConfig};
use idpaint_core::trainer::CONFIG_FILE;
use idpaint_core::{Error, Result};
use serde_json::json;

/// Identity-preserving face inpainting with a latent diffusion model.
#[derive(Parser)]
#[command(name = "idpaint", version)]
struct Cli {
    /// Append structured log records (one JSON object per line) to this file.
    #[arg(long, global = true)]
    log: Option<PathBuf>,

    /// Also print progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural face corpus with identity labels and landmarks.
    SynthFaces {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 24)]
        identities: usize,
        #[arg(long, default_value_t = 8)]
        per_identity: usize,
    },
    /// Build region masks and a manifest from images and landmark files.
    MakeMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        /// Validate inputs without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Similarity between masked and unmasked embeddings, per region.
    AnalyzeMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the latent autoencoder.
    PretrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the recognition encoder.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the unconditioned inpainting denoiser.
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the identity control branch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the latest checkpoint under --out.
        #[arg(long)]
        resume: bool,
    },
    /// Inpaint masked faces with an identity embedding.
    Inpaint(InpaintArgs),
    /// Score generated images against the manifest's ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `<image stem>.png` outputs.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InpaintArgs {
    #[command(flatten)]
    common: Common,
    /// Trained control branch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use a zero-initialized branch (equivalent to the plain backbone).
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    image: Vec<PathBuf>,
    #[arg(long)]
    mask: Vec<PathBuf>,
    /// Unmasked image supplying the identity.
    #[arg(long)]
    ref_image: Vec<PathBuf>,
    /// JSON array with an identity embedding.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Inpaint every manifest row, using its own unmasked embedding.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "eyes")]
    region: Region,
    /// Cross every image with every identity.
    #[arg(long)]
    grid: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = logging::init(cli.log.as_deref(), cli.verbose) {
        eprintln!(
            "{}",
            json!({"error": "io", "message": format!("cannot open log: {e}"), "exit_code": 3})
        );
        return ExitCode::from(3);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::error!("{e}");
            eprintln!(
                "{}",
                json!({"error": kind(&e), "message": e.to_string(), "exit_code": code})
            );
            ExitCode::from(code as u8)
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Argument(_) => "argument",
        Error::Numerical(_) => "numerical",
        Error::Data(_) => "data",
        Error::Geometry(_) => "geometry",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
        Error::Json(_) => "json",
        Error::Tensor(_) => "tensor",
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(v)? + "\n")
}

fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), cfg.to_toml()?)
}

fn manifest_of(cfg: &mut RunConfig, flag: &Option<PathBuf>) -> Result<Manifest> {
    if let Some(p) = flag {
        cfg.paths.manifest = Some(p.clone());
    }
    cfg.require(&["manifest"])?;
    Manifest::load(cfg.paths.manifest.as_ref().unwrap())
}

fn check_size(images: &Tensor, cfg: &RunConfig) -> Result<()> {
    let s = cfg.geometry.image_size;
    let d = images.dims();
    if d[d.len() - 1] != s || d[d.len() - 2] != s {
        return Err(Error::Data(format!(
            "images are {}x{}, the configuration expects {s}x{s}",
            d[d.len() - 1],
            d[d.len() - 2]
        )));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthFaces {
            common,
            identities,
            per_identity,
        } => {
            let cfg = load_config(&common)?;
            let toy = ToyFaceConfig {
                identities,
                images_per_identity: per_identity,
                image_size: cfg.geometry.image_size,
                identity_seed: cfg.seed,
                sample_seed: cfg.seed.wrapping_add(1),
            };
            let samples = generate(&toy)?;
            write_corpus(&samples, toy.image_size, &common.out)?;
            snapshot(&cfg, &common.out)?;
            println!("{}", common.out.display());
            Ok(())
        }
        Command::MakeMasks {
            common,
            images,
            landmarks,
            dry_run,
        } => {
            let cfg = load_config(&common)?;
            let summary = build_dataset(&images, &landmarks, &common.out, &cfg.emask, dry_run)?;
            for (face, why) in &summary.skipped {
                log::warn!("skipped {face}: {why}");
            }
            if dry_run {
                println!(
                    "dry run: {} faces valid, {} skipped",
                    summary.rows,
                    summary.skipped.len()
                );
            } else {
                println!("{}", summary.manifest_path.display());
            }
            Ok(())
        }
        Command::AnalyzeMasks { common, manifest } => {
            let mut cfg = load_config(&common)?;
            let m = manifest_of(&mut cfg, &manifest)?;
            cfg.require(&["encoder"])?;
            let enc = RecognitionEncoder::load(cfg.paths.encoder.as_ref().unwrap())?;
            let report = analyze_suppression(&m, &enc, cfg.emask.fill)?;
            report.write(&common.out)?;
            snapshot(&cfg, &common.out)?;
            for r in Region::ALL {
                println!("{r}: mean similarity {:.4}", report.mean(r));
            }
            Ok(())
        }
        Command::PretrainVae { common, manifest } => {
            let mut cfg = load_config(&common)?;
            let m = manifest_of(&mut cfg, &manifest)?;
            let images = m.load_images()?;
            check_size(&images, &cfg)?;
            let (ae, history) =
                train_autoencoder(&images, cfg.autoencoder_config(), &cfg.autoencoder_train())?;
            let path = common.out.join("autoencoder.ckpt");
            ae.save(&path, &history)?;
            write_json(
                &common.out.join("autoencoder.json"),
                &json!({
                    "content_hash": ae.content_hash()?,
                    "file_hash": file_hash(&path)?,
                    "reconstruction_mae": reconstruction_mae(&ae, &images)?,
                    "final_loss": history.last(),
                    "seed": cfg.seed,
                }),
            )?;
            snapshot(&cfg, &common.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::PretrainEncoder { common, manifest } => {
            let mut cfg = load_config(&common)?;
            let m = manifest_of(&mut cfg, &manifest)?;
            let images = m.load_images()?;
            check_size(&images, &cfg)?;
            let (labels, _) = m.identity_labels();
            let (enc, report) =
                pretrain_encoder(&images, &labels, cfg.encoder_config(), &cfg.encoder_train())?;
            let path = common.out.join("encoder.ckpt");
            enc.save(&path)?;
            write_json(
                &common.out.join("encoder.json"),
                &json!({
                    "content_hash": enc.content_hash()?,
                    "file_hash": file_hash(&path)?,
                    "train_accuracy": report.train_accuracy,
                    "identities": report.identities,
                    "final_loss": report.loss_history.last(),
                    "seed": cfg.seed,
                }),
            )?;
            snapshot(&cfg, &common.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::PretrainBackbone { common, manifest } => {
            let mut cfg = load_config(&common)?;
            let m = manifest_of(&mut cfg, &manifest)?;
            cfg.require(&["autoencoder"])?;
            let (ae, _) = Autoencoder::load(cfg.paths.autoencoder.as_ref().unwrap())?;
            if ae.config() != &cfg.autoencoder_config() {
                return Err(Error::Config(
                    "autoencoder checkpoint differs from the configured architecture".into(),
                ));
            }
            let images = m.load_images()?;
            check_size(&images, &cfg)?;
            let mut xs = Vec::new();
            let mut ms = Vec::new();
            for r in &cfg.train.regions {
                xs.push(images.clone());
                ms.push(m.load_masks(*r)?);
            }
            let (bb, history) = pretrain_backbone(
                &ae,
                &Tensor::cat(&xs, 0)?,
                &Tensor::cat(&ms, 0)?,
                &schedule(&cfg)?,
                cfg.backbone_config(),
                &cfg.backbone_train(),
            )?;
            let path = common.out.join("backbone.ckpt");
            bb.save(&path, &history)?;
            write_json(
                &common.out.join("backbone.json"),
                &json!({
                    "content_hash": bb.content_hash()?,
                    "file_hash": file_hash(&path)?,
                    "final_loss": history.last(),
                    "seed": cfg.seed,
                }),
            )?;
            snapshot(&cfg, &common.out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Train {
            common,
            manifest,
            steps,
            resume,
        } => {
            let snap = common.out.join(CONFIG_FILE);
            let mut cfg = if resume && common.config.is_none() && snap.is_file() {
                let mut c = RunConfig::load(&snap)?;
                if let Some(s) = common.seed {
                    c.seed = s;
                }
                c
            } else {
                load_config(&common)?
            };
            if let Some(p) = manifest {
                cfg.paths.manifest = Some(p);
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let path = run_training(&cfg, &common.out, resume)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Inpaint(args) => inpaint(args),
        Command::Evaluate {
            common,
            run,
            manifest,
        } => {
            let mut cfg = load_config(&common)?;
            let m = manifest_of(&mut cfg, &manifest)?;
            cfg.require(&["encoder"])?;
            let enc = RecognitionEncoder::load(cfg.paths.encoder.as_ref().unwrap())?;
            let report = evaluate(&run, &m, &enc, &cfg.eval)?;
            report.write(&common.out)?;
            snapshot(&cfg, &common.out)?;
            println!(
                "id {:.4}  fid {:.4}  mfid {:.4}  kid {:.5}  perceptual {:.4}  ({} of {} rows)",
                report.id_similarity.mean,
                report.fid,
                report.mfid,
                report.kid,
                report.perceptual,
                report.counts.evaluated,
                report.counts.rows
            );
            Ok(())
        }
    }
}

fn stack_files(paths: &[PathBuf], load: fn(&Path) -> Result<Tensor>) -> Result<Tensor> {
    let items = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&items, 0)?)
}

fn load_embedding(path: &Path) -> Result<IdentityEmbedding> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Vec<f64> = serde_json::from_str(&text)?;
    IdentityEmbedding::normalized(v)
}

fn inpaint(a: InpaintArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let out = &a.common.out;
    if a.checkpoint.is_some() == a.baseline {
        return Err(Error::Argument(
            "give exactly one of --checkpoint or --baseline".into(),
        ));
    }
    let frozen = Frozen::load(&cfg)?;
    let bb = frozen.backbone.config().clone();
    let (branch, branch_hash) = match &a.checkpoint {
        Some(p) => {
            let b = ControlBranch::load(p, &bb)?;
            let h = b.content_hash()?;
            (b, h)
        }
        None => (
            ControlBranch::new(cfg.branch_config(), &bb, cfg.seed)?,
            "baseline".to_string(),
        ),
    };
    if branch.config().embedding_dim != frozen.encoder.config().embedding_dim {
        return Err(Error::Config(
            "branch and encoder disagree on the embedding width".into(),
        ));
    }
    let sched = schedule(&cfg)?;
    let seed = cfg.seed;

    if a.grid {
        if a.manifest.is_some() || a.embedding.is_some() {
            return Err(Error::Argument(
                "--grid takes --image, --mask and optional --ref-image lists".into(),
            ));
        }
        let n = a.image.len();
        if n < 2 || a.mask.len() != n || !(a.ref_image.is_empty() || a.ref_image.len() == n) {
            return Err(Error::Argument(format!(
                "--grid needs N >= 2 images with N masks (and N references if given); got {} images, {} masks, {} references",
                n,
                a.mask.len(),
                a.ref_image.len()
            )));
        }
        let images = stack_files(&a.image, load_image)?;
        check_size(&images, &cfg)?;
        let masks = stack_files(&a.mask, load_mask)?;
        let refs = if a.ref_image.is_empty() {
            images.clone()
        } else {
            stack_files(&a.ref_image, load_image)?
        };
        let (outputs, grid) =
            identity_grid(&frozen, &branch, &images, &masks, &refs, &sched, seed)?;
        for k in 0..n * n {
            save_image(
                &out.join(format!("grid_{}_{}.png", k / n, k % n)),
                &outputs.get(k)?,
            )?;
        }
        write_file(&out.join("grid.csv"), grid.to_csv())?;
        write_json(
            &out.join("grid.json"),
            &json!({
                "similarity": grid.similarity,
                "diagonal_mean": grid.diagonal_mean(),
                "off_diagonal_mean": grid.off_diagonal_mean(),
                "branch": branch_hash,
                "seed": seed,
            }),
        )?;
        snapshot(&cfg, out)?;
        println!(
            "diagonal {:.4}  off-diagonal {:.4}",
            grid.diagonal_mean(),
            grid.off_diagonal_mean()
        );
        return Ok(());
    }

    if let Some(mp) = &a.manifest {
        if !a.image.is_empty() || !a.ref_image.is_empty() || a.embedding.is_some() {
            return Err(Error::Argument(
                "--manifest takes identities from the manifest images; drop --image/--ref-image/--embedding".into(),
            ));
        }
        cfg.paths.manifest = Some(mp.clone());
        let m = Manifest::load(mp)?;
        let images = m.load_images()?;
        check_size(&images, &cfg)?;
        let masks = m.load_masks(a.region)?;
        let e = embed(&frozen.encoder, &images)?;
        let outputs = inpaint_batch(&frozen, &branch, &images, &masks, &e, &sched, seed, 16)?;
        let got = IdentityEmbedding::from_rows(&embed(&frozen.encoder, &outputs)?)?;
        let want = IdentityEmbedding::from_rows(&e)?;
        let mut csv = String::from("image,similarity\n");
        let mut sims = Vec::new();
        for (i, row) in m.rows.iter().enumerate() {
            let key = row.key();
            save_image(&generated_path(out, &key), &outputs.get(i)?)?;
            let s = similarity(&got[i], &want[i])?;
            csv.push_str(&format!("{key},{s:.6}\n"));
            sims.push(s);
        }
        write_file(&out.join("similarity.csv"), csv)?;
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        write_json(
            &out.join("inpaint.json"),
            &json!({"region": a.region, "images": sims.len(), "mean_similarity": mean, "branch": branch_hash, "seed": seed}),
        )?;
        snapshot(&cfg, out)?;
        println!("{} images, mean identity similarity {mean:.4}", sims.len());
        return Ok(());
    }

    if a.image.len() != 1 || a.mask.len() != 1 {
        return Err(Error::Argument("give one --image and one --mask".into()));
    }
    let target = match (a.ref_image.as_slice(), &a.embedding) {
        ([r], None) => {
            let x = load_image(r)?.unsqueeze(0)?;
            check_size(&x, &cfg)?;
            IdentityEmbedding::from_rows(&embed(&frozen.encoder, &x)?)?.remove(0)
        }
        ([], Some(p)) => load_embedding(p)?,
        _ => {
            return Err(Error::Argument(
                "give exactly one identity source: --ref-image or --embedding".into(),
            ))
        }
    };
    if target.dim() != frozen.encoder.config().embedding_dim {
        return Err(Error::Argument(format!(
            "embedding has {} entries, the encoder produces {}",
            target.dim(),
            frozen.encoder.config().embedding_dim
        )));
    }
    let image = load_image(&a.image[0])?.unsqueeze(0)?;
    check_size(&image, &cfg)?;
    let mask = load_mask(&a.mask[0])?.unsqueeze(0)?;
    let e = IdentityEmbedding::stack(std::slice::from_ref(&target))?;
    let output = inpaint_batch(&frozen, &branch, &image, &mask, &e, &sched, seed, 1)?;
    let got = IdentityEmbedding::from_rows(&embed(&frozen.encoder, &output)?)?.remove(0);
    let sim = similarity(&got, &target)?;
    let path = out.join("inpainted.png");
    save_image(&path, &output.get(0)?)?;
    let mut record = BTreeMap::new();
    record.insert("image", json!(a.image[0]));
    record.insert("mask", json!(a.mask[0]));
    record.insert("identity_similarity", json!(sim));
    record.insert("branch", json!(branch_hash));
    record.insert("seed", json!(seed));
    record.insert("output_hash", json!(file_hash(&path)?));
    write_json(&out.join("inpainted.json"), &json!(record))?;
    snapshot(&cfg, out)?;
    println!("{}  identity similarity {sim:.4}", path.display());
    Ok(())
}
