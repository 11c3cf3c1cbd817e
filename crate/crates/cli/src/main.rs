//! `dppn` command-line front end.
//!
//! Every command loads and validates all of its inputs, computes its results
//! in memory and only then writes files, each one atomically.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use dppn::checkpoint::{write_atomic, Checkpoint};
use dppn::config::RunConfig;
use dppn::data::{gen_data, Dataset, Manifest, RgbImage, Split};
use dppn::explain::{draw_boxes, global_analysis, local_analysis, reasoning_report, sidecar, visualize_prototype, PartBox};
use dppn::model::{init_model, Model};
use dppn::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "dppn", version, about = "Deformable prototypical part networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Reasoning,
    Local,
    Global,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic pose-jittered dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics log path (default: the checkpoint path with `.metrics` appended).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Report accuracy on one split and write per-image predictions as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write reasoning reports, local or global analyses with box overlays.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Query image (reasoning and local modes).
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        /// Prototype id (global mode).
        #[arg(long)]
        prototype: Option<usize>,
        /// Ranks this manifest's split in global mode; lets local mode draw
        /// on the projection source images.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check every analytic gradient group against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("DPPN_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => bail!("DPPN_LOG must be quiet, info or debug, got {other:?}"),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path).with_context(|| format!("manifest {}", path.display()))
}

fn load_split(manifest: &Manifest, split: Split, cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(manifest, split, cfg.mean, cfg.std).with_context(|| format!("loading the {split} split"))?;
    check_images(&ds, cfg)?;
    ensure!(
        ds.num_classes == cfg.model.num_classes,
        "manifest has {} classes, configuration {}",
        ds.num_classes,
        cfg.model.num_classes
    );
    Ok(ds)
}

fn check_images(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    let s = cfg.model.image_size;
    let dims = ds.images[0].dims();
    ensure!(dims[2] == s && dims[3] == s, "images are {}x{}, the model expects {s}x{s}", dims[3], dims[2]);
    Ok(())
}

/// Output directory must either not exist yet or be a directory.
fn check_out_dir(dir: &Path) -> Result<()> {
    ensure!(!dir.exists() || dir.is_dir(), "{} exists and is not a directory", dir.display());
    Ok(())
}

fn check_parent(file: &Path) -> Result<()> {
    let parent = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure!(parent.is_dir(), "directory {} does not exist", parent.display());
    ensure!(!file.is_dir(), "{} is a directory", file.display());
    Ok(())
}

fn cmd_gen_data(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    cfg.data.validate()?;
    check_out_dir(out)?;
    let m = gen_data(out, &cfg.data)?;
    println!(
        "wrote {} train and {} test images to {}",
        m.count(Split::Train),
        m.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn cmd_train(manifest: &Path, checkpoint: &Path, config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, jobs: usize) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    cfg.schedule.jobs = jobs;
    cfg.validate()?;
    let metrics_path = out.unwrap_or_else(|| {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".metrics");
        PathBuf::from(p)
    });
    check_parent(checkpoint)?;
    check_parent(&metrics_path)?;
    let manifest = load_manifest(manifest)?;
    ensure!(manifest.count(Split::Test) > 0, "the test split of the manifest is empty");
    let data = load_split(&manifest, Split::Train, &cfg)?;

    let mut model: Model = init_model(&cfg.model, cfg.seed)?;
    let mut log = String::new();
    let outcome = train(&mut model, &data, &cfg.schedule, &cfg.weights, |m| {
        log.push_str(&m.to_string());
        log.push('\n');
    })?;
    let acc = evaluate(&model, &data, jobs)?.accuracy;
    // the stored schedule records a single thread; results do not depend on it
    cfg.schedule.jobs = 1;
    let ckpt = Checkpoint {
        config: cfg,
        model,
        projections: outcome.projections,
    };
    write_atomic(&metrics_path, log.as_bytes())?;
    ckpt.save(checkpoint)?;
    println!("train accuracy {acc:.4}");
    println!("wrote {} and {}", checkpoint.display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split, out: &Path, jobs: usize) -> Result<()> {
    check_parent(out)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let manifest = load_manifest(manifest)?;
    let data = load_split(&manifest, split, &ckpt.config)?;
    let ev = evaluate(&ckpt.model, &data, jobs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "label", "prediction", "top_score"])?;
    for (name, p) in data.names.iter().zip(&ev.predictions) {
        w.write_record([name.clone(), p.label.to_string(), p.predicted.to_string(), p.top_score().to_string()])?;
    }
    write_atomic(out, &w.into_inner()?)?;
    println!("accuracy {:.4} ({} images, split {split})", ev.accuracy, data.len());
    Ok(())
}

/// Files of one explanation, written only once everything is computed.
#[derive(Default)]
struct Outputs(Vec<(String, Vec<u8>)>);

impl Outputs {
    fn overlay(&mut self, stem: &str, image: &RgbImage, boxes: &[PartBox], model: &Model) {
        let drawn = draw_boxes(image, boxes, model.layer.grid.cols);
        self.0.push((format!("{stem}.ppm"), drawn.encode_ppm()));
        self.0.push((format!("{stem}.txt"), sidecar(boxes, model).into_bytes()));
    }

    fn text(&mut self, name: &str, text: String) {
        self.0.push((name.to_owned(), text.into_bytes()));
    }

    fn write(self, dir: &Path) -> Result<usize> {
        fs::create_dir_all(dir)?;
        let n = self.0.len();
        for (name, bytes) in self.0 {
            write_atomic(dir.join(name), &bytes)?;
        }
        Ok(n)
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn proto_tag(model: &Model, p: usize) -> String {
    let proto = &model.layer.prototypes[p];
    format!("proto{}_{}", proto.class_id, proto.index)
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    checkpoint: &Path,
    mode: Mode,
    out: &Path,
    image: Option<&Path>,
    top_k: usize,
    prototype: Option<usize>,
    manifest: Option<&Path>,
    split: Split,
    jobs: usize,
) -> Result<()> {
    check_out_dir(out)?;
    let query = match (mode, image) {
        (Mode::Global, _) => None,
        (_, Some(p)) => Some((p, RgbImage::read(p).with_context(|| format!("image {}", p.display()))?)),
        (_, None) => bail!("--mode {mode:?} needs an image argument"),
    };
    let prototype = match (mode, prototype) {
        (Mode::Global, None) => bail!("--mode global needs --prototype"),
        (_, p) => p,
    };
    let manifest = match (mode, manifest) {
        (_, Some(m)) => Some(load_manifest(m)?),
        (Mode::Global, None) => bail!("--mode global needs --manifest"),
        (_, None) => None,
    };
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (cfg, model) = (&ckpt.config, &ckpt.model);
    if let Some(p) = prototype {
        ensure!(p < model.num_prototypes(), "prototype {p} out of range ({} prototypes)", model.num_prototypes());
    }
    let query = query
        .map(|(p, img)| -> Result<_> {
            let s = cfg.model.image_size;
            ensure!(img.width == s && img.height == s, "{} is {}x{}, the model expects {s}x{s}", p.display(), img.width, img.height);
            let t = img.to_tensor(cfg.mean, cfg.std);
            Ok((stem_of(p), p.to_string_lossy().into_owned(), img, t))
        })
        .transpose()?;

    let mut files = Outputs::default();
    match mode {
        Mode::Reasoning => {
            let (stem, name, img, t) = query.expect("checked above");
            let report = reasoning_report(model, &t)?;
            for row in report.rows.iter().filter(|r| r.weight != 0.0) {
                let boxes = visualize_prototype(model, &t, row.prototype, &name)?;
                files.overlay(&format!("{stem}_{}", proto_tag(model, row.prototype)), &img, &boxes, model);
            }
            print!("{report}");
            files.text(&format!("{stem}_report.txt"), report.to_string());
        }
        Mode::Local => {
            let (stem, name, img, t) = query.expect("checked above");
            let ranked = local_analysis(model, &t, &name, &ckpt.projections, top_k)?;
            let mut summary = String::new();
            for (rank, r) in ranked.iter().enumerate() {
                let tag = format!("{stem}_rank{}_{}", rank + 1, proto_tag(model, r.prototype));
                summary.push_str(&format!("rank={} {} score={:.6}\n", rank + 1, proto_tag(model, r.prototype), r.score));
                files.overlay(&tag, &img, &r.boxes, model);
                if let (Some(m), Some(b)) = (&manifest, r.source_boxes.first()) {
                    let src = RgbImage::read(m.root.join(&b.source)).with_context(|| format!("source image {}", b.source))?;
                    files.overlay(&format!("{tag}_source"), &src, &r.source_boxes, model);
                } else if !r.source_boxes.is_empty() {
                    files.text(&format!("{tag}_source.txt"), sidecar(&r.source_boxes, model));
                }
            }
            print!("{summary}");
            files.text(&format!("{stem}_local.txt"), summary);
        }
        Mode::Global => {
            let p = prototype.expect("checked above");
            let m = manifest.expect("checked above");
            let data = load_split(&m, split, cfg)?;
            let ranked = global_analysis(model, &data, p, top_k, jobs)?;
            let tag = proto_tag(model, p);
            let mut summary = String::new();
            for (rank, r) in ranked.iter().enumerate() {
                summary.push_str(&format!("rank={} image={} score={:.6}\n", rank + 1, r.name, r.score));
                let img = RgbImage::read(m.root.join(&r.name))?;
                files.overlay(&format!("{tag}_rank{}", rank + 1), &img, &r.boxes, model);
            }
            print!("{summary}");
            files.text(&format!("{tag}_global.txt"), summary);
        }
    }
    let n = files.write(out)?;
    log::info!("wrote {n} files to {}", out.display());
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<bool> {
    let report = dppn::gradcheck::run(seed)?;
    print!("{}", report.table());
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, config, seed } => cmd_gen_data(&out, config.as_deref(), seed)?,
        Command::Train {
            manifest,
            checkpoint,
            config,
            out,
            seed,
            jobs,
        } => cmd_train(&manifest, &checkpoint, config.as_deref(), out, seed, jobs)?,
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
            jobs,
        } => cmd_eval(&checkpoint, &manifest, split, &out, jobs)?,
        Command::Explain {
            checkpoint,
            mode,
            out,
            image,
            top_k,
            prototype,
            manifest,
            split,
            jobs,
        } => cmd_explain(&checkpoint, mode, &out, image.as_deref(), top_k, prototype, manifest.as_deref(), split, jobs)?,
        Command::GradCheck { seed } => return cmd_grad_check(seed),
    }
    Ok(true)
}

/// Argument combinations clap cannot express declaratively.
fn check_usage(cli: &Cli) -> std::result::Result<(), clap::Error> {
    if let Command::Explain {
        mode,
        image,
        prototype,
        manifest,
        ..
    } = &cli.command
    {
        let missing = match mode {
            Mode::Global if prototype.is_none() => Some("--mode global requires --prototype <ID>"),
            Mode::Global if manifest.is_none() => Some("--mode global requires --manifest <PATH>"),
            Mode::Reasoning | Mode::Local if image.is_none() => Some("--mode reasoning and --mode local require an <IMAGE> argument"),
            _ => None,
        };
        if let Some(msg) = missing {
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut("explain").expect("explain subcommand").clone();
            return Err(sub.bin_name("dppn explain").error(ErrorKind::MissingRequiredArgument, msg));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_usage(&cli) {
        e.exit();
    }
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
