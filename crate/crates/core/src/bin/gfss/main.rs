//! `gfss`: command-line front end for range-image projection, two-stage
//! training, evaluation, gradient checks and synthetic data.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gfss_lidar::config::ToolConfig;
use gfss_lidar::evaluation::{self, ConfusionMatrix};
use gfss_lidar::geometry::{self, project};
use gfss_lidar::gradcheck;
use gfss_lidar::losses::{CeMode, KdMode};
use gfss_lidar::model::{self, Freeze};
use gfss_lidar::protocol::{self, Dataset, Regime, ShotSample, Split};
use gfss_lidar::synth;
use gfss_lidar::taxonomy::{Label, Taxonomy};
use gfss_lidar::{par, Error};

use manifest::{FileDigest, Manifest, Status};

#[derive(Parser, Debug)]
#[command(
    name = "gfss",
    version,
    about = "Generalized few-shot LiDAR range-image segmentation"
)]
struct Cli {
    /// TOML configuration; the built-in synthetic configuration when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving the manifest and every artifact.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    ablation: Ablation,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Ablation {
    /// Fine-tuning cross-entropy: unbiased when true, plain when false.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    unbiased_ce: Option<bool>,
    /// Fine-tuning distillation term.
    #[arg(long, global = true, value_enum)]
    kd: Option<KdArg>,
    /// Fine-tuning Lovász term.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    lovasz: Option<bool>,
    /// Fine-tuning freeze mode.
    #[arg(long, global = true, value_enum)]
    freeze: Option<FreezeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KdArg {
    Off,
    Original,
    Unbiased,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FreezeArg {
    None,
    Backbone,
    BackboneAndBaseHeads,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    Ours,
    Gfss,
    GfssDyn,
    Lwf,
    NaiveCe,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Ours => Regime::Ours,
            RegimeArg::Gfss => Regime::Gfss,
            RegimeArg::GfssDyn => Regime::GfssDyn,
            RegimeArg::Lwf => Regime::Lwf,
            RegimeArg::NaiveCe => Regime::NaiveCe,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Projects one scan into a range image.
    Project {
        #[arg(long)]
        scan: PathBuf,
    },
    /// Trains the base model on a sequence directory.
    TrainBase {
        /// Directory with `velodyne/` and `labels/`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Draws the per-novel-class shot frames from a pool directory.
    SampleShots {
        #[arg(long)]
        pool: PathBuf,
        /// Shots per novel class; the configured value when absent.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Extends a base model with novel heads and fine-tunes it.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Shot file written by `sample-shots`; sampled afresh when absent.
        #[arg(long)]
        shots_file: Option<PathBuf>,
        /// Named regime; replaces the configured loss flags and freeze mode.
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Writes per-point label files for every scan of a directory.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Directory with `velodyne/`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Scores predicted label files against ground truth.
    Eval {
        /// Label file or directory of label files.
        #[arg(long)]
        pred: PathBuf,
        /// Label file or directory of label files, matched by name.
        #[arg(long)]
        truth: PathBuf,
        /// Name shown in the summary table.
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        model_seeds: usize,
    },
    /// Generates the synthetic street corpus in SemanticKITTI layout.
    SynthGen,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Project { .. } => "project",
            Command::TrainBase { .. } => "train-base",
            Command::SampleShots { .. } => "sample-shots",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::SynthGen => "synth-gen",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Project { scan } => vec![scan],
            Command::TrainBase { data } => vec![data],
            Command::SampleShots { pool, .. } => vec![pool],
            Command::Finetune {
                base,
                pool,
                shots_file,
                ..
            } => {
                let mut v: Vec<&Path> = vec![base, pool];
                v.extend(shots_file.as_deref());
                v
            }
            Command::Predict { model, data } => vec![model, data],
            Command::Eval { pred, truth, .. } => vec![pred, truth],
            Command::Gradcheck { .. } | Command::SynthGen => vec![],
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ToolConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ToolConfig::load(p)?,
        None => ToolConfig::synthetic(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        if let Some(synth) = cfg.synth.as_mut() {
            synth.seed = s;
        }
    }
    let a = &cli.ablation;
    let f = &mut cfg.finetune;
    if let Some(u) = a.unbiased_ce {
        f.ce = if u {
            CeMode::Unbiased
        } else {
            CeMode::Original
        };
    }
    if let Some(kd) = a.kd {
        f.kd = match kd {
            KdArg::Off => KdMode::Off,
            KdArg::Original => KdMode::Original,
            KdArg::Unbiased => KdMode::Unbiased,
        };
    }
    if let Some(l) = a.lovasz {
        f.lovasz = l;
    }
    if let Some(fr) = a.freeze {
        f.freeze = match fr {
            FreezeArg::None => Freeze::None,
            FreezeArg::Backbone => Freeze::Backbone,
            FreezeArg::BackboneAndBaseHeads => Freeze::BackboneAndBaseHeads,
        };
    }
    if let Command::Finetune {
        regime: Some(r), ..
    } = &cli.command
    {
        let (freeze, loss) = Regime::from(*r).settings();
        f.freeze = freeze;
        f.ce = loss.ce;
        f.ce_background = loss.ce_background;
        f.kd = loss.kd;
        f.lovasz = loss.lovasz;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Label files of a path: the file itself, or `*.label` below a directory
/// (or its `labels/` subdirectory), sorted by name.
fn label_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = if path.join("labels").is_dir() {
        path.join("labels")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "label"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_label_file(path: &Path, tax: &Taxonomy) -> Result<Vec<Label>> {
    let bytes = fs::metadata(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let count = (bytes.len() / geometry::LABEL_RECORD_BYTES) as usize;
    let raw = geometry::read_labels(path, count, |id| tax.is_known_raw(id))?;
    Ok(tax.map_raw(&raw)?)
}

fn load_shots(path: &Path) -> Result<ShotSample> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

struct Run<'a> {
    cfg: &'a ToolConfig,
    tax: Taxonomy,
    out: &'a Path,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn emit(&mut self, name: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(name);
        write_file(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn emit_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.emit(name, serde_json::to_string_pretty(value)? + "\n")
    }
}

fn execute(cmd: &Command, run: &mut Run) -> Result<bool> {
    let cfg = run.cfg;
    let fingerprint = run.tax.fingerprint();
    match cmd {
        Command::Project { scan } => {
            let cloud = geometry::read_scan(scan)?;
            let proj = cfg.projection_config()?;
            let image = project(&cloud, &proj)?;
            run.emit("range_image.bin", image.to_bytes())?;
            let mut index = Vec::with_capacity(image.width() * image.height() * 4);
            for r in 0..image.height() {
                for c in 0..image.width() {
                    let i = image
                        .point_index_at(r, c)
                        .map_or(geometry::NO_POINT, |i| i as u32);
                    index.extend_from_slice(&i.to_le_bytes());
                }
            }
            run.emit("point_index.bin", index)?;
            let summary = serde_json::json!({
                "points": cloud.len(),
                "width": image.width(),
                "height": image.height(),
                "valid_pixels": image.valid_count(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            run.emit_json("projection.json", &summary)?;
        }
        Command::TrainBase { data } => {
            let dataset = Dataset::from_dir(data, &run.tax, Split::Train)?;
            info!("base training on {} frames", dataset.len());
            let (params, trace) = protocol::train_base(&dataset, &run.tax, &cfg.train_config()?)?;
            run.emit("base.ckpt", model::encode_checkpoint(&params, &fingerprint))?;
            run.emit_json("trace.json", &trace)?;
        }
        Command::SampleShots { pool, shots } => {
            let pool = Dataset::from_dir(pool, &run.tax, Split::Train)?;
            let n = shots.unwrap_or(cfg.finetune.shots);
            let sample = protocol::sample_shots(&pool, &run.tax, n, cfg.seed);
            for s in &sample.shortfalls {
                eprintln!(
                    "shortfall: class {} ({}) has {} of {} requested frames",
                    s.class,
                    run.tax.name(s.class),
                    s.available,
                    s.requested
                );
            }
            run.emit_json("shots.json", &sample)?;
        }
        Command::Finetune {
            base,
            pool,
            shots_file,
            ..
        } => {
            let base = model::load_checkpoint(base, &fingerprint)?;
            let pool = Dataset::from_dir(pool, &run.tax, Split::Train)?;
            let sample = match shots_file {
                Some(p) => {
                    let s = load_shots(p)?;
                    for c in &s.per_class {
                        for (&i, name) in c.frames.iter().zip(&c.names) {
                            match pool.frames.get(i) {
                                Some(f) if &f.name == name => {}
                                _ => bail!(
                                    "shot file does not match the pool: frame {i} should be {name}"
                                ),
                            }
                        }
                    }
                    s
                }
                None => protocol::sample_shots(&pool, &run.tax, cfg.finetune.shots, cfg.seed),
            };
            let (params, trace) =
                protocol::finetune(&base, &pool, &sample, &run.tax, &cfg.train_config()?)?;
            run.emit(
                "finetuned.ckpt",
                model::encode_checkpoint(&params, &fingerprint),
            )?;
            run.emit_json("trace.json", &trace)?;
            if shots_file.is_none() {
                run.emit_json("shots.json", &sample)?;
            }
        }
        Command::Predict { model: ckpt, data } => {
            let params = model::load_checkpoint(ckpt, &fingerprint)?;
            let proj = cfg.projection_config()?;
            let scans = protocol::scan_files(data)?;
            let labels = par::try_map_slice(&scans, |(scan, _)| {
                let cloud = geometry::read_scan(scan)?;
                let classes = protocol::predict(&params, &cloud, &proj)?;
                let raw: Vec<u32> = classes
                    .into_iter()
                    .map(|c| run.tax.class_to_raw(Some(c)).unwrap_or(0))
                    .collect();
                Ok::<_, Error>(raw)
            })?;
            for ((scan, _), raw) in scans.iter().zip(labels) {
                let stem = scan.file_stem().unwrap_or_default();
                let name = Path::new("predictions").join(stem).with_extension("label");
                let mut bytes = Vec::with_capacity(raw.len() * 4);
                for r in raw {
                    bytes.extend_from_slice(&r.to_le_bytes());
                }
                run.emit(name, bytes)?;
            }
            println!("wrote {} prediction files", scans.len());
        }
        Command::Eval {
            pred,
            truth,
            method,
        } => {
            let preds = label_files(pred)?;
            let truths = label_files(truth)?;
            if preds.len() != truths.len() {
                bail!(
                    "{} prediction files but {} ground-truth files",
                    preds.len(),
                    truths.len()
                );
            }
            let mut conf = ConfusionMatrix::new(run.tax.all_classes());
            for (p, t) in preds.iter().zip(&truths) {
                if p.file_name() != t.file_name() && preds.len() > 1 {
                    bail!("unpaired label files {} and {}", p.display(), t.display());
                }
                let truth = read_label_file(t, &run.tax)?;
                let pred: Vec<Label> = read_label_file(p, &run.tax)?
                    .into_iter()
                    .map(|l| l.or(Some(run.tax.background())))
                    .collect();
                conf.accumulate(&pred, &truth)?;
            }
            let mut report = evaluation::report(&conf, &run.tax, &cfg.eval)?;
            report.manifest = Some(manifest::FILE_NAME.into());
            print!("{}", report.summary_table(method));
            println!();
            print!("{}", report.per_class_table(method));
            run.emit("report.csv", report.to_csv())?;
            run.emit("report.json", report.to_json() + "\n")?;
        }
        Command::Gradcheck {
            instances,
            model_seeds,
        } => {
            let mut outcomes = gradcheck::loss_suite(cfg.seed, *instances)?;
            outcomes.extend(gradcheck::model_suite(cfg.seed, *model_seeds)?);
            for o in &outcomes {
                println!(
                    "{} {:<48} max rel error {:.3e} over {}",
                    if o.passed { "ok  " } else { "FAIL" },
                    o.name,
                    o.max_rel_error,
                    o.instances
                );
            }
            run.emit_json("gradcheck.json", &outcomes)?;
            return Ok(outcomes.iter().all(|o| o.passed));
        }
        Command::SynthGen => {
            let corpus = synth::generate_corpus(&cfg.corpus_config()?)?;
            for (split, frames) in corpus.splits() {
                for (i, f) in frames.iter().enumerate() {
                    let stem = format!("{i:06}");
                    run.emit(
                        Path::new(split)
                            .join("velodyne")
                            .join(&stem)
                            .with_extension("bin"),
                        f.cloud.to_bytes(),
                    )?;
                    let mut bytes = Vec::with_capacity(f.labels.len() * 4);
                    for l in &f.labels {
                        let raw = run
                            .tax
                            .class_to_raw(*l)
                            .ok_or_else(|| Error::Taxonomy(format!("class {l:?} has no raw id")))?;
                        bytes.extend_from_slice(&raw.to_le_bytes());
                    }
                    run.emit(
                        Path::new(split)
                            .join("labels")
                            .join(&stem)
                            .with_extension("label"),
                        bytes,
                    )?;
                }
                println!("{split}: {} frames", frames.len());
            }
        }
    }
    Ok(true)
}

fn main_inner(cli: Cli) -> Result<bool> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let inputs: Vec<FileDigest> = cli
        .command
        .inputs()
        .into_iter()
        .map(manifest::digest_tree)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().into(),
        args: std::env::args().skip(1).collect(),
        seed: cfg.seed,
        parallel: par::is_parallel(),
        status: Status::Started,
        config: cfg.to_toml(),
        inputs,
        outputs: vec![],
    };
    m.write(out)?;
    let mut run = Run {
        cfg: &cfg,
        tax: cfg.taxonomy()?,
        out,
        outputs: vec![],
    };
    let ok = execute(&cli.command, &mut run)?;
    m.outputs = run
        .outputs
        .iter()
        .map(|p| manifest::digest(p))
        .collect::<Result<_>>()?;
    m.status = Status::Complete;
    m.write(out)?;
    Ok(ok)
}

/// Exit codes: 1 failed check, 3 configuration, 4 I/O, 5 invalid data.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Taxonomy(_)) => 3,
        Some(Error::Io { .. }) => 4,
        Some(_) => 5,
        None if err.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
