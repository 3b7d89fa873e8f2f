//! Two-stage transfer learning: base training, shot sampling, fine-tuning
//! with head extension, and prediction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{self, ConfusionMatrix, EvalOptions, EvalReport};
use crate::geometry::{self, backproject, project, PointCloud, ProjectionConfig};
use crate::losses::{loss_base, loss_finetune, softmax, FinetuneLoss};
use crate::model::{
    self, extend_heads, ArchConfig, Freeze, LrDecay, ModelParams, OptimizerState, ParamGrads,
    Version,
};
use crate::par;
use crate::taxonomy::{class_weights, count_labels, ClassId, ClassWeights, Label, Taxonomy};

/// One labelled sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Source reference: a file stem or a synthetic scene id.
    pub name: String,
    pub cloud: PointCloud,
    pub labels: Vec<Label>,
}

impl Frame {
    pub fn contains(&self, c: ClassId) -> bool {
        self.labels.contains(&Some(c))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub split: Split,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, split: Split) -> Self {
        Dataset { frames, split }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads `<dir>/velodyne/*.bin` with matching `<dir>/labels/*.label`,
    /// ordered by file name.
    pub fn from_dir(dir: impl AsRef<Path>, tax: &Taxonomy, split: Split) -> Result<Self> {
        let scans = scan_files(dir.as_ref())?;
        let frames = par::try_map_slice(&scans, |(scan, label)| {
            let cloud = geometry::read_scan(scan)?;
            let raw = geometry::read_labels(label, cloud.len(), |id| tax.is_known_raw(id))?;
            Ok::<_, Error>(Frame {
                name: scan
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                labels: tax.map_raw(&raw)?,
                cloud,
            })
        })?;
        Ok(Dataset { frames, split })
    }
}

/// Sorted `(scan, label)` path pairs of a sequence directory.
pub fn scan_files(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let velodyne = dir.join("velodyne");
    let entries = fs::read_dir(&velodyne).map_err(|e| Error::io(&velodyne, e))?;
    let mut scans: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    scans.sort();
    Ok(scans
        .into_iter()
        .map(|s| {
            let stem = s.file_stem().unwrap_or_default().to_owned();
            let label = dir.join("labels").join(stem).with_extension("label");
            (s, label)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassShots {
    pub class: ClassId,
    /// Indices into the pool dataset, ascending.
    pub frames: Vec<usize>,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: ClassId,
    pub requested: usize,
    pub available: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSample {
    pub seed: u64,
    pub shots: usize,
    pub per_class: Vec<ClassShots>,
    pub shortfalls: Vec<Shortfall>,
}

impl ShotSample {
    /// Distinct frames across all classes, ascending.
    pub fn frame_indices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .per_class
            .iter()
            .flat_map(|c| c.frames.iter().copied())
            .collect();
        set.into_iter().collect()
    }
}

/// Draws `n` frames per novel class, uniformly without replacement among the
/// frames that contain the class. Each class has its own seeded stream.
pub fn sample_shots(pool: &Dataset, tax: &Taxonomy, n: usize, seed: u64) -> ShotSample {
    let mut per_class = Vec::new();
    let mut shortfalls = Vec::new();
    for &class in tax.novel() {
        let candidates: Vec<usize> = (0..pool.len())
            .filter(|&i| pool.frames[i].contains(class))
            .collect();
        let mut frames = if candidates.len() <= n {
            if candidates.len() < n {
                warn!(
                    "class {} ({}): requested {n} shots, only {} frames available",
                    class,
                    tax.name(class),
                    candidates.len()
                );
                shortfalls.push(Shortfall {
                    class,
                    requested: n,
                    available: candidates.len(),
                });
            }
            candidates
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(class.0 as u64);
            rand::seq::index::sample(&mut rng, candidates.len(), n)
                .into_iter()
                .map(|k| candidates[k])
                .collect()
        };
        frames.sort_unstable();
        per_class.push(ClassShots {
            class,
            names: frames
                .iter()
                .map(|&i| pool.frames[i].name.clone())
                .collect(),
            frames,
        });
    }
    ShotSample {
        seed,
        shots: n,
        per_class,
        shortfalls,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay: LrDecay,
    pub batch_size: usize,
    pub freeze: Freeze,
}

impl StageConfig {
    pub fn new(epochs: usize) -> Self {
        StageConfig {
            epochs,
            lr: 0.01,
            momentum: 0.9,
            decay: LrDecay::Multiplicative(0.01),
            batch_size: 1,
            freeze: Freeze::None,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub projection: ProjectionConfig,
    pub base: StageConfig,
    pub finetune: StageConfig,
    pub finetune_loss: FinetuneLoss,
    pub frequency_floor: f64,
}

/// Named fine-tuning regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Unbiased CE + unbiased KD + Lovász, full backbone update.
    Ours,
    /// Frozen backbone, plain CE.
    Gfss,
    /// Trainable backbone, plain CE.
    GfssDyn,
    /// Plain CE plus plain distillation.
    Lwf,
    /// Plain CE only.
    NaiveCe,
}

impl Regime {
    pub fn settings(self) -> (Freeze, FinetuneLoss) {
        let plain = FinetuneLoss {
            lovasz: true,
            ..FinetuneLoss::naive_ce()
        };
        match self {
            Regime::Ours => (Freeze::None, FinetuneLoss::default()),
            Regime::Gfss => (Freeze::Backbone, plain),
            Regime::GfssDyn => (Freeze::None, plain),
            Regime::Lwf => (Freeze::None, FinetuneLoss::lwf()),
            Regime::NaiveCe => (Freeze::None, FinetuneLoss::naive_ce()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Ours => "ours",
            Regime::Gfss => "gfss",
            Regime::GfssDyn => "gfss-dyn",
            Regime::Lwf => "lwf",
            Regime::NaiveCe => "naive-ce",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's frames.
    pub loss: f64,
    /// Mean cross-entropy term.
    pub ce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
}

/// A frame projected and featurized once, with per-element labels.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub features: Array2<f64>,
    pub labels: Vec<Label>,
}

/// Projects a frame and labels each valid pixel with its stored point's label.
pub fn prepare(frame: &Frame, proj: &ProjectionConfig, arch: &ArchConfig) -> Result<PreparedFrame> {
    if frame.labels.len() != frame.cloud.len() {
        return Err(Error::LengthMismatch {
            expected: frame.cloud.len(),
            found: frame.labels.len(),
        });
    }
    let image = project(&frame.cloud, proj)?;
    let labels = image
        .element_points()
        .into_iter()
        .map(|i| frame.labels[i])
        .collect();
    Ok(PreparedFrame {
        features: model::features(arch, &image),
        labels,
    })
}

fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct FrameStep {
    loss: f64,
    ce: f64,
    grads: ParamGrads,
}

/// Shared epoch loop: `step_fn` turns one prepared frame into a loss and
/// parameter gradients; updates are applied serially in shuffled order.
fn run_stage<F>(
    params: &mut ModelParams,
    frames: &[PreparedFrame],
    stage: &StageConfig,
    seed: u64,
    stage_tag: u64,
    names: &[String],
    step_fn: F,
) -> Result<TrainTrace>
where
    F: Fn(&ModelParams, &PreparedFrame) -> Result<FrameStep> + Sync + Send,
{
    if stage.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = OptimizerState::new(params, stage.lr, stage.momentum, stage.decay)?;
    let mut trace = TrainTrace::default();
    for epoch in 0..stage.epochs {
        let order = epoch_order(frames.len(), seed, stage_tag, epoch);
        let (mut loss_sum, mut ce_sum) = (0.0, 0.0);
        let lr = opt.lr;
        for batch in order.chunks(stage.batch_size) {
            let current: &ModelParams = params;
            let results = par::map_slice(batch, |&i| step_fn(current, &frames[i]));
            let mut total = ParamGrads::zeros_like(params);
            for (&i, r) in batch.iter().zip(results) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFiniteValue {
                        what: "loss",
                        context: format!("epoch {epoch}, frame {}", names[i]),
                    });
                }
                loss_sum += r.loss;
                ce_sum += r.ce;
                total.add_assign(&r.grads);
            }
            total.scale(1.0 / batch.len() as f64);
            model::step(params, &mut opt, &total, stage.freeze)?;
        }
        let n = frames.len().max(1) as f64;
        trace.epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / n,
            ce: ce_sum / n,
        });
        opt.end_epoch();
    }
    Ok(trace)
}

fn stage_weights(
    frames: &[PreparedFrame],
    classes: &[ClassId],
    floor: f64,
) -> Result<ClassWeights> {
    let counts = count_labels(classes, frames.iter().flat_map(|f| f.labels.iter()));
    class_weights(&counts, floor)
}

/// Trains the base model on `{u} ∪ C_b`; novel labels are folded into the
/// background before anything else touches them.
pub fn train_base(
    dataset: &Dataset,
    tax: &Taxonomy,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    if dataset.is_empty() {
        return Err(Error::Empty("base dataset"));
    }
    let classes = tax.base_stage_classes();
    let mut params = model::init(cfg.seed, &cfg.arch, &classes)?;
    let frames = par::try_map_slice(&dataset.frames, |f| {
        let remapped = Frame {
            labels: tax.remap_for_base(&f.labels)?,
            ..f.clone()
        };
        prepare(&remapped, &cfg.projection, &cfg.arch)
    })?;
    let weights = stage_weights(&frames, &classes, cfg.frequency_floor)?;
    let names: Vec<String> = dataset.frames.iter().map(|f| f.name.clone()).collect();
    let trace = run_stage(
        &mut params,
        &frames,
        &cfg.base,
        cfg.seed,
        1,
        &names,
        |p, f| {
            let (logits, act) = p.forward_features(f.features.clone())?;
            let probs = softmax(&logits);
            let loss = loss_base(&probs, &f.labels, &weights)?;
            Ok(FrameStep {
                loss: loss.value,
                ce: loss.term("ce").unwrap_or(0.0),
                grads: p.backward(&act, &loss.grad)?,
            })
        },
    )?;
    Ok((params, trace))
}

/// Extends the base model with novel heads and fine-tunes it on the shot
/// frames, with the frozen base model as teacher.
pub fn finetune(
    base: &ModelParams,
    pool: &Dataset,
    shots: &ShotSample,
    tax: &Taxonomy,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    if base.version != Version::Base {
        return Err(Error::Model(
            "fine-tuning needs a base-version model".into(),
        ));
    }
    let indices = shots.frame_indices();
    if indices.is_empty() {
        return Err(Error::Empty("shot set"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::Config(format!(
            "shot frame {i} outside pool of {}",
            pool.len()
        )));
    }
    if !cfg.finetune_loss.any_enabled() {
        return Err(Error::NoLossTerms);
    }
    let mut params = extend_heads(base, tax.novel(), cfg.seed.wrapping_add(1))?;
    let selected: Vec<&Frame> = indices.iter().map(|&i| &pool.frames[i]).collect();
    let frames = par::try_map_slice(&selected, |f| {
        let remapped = Frame {
            labels: tax.remap_for_novel(&f.labels)?,
            ..(*f).clone()
        };
        prepare(&remapped, &cfg.projection, &cfg.arch)
    })?;
    let weights = stage_weights(&frames, &tax.novel_stage_classes(), cfg.frequency_floor)?;
    let names: Vec<String> = selected.iter().map(|f| f.name.clone()).collect();
    let flags = cfg.finetune_loss;
    let trace = run_stage(
        &mut params,
        &frames,
        &cfg.finetune,
        cfg.seed,
        2,
        &names,
        |p, f| {
            let teacher = softmax(&base.forward_features(f.features.clone())?.0);
            let (logits, act) = p.forward_features(f.features.clone())?;
            let student = softmax(&logits);
            let loss = loss_finetune(&student, &teacher, &f.labels, &weights, tax, &flags)?;
            Ok(FrameStep {
                loss: loss.value,
                ce: loss.term("ce").unwrap_or(0.0),
                grads: p.backward(&act, &loss.grad)?,
            })
        },
    )?;
    Ok((params, trace))
}

/// Per-row argmax; ties go to the lowest column.
pub fn argmax_rows(values: &Array2<f64>) -> Vec<usize> {
    values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-point class prediction over every head of the model.
pub fn predict(
    params: &ModelParams,
    cloud: &PointCloud,
    proj: &ProjectionConfig,
) -> Result<Vec<ClassId>> {
    let image = project(cloud, proj)?;
    let logits = params.forward(&image)?;
    let best = argmax_rows(&logits.values);
    let mut grid: Array2<Option<ClassId>> = Array2::from_elem((proj.height, proj.width), None);
    for (px, k) in image.valid_pixels().zip(best) {
        grid[(px / proj.width, px % proj.width)] = Some(logits.class_order[k]);
    }
    backproject(&grid, &image, cloud, proj)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or(Error::ZeroRange { index: i }))
        .collect()
}

/// Confusion matrix of a model over a dataset; frames are evaluated
/// concurrently and merged in order.
pub fn confusion(
    params: &ModelParams,
    dataset: &Dataset,
    tax: &Taxonomy,
    proj: &ProjectionConfig,
) -> Result<ConfusionMatrix> {
    let per_frame = par::try_map_slice(&dataset.frames, |f| {
        let pred: Vec<Label> = predict(params, &f.cloud, proj)?
            .into_iter()
            .map(Some)
            .collect();
        let mut m = ConfusionMatrix::new(tax.all_classes());
        m.accumulate(&pred, &f.labels)?;
        Ok::<_, Error>(m)
    })?;
    let mut total = ConfusionMatrix::new(tax.all_classes());
    for m in &per_frame {
        total.merge(m)?;
    }
    Ok(total)
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    tax: &Taxonomy,
    proj: &ProjectionConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluation::report(&confusion(params, dataset, tax, proj)?, tax, opts)
}

/// Outcome of one base run followed by several fine-tuning regimes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeComparison {
    pub seed: u64,
    pub base: EvalReport,
    pub regimes: Vec<(Regime, EvalReport)>,
}

/// Trains one base model, samples shots, fine-tunes under each regime and
/// evaluates everything on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn compare_regimes(
    base_data: &Dataset,
    pool: &Dataset,
    eval: &Dataset,
    tax: &Taxonomy,
    cfg: &TrainConfig,
    shots: usize,
    regimes: &[Regime],
    opts: &EvalOptions,
) -> Result<RegimeComparison> {
    let (base, _) = train_base(base_data, tax, cfg)?;
    let sample = sample_shots(pool, tax, shots, cfg.seed);
    let base_report = evaluate(&base, eval, tax, &cfg.projection, opts)?;
    let mut out = Vec::new();
    for &r in regimes {
        let (freeze, loss) = r.settings();
        let mut c = cfg.clone();
        c.finetune.freeze = freeze;
        c.finetune_loss = loss;
        let (model, _) = finetune(&base, pool, &sample, tax, &c)?;
        out.push((r, evaluate(&model, eval, tax, &cfg.projection, opts)?));
    }
    Ok(RegimeComparison {
        seed: cfg.seed,
        base: base_report,
        regimes: out,
    })
}
