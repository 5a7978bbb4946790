use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rswin_core::analysis::{pca_fit_project, separability_score, write_projection_csv};
use rswin_core::checkpoint::{read_meta, Checkpoint};
use rswin_core::data::{
    channel_stats, index_dataset, load_and_preprocess, synthetic_colour_dataset, write_image_folder, DatasetIndex,
    Dataset, FolderDataset, Normalization, Split,
};
use rswin_core::metrics::{write_curves_csv, Average, MetricsReport};
use rswin_core::model::Model;
use rswin_core::selftest::{self, Perturbation};
use rswin_core::training::{evaluate, softmax_rows, train, write_history, Evaluation, TrainData};
use rswin_core::{Precision, Scalar};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run_config::{NormalizationMode, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const HISTORY: &str = "history.jsonl";
pub const MANIFEST: &str = "splits.tsv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Trains a model as described by the config file and overrides, writing
/// everything under `runs_dir/name`. Returns the run directory.
pub fn cmd_train(config_path: &Path, overrides: &[String], force: bool) -> CliResult<PathBuf> {
    let cfg = RunConfig::load(config_path, overrides)?;
    cfg.validate()?;
    let index = index_dataset(&cfg.run.data_root, cfg.run.seed)?;
    if index.num_classes() != cfg.model.num_classes {
        return Err(CliError::config(format!(
            "dataset has {} classes but model.num_classes is {}",
            index.num_classes(),
            cfg.model.num_classes
        )));
    }
    if index.split_len(Split::Train) == 0 {
        return Err(CliError::data("training split is empty"));
    }
    let run_dir = cfg.run_dir();
    if run_dir.join(HISTORY).exists() && !force {
        return Err(CliError::config(format!("{} already holds a run; pass --force to overwrite", run_dir.display())));
    }
    for sub in ["checkpoints", "metrics", "analysis"] {
        create_dir(&run_dir.join(sub))?;
    }
    let resolved = run_dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()?).map_err(io_err(&resolved))?;
    index.write_manifest(&run_dir.join(MANIFEST))?;
    log::info!(
        "{} images: {} train, {} val, {} test",
        index.samples.len(),
        index.split_len(Split::Train),
        index.split_len(Split::Val),
        index.split_len(Split::Test)
    );
    match cfg.run.precision {
        Precision::F32 => train_with::<f32>(&cfg, &index, &run_dir)?,
        Precision::F64 => train_with::<f64>(&cfg, &index, &run_dir)?,
    }
    Ok(run_dir)
}

fn train_with<T: Scalar>(cfg: &RunConfig, index: &DatasetIndex, run_dir: &Path) -> CliResult<()> {
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let train_ds = index.dataset(Split::Train, h, w);
    let val_ds = index.dataset(Split::Val, h, w);
    let norm = match cfg.run.normalization {
        NormalizationMode::Fixed => Normalization::default(),
        NormalizationMode::Dataset => channel_stats(&train_ds)?,
    };
    let model = Model::<T>::new(cfg.model.clone(), cfg.run.seed)?;
    let data = TrainData {
        train: &train_ds,
        val: (!val_ds.is_empty()).then_some(&val_ds as &dyn Dataset),
        normalization: &norm,
        augment: cfg.augment.enabled.then_some(&cfg.augment),
    };
    let outcome = train(model, &data, &cfg.train)?;
    write_history(&outcome.history, &run_dir.join(HISTORY))?;

    let ckpt_dir = run_dir.join("checkpoints");
    let names = index.class_names.clone();
    if outcome.history.is_empty() {
        let mut init = Checkpoint::new(outcome.last, names.clone(), norm.clone());
        init.state = outcome.state.clone();
        init.save(&ckpt_dir.join("init.ckpt"))?;
    } else {
        let mut last = Checkpoint::new(outcome.last, names.clone(), norm.clone());
        last.state = outcome.state.clone();
        last.optimizer = Some(outcome.optimizer);
        last.save(&ckpt_dir.join("last.ckpt"))?;
        let mut best = Checkpoint::new(outcome.best.clone(), names.clone(), norm.clone());
        best.state = outcome.state.clone();
        best.save(&ckpt_dir.join("best.ckpt"))?;
    }

    let test_ds = index.dataset(Split::Test, h, w);
    if test_ds.is_empty() {
        log::warn!("test split is empty; no test metrics written");
        return Ok(());
    }
    let eval = evaluate(&outcome.best, &test_ds, &norm, cfg.run.eval_batch_size)?;
    let report = write_reports(&eval, &names, cfg.train.average, &run_dir.join("metrics").join("test"))?;
    println!("{}", report.to_text());
    Ok(())
}

/// Writes `metrics.csv`, `confusion.csv`, `curves.csv` and `report.txt`.
pub fn write_reports(eval: &Evaluation, names: &[String], average: Average, dir: &Path) -> CliResult<MetricsReport> {
    create_dir(dir)?;
    let scored = eval.scored()?;
    let report = MetricsReport::new(&scored, names, average)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    report.confusion.write_csv(&dir.join("confusion.csv"))?;
    write_curves_csv(&scored, names, &dir.join("curves.csv"))?;
    let text = dir.join("report.txt");
    fs::write(&text, report.to_text()).map_err(io_err(&text))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    One(Split),
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse::<Split>().map(Self::One).map_err(|e| e.to_string())
        }
    }
}

impl std::fmt::Display for SplitChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::One(s) => write!(f, "{s}"),
            Self::All => f.write_str("all"),
        }
    }
}

/// Where evaluation images come from.
#[derive(Clone, Debug, Default)]
pub struct DataSource {
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Directory a checkpoint belongs to: the run directory when it sits in
/// `checkpoints/`, otherwise its own folder.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        parent.to_path_buf()
    }
}

/// Resolves the split assignment: an explicit manifest, a fresh index of a
/// root drawn with the checkpoint's seed, or the manifest of the run the
/// checkpoint came from.
fn resolve_index(source: &DataSource, checkpoint: &Path, seed: u64) -> CliResult<DatasetIndex> {
    let run_dir = run_dir_of(checkpoint);
    let resolved_root = || -> CliResult<PathBuf> {
        let cfg = RunConfig::load(&run_dir.join(RESOLVED_CONFIG), &[])?;
        Ok(cfg.run.data_root)
    };
    match (&source.data_root, &source.manifest) {
        (Some(root), Some(m)) => Ok(DatasetIndex::read_manifest(root, m)?),
        (None, Some(m)) => Ok(DatasetIndex::read_manifest(&resolved_root()?, m)?),
        (Some(root), None) => {
            if !root.is_dir() {
                return Err(CliError::config(format!("dataset root {} does not exist", root.display())));
            }
            Ok(index_dataset(root, seed)?)
        }
        (None, None) => {
            let manifest = run_dir.join(MANIFEST);
            if !manifest.exists() {
                return Err(CliError::config("no --data-root or --manifest given and the checkpoint is not inside a run directory"));
            }
            Ok(DatasetIndex::read_manifest(&resolved_root()?, &manifest)?)
        }
    }
}

fn select(index: &DatasetIndex, split: SplitChoice, h: usize, w: usize) -> FolderDataset {
    match split {
        SplitChoice::One(s) => index.dataset(s, h, w),
        SplitChoice::All => FolderDataset::from_paths(
            index.samples.iter().map(|s| (index.root.join(&s.path), s.class_id)).collect(),
            h,
            w,
        ),
    }
}

/// Loads the checkpoint at its stored precision and evaluates one split.
fn evaluate_split(checkpoint: &Path, source: &DataSource, split: SplitChoice, batch: usize) -> CliResult<(Evaluation, Vec<String>)> {
    let meta = read_meta(checkpoint)?;
    let index = resolve_index(source, checkpoint, meta.state.seed)?;
    if index.class_names != meta.class_names {
        return Err(CliError::config(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            index.class_names, meta.class_names
        )));
    }
    let ds = select(&index, split, meta.model.image_height, meta.model.image_width);
    if ds.is_empty() {
        return Err(CliError::data(format!("{split} split is empty")));
    }
    let eval = match meta.dtype.as_str() {
        "f64" => {
            let c = Checkpoint::<f64>::load(checkpoint)?;
            evaluate(&c.model, &ds, &c.normalization, batch)?
        }
        _ => {
            let c = Checkpoint::<f32>::load(checkpoint)?;
            evaluate(&c.model, &ds, &c.normalization, batch)?
        }
    };
    Ok((eval, meta.class_names))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub source: DataSource,
    pub split: SplitChoice,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
    pub average: Average,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<MetricsReport> {
    let (eval, names) = evaluate_split(&args.checkpoint, &args.source, args.split, args.batch_size)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        run_dir_of(&args.checkpoint).join("metrics").join(format!("eval-{stem}-{}", args.split))
    });
    let report = write_reports(&eval, &names, args.average, &out)?;
    println!("{}", report.to_text());
    println!("mean loss: {:.6}", eval.mean_loss);
    println!("written to {}", out.display());
    Ok(report)
}

/// Classifies each image independently. One line per path on `out`; a
/// failing image produces an error line and does not stop the rest.
pub fn cmd_infer(checkpoint: &Path, images: &[PathBuf], out: &mut dyn Write) -> CliResult<usize> {
    let meta = read_meta(checkpoint)?;
    let predict: Box<dyn Fn(&Path) -> rswin_core::Result<Vec<f64>>> = match meta.dtype.as_str() {
        "f64" => {
            let c = Checkpoint::<f64>::load(checkpoint)?;
            Box::new(move |p| predict_one(&c, p))
        }
        _ => {
            let c = Checkpoint::<f32>::load(checkpoint)?;
            Box::new(move |p| predict_one(&c, p))
        }
    };
    let mut ok = 0;
    for path in images {
        let line = match predict(path) {
            Ok(probs) => {
                ok += 1;
                let best = probs.iter().enumerate().fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
                let joined: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
                format!("{}\t{}\t{}", path.display(), meta.class_names[best], joined.join(","))
            }
            Err(e) => format!("{}\terror\t{e}", path.display()),
        };
        writeln!(out, "{line}").map_err(|e| CliError::Internal(e.to_string()))?;
    }
    if ok == 0 && !images.is_empty() {
        return Err(CliError::data("no image could be classified"));
    }
    Ok(ok)
}

fn predict_one<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> rswin_core::Result<Vec<f64>> {
    let cfg = ckpt.config();
    let img = load_and_preprocess(path, cfg.image_height, cfg.image_width, &ckpt.normalization)?;
    let batch = img.cast::<T>().reshape(&[1, cfg.image_height, cfg.image_width, cfg.channels])?;
    let (logits, _) = ckpt.model.predict(&batch)?;
    Ok(softmax_rows(&logits).remove(0))
}

#[derive(Debug, Serialize)]
pub struct AnalysisSummary {
    pub samples: usize,
    pub components: usize,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub separability: f64,
}

pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub source: DataSource,
    pub split: SplitChoice,
    pub components: usize,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

/// PCA of penultimate features with a class-separability score.
pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<AnalysisSummary> {
    let (eval, names) = evaluate_split(&args.checkpoint, &args.source, args.split, args.batch_size)?;
    let pca = pca_fit_project(&eval.features, &eval.labels, args.components)?;
    let separability = separability_score(&pca)?;
    let out = args.out.clone().unwrap_or_else(|| run_dir_of(&args.checkpoint).join("analysis"));
    create_dir(&out)?;
    write_projection_csv(&pca, &names, &out.join(format!("projection-{}.csv", args.split)))?;
    let summary = AnalysisSummary {
        samples: eval.labels.len(),
        components: pca.num_components(),
        explained_ratio: pca.explained_variance.iter().map(|v| v / pca.total_variance).collect(),
        explained_variance: pca.explained_variance.clone(),
        separability,
    };
    let json = out.join(format!("pca-{}.json", args.split));
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&json, text).map_err(io_err(&json))?;
    println!("{} samples, {} components", summary.samples, summary.components);
    for (i, (v, r)) in summary.explained_variance.iter().zip(&summary.explained_ratio).enumerate() {
        println!("pc{}: variance {v:.6} ({:.2}%)", i + 1, r * 100.0);
    }
    println!("separability: {separability:.6}");
    println!("written to {}", out.display());
    Ok(summary)
}

pub fn cmd_selftest(perturbation: Perturbation) -> CliResult<()> {
    let results = selftest::run(perturbation);
    print!("{}", selftest::format_table(&results));
    if selftest::all_passed(&results) {
        Ok(())
    } else {
        let failed = results.iter().filter(|r| !r.passed).count();
        Err(CliError::Internal(format!("{failed} self-test checks failed")))
    }
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

/// Writes a class-per-folder set of solid-colour PNGs.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    if args.classes < 2 || args.per_class == 0 || args.size == 0 {
        return Err(CliError::config("synth needs at least 2 classes, 1 image per class and a positive size"));
    }
    if !(0.0..=1.0).contains(&args.noise) {
        return Err(CliError::config("noise must be in [0, 1]"));
    }
    let data = synthetic_colour_dataset(args.classes, args.per_class, args.size, args.size, args.noise, args.seed);
    let names: Vec<String> = (0..args.classes).map(|c| format!("class_{c}")).collect();
    write_image_folder(&data, &args.out, &names)?;
    println!("wrote {} images to {}", args.classes * args.per_class, args.out.display());
    Ok(())
}
