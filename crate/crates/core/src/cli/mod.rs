//! The `voxseg` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! command fails on its data.

mod config;

pub use config::{RunConfig, Task};

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use crate::augmentation::apply_augmentations;
use crate::error::{arg_err, Error, Result};
use crate::inference::{argmax_labels, ensemble_predict, sliding_window_predict, Weighting};
use crate::metrics::evaluate_set;
use crate::network::{build_unet, load_weights, save_weights, NetworkConfig};
use crate::sampling::{PatchSample, Provenance};
use crate::volume::{
    read_nifti, read_nifti_mask, resample_linear, resample_volume_nearest, restore_resolution, write_nifti,
    write_nifti_mask, IntensityKind, LabelMask, Volume3D,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "voxseg", version, about = "3D U-Net segmentation toolkit for head-and-neck MRI")]
struct Cli {
    /// Run configuration file (dotted key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// task1 (one scan) or task2 (scan, registered prior scan, two prior masks).
    #[arg(long, global = true)]
    task: Option<Task>,
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the layer table and parameter totals.
    NetInfo {
        /// Per-stage kernel edges, e.g. 3,3,3,3,1,1.
        #[arg(long, value_delimiter = ',')]
        kernel_plan: Option<Vec<usize>>,
    },
    /// Segment a volume with one model or an ensemble.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Where to write the per-case CSV.
        #[arg(long, default_value = "evaluation.csv")]
        csv: PathBuf,
    },
    /// Split patient ids into cross-validation folds.
    Folds {
        /// Text file with one patient id per line.
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Apply the augmentation policy once and save the result.
    AugmentPreview(PreviewArgs),
    /// Write a freshly initialized model (seeded) to a weight file.
    InitWeights {
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Input volumes in channel order; repeat once per channel.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Weight files; the softmax outputs of all models are averaged.
    #[arg(long)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    weighting: Option<Weighting>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    /// Image volumes in channel order; repeat once per channel.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Training iteration the schedule is evaluated at.
    #[arg(long, default_value_t = 0)]
    iter: u64,
    /// Schedule length; defaults to the configured value.
    #[arg(long)]
    total: Option<u64>,
    /// Use a fixed per-transform probability instead of the ramp.
    #[arg(long)]
    constant_p: Option<f64>,
}

enum Failure {
    Usage(String),
    Data(String),
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Prefixes a data error with the pipeline stage it came from.
fn stage<T>(name: &str, r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Data(format!("{name}: {e}")))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_DATA
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.task).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::NetInfo { kernel_plan } => {
            if let Some(plan) = kernel_plan {
                cfg.network.kernel_plan = plan;
            }
            let report = net_info(&cfg.network).map_err(usage)?;
            write!(out, "{report}").map_err(|e| Failure::Data(e.to_string()))
        }
        Command::Infer(a) => {
            if !a.weights.is_empty() {
                cfg.weights = a.weights;
            }
            if let Some(w) = a.weighting {
                cfg.window.weighting = w;
            }
            if cfg.weights.is_empty() {
                return Err(Failure::Usage("infer needs at least one --weights file".into()));
            }
            cmd_infer(&cfg, &a.inputs, &a.output)?;
            let _ = writeln!(out, "wrote {}", a.output.display());
            Ok(())
        }
        Command::Evaluate { truth, pred, csv } => cmd_evaluate(&truth, &pred, &csv, out, err),
        Command::Folds { ids, output, folds } => {
            let text = stage("reading ids", std::fs::read_to_string(&ids).map_err(Error::from))?;
            let ids: Vec<String> =
                text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
            let assignment = stage("folds", assign_folds(&ids, folds, cfg.seed))?;
            let mut csv = String::from("patient_id,fold\n");
            for (id, f) in &assignment {
                let _ = writeln!(csv, "{id},{f}");
            }
            stage("writing folds", std::fs::write(&output, csv).map_err(Error::from))?;
            let mut sizes = vec![0usize; folds];
            for (_, f) in &assignment {
                sizes[*f] += 1;
            }
            let _ = writeln!(out, "{} patients, fold sizes {sizes:?}", ids.len());
            Ok(())
        }
        Command::AugmentPreview(a) => {
            if let Some(t) = a.total {
                cfg.policy.total_iters = t;
            }
            if let Some(p) = a.constant_p {
                cfg.policy.constant_p = Some(p);
            }
            cfg.policy.validate().map_err(usage)?;
            let log = cmd_augment_preview(&cfg, &a.images, &a.mask, a.iter, &a.output_dir)?;
            write!(out, "{log}").map_err(|e| Failure::Data(e.to_string()))
        }
        Command::InitWeights { output } => {
            let model = build_unet(&cfg.network, cfg.seed).map_err(usage)?;
            stage("writing weights", save_weights(&model, &output))?;
            let _ = writeln!(out, "wrote {} ({} parameters)", output.display(), cfg.network.parameter_count());
            Ok(())
        }
    }
}

/// Layer table and parameter totals for `config` and its all-3x3x3 variant.
/// Works from the layer plan only; no weights are allocated.
pub fn net_info(config: &NetworkConfig) -> Result<String> {
    config.validate()?;
    let mut s = format!(
        "input channels {}, classes {}, base width {}, stages {}, kernel plan {:?}\n",
        config.in_channels, config.num_classes, config.base_width, config.num_stages, config.kernel_plan
    );
    let _ = writeln!(s, "{:>3}  {:<41} {:>10}", "#", "layer", "params");
    for (i, spec) in config.layer_plan().iter().enumerate() {
        let _ = writeln!(s, "{i:>3}  {spec} {:>10}", spec.param_count());
    }
    let all3 = NetworkConfig { kernel_plan: vec![3; config.num_stages], ..config.clone() };
    let _ = writeln!(s, "total parameters: {}", config.parameter_count());
    let _ = writeln!(s, "all-3x3x3 variant: {}", all3.parameter_count());
    Ok(s)
}

fn read_channels(paths: &[PathBuf], mask_channels: &[usize]) -> Result<Vec<Volume3D>> {
    let mut out = Vec::new();
    for p in paths {
        let v = read_nifti(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let start: usize = out.iter().map(Volume3D::channels).sum();
        let binary = (start..start + v.channels()).any(|c| mask_channels.contains(&c));
        out.push(if binary { v.with_kind(IntensityKind::Binary)? } else { v });
    }
    Ok(out)
}

/// Writes through a temporary sibling file so a failure never leaves a
/// partial output behind.
fn write_atomically(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.part-{}", name.to_string_lossy(), std::process::id()));
    // keep the extension so the writer picks the same compression
    let tmp = PathBuf::from(format!("{}{}", tmp.display(), extension_of(path)));
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::from(e)
    })
}

fn extension_of(path: &Path) -> &'static str {
    let s = path.to_string_lossy();
    if s.ends_with(".nii.gz") {
        ".nii.gz"
    } else if s.ends_with(".gz") {
        ".gz"
    } else {
        ".nii"
    }
}

fn cmd_infer(cfg: &RunConfig, inputs: &[PathBuf], output: &Path) -> std::result::Result<(), Failure> {
    let mask_channels = cfg.task.mask_channels();
    let volumes = stage("reading input", read_channels(inputs, &mask_channels))?;
    let resampled = stage(
        "resampling",
        volumes
            .iter()
            .map(|v| match v.kind() {
                IntensityKind::Continuous => resample_linear(v, cfg.working_spacing),
                IntensityKind::Binary => resample_volume_nearest(v, cfg.working_spacing),
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let input = stage("stacking channels", Volume3D::stack(&resampled))?;
    if input.channels() != cfg.network.in_channels {
        return Err(Failure::Usage(format!(
            "{} expects {} input channels, got {}",
            cfg.task,
            cfg.network.in_channels,
            input.channels()
        )));
    }
    let mut probs = Vec::with_capacity(cfg.weights.len());
    for w in &cfg.weights {
        let model = stage(&format!("loading weights {}", w.display()), load_weights(w, &cfg.network))?;
        probs.push(stage("sliding-window prediction", sliding_window_predict(&input, &model, &cfg.window))?);
    }
    let mean = stage("ensembling", ensemble_predict(&probs))?;
    let labels = stage("argmax", argmax_labels(&mean))?;
    let restored = stage("restoring resolution", restore_resolution(&labels, &volumes[0]))?;
    stage("writing output", write_atomically(output, |p| write_nifti_mask(&restored, p)))
}

fn case_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(String::from)
}

fn list_cases(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut cases = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(id) = case_id(&path) {
            cases.insert(id, path);
        }
    }
    Ok(cases)
}

fn cmd_evaluate(
    truth_dir: &Path,
    pred_dir: &Path,
    csv: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let truths = stage("listing truth", list_cases(truth_dir))?;
    let preds = stage("listing predictions", list_cases(pred_dir))?;
    for id in preds.keys().filter(|id| !truths.contains_key(*id)) {
        let _ = writeln!(err, "warning: prediction {id} has no ground truth, skipped");
    }
    let missing: Vec<&String> = truths.keys().filter(|id| !preds.contains_key(*id)).collect();
    if !missing.is_empty() {
        for id in &missing {
            let _ = writeln!(err, "missing prediction: {id}");
        }
        return Err(Failure::Data(format!("{} ground-truth cases have no prediction", missing.len())));
    }
    if truths.is_empty() {
        return Err(Failure::Data("no cases to evaluate".into()));
    }
    let ids: Vec<String> = truths.keys().cloned().collect();
    let read = |map: &BTreeMap<String, PathBuf>| -> Result<Vec<LabelMask>> {
        ids.iter()
            .map(|id| read_nifti_mask(&map[id]).map_err(|e| Error::Format(format!("{}: {e}", map[id].display()))))
            .collect()
    };
    let t = stage("reading truth", read(&truths))?;
    let p = stage("reading predictions", read(&preds))?;
    let report = stage("scoring", evaluate_set(&ids, &t, &p))?;
    stage("writing csv", std::fs::write(csv, report.to_csv()).map_err(Error::from))?;
    write!(out, "{}", report.table()).map_err(|e| Failure::Data(e.to_string()))?;
    let _ = writeln!(out, "{} cases, per-case metrics in {}", ids.len(), csv.display());
    Ok(())
}

/// Seeded shuffle, then round-robin into `folds` folds. Returned in input order.
pub fn assign_folds(ids: &[String], folds: usize, seed: u64) -> Result<Vec<(String, usize)>> {
    if folds == 0 || ids.len() < folds {
        return arg_err(format!("need at least {folds} patients for {folds} folds, got {}", ids.len()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return arg_err(format!("duplicate patient id `{dup}`"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut crate::seeded_rng(seed));
    let mut fold_of = vec![0; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % folds;
    }
    Ok(ids.iter().cloned().zip(fold_of).collect())
}

fn cmd_augment_preview(
    cfg: &RunConfig,
    images: &[PathBuf],
    mask: &Path,
    iter: u64,
    out_dir: &Path,
) -> std::result::Result<String, Failure> {
    let mask_channels = cfg.task.mask_channels();
    let channels = stage("reading image", read_channels(images, &mask_channels))?;
    let vol = stage("stacking channels", Volume3D::stack(&channels))?;
    let labels = stage("reading mask", read_nifti_mask(mask))?;
    if labels.dims() != vol.dims() {
        return Err(Failure::Data(format!("mask dims {:?} differ from image dims {:?}", labels.dims(), vol.dims())));
    }
    let patch = PatchSample { offset: [0; 3], data: vol.to_tensor(), mask_patch: labels, provenance: Provenance::Random };
    let mut rng = crate::seeded_rng(cfg.seed);
    let aug = stage("augmenting", apply_augmentations(&patch, &cfg.params, &cfg.policy, iter, &mut rng))?;
    stage("creating output dir", std::fs::create_dir_all(out_dir).map_err(Error::from))?;
    let image = stage("assembling", Volume3D::from_tensor(aug.patch.data, vol.spacing(), IntensityKind::Continuous))?;
    stage("writing image", write_nifti(&image, out_dir.join("image.nii.gz")))?;
    let mask_out = stage("assembling", aug.patch.mask_patch.with_spacing(vol.spacing()))?;
    stage("writing mask", write_nifti_mask(&mask_out, out_dir.join("mask.nii.gz")))?;
    let mut log = String::new();
    let mode = if cfg.policy.constant_p.is_some() { "constant" } else { "scheduled" };
    let _ = writeln!(log, "iteration {iter} of {}", cfg.policy.total_iters);
    let _ = writeln!(log, "probability {:.4} ({mode})", aug.probability);
    let _ = writeln!(log, "seed {}", cfg.seed);
    for t in &aug.applied {
        let _ = writeln!(log, "applied {t}");
    }
    if aug.applied.is_empty() {
        let _ = writeln!(log, "no transform drawn");
    }
    stage("writing log", std::fs::write(out_dir.join("transforms.log"), &log).map_err(Error::from))?;
    Ok(log)
}
