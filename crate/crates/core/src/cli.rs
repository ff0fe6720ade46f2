//! Command-line front end.
//!
//! Every command writes a run manifest next to its outputs. Output paths in
//! the manifest are relative to the manifest's directory, so the same command
//! run into two directories produces identical bytes, and `replay` can
//! re-run it in place.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::bevgrid::{GridError, GridGeometry, SemanticGrid, VOID};
use crate::geometry::{ipm_warp, GeometryError, IpmSpec};
use crate::losses::{LossConfig, MutualForm, TeacherMode};
use crate::metrics::{EvalReport, Evaluator, MetricsError};
use crate::model::{BiMapperModel, Checkpoint, ModelConfig, ModelError};
use crate::synthworld::{CameraRig, Dataset, Split, SynthError, WorldConfig};
use crate::trainer::{evaluate, prepare_inputs, train, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "BIMAPPER_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Format { .. } => EXIT_IO,
            CliError::Synth(e) => match e {
                SynthError::Io { .. } | SynthError::Format { .. } => EXIT_IO,
                SynthError::Grid(g) => grid_code(g),
                _ => EXIT_USAGE,
            },
            CliError::Grid(g) => grid_code(g),
            CliError::Geometry(_) => EXIT_USAGE,
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
                TrainError::Log(_) => EXIT_IO,
                TrainError::Model(m) => model_code(m),
                TrainError::Metrics(MetricsError::Csv(_)) => EXIT_IO,
                _ => EXIT_USAGE,
            },
            CliError::Metrics(MetricsError::Csv(_)) => EXIT_IO,
            CliError::Metrics(_) => EXIT_USAGE,
        }
    }
}

fn grid_code(e: &GridError) -> i32 {
    match e {
        GridError::Io { .. } | GridError::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Io { .. } | ModelError::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "bimapper", version, about = "Dual-stream BEV semantic mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth itself) on a dataset split.
    Eval(EvalArgs),
    /// Warp a camera image onto the ground plane.
    IpmWarp(IpmWarpArgs),
    /// Render a predicted map as a PNG.
    ExportMap(ExportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GenArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MutualArg {
    Ce,
    Kl,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TeacherArg {
    Lv,
    Gv,
    Sync,
    Async,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Log path; defaults to the checkpoint path with a `.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epoch at which the learning rate drops tenfold; defaults to 10, or
    /// the epoch count when that is smaller.
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    aml_start: usize,
    #[arg(long, value_enum, default_value_t = MutualArg::Ce)]
    mutual_loss: MutualArg,
    #[arg(long, value_enum, default_value_t = TeacherArg::Async)]
    teacher: TeacherArg,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    fuse_gv: f64,
    #[arg(long, default_value_t = 0.1)]
    fuse_lv: f64,
    #[arg(long)]
    no_asl: bool,
    #[arg(long)]
    no_aml: bool,
    /// Log the teacher-path gradient norm at every step.
    #[arg(long)]
    detach_probe: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_decay_epoch: self
                .lr_decay_epoch
                .unwrap_or(TrainConfig::default().lr_decay_epoch.min(self.epochs)),
            batch_size: self.batch_size,
            seed: self.seed,
            detach_probe: self.detach_probe,
            loss: LossConfig {
                alpha: self.alpha,
                aml_start_epoch: self.aml_start,
                mutual_form: match self.mutual_loss {
                    MutualArg::Ce => MutualForm::Ce,
                    MutualArg::Kl => MutualForm::Kl,
                    MutualArg::L2 => MutualForm::L2,
                },
                teacher_mode: match self.teacher {
                    TeacherArg::Lv => TeacherMode::LvOnly,
                    TeacherArg::Gv => TeacherMode::GvOnly,
                    TeacherArg::Sync => TeacherMode::Synchronous,
                    TeacherArg::Async => TeacherMode::Asynchronous,
                },
                ablate_asl: self.no_asl,
                ablate_aml: self.no_aml,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct IpmWarpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    cams: PathBuf,
    #[arg(long)]
    view: usize,
    /// Ground-plane extent as JSON (an IPM spec or a camera-frame sidecar).
    /// Defaults to the generator's extent.
    #[arg(long)]
    ipm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
    /// Render the ground truth instead of the prediction.
    #[arg(long)]
    gt: bool,
    /// Pixels per map cell.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Debug, Clone, Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Parsed arguments; output paths are relative to the manifest directory.
    pub args: serde_json::Value,
    /// Effective configuration after defaults.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Git-style SHA-1 of the dataset manifest the command read or wrote.
    pub dataset_hash: Option<String>,
    /// Files written, relative to the manifest directory.
    pub outputs: Vec<String>,
}

/// Git blob hash: SHA-1 over `"blob <len>\0"` followed by the content.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn dataset_hash(data: &Path) -> Result<String, CliError> {
    let path = data.join("manifest.json");
    Ok(git_blob_hash(&fs::read(&path).map_err(io_err(&path))?))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn manifest_base(command: &str) -> RunManifest {
    RunManifest {
        tool: "bimapper".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args: serde_json::Value::Null,
        config: serde_json::Value::Null,
        seed: None,
        dataset_hash: None,
        outputs: Vec::new(),
    }
}

/// Manifest path for a file output: `<stem>.run.json` beside it.
fn sidecar_manifest(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn run_gen(a: &GenArgs) -> Result<(), CliError> {
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    if a.views == 0 {
        return Err(CliError::Usage("--views must be at least 1".into()));
    }
    let cfg = WorldConfig {
        n_views: a.views,
        ..WorldConfig::default()
    };
    let ds = Dataset::generate(a.scenes, a.seed, cfg)?;
    ds.save(&a.out)?;
    let mut outputs = vec!["manifest.json".to_string()];
    outputs.extend(ds.manifest.scenes.iter().map(|s| s.dir.clone()));
    let m = RunManifest {
        args: to_json(&GenArgs {
            out: ".".into(),
            ..a.clone()
        }),
        config: to_json(&cfg),
        seed: Some(a.seed),
        dataset_hash: Some(dataset_hash(&a.out)?),
        outputs,
        ..manifest_base("gen")
    };
    write_manifest(&a.out.join("run_manifest.json"), &m)
}

fn run_train(a: &TrainArgs) -> Result<EvalReport, CliError> {
    let ds = Dataset::load(&a.data)?;
    let mut mcfg = ModelConfig::for_world(ds.config());
    mcfg.fusion = (a.fuse_gv, a.fuse_lv);
    let tcfg = a.train_config();
    tcfg.validate()?;
    let model = BiMapperModel::new(mcfg, a.seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    let mut log_bytes = Vec::new();
    let result = train(model, &ds, &tcfg, Some(&mut log_bytes));
    // keep the partial log even when training aborts
    write_bytes(&log_path, &log_bytes)?;
    let outcome = result?;
    write_bytes(&a.out, &outcome.checkpoint.to_bytes())?;

    let out_dir = a.out.parent().unwrap_or(Path::new(""));
    let rel_log = pathdiff(&log_path, out_dir);
    let m = RunManifest {
        args: to_json(&TrainArgs {
            data: absolute(&a.data),
            out: file_name(&a.out).into(),
            log: Some(rel_log.clone()),
            ..a.clone()
        }),
        config: serde_json::json!({ "model": mcfg, "train": tcfg }),
        seed: Some(a.seed),
        dataset_hash: Some(dataset_hash(&a.data)?),
        outputs: vec![file_name(&a.out), rel_log.to_string_lossy().into_owned()],
        ..manifest_base("train")
    };
    write_manifest(&sidecar_manifest(&a.out), &m)?;
    Ok(outcome.final_eval)
}

/// `target` relative to `base` when it lies inside it, else absolute.
fn pathdiff(target: &Path, base: &Path) -> PathBuf {
    let (t, b) = (absolute(target), absolute(base));
    t.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(t)
}

fn run_eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let ds = Dataset::load(&a.data)?;
    let idx: Vec<usize> = match a.split {
        SplitArg::Train => ds.split_indices(Split::Train),
        SplitArg::Val => ds.split_indices(Split::Val),
        SplitArg::All => (0..ds.frames.len()).collect(),
    };
    let res = ds.config().grid.resolution;
    let report = if a.oracle {
        let mut ev = Evaluator::new(res);
        for &i in &idx {
            ev.add(&ds.frames[i].ego_gt, &ds.frames[i].ego_gt)?;
        }
        ev.report()
    } else {
        let ckpt_path = a.ckpt.as_ref().expect("clap enforces --ckpt without --oracle");
        let ck = Checkpoint::load(ckpt_path)?;
        let expected = ModelConfig {
            fusion: ck.model.config().fusion,
            ..ModelConfig::for_world(ds.config())
        };
        if *ck.model.config() != expected {
            return Err(ModelError::ArchMismatch(format!(
                "checkpoint was built for {:?}, dataset needs {:?}",
                ck.model.config(),
                expected
            ))
            .into());
        }
        let inputs = prepare_inputs(&ck.model, &ds)?;
        let sel: Vec<_> = idx.iter().map(|&i| &inputs[i]).collect();
        evaluate(&ck.model, &sel, res)?
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_bytes(&a.report, text.as_bytes())?;
    let mut outputs = vec![file_name(&a.report)];
    if let Some(csv) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_bytes(csv, &buf)?;
        outputs.push(pathdiff(csv, a.report.parent().unwrap_or(Path::new(""))).to_string_lossy().into_owned());
    }
    let m = RunManifest {
        args: to_json(&EvalArgs {
            data: absolute(&a.data),
            ckpt: a.ckpt.as_deref().map(absolute),
            report: file_name(&a.report).into(),
            csv: a
                .csv
                .as_deref()
                .map(|c| pathdiff(c, a.report.parent().unwrap_or(Path::new("")))),
            ..a.clone()
        }),
        dataset_hash: Some(dataset_hash(&a.data)?),
        outputs,
        ..manifest_base("eval")
    };
    write_manifest(&sidecar_manifest(&a.report), &m)?;
    Ok(report)
}

fn load_ipm_spec(path: Option<&Path>) -> Result<IpmSpec, CliError> {
    let Some(path) = path else {
        return Ok(WorldConfig::default().ipm);
    };
    let bytes = fs::read(path).map_err(io_err(path))?;
    if let Ok(GridGeometry::Camera(spec)) = serde_json::from_slice::<GridGeometry>(&bytes) {
        return Ok(spec);
    }
    serde_json::from_slice::<IpmSpec>(&bytes).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn run_ipm_warp(a: &IpmWarpArgs) -> Result<(), CliError> {
    let rig = CameraRig::load(&a.cams)?;
    let view = rig.views.get(a.view).ok_or_else(|| {
        CliError::Usage(format!("view {} not in a {}-view rig", a.view, rig.len()))
    })?;
    let spec = load_ipm_spec(a.ipm.as_deref())?;
    spec.validate()?;
    let (img, _) = SemanticGrid::load(&a.image)?;
    let warped = ipm_warp(&img, &view.intrinsics, &spec)?;
    warped.save(&a.out, &GridGeometry::Camera(spec))?;
    let m = RunManifest {
        args: to_json(&IpmWarpArgs {
            image: absolute(&a.image),
            cams: absolute(&a.cams),
            ipm: a.ipm.as_deref().map(absolute),
            out: file_name(&a.out).into(),
            ..a.clone()
        }),
        config: to_json(&spec),
        outputs: vec![
            file_name(&a.out),
            file_name(&a.out.with_extension("json")),
        ],
        ..manifest_base("ipm-warp")
    };
    write_manifest(&sidecar_manifest(&a.out), &m)
}

/// RGB colour per class ID; anything else renders as VOID.
pub fn palette(class_id: u8) -> [u8; 3] {
    match class_id {
        0 => [48, 48, 48],
        1 => [255, 200, 0],
        2 => [0, 160, 255],
        3 => [230, 40, 40],
        _ => [0, 0, 0],
    }
}

/// PNG of a class map with +z pointing up.
pub fn render_map_png(grid: &SemanticGrid, scale: u32) -> Vec<u8> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let s = scale.max(1);
    let img = RgbImage::from_fn(w * s, h * s, |x, y| {
        let row = (h - 1 - y / s) as usize;
        image::Rgb(palette(grid.get((x / s) as usize, row)))
    });
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

fn run_export(a: &ExportArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let frame = ds.frames.get(a.frame).ok_or_else(|| {
        CliError::Usage(format!("frame {} not in a {}-frame dataset", a.frame, ds.frames.len()))
    })?;
    let map = if a.gt {
        frame.ego_gt.clone()
    } else {
        let ck = Checkpoint::load(&a.ckpt)?;
        let input = crate::model::FrameInput::new(frame, ds.config(), ck.model.config())?;
        let mut pred = ck.model.predict(&input)?;
        // unobserved cells carry no prediction
        for (p, &g) in pred.data_mut().iter_mut().zip(frame.ego_gt.data()) {
            if g == VOID {
                *p = VOID;
            }
        }
        pred
    };
    write_bytes(&a.out, &render_map_png(&map, a.scale))?;
    let m = RunManifest {
        args: to_json(&ExportArgs {
            ckpt: absolute(&a.ckpt),
            data: absolute(&a.data),
            out: file_name(&a.out).into(),
            ..a.clone()
        }),
        dataset_hash: Some(dataset_hash(&a.data)?),
        outputs: vec![file_name(&a.out)],
        ..manifest_base("export-map")
    };
    write_manifest(&sidecar_manifest(&a.out), &m)
}

fn parse_args<T: serde::de::DeserializeOwned>(m: &RunManifest, path: &Path) -> Result<T, CliError> {
    serde_json::from_value(m.args.clone()).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: format!("args: {e}"),
    })
}

fn run_replay(a: &ReplayArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.manifest).map_err(io_err(&a.manifest))?;
    let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| CliError::Format {
        path: a.manifest.clone(),
        message: e.to_string(),
    })?;
    let dir = a.manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let check_data = |data: &Path| -> Result<(), CliError> {
        let now = dataset_hash(data)?;
        if m.dataset_hash.as_deref() != Some(now.as_str()) {
            return Err(CliError::Usage(format!(
                "dataset {} changed since the run (hash {now})",
                data.display()
            )));
        }
        Ok(())
    };
    match m.command.as_str() {
        "gen" => {
            let g: GenArgs = parse_args(&m, &a.manifest)?;
            run_gen(&GenArgs {
                out: dir.join(g.out),
                ..g
            })
        }
        "train" => {
            let t: TrainArgs = parse_args(&m, &a.manifest)?;
            check_data(&t.data)?;
            run_train(&TrainArgs {
                out: dir.join(&t.out),
                log: t.log.as_ref().map(|l| dir.join(l)),
                ..t
            })
            .map(|_| ())
        }
        "eval" => {
            let e: EvalArgs = parse_args(&m, &a.manifest)?;
            check_data(&e.data)?;
            run_eval(&EvalArgs {
                report: dir.join(&e.report),
                csv: e.csv.as_ref().map(|c| dir.join(c)),
                ..e
            })
            .map(|_| ())
        }
        "ipm-warp" => {
            let w: IpmWarpArgs = parse_args(&m, &a.manifest)?;
            run_ipm_warp(&IpmWarpArgs {
                out: dir.join(&w.out),
                ..w
            })
        }
        "export-map" => {
            let x: ExportArgs = parse_args(&m, &a.manifest)?;
            check_data(&x.data)?;
            run_export(&ExportArgs {
                out: dir.join(&x.out),
                ..x
            })
        }
        other => Err(CliError::Usage(format!("unknown command {other:?} in manifest"))),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    init_threads()?;
    match cmd {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => {
            let r = run_train(a)?;
            eprintln!("held-out mean IoU {:.4}", r.mean_iou());
            Ok(())
        }
        Command::Eval(a) => {
            let r = run_eval(a)?;
            eprintln!("mean IoU {:.4}", r.mean_iou());
            Ok(())
        }
        Command::IpmWarp(a) => run_ipm_warp(a),
        Command::ExportMap(a) => run_export(a),
        Command::Replay(a) => run_replay(a),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(
            git_blob_hash(b"hello\n"),
            "ce013625030ba8dba906f756967f9e9ca394464a"
        );
        assert_eq!(git_blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn png_is_flipped_and_stable() {
        let mut g = SemanticGrid::filled(2, 2, 0);
        g.set(0, 1, 1);
        let a = render_map_png(&g, 1);
        assert_eq!(a, render_map_png(&g, 1));
        let img = image::load_from_memory(&a).unwrap().to_rgb8();
        // ego row 1 (farther along +z) is the top image row
        assert_eq!(img.get_pixel(0, 0).0, palette(1));
        assert_eq!(img.get_pixel(0, 1).0, palette(0));
    }

    #[test]
    fn all_background_is_single_colour() {
        let g = SemanticGrid::filled(5, 3, 0);
        let img = image::load_from_memory(&render_map_png(&g, 4)).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == palette(0)));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["bimapper", "gen", "--scenes", "0", "--out", "/nonexistent/x"]), EXIT_USAGE);
        assert_eq!(run(["bimapper", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["bimapper", "train", "--data", "x"]), EXIT_USAGE);
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("absent");
        let code = run([
            "bimapper".as_ref(),
            "eval".as_ref(),
            "--oracle".as_ref(),
            "--data".as_ref(),
            data.as_os_str(),
            "--report".as_ref(),
            dir.path().join("r.json").as_os_str(),
        ]);
        assert_eq!(code, EXIT_IO);
    }
}
