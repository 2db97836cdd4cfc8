//! File-level operations behind the command-line tool: configuration
//! loading with dotted overrides, and the gen / train / infer / eval /
//! ablate steps with their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cpm::gate_csv;
use crate::decoder::{decode, read_detections, write_detections, DecodeMaps, Detection};
use crate::evaluator::{evaluate, EvalError, EvalReport, DEFAULT_IOU};
use crate::netops::{load_checkpoint, NetError, Tensor};
use crate::par::Executor;
use crate::synthdata::{generate_dataset, raster_path, read_dataset, write_dataset, ConfigError, Dataset, DatasetError, GenerationError};
use crate::trainer::{ablate, ablation_csv, ground_truth, predict, train, AblationRow, RunRecord, TrainConfig, TrainError};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("loss diverged at step {step}: {component} is not finite")]
    Diverged { step: usize, component: String },
    #[error(transparent)]
    Net(NetError),
    #[error("{0}")]
    Detections(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 2 configuration, 3 input/output, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Generation(_) | Self::Eval(_) => 2,
            Self::Net(NetError::Io(_) | NetError::Format(_)) => 3,
            Self::Net(_) => 2,
            Self::Dataset(_) | Self::Detections(_) | Self::Io { .. } => 3,
            Self::Diverged { .. } => 4,
        }
    }
}

impl From<NetError> for PipelineError {
    fn from(e: NetError) -> Self {
        Self::Net(e)
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Self::Config(c),
            TrainError::EmptyDataset => Self::Config(ConfigError::new("data", "training set is empty")),
            TrainError::Diverged { step, component } => Self::Diverged { step, component },
            TrainError::Net(n) => Self::Net(n),
            TrainError::Io { path, source } => Self::Io { path, source },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Applies `key=value` to `doc`. The dotted key must already exist; the value
/// is read as JSON when it parses, otherwise as a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(assignment, "override must look like key=value"))?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| ConfigError::new(key, "unknown configuration key"))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn from_value(doc: Value) -> Result<TrainConfig, ConfigError> {
    serde_json::from_value(doc).map_err(|e| ConfigError::new("config", e.to_string()))
}

/// Defaults, then the optional JSON file, then the overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, PipelineError> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?;
            from_value(doc)?
        }
        None => TrainConfig::default(),
    };
    let mut doc = serde_json::to_value(&base).expect("serializable config");
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg = from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 over the scene file followed by its raster sidecar, as hex.
pub fn dataset_digest(path: &Path) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    for p in [path.to_path_buf(), raster_path(path)] {
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct GenOutput {
    pub path: PathBuf,
    pub scenes: usize,
    pub digest: String,
}

/// Writes `corpus.scenes` scenes to `out/dataset.jsonl` (plus sidecar).
pub fn run_gen(cfg: &TrainConfig, out: &Path, exec: &Executor) -> Result<GenOutput, PipelineError> {
    cfg.data.validate()?;
    let dataset = generate_dataset(&cfg.data, cfg.corpus.scenes, exec)?;
    create_dir(out)?;
    let path = out.join(DATASET_FILE);
    write_dataset(&dataset, &path)?;
    Ok(GenOutput {
        digest: dataset_digest(&path)?,
        scenes: dataset.len(),
        path,
    })
}

/// Reads a dataset and checks it against the data section of `cfg`.
pub fn load_dataset(cfg: &TrainConfig, path: &Path) -> Result<Dataset, PipelineError> {
    let dataset = read_dataset(path)?;
    if dataset.config != cfg.data {
        return Err(ConfigError::new(
            "data",
            format!("{} was generated with a different data configuration", path.display()),
        )
        .into());
    }
    Ok(dataset)
}

/// Trains and writes `config.json`, `losses.csv` and checkpoints into `out`.
pub fn run_train(cfg: &TrainConfig, data: &Path, out: &Path, exec: &Executor) -> Result<RunRecord, PipelineError> {
    let dataset = load_dataset(cfg, data)?;
    create_dir(out)?;
    write_file(
        &out.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg).expect("serializable config") + "\n",
    )?;
    let record = train(cfg, &dataset, Some(out), exec)?;
    write_file(&out.join(LOSSES_FILE), record.losses_csv())?;
    Ok(record)
}

struct Prediction {
    maps: DecodeMaps,
    gate: Option<Tensor>,
}

/// 8-bit binary graymap of one channel, value `round(255·p)`.
pub fn pgm(plane: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8));
    out
}

fn dump_scene(dir: &Path, scene: usize, p: &Prediction) -> Result<(), PipelineError> {
    let (h, w) = (p.maps.hm_ho.shape()[1], p.maps.hm_ho.shape()[2]);
    let n = h * w;
    let k1 = p.maps.hm_ho.shape()[0];
    let mut planes: Vec<(String, &[f64])> = vec![("h".into(), &p.maps.hm_ho.data()[..n])];
    for k in 1..k1 {
        planes.push((format!("o{}", k - 1), &p.maps.hm_ho.data()[k * n..(k + 1) * n]));
    }
    for v in 0..p.maps.hm_i.shape()[0] {
        planes.push((format!("i{v}"), &p.maps.hm_i.data()[v * n..(v + 1) * n]));
    }
    for (name, plane) in planes {
        write_file(&dir.join(format!("scene_{scene:04}_{name}.pgm")), pgm(plane, h, w))?;
    }
    if let Some(gate) = &p.gate {
        write_file(&dir.join(format!("scene_{scene:04}_adjacency.csv")), gate_csv(gate))?;
    }
    Ok(())
}

/// Decodes every scene and writes `out/detections.jsonl`. With `dump`,
/// per-scene heatmap graymaps (and the CPM gate as CSV) go to
/// `out/heatmaps`.
pub fn run_infer(
    cfg: &TrainConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    dump: bool,
    exec: &Executor,
) -> Result<Vec<Vec<Detection>>, PipelineError> {
    let dataset = load_dataset(cfg, data)?;
    let store = load_checkpoint(checkpoint)?;
    let preds = exec
        .map(&dataset.images, |img| predict(cfg, &store, &img.to_tensor()).map(|(maps, gate)| Prediction { maps, gate }))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let dets: Vec<Vec<Detection>> = preds
        .iter()
        .map(|p| decode(&p.maps, &dataset.config.grid, &cfg.decode))
        .collect();
    create_dir(out)?;
    let path = out.join(DETECTIONS_FILE);
    write_detections(&path, &dets).map_err(io_err(&path))?;
    if dump {
        let dir = out.join("heatmaps");
        create_dir(&dir)?;
        for (i, p) in preds.iter().enumerate() {
            dump_scene(&dir, i, p)?;
        }
    }
    Ok(dets)
}

/// Scores a detections file against a dataset and writes `out/report.csv`.
pub fn run_eval(
    cfg: &TrainConfig,
    detections: &Path,
    data: &Path,
    out: &Path,
) -> Result<EvalReport, PipelineError> {
    let dataset = load_dataset(cfg, data)?;
    let dets = read_detections(detections).map_err(PipelineError::Detections)?;
    let report = evaluate(&dets, &ground_truth(&dataset), dataset.config.num_verbs, DEFAULT_IOU)?;
    create_dir(out)?;
    write_file(&out.join(REPORT_FILE), report.to_csv())?;
    Ok(report)
}

/// Trains every wiring on all but the last `corpus.heldout` scenes and
/// writes `out/report.csv`.
pub fn run_ablate(cfg: &TrainConfig, data: &Path, out: &Path, exec: &Executor) -> Result<Vec<AblationRow>, PipelineError> {
    let dataset = load_dataset(cfg, data)?;
    let held = cfg.corpus.heldout.min(dataset.len());
    let split = dataset.len() - held;
    let rows = ablate(cfg, &dataset.subset(0..split), &dataset.subset(split..dataset.len()), exec)?;
    create_dir(out)?;
    write_file(
        &out.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg).expect("serializable config") + "\n",
    )?;
    write_file(&out.join(REPORT_FILE), ablation_csv(&rows))?;
    Ok(rows)
}
