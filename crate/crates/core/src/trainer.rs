//! Training loop, inference over a dataset, and the wiring ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig, DecodeMaps, Detection};
use crate::evaluator::{evaluate, EvalReport, GtTriplet, DEFAULT_IOU};
use crate::frame::{build_params, forward, FrameConfig, HeadOutputs, ModelDims};
use crate::loss::{focal_loss, masked_l1, record_total, FocalHyper, LossBreakdown, LossVars, DEFAULT_LAMBDA};
use crate::netops::{save_checkpoint, AdamConfig, NetError, ParamStore, Tape, Tensor};
use crate::par::Executor;
use crate::synthdata::{encode_targets, ConfigError, DataConfig, Dataset, TargetMaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f64,
    /// Steps at which the rate is multiplied by `lr_drop_factor`. `None`
    /// places them at 90/140 and 120/140 of the run.
    pub lr_drop_steps: Option<Vec<usize>>,
    pub lr_drop_factor: f64,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 2000,
            lr: 5e-4,
            lr_drop_steps: None,
            lr_drop_factor: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub focal: FocalHyper,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            focal: FocalHyper::default(),
        }
    }
}

/// Corpus sizes used by `gen` and `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scenes: usize,
    /// Trailing scenes held out from training in the ablation.
    pub heldout: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            heldout: 50,
        }
    }
}

/// The complete run configuration, one JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub frame: FrameConfig,
    pub train: TrainOptions,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub corpus: CorpusConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate()?;
        self.frame.validate()?;
        ModelDims::from(&self.data).backbone_strides()?;
        let t = &self.train;
        if t.total_steps == 0 {
            return Err(ConfigError::new("train.total_steps", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(ConfigError::new("train.batch_size", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(ConfigError::new("train.lr", "must be finite and non-negative"));
        }
        if let Some(d) = &t.lr_drop_steps {
            if d.windows(2).any(|w| w[0] >= w[1]) || d.iter().any(|&s| s == 0 || s >= t.total_steps) {
                return Err(ConfigError::new(
                    "train.lr_drop_steps",
                    "must be strictly ascending and inside 1..total_steps",
                ));
            }
        }
        if !self.loss.lambda.is_finite() || self.loss.lambda < 0.0 {
            return Err(ConfigError::new("loss.lambda", "must be finite and non-negative"));
        }
        if self.loss.focal.alpha <= 0.0 || self.loss.focal.beta <= 0.0 {
            return Err(ConfigError::new("loss.focal", "alpha and beta must be positive"));
        }
        if self.decode.top_t == 0 {
            return Err(ConfigError::new("decode.top_t", "must be at least 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::from(&self.data)
    }

    pub fn drop_steps(&self) -> Vec<usize> {
        let total = self.train.total_steps;
        match &self.train.lr_drop_steps {
            Some(d) => d.clone(),
            None => {
                let mut d: Vec<usize> = [0.643, 0.857]
                    .iter()
                    .map(|r| (r * total as f64).floor() as usize)
                    .filter(|&s| s >= 1 && s < total)
                    .collect();
                d.dedup();
                d
            }
        }
    }

    /// Rate in effect for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.drop_steps().iter().filter(|&&d| d <= step).count();
        self.train.lr * self.train.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged at step {step}: {component} is not finite")]
    Diverged { step: usize, component: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dataset index of the `j`-th scene of batch `step`.
///
/// Scenes are consumed as a stream of seeded per-epoch permutations, so the
/// batch at any step is a pure function of `(seed, step)` and resuming from a
/// checkpoint replays the same order.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, len: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let pos = step * batch_size + j;
            let epoch = pos / len;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[pos % len]
        })
        .collect()
}

/// Loss of one scene recorded on `tape`, returning the total's handle.
pub fn scene_objective(
    tape: &mut Tape,
    out: &HeadOutputs,
    targets: &TargetMaps,
    loss: &LossConfig,
) -> Result<(crate::netops::Var, LossBreakdown), NetError> {
    let hm_ho_gt = targets.hm_ho();
    let vars = LossVars {
        l_ho: focal_loss(tape, out.hm_ho, &hm_ho_gt, &loss.focal)?,
        l_i: focal_loss(tape, out.hm_i, &targets.hm_i, &loss.focal)?,
        l_dh: masked_l1(tape, out.f_dh, &targets.disp.channel_slice(0, 2), &targets.disp_mask)?,
        l_do: masked_l1(tape, out.f_do, &targets.disp.channel_slice(2, 2), &targets.disp_mask)?,
        l_wh: masked_l1(tape, out.f_wh, &targets.wh, &targets.reg_mask)?,
        l_off: masked_l1(tape, out.f_off, &targets.off, &targets.reg_mask)?,
    };
    let n_pos = [&hm_ho_gt, &targets.hm_i]
        .iter()
        .map(|t| t.data().iter().filter(|&&y| y == 1.0).count())
        .sum();
    record_total(tape, &vars, loss.lambda, n_pos)
}

/// Loss and parameter gradients for one scene.
pub fn scene_gradients(
    cfg: &TrainConfig,
    store: &ParamStore,
    image: &Tensor,
    targets: &TargetMaps,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>), NetError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, &cfg.frame, &cfg.dims(), image)?;
    let (total, breakdown) = scene_objective(&mut tape, &out, targets, &cfg.loss)?;
    let grads = tape.backward(total)?;
    let mut by_name = grads.into_param_grads();
    // Parameters the wiring never reads still need a (zero) gradient.
    for name in store.names() {
        by_name
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(store.value(name).expect("listed").shape()));
    }
    Ok((breakdown, by_name))
}

/// Batch-mean loss and gradient at `step`, reduced in batch order.
pub fn batch_step(
    cfg: &TrainConfig,
    store: &ParamStore,
    images: &[Tensor],
    targets: &[TargetMaps],
    step: usize,
    exec: &Executor,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>), NetError> {
    let idx = batch_indices(cfg.train.seed, step, cfg.train.batch_size, images.len());
    let results = exec.map(&idx, |&i| scene_gradients(cfg, store, &images[i], &targets[i]));
    let mut parts = Vec::with_capacity(results.len());
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (b, g) = r?;
        parts.push(b);
        for (name, t) in g {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    sum.insert(name, t);
                }
            }
        }
    }
    let scale = 1.0 / idx.len() as f64;
    for t in sum.values_mut() {
        t.scale(scale);
    }
    Ok((LossBreakdown::mean(&parts), sum))
}

pub struct RunRecord {
    pub config: TrainConfig,
    /// Batch loss before each executed update.
    pub history: Vec<LossBreakdown>,
    pub params: ParamStore,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn losses_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (s, b) in self.history.iter().enumerate() {
            writeln!(out, "{}", b.csv_row(s as u64)).expect("string write");
        }
        out
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.bin"))
}

/// Encoded targets and input tensors for every scene.
pub fn prepare(dataset: &Dataset, exec: &Executor) -> (Vec<Tensor>, Vec<TargetMaps>) {
    let images = exec.map(&dataset.images, |img| img.to_tensor());
    let targets = exec.map(&dataset.scenes, |s| encode_targets(s, &dataset.config));
    (images, targets)
}

/// Trains from freshly initialized parameters. With `run_dir`, checkpoints
/// are written under `run_dir/checkpoints`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
    exec: &Executor,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    let store = build_params(&cfg.frame, &cfg.dims(), cfg.train.seed)?;
    train_from(cfg, dataset, store, 0, run_dir, exec)
}

/// Continues training `store` from 0-based step `start` up to
/// `cfg.train.total_steps`.
pub fn train_from(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut store: ParamStore,
    start: usize,
    run_dir: Option<&Path>,
    exec: &Executor,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let began = Instant::now();
    let (images, targets) = prepare(dataset, exec);
    let total = cfg.train.total_steps;
    let mut history = Vec::with_capacity(total.saturating_sub(start));
    let mut final_checkpoint = None;
    if let Some(dir) = run_dir {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(io_err(&ck))?;
    }
    for step in start..total {
        let (breakdown, grads) = batch_step(cfg, &store, &images, &targets, step, exec)?;
        if let Some(component) = breakdown.non_finite() {
            return Err(TrainError::Diverged {
                step,
                component: component.to_string(),
            });
        }
        history.push(breakdown);
        store.accumulate(&grads)?;
        store.adam_step(&AdamConfig::with_lr(cfg.lr_at(step)))?;
        let done = step + 1;
        let periodic = cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0;
        if let Some(dir) = run_dir {
            if periodic || done == total {
                let path = checkpoint_path(dir, done);
                save_checkpoint(&store, &path)?;
                final_checkpoint = Some(path);
            }
        }
    }
    Ok(RunRecord {
        config: cfg.clone(),
        history,
        params: store,
        final_checkpoint,
        wall_clock: began.elapsed(),
    })
}

/// Mean per-scene loss over the whole dataset at `store`.
pub fn dataset_loss(
    cfg: &TrainConfig,
    store: &ParamStore,
    dataset: &Dataset,
    exec: &Executor,
) -> Result<LossBreakdown, NetError> {
    let (images, targets) = prepare(dataset, exec);
    let idx: Vec<usize> = (0..images.len()).collect();
    let parts = exec
        .map(&idx, |&i| {
            let mut tape = Tape::new();
            let out = forward(&mut tape, store, &cfg.frame, &cfg.dims(), &images[i])?;
            scene_objective(&mut tape, &out, &targets[i], &cfg.loss).map(|(_, b)| b)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LossBreakdown::mean(&parts))
}

/// Predicted maps for one image, plus the refined CPM adjacency when the
/// wiring has one.
pub fn predict(
    cfg: &TrainConfig,
    store: &ParamStore,
    image: &Tensor,
) -> Result<(DecodeMaps, Option<Tensor>), NetError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, &cfg.frame, &cfg.dims(), image)?;
    let v = |var| tape.value(var).clone();
    let maps = DecodeMaps {
        hm_ho: v(out.hm_ho),
        hm_i: v(out.hm_i),
        disp: Tensor::concat(&[tape.value(out.f_dh), tape.value(out.f_do)])?,
        wh: v(out.f_wh),
        off: v(out.f_off),
    };
    Ok((maps, out.cpm.map(|c| v(c.adjacency_refined))))
}

pub fn predict_maps(cfg: &TrainConfig, store: &ParamStore, image: &Tensor) -> Result<DecodeMaps, NetError> {
    Ok(predict(cfg, store, image)?.0)
}

/// Decoded detections for every scene, in scene order.
pub fn infer(
    cfg: &TrainConfig,
    store: &ParamStore,
    dataset: &Dataset,
    exec: &Executor,
) -> Result<Vec<Vec<Detection>>, NetError> {
    let grid = dataset.config.grid;
    exec.map(&dataset.images, |img| {
        predict_maps(cfg, store, &img.to_tensor()).map(|m| decode(&m, &grid, &cfg.decode))
    })
    .into_iter()
    .collect()
}

pub fn ground_truth(dataset: &Dataset) -> Vec<Vec<GtTriplet>> {
    dataset.scenes.iter().map(GtTriplet::from_scene).collect()
}

/// Inference plus evaluation at IoU 0.5.
pub fn evaluate_model(
    cfg: &TrainConfig,
    store: &ParamStore,
    dataset: &Dataset,
    exec: &Executor,
) -> Result<EvalReport, NetError> {
    let dets = infer(cfg, store, dataset, exec)?;
    Ok(evaluate(&dets, &ground_truth(dataset), dataset.config.num_verbs, DEFAULT_IOU)
        .expect("one detection list per scene"))
}

/// The baseline, the three relation wirings, and every IIM/CPM attachment.
pub fn ablation_wirings() -> Vec<FrameConfig> {
    [
        (false, false, false, false),
        (true, false, false, false),
        (false, true, false, false),
        (true, true, false, false),
        (true, false, true, false),
        (false, true, false, true),
        (true, true, true, false),
        (true, true, false, true),
        (true, true, true, true),
    ]
    .into_iter()
    .map(|(a, b, i, c)| FrameConfig::wiring(a, b, i, c))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub frame: FrameConfig,
    /// Mean training-set loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_map: f64,
    pub heldout_map: f64,
}

pub const ABLATION_HEADER: &str =
    "config,relation_part_a,relation_part_b,use_iim,use_cpm,initial_loss,final_loss,train_map_role,heldout_map_role";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let f = &r.frame;
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{},{}",
            f.label(),
            f.relation_part_a,
            f.relation_part_b,
            f.use_iim,
            f.use_cpm,
            r.initial_loss,
            r.final_loss,
            r.train_map,
            r.heldout_map
        )
        .expect("string write");
    }
    out
}

/// Trains every wiring on `train_set` with identical seeds and evaluates on
/// both sets. Widths come from `base.frame`.
pub fn ablate(
    base: &TrainConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    exec: &Executor,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for wiring in ablation_wirings() {
        let mut cfg = base.clone();
        cfg.frame = FrameConfig {
            hidden_dim: base.frame.hidden_dim,
            backbone_dim: base.frame.backbone_dim,
            iim_hidden: base.frame.iim_hidden,
            ..wiring
        };
        let initial = build_params(&cfg.frame, &cfg.dims(), cfg.train.seed)?;
        let initial_loss = dataset_loss(&cfg, &initial, train_set, exec)?.total;
        let rec = train(&cfg, train_set, None, exec)?;
        let final_loss = dataset_loss(&cfg, &rec.params, train_set, exec)?.total;
        let train_map = evaluate_model(&cfg, &rec.params, train_set, exec)?.map_role;
        let heldout_map = if heldout.is_empty() {
            0.0
        } else {
            evaluate_model(&cfg, &rec.params, heldout, exec)?.map_role
        };
        rows.push(AblationRow {
            frame: cfg.frame,
            initial_loss,
            final_loss,
            train_map,
            heldout_map,
        });
    }
    Ok(rows)
}
