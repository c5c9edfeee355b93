//! Training configuration, learning-rate schedule, the optimisation loop,
//! checkpoint round-trips and model evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::ProposalMode;
use crate::error::{Error, Result};
use crate::losses::{LossBundle, LossWeights};
use crate::metrics::{self, Detection, GroundTruth, ImageInfo, MetricsReport, MiouMode};
use crate::model::{BrNet, InstancePrediction, ModelConfig};
use crate::params::{Adam, AdamConfig, Checkpoint, ParamStore, Session};
use crate::synth::{augment, mix_seed, AnnotatedScene, AugmentOp, SceneConfig};
use crate::tensor::{Float, Tensor};

/// Environment variable bounding the worker threads used for data work.
pub const NUM_WORKERS_ENV: &str = "BRNET_NUM_WORKERS";

/// Column header of the metrics log.
pub const LOG_HEADER: &str = "step\tl_cls\tl_reg\tl_cmask\tl_dec\tl_rmask\tl_cons\ttotal\tlr";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Linear,
    /// Holds the initial rate, then drops to the final rate for the last
    /// quarter of the post-warmup steps.
    Step,
}

/// What one "iteration" in the schedule counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterUnit {
    /// One optimiser step.
    #[default]
    Step,
    /// One pass over the training set.
    Epoch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Warmup then decay, evaluated at 1-based optimiser steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            return self.lr_initial * step as f64 / w as f64;
        }
        if t <= w {
            return self.lr_final;
        }
        let frac = ((step - w) as f64 / (t - w) as f64).min(1.0);
        match self.decay {
            Decay::Linear => self.lr_initial + (self.lr_final - self.lr_initial) * frac,
            Decay::Step if frac >= 0.75 => self.lr_final,
            Decay::Step => self.lr_initial,
        }
    }
}

/// Component switches of the ablation tables. When present in a config they
/// override the head and attention flags of the model section.
///
/// The recombination head exists whenever both bilayer heads do; `l_cons`
/// only controls the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub b_c: bool,
    pub b_o: bool,
    pub b_n: bool,
    pub uam: bool,
    pub l_cons: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            b_c: true,
            b_o: true,
            b_n: true,
            uam: true,
            l_cons: true,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if !self.b_c {
            return Err(Error::Config("b_c cannot be disabled: the coarse head is the base".into()));
        }
        if self.b_n && !self.b_o {
            return Err(Error::Config("b_n requires b_o".into()));
        }
        if self.l_cons && !(self.b_o && self.b_n) {
            return Err(Error::Config("l_cons requires b_o and b_n".into()));
        }
        Ok(())
    }

    /// Model config and loss weights with the toggles applied.
    pub fn apply(&self, model: &ModelConfig, weights: &LossWeights) -> Result<(ModelConfig, LossWeights)> {
        self.validate()?;
        let mut m = model.clone();
        m.heads.overlap_head = self.b_o;
        m.heads.nonoverlap_head = self.b_n;
        m.heads.recombine_head = self.b_o && self.b_n;
        m.detector.uam = self.uam;
        let mut w = *weights;
        if !self.l_cons {
            w.lambda_cons = 0.0;
        }
        m.validate()?;
        Ok((m, w))
    }

    /// Check marks in table order `B_c B_o B_n UAM L_cons`.
    pub fn marks(&self) -> [bool; 5] {
        [self.b_c, self.b_o, self.b_n, self.uam, self.l_cons]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub iter_unit: IterUnit,
    pub decay: Decay,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Detach the consistency target from the bilayer heads.
    pub cons_detach: bool,
    /// Write `checkpoint_<step>.bin` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Per-step augmentation applied to every training scene.
    pub augment: Vec<AugmentOp>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            batch_size: 2,
            lr_initial: 0.01,
            lr_final: 0.001,
            warmup_iters: 20,
            total_iters: 200,
            iter_unit: IterUnit::Step,
            decay: Decay::Linear,
            grad_clip: None,
            cons_detach: true,
            checkpoint_every: 0,
            augment: Vec::new(),
        }
    }
}

/// Synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            train_scenes: 64,
            test_scenes: 16,
        }
    }
}

impl DataConfig {
    /// Scene config for the `index`-th scene of a split. Train and test use
    /// disjoint seed streams.
    pub fn scene_config(&self, test: bool, index: usize) -> SceneConfig {
        let split = if test { 1 } else { 0 };
        SceneConfig {
            seed: mix_seed(mix_seed(self.scene.seed, split), index as u64),
            ..self.scene.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub miou_mode: MiouMode,
}

/// Top-level experiment configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub proposal_mode: ProposalMode,
    pub model: ModelConfig,
    pub toggles: Option<Toggles>,
    pub loss_weights: LossWeights,
    pub train: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            proposal_mode: ProposalMode::Rpn,
            model: ModelConfig::default(),
            toggles: None,
            loss_weights: LossWeights::default(),
            train: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.effective()?;
        self.data.scene.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.total_iters == 0 {
            return Err(Error::Config("batch_size and total_iters must be positive".into()));
        }
        if t.warmup_iters >= t.total_iters {
            return Err(Error::Config("warmup_iters must be below total_iters".into()));
        }
        if !(t.lr_initial > 0.0 && t.lr_final >= 0.0 && t.lr_initial.is_finite()) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if t.lr_final > t.lr_initial {
            return Err(Error::Config("lr_final exceeds lr_initial".into()));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if t.augment.contains(&AugmentOp::Crop) {
            return Err(Error::Config("crop changes image size and cannot be batched during training".into()));
        }
        let (h, w) = self.data.scene.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be divisible by 32")));
        }
        Ok(())
    }

    /// Model config and loss weights after toggles.
    pub fn effective(&self) -> Result<(ModelConfig, LossWeights)> {
        self.loss_weights.validate()?;
        match &self.toggles {
            Some(t) => t.apply(&self.model, &self.loss_weights),
            None => {
                self.model.validate()?;
                Ok((self.model.clone(), self.loss_weights))
            }
        }
    }

    /// Learning-rate schedule in optimiser steps for a training set size.
    pub fn schedule(&self, dataset_len: usize) -> LrSchedule {
        let t = &self.train;
        let per = match t.iter_unit {
            IterUnit::Step => 1,
            IterUnit::Epoch => dataset_len.div_ceil(t.batch_size).max(1),
        };
        LrSchedule {
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            warmup_steps: t.warmup_iters * per,
            total_steps: t.total_iters * per,
            decay: t.decay,
        }
    }
}

/// Worker count from [`NUM_WORKERS_ENV`], else the available parallelism
/// capped at 4.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()).min(4))
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Vec<O>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Generates the train and test splits of a data config.
pub fn synthesize(data: &DataConfig, workers: usize) -> Result<(Vec<AnnotatedScene>, Vec<AnnotatedScene>)> {
    let gen = |test: bool, n: usize| -> Result<Vec<AnnotatedScene>> {
        let idx: Vec<usize> = (0..n).collect();
        parallel_map(&idx, workers, |_, &i| crate::synth::generate_scene(&data.scene_config(test, i)))
            .into_iter()
            .collect()
    };
    Ok((gen(false, data.train_scenes)?, gen(true, data.test_scenes)?))
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Float>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn clip_gradients<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Serialised identity of a model stored in checkpoints.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    proposal_mode: ProposalMode,
}

/// Network, parameters and optimiser state being trained.
pub struct Trainer<T: Float> {
    pub model: BrNet,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub step: usize,
}

/// Per-step record kept in memory alongside the log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBundle,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn format_log_row(r: &StepRecord) -> String {
    let b = &r.losses;
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}",
        r.step, b.l_cls, b.l_reg, b.l_cmask, b.l_dec, b.l_rmask, b.l_cons, b.total, r.lr
    )
}

impl<T: Float> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model_cfg, weights) = config.effective()?;
        let mut store = ParamStore::new(config.seed);
        let model = BrNet::new(&mut store, model_cfg)?;
        let adam = Adam::new(&store, config.train.adam);
        Ok(Trainer {
            model,
            store,
            adam,
            weights,
            config,
            step: 0,
        })
    }

    /// Batches for one pass over `n` scenes, shuffled by seed and epoch.
    fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ 0x5eed, epoch as u64));
        order.shuffle(&mut rng);
        order.chunks(self.config.train.batch_size).map(|c| c.to_vec()).collect()
    }

    /// One optimiser step on `batch`.
    pub fn step_on(&mut self, batch: &[&AnnotatedScene], lr: f64) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, 1 << 32 | step as u64));
        let (mut grads, losses, updates) = {
            let mut s = Session::new(&self.store, true);
            let out = self.model.train_forward(
                &mut s,
                batch,
                self.config.proposal_mode,
                &self.weights,
                self.config.train.cons_detach,
                &mut rng,
            )?;
            if !out.bundle.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    bundle: out.bundle.to_string(),
                });
            }
            let grads = s.gradients(out.total)?;
            (grads, out.bundle, std::mem::take(&mut s.stat_updates))
        };
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                bundle: format!("{losses} (gradient norm {norm})"),
            });
        }
        if let Some(c) = self.config.train.grad_clip {
            clip_gradients(&mut grads, c);
        }
        self.adam.update(&mut self.store, &grads, lr);
        for u in &updates {
            u.apply(&mut self.store);
        }
        self.step = step;
        Ok(StepRecord {
            step,
            losses,
            lr,
            grad_norm: norm,
        })
    }

    /// Runs the full schedule. Writes the header and one row per step to
    /// `log`, and checkpoints into `out_dir` when given.
    pub fn fit(&mut self, scenes: &[AnnotatedScene], log: &mut dyn Write, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        if scenes.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let dims = scenes[0].dims();
        if scenes.iter().any(|s| s.dims() != dims) {
            return Err(Error::invalid("training scenes must share one image size"));
        }
        let sched = self.config.schedule(scenes.len());
        let workers = num_workers();
        let ops = self.config.train.augment.clone();
        let logerr = |e| Error::io("metrics log", e);
        writeln!(log, "{LOG_HEADER}").map_err(logerr)?;
        let mut history = Vec::with_capacity(sched.total_steps);
        let mut epoch = 0;
        'outer: loop {
            for batch in self.epoch_batches(scenes.len(), epoch) {
                if self.step >= sched.total_steps {
                    break 'outer;
                }
                let next = self.step + 1;
                let owned: Vec<AnnotatedScene> = if ops.is_empty() {
                    Vec::new()
                } else {
                    parallel_map(&batch, workers, |k, &i| {
                        augment(&scenes[i], &ops, mix_seed(self.config.seed, (next as u64) << 16 | k as u64))
                    })
                };
                let refs: Vec<&AnnotatedScene> =
                    if ops.is_empty() { batch.iter().map(|&i| &scenes[i]).collect() } else { owned.iter().collect() };
                let rec = self.step_on(&refs, sched.lr(next))?;
                writeln!(log, "{}", format_log_row(&rec)).map_err(logerr)?;
                history.push(rec);
                let every = self.config.train.checkpoint_every;
                if let Some(dir) = out_dir {
                    if every > 0 && self.step.is_multiple_of(every) {
                        self.checkpoint().save(&dir.join(format!("checkpoint_{}.bin", self.step)))?;
                    }
                }
            }
            epoch += 1;
        }
        log.flush().map_err(logerr)?;
        if let Some(dir) = out_dir {
            self.checkpoint().save(&checkpoint_path(dir))?;
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            proposal_mode: self.config.proposal_mode,
        };
        Checkpoint {
            model_config: serde_json::to_string(&meta).expect("config serialises"),
            step: self.step as u64,
            params: self.store.cast(),
            adam: Some(Adam {
                config: self.adam.config,
                step: self.adam.step,
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        }
    }
}

/// Final checkpoint location inside an output directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.bin")
}

/// A trained network restored from a checkpoint.
pub struct LoadedModel<T: Float> {
    pub model: BrNet,
    pub store: ParamStore<T>,
    pub proposal_mode: ProposalMode,
    pub step: u64,
}

/// Rebuilds the network from a checkpoint, checking every parameter's name
/// and shape against a fresh instance.
pub fn load_model<T: Float>(ckpt: &Checkpoint<T>) -> Result<LoadedModel<T>> {
    let meta: CheckpointMeta =
        serde_json::from_str(&ckpt.model_config).map_err(|e| Error::parse("checkpoint config", e.to_string()))?;
    let mut store = ParamStore::new(0);
    let model = BrNet::new(&mut store, meta.model)?;
    if store.len() != ckpt.params.len() {
        return Err(Error::parse(
            "checkpoint",
            format!("expected {} parameters, found {}", store.len(), ckpt.params.len()),
        ));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = ckpt
            .params
            .find(&name)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing parameter {name}")))?;
        let t = ckpt.params.get(src);
        if t.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch {
                expected: store.get(id).shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(LoadedModel {
        model,
        store,
        proposal_mode: meta.proposal_mode,
        step: ckpt.step,
    })
}

/// Predictions for every scene, ground-truth mode feeding the annotated boxes.
pub fn predict_scenes<T: Float>(
    model: &BrNet,
    store: &ParamStore<T>,
    scenes: &[AnnotatedScene],
    mode: ProposalMode,
    workers: usize,
) -> Result<Vec<Vec<InstancePrediction>>> {
    parallel_map(scenes, workers, |_, sc| {
        let gt: Vec<_> = sc.instances.iter().map(|i| i.bbox.to_f64()).collect();
        model.predict(store, &sc.image, mode, Some(&gt))
    })
    .into_iter()
    .collect()
}

/// Metric inputs for scenes and their predictions; image ids are indices.
pub fn metric_inputs(
    scenes: &[AnnotatedScene],
    preds: &[Vec<InstancePrediction>],
) -> (Vec<Detection>, Vec<GroundTruth>, Vec<ImageInfo>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut infos = Vec::new();
    for (id, (sc, ps)) in scenes.iter().zip(preds).enumerate() {
        let (height, width) = sc.dims();
        infos.push(ImageInfo { image_id: id, height, width });
        gts.extend(sc.instances.iter().map(|i| GroundTruth { mask: i.amodal.clone(), image_id: id }));
        dets.extend(ps.iter().map(|p| Detection {
            score: p.score.clamp(0.0, 1.0),
            mask: p.mask.clone(),
            image_id: id,
        }));
    }
    (dets, gts, infos)
}

pub fn evaluate_model<T: Float>(
    model: &BrNet,
    store: &ParamStore<T>,
    scenes: &[AnnotatedScene],
    mode: ProposalMode,
    miou_mode: MiouMode,
) -> Result<MetricsReport> {
    let preds = predict_scenes(model, store, scenes, mode, num_workers())?;
    let (dets, gts, infos) = metric_inputs(scenes, &preds);
    metrics::evaluate(&dets, &gts, &infos, miou_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            lr_initial: 0.01,
            lr_final: 0.001,
            warmup_steps: 20,
            total_steps: 200,
            decay: Decay::Linear,
        };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(10) - 0.005).abs() < 1e-15);
        assert!((s.lr(20) - 0.01).abs() < 1e-15);
        assert!((s.lr(200) - 0.001).abs() < 1e-15);
        let st = LrSchedule { decay: Decay::Step, ..s };
        assert_eq!((st.lr(100), st.lr(200)), (0.01, 0.001));
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        assert_eq!(parallel_map(&xs, 4, |i, &x| i * 100 + x), xs.iter().map(|&x| x * 101).collect::<Vec<_>>());
    }
}
