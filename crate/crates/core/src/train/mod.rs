//! Three-stage training.
//!
//! Stage I trains the visual encoder, generator and discriminator on images
//! alone. Stage II freezes the generator and distils the visual latent space
//! into the cognitive encoder, with the cached teacher reconstructions as
//! the discriminator's real samples. Stage III freezes the cognitive encoder
//! and fine-tunes generator and discriminator against the true stimuli at a
//! reduced learning rate.
//!
//! Every step runs a discriminator update followed by a generator-side
//! update on a fresh forward pass. Each stage owns a fresh optimizer and an
//! RNG stream derived from `(seed, stage)`, so a run resumed from a stage
//! checkpoint is bitwise identical to an uninterrupted one.

pub mod adam;
pub mod scheme;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{contract, Error, Result};
use crate::loss::{stage_pass, Batch, LossReport, LossWeights, Objective, Pass, Stage};
use crate::model::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::model::{standard_normal, Arch, ModelBundle, Net, Noise};
use crate::nn::Sequential;
use crate::tensor::{Tape, Tensor};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use scheme::{schemes, TrainingScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Reparameterized samples feed the generator during training.
    Sample,
    /// The posterior mean feeds the generator.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-epoch multiplicative decay, restarted at each stage.
    pub decay_rate: f64,
    pub batch_size: usize,
    /// Epochs of stages I, II and III.
    pub epochs: [usize; 3],
    pub seed: u64,
    /// Registered training scheme: `full`, `vae-gan` or `cnn-encoder`.
    pub ablation: String,
    pub stage3_lr_scale: f64,
    pub weights: LossWeights,
    pub latent_mode: LatentMode,
    /// Fresh discriminator at the start of stages II and III.
    pub reinit_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_rate: 0.98,
            batch_size: 32,
            epochs: [10, 10, 10],
            seed: 0,
            ablation: "full".into(),
            stage3_lr_scale: 0.1,
            weights: LossWeights::default(),
            latent_mode: LatentMode::Sample,
            reinit_discriminator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 || self.batch_size == 0 {
            return bad("adam_eps and batch_size must be positive".into());
        }
        if !(self.stage3_lr_scale >= 0.0 && self.stage3_lr_scale.is_finite()) {
            return bad(format!("stage3_lr_scale must be non-negative, got {}", self.stage3_lr_scale));
        }
        if !(self.weights.rec >= 0.0 && self.weights.prior >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        schemes().get(&self.ablation)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// `lr · scale · decay_rate^epoch`, with `scale = stage3_lr_scale` in Stage III.
    pub fn lr_at(&self, stage: Stage, epoch: usize) -> f64 {
        let scale = if stage == Stage::III { self.stage3_lr_scale } else { 1.0 };
        self.lr * scale * self.decay_rate.powi(epoch as i32)
    }

    pub fn epochs_of(&self, stage: Stage) -> usize {
        self.epochs[stage.number() as usize - 1]
    }

    pub fn objective(&self, stage: Stage) -> Result<Objective> {
        let reg = schemes();
        let scheme = reg.get(&self.ablation)?;
        Ok(Objective { stage, stage1_encoder: scheme.stage1_encoder(), weights: self.weights })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of the epoch.
    pub step: u64,
    pub lr_t: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_accuracy: Option<f64>,
    /// Mean `||μ − μ*||²` over training pairs after the epoch (Stage II).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    /// Passes after which every frozen network's gradient was verified zero.
    pub freeze_checks: u64,
    pub latent_distance_before: Option<f64>,
}

impl StageLog {
    pub fn latent_distance_after(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.latent_distance)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stages: Vec<StageLog>,
}

impl TrainLog {
    pub fn stage(&self, s: Stage) -> Option<&StageLog> {
        self.stages.iter().find(|l| l.stage == s)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in self.stages.iter().flat_map(|s| &s.epochs) {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// What a training step reports to an observer after each update.
#[derive(Clone, Debug)]
pub struct PassEvent {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub pass: Pass,
    pub updated: Vec<Net>,
}

/// Called after each pass with the bundle still holding that pass's gradients.
pub type Observer<'a> = dyn FnMut(&PassEvent, &ModelBundle) + 'a;

/// Stage-I teacher outputs for every training pair, computed at `ε = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    row: HashMap<usize, usize>,
    /// `[N_train, C, H, W]` reconstructions `ỹ = G(μ*)`.
    pub images: Tensor,
    /// `[N_train, d_z]` teacher means `μ*`.
    pub mu: Tensor,
}

const EVAL_CHUNK: usize = 64;

impl TeacherCache {
    pub fn build(bundle: &ModelBundle, data: &PairedDataset) -> Result<Self> {
        let (mut images, mut mu) = (Vec::new(), Vec::new());
        for chunk in data.train.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let y = tape.constant(&data.image_batch(chunk)?);
            let lat = bundle.encode_visual_batch(&tape, y, Noise::Mean)?;
            images.extend(bundle.generate_batch(&tape, lat.mu)?.value().into_data());
            mu.extend(lat.mu.value().into_data());
        }
        let n = data.train.len();
        let mut shape = vec![n];
        shape.extend(data.image_shape);
        Ok(Self {
            row: data.train.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            images: Tensor::new(shape, images)?,
            mu: Tensor::new(vec![n, bundle.arch.d_z], mu)?,
        })
    }

    fn rows(&self, t: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::new();
        for i in idx {
            let r = self.row.get(i).ok_or_else(|| Error::Contract(format!("record {i} is not in the teacher cache")))?;
            data.extend_from_slice(t.row(*r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }
}

/// Mean `||μ_cog(x) − μ*(y)||²` over the training pairs.
pub fn latent_distance(bundle: &ModelBundle, data: &PairedDataset, cache: &TeacherCache) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.train.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let lat = bundle.encode_cognitive_batch(&tape, tape.constant(&data.signal_batch(chunk)?), Noise::Mean)?;
        let star = cache.rows(&cache.mu, chunk)?;
        total += lat.mu.data().iter().zip(star.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    Ok(total / data.train.len() as f64)
}

fn stage_rng(seed: u64, stage: Stage, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 * stage.number() as u64 + salt);
    rng
}

/// Applies one pass's gradients to `nets`, which must lie within the
/// pass's update set. Frozen networks must end with zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn apply_update(
    bundle: &mut ModelBundle,
    obj: &Objective,
    pass: Pass,
    nets: &[Net],
    grads: &crate::tensor::Gradients,
    state: &mut OptimizerState,
    adam: &AdamConfig,
    lr_t: f64,
) -> Result<()> {
    let allowed = obj.update_set(pass);
    if let Some(n) = nets.iter().find(|n| !allowed.contains(n)) {
        return contract(format!("{} is frozen in stage {:?}", n.name(), obj.stage));
    }
    for g in grads.groups() {
        if !nets.iter().any(|n| n.group() == g) {
            let name = Net::ALL.into_iter().find(|n| n.group() == g).map_or("?", |n| n.name());
            return contract(format!("gradient reached frozen network {name} in stage {:?}", obj.stage));
        }
    }
    bundle.zero_grad();
    for &n in nets {
        bundle.net_mut(n).accumulate(grads)?;
    }
    if let Some(n) = Net::ALL.into_iter().find(|n| !nets.contains(n) && !bundle.net(*n).grads_are_zero()) {
        return contract(format!("frozen network {} holds a nonzero gradient", n.name()));
    }
    let groups: Vec<u16> = nets.iter().map(|n| n.group()).collect();
    adam_step(bundle, state, adam, lr_t, &|k| groups.contains(&k.group))
}

fn batch(data: &PairedDataset, idx: &[usize], cache: Option<&TeacherCache>) -> Result<Batch> {
    Ok(Batch {
        x: data.signal_batch(idx)?,
        y: data.image_batch(idx)?,
        teacher: cache.map(|c| c.rows(&c.images, idx)).transpose()?,
    })
}

/// Runs one stage. `step0` is the global step count on entry.
pub fn run_stage(
    bundle: &mut ModelBundle,
    data: &PairedDataset,
    cfg: &TrainConfig,
    stage: Stage,
    cache: Option<&TeacherCache>,
    step0: u64,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<StageLog> {
    cfg.validate()?;
    if data.train.is_empty() {
        return contract("training split holds no image pairs");
    }
    if stage == Stage::II && cache.is_none() {
        return contract("Stage II needs the teacher reconstruction cache from Stage I");
    }
    let obj = cfg.objective(stage)?;
    let adam = cfg.adam();
    let mut rng = stage_rng(cfg.seed, stage, 0);
    let (mut d_state, mut g_state) = (OptimizerState::default(), OptimizerState::default());
    let sample = cfg.latent_mode == LatentMode::Sample && !bundle.arch.deterministic;
    let d_z = bundle.arch.d_z;
    let mut log = StageLog {
        stage,
        epochs: Vec::new(),
        steps: 0,
        freeze_checks: 0,
        latent_distance_before: match (stage, cache) {
            (Stage::II, Some(c)) => Some(latent_distance(bundle, data, c)?),
            _ => None,
        },
    };
    let mut order = data.train.clone();
    for epoch in 0..cfg.epochs_of(stage) {
        order.shuffle(&mut rng);
        let lr_t = cfg.lr_at(stage, epoch);
        let mut reports = Vec::new();
        let mut acc = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let b = batch(data, idx, cache.filter(|_| stage == Stage::II))?;
            let mut terms = BTreeMap::new();
            for pass in [Pass::Discriminator, Pass::Generator] {
                let eps = sample.then(|| standard_normal(&mut rng, &[idx.len(), d_z]));
                let nets = obj.update_set(pass);
                let groups = obj.groups(pass);
                let tape = Tape::tracking(&groups);
                let out = stage_pass(bundle, &tape, &b, &obj, pass, eps.as_ref())?;
                let loss = out.loss.item();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "stage {stage:?} epoch {epoch} step {}: {pass:?} loss is {loss}",
                        step0 + log.steps
                    )));
                }
                terms.extend(out.term_values());
                acc.extend(out.d_accuracy);
                let grads = tape.backward(out.loss)?;
                drop(out);
                apply_update(bundle, &obj, pass, &nets, &grads, if pass == Pass::Discriminator { &mut d_state } else { &mut g_state }, &adam, lr_t)?;
                log.freeze_checks += 1;
                if let Some(obs) = observer.as_deref_mut() {
                    let ev = PassEvent { stage, epoch, step: step0 + log.steps, pass, updated: nets };
                    obs(&ev, bundle);
                }
            }
            log.steps += 1;
            reports.push(LossReport::new(stage, terms, &cfg.weights));
        }
        let mean = LossReport::mean(stage, &reports, &cfg.weights);
        let rec = EpochRecord {
            stage: stage.number(),
            epoch,
            step: step0 + log.steps,
            lr_t,
            total: mean.total,
            terms: mean.terms,
            d_accuracy: (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64),
            latent_distance: match (stage, cache) {
                (Stage::II, Some(c)) => Some(latent_distance(bundle, data, c)?),
                _ => None,
            },
        };
        info!(
            "stage {} epoch {} lr {:.3e} total {:.4} {:?}",
            rec.stage, rec.epoch, rec.lr_t, rec.total, rec.terms
        );
        log.epochs.push(rec);
    }
    bundle.zero_grad();
    Ok(log)
}

pub fn run_stage1(bundle: &mut ModelBundle, data: &PairedDataset, cfg: &TrainConfig) -> Result<StageLog> {
    run_stage(bundle, data, cfg, Stage::I, None, 0, None)
}

pub fn run_stage2(
    bundle: &mut ModelBundle,
    data: &PairedDataset,
    cfg: &TrainConfig,
    cache: Option<&TeacherCache>,
) -> Result<StageLog> {
    run_stage(bundle, data, cfg, Stage::II, cache, 0, None)
}

pub fn run_stage3(bundle: &mut ModelBundle, data: &PairedDataset, cfg: &TrainConfig) -> Result<StageLog> {
    run_stage(bundle, data, cfg, Stage::III, None, 0, None)
}

/// Architecture after the scheme's adjustments, checked against the data.
pub fn resolve_arch(arch: &Arch, data: &PairedDataset, cfg: &TrainConfig) -> Result<Arch> {
    let reg = schemes();
    let arch = reg.get(&cfg.ablation)?.adapt_arch(arch);
    arch.validate()?;
    if arch.d_x != data.active_dim() {
        return Err(Error::Config(format!("arch.d_x = {} but the dataset has {} active voxels", arch.d_x, data.active_dim())));
    }
    if arch.image_shape() != data.image_shape {
        return Err(Error::Config(format!(
            "arch image shape {:?} but the dataset has {:?}",
            arch.image_shape(),
            data.image_shape
        )));
    }
    if data.d_x < arch.d_z {
        return Err(Error::Config(format!("d_x = {} is smaller than d_z = {}", data.d_x, arch.d_z)));
    }
    Ok(arch)
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("stage{}.tar", stage.number()))
}

/// Runs the scheme's stages from `first` on. Writes `stage<n>.tar` after
/// each stage when `out` is given.
pub fn train_from(
    bundle: &mut ModelBundle,
    data: &PairedDataset,
    cfg: &TrainConfig,
    first: Stage,
    step0: u64,
    out: Option<&Path>,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let reg = schemes();
    let scheme = reg.get(&cfg.ablation)?;
    let mut log = TrainLog::default();
    let mut step = step0;
    for &stage in scheme.stages().iter().filter(|s| **s >= first) {
        if stage != Stage::I && cfg.reinit_discriminator {
            let arch = &bundle.arch;
            let mut seed_rng = stage_rng(cfg.seed, stage, 1);
            let seed = rand::Rng::random::<u64>(&mut seed_rng);
            bundle.disc = Sequential::new(Net::Disc.name(), Net::Disc.group(), arch.image_shape().to_vec(), arch.disc_specs()?, seed)?;
        }
        let cache = if stage == Stage::II { Some(TeacherCache::build(bundle, data)?) } else { None };
        let s = run_stage(bundle, data, cfg, stage, cache.as_ref(), step, observer.as_deref_mut())
            .map_err(|e| stage_context(stage, e))?;
        step += s.steps;
        log.stages.push(s);
        if let Some(dir) = out {
            let meta = CheckpointMeta {
                arch: bundle.arch.clone(),
                stage: stage.number(),
                step,
                seed: cfg.seed,
                scheme: cfg.ablation.clone(),
            };
            save_checkpoint(&checkpoint_path(dir, stage), bundle, &meta)?;
        }
    }
    Ok(log)
}

fn stage_context(stage: Stage, e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("stage {}: {m}", stage.number())),
        Error::NonFinite(m) => Error::NonFinite(format!("stage {}: {m}", stage.number())),
        other => other,
    }
}

/// Fresh bundle through every stage of the configured scheme.
pub fn train_full(
    data: &PairedDataset,
    arch: &Arch,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    let arch = resolve_arch(arch, data, cfg)?;
    let mut bundle = ModelBundle::new(arch, cfg.seed)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let log = train_from(&mut bundle, data, cfg, Stage::I, 0, out, None)?;
    Ok((bundle, log))
}
