//! Training loop: AdamW with decoupled weight decay, cosine learning-rate
//! annealing, global-norm gradient clipping, and a per-step CSV trace.
//!
//! Everything is deterministic for a fixed seed: sample order comes from a
//! counter-seeded shuffle per epoch, the forward/backward math is
//! single-threaded f64, and the optimizer walks parameters in name order.
//! Two runs from the same seed produce identical traces.

use crate::loss::{
    average_layer_losses, joint_layer_loss, single_agent_layer_loss, LayerLoss, LossError,
    LossWeights,
};
use crate::assign::AssignConfig;
use crate::decoder::DecoderError;
use crate::model::{AdamState, Checkpoint, ModeSeqModel, ModelError};
use crate::nn::{Bindings, NnError};
use crate::num::{NumError, Tape};
use crate::scene::{normalize_scene, Scene, SceneError, Trajectory};
use crate::synth::mix_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("no training samples (every scene needs at least one target)")]
    NoSamples,
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimizer and loop hyperparameters. Like [`crate::model::ModelConfig`],
/// missing fields deserialize to the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip applied to the whole gradient before each step.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint through the hook every this many steps.
    pub checkpoint_every: Option<u64>,
    pub assign: AssignConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Defaults sized for the desk preset: a dim-64 model reaches useful
    /// coverage on a few hundred fork scenes in under a minute of CPU time.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 40,
            batch_size: 16,
            grad_clip: 5.0,
            seed: 0,
            checkpoint_every: None,
            assign: AssignConfig::default(),
            weights: LossWeights::default(),
        }
    }

    /// Full-scale hyperparameters; validated here, trained elsewhere.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.1,
            epochs: 30,
            batch_size: 32,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Invalid(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eps <= 0.0 {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".to_string());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be >= 1 when set".to_string());
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 toward 0 at `total` (no warmup).
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scale all accumulated gradients so their global L2 norm is at most
/// `clip`. Returns the pre-clip norm and whether clipping fired.
pub fn clip_gradients(store: &mut crate::nn::ParamStore, clip: f64) -> (f64, bool) {
    let mut sq = 0.0;
    for (_, t) in store.iter() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= clip || norm == 0.0 {
        return (norm, false);
    }
    let s = clip / norm;
    for (_, t) in store.iter_mut() {
        if let Some(g) = &mut t.grad {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    (norm, true)
}

/// AdamW over a parameter store. Walks parameters in name order; parameters
/// with no gradient this step are left untouched (no decay either), matching
/// the usual sparse-update convention.
pub struct AdamW {
    pub state: AdamState,
}

impl AdamW {
    pub fn new(state: AdamState) -> AdamW {
        AdamW { state }
    }

    pub fn step(
        &mut self,
        store: &mut crate::nn::ParamStore,
        lr: f64,
        tc: &TrainConfig,
    ) -> Result<(), TrainError> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - tc.beta1.powi(t);
        let bc2 = 1.0 - tc.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -=
                    lr * (m_hat / (v_hat.sqrt() + tc.eps) + tc.weight_decay * p.values[i]);
            }
        }
        Ok(())
    }
}

/// Per-layer loss terms averaged over the batch, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLossValues {
    pub regression: f64,
    pub classification: f64,
    pub ranking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub total: f64,
    pub layers: Vec<LayerLossValues>,
}

pub fn trace_csv_header(layers: usize) -> String {
    let mut s = "step,epoch,lr,grad_norm,clipped,total".to_string();
    for l in 0..layers {
        s.push_str(&format!(",layer{l}_reg,layer{l}_cls,layer{l}_rank,layer{l}_total"));
    }
    s
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.grad_norm, self.clipped as u8, self.total
        );
        for l in &self.layers {
            s.push_str(&format!(
                ",{},{},{},{}",
                l.regression, l.classification, l.ranking, l.total
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub final_loss: f64,
    pub steps: u64,
}

/// Called at the checkpoint cadence with the step count and a ready-to-save
/// snapshot.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(u64, &Checkpoint) -> std::io::Result<()>;

enum Sample {
    Marginal { scene: Scene, gt: Trajectory },
    Joint { scene: Scene, gt: BTreeMap<u64, Trajectory> },
}

fn build_samples(model: &ModeSeqModel, scenes: &[Scene]) -> Result<Vec<Sample>, TrainError> {
    let mut samples = Vec::new();
    for scene in scenes {
        if model.config.joint {
            let Some(&anchor) = scene.targets.first() else { continue };
            let (local, _) = normalize_scene(scene, anchor)?;
            let gt = local.future.clone();
            samples.push(Sample::Joint { scene: local, gt });
        } else {
            for &target in &scene.targets {
                let (local, _) = normalize_scene(scene, target)?;
                let gt = local
                    .future
                    .get(&target)
                    .ok_or_else(|| {
                        TrainError::Invalid(format!(
                            "scene {} target {target} has no future",
                            scene.scene_id
                        ))
                    })?
                    .clone();
                samples.push(Sample::Marginal { scene: local, gt });
            }
        }
    }
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    Ok(samples)
}

/// Run the full training loop over `scenes`. Pass a previous [`AdamState`]
/// to keep optimizer moments across calls; the cosine schedule always spans
/// exactly this call's steps. The CSV trace (header + one row per step) goes
/// to `sink` when given, and `hook` fires at `checkpoint_every` steps.
pub fn train(
    model: &mut ModeSeqModel,
    scenes: &[Scene],
    tc: &TrainConfig,
    opt_state: Option<AdamState>,
    mut sink: Option<&mut dyn Write>,
    mut hook: Option<CheckpointHook>,
) -> Result<(TrainOutcome, AdamState), TrainError> {
    tc.validate()?;
    let opts = model.decode_options();
    let samples = build_samples(model, scenes)?;
    let n_layers = model.config.layers;

    let steps_per_epoch = samples.len().div_ceil(tc.batch_size);
    let total_steps = (tc.epochs * steps_per_epoch) as u64;
    let mut opt = AdamW::new(opt_state.unwrap_or_default());
    let mut records = Vec::with_capacity(total_steps as usize);

    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{}", trace_csv_header(n_layers))?;
    }

    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(tc.batch_size) {
            let lr = cosine_lr(tc.lr, step, total_steps);
            model.store.zero_grad();
            let mut tape = Tape::new();
            let mut binds = Bindings::new();

            let mut objectives = Vec::with_capacity(batch.len());
            let mut layer_sums = vec![LayerLossValues::default(); n_layers];
            for &i in batch {
                let layer_losses: Vec<LayerLoss> = match &samples[i] {
                    Sample::Marginal { scene, gt } => {
                        let layers = model.forward_marginal(&mut tape, &mut binds, scene, &opts)?;
                        layers
                            .iter()
                            .map(|layer| {
                                single_agent_layer_loss(&mut tape, layer, gt, &tc.assign, &tc.weights)
                            })
                            .collect::<Result<_, _>>()?
                    }
                    Sample::Joint { scene, gt } => {
                        let layers = model.forward_joint(&mut tape, &mut binds, scene, &opts)?;
                        layers
                            .iter()
                            .map(|layer| {
                                joint_layer_loss(
                                    &mut tape,
                                    layer,
                                    &scene.targets,
                                    gt,
                                    &tc.assign,
                                    &tc.weights,
                                )
                            })
                            .collect::<Result<_, _>>()?
                    }
                };
                for (l, ll) in layer_losses.iter().enumerate() {
                    layer_sums[l].regression += tape.scalar(ll.regression);
                    layer_sums[l].classification += tape.scalar(ll.classification);
                    layer_sums[l].ranking += tape.scalar(ll.ranking);
                    layer_sums[l].total += tape.scalar(ll.total);
                }
                objectives.push(average_layer_losses(&mut tape, &layer_losses)?);
            }

            let mut acc = objectives[0];
            for &o in &objectives[1..] {
                acc = tape.add(acc, o)?;
            }
            let batch_objective = tape.scale(acc, 1.0 / objectives.len() as f64);
            let total = tape.scalar(batch_objective);
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: format!("batch objective = {total}"),
                });
            }

            tape.backward(batch_objective)?;
            binds.harvest(&tape, &mut model.store)?;
            let (grad_norm, clipped) = clip_gradients(&mut model.store, tc.grad_clip);
            if !grad_norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: format!("gradient norm = {grad_norm}"),
                });
            }
            opt.step(&mut model.store, lr, tc)?;

            for s in &mut layer_sums {
                s.regression /= batch.len() as f64;
                s.classification /= batch.len() as f64;
                s.ranking /= batch.len() as f64;
                s.total /= batch.len() as f64;
            }
            let record = StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                clipped,
                total,
                layers: layer_sums,
            };
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", record.csv_row())?;
            }
            records.push(record);
            step += 1;

            if let (Some(every), Some(h)) = (tc.checkpoint_every, hook.as_deref_mut()) {
                if step % every == 0 && step < total_steps {
                    let snapshot = Checkpoint::from_model(model, Some(opt.state.clone()));
                    h(step, &snapshot)?;
                }
            }
        }
    }

    let final_loss = records.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok((TrainOutcome { records, final_loss, steps: step }, opt.state))
}
