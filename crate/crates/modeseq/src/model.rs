//! Model assembly: configuration presets, deterministic initialization, and
//! versioned JSON checkpoints.
//!
//! A checkpoint stores every parameter by name plus an optional optimizer
//! state and the full config snapshot, so a run can resume bit-for-bit or be
//! re-evaluated under a different decode strategy (the recurrent and
//! parallel decoders share one parameter layout).

use crate::decoder::{
    joint_multi_layer_decode, joint_prediction_set_from, multi_layer_decode, prediction_set_from,
    DecodeOptions, DecoderError, DecoderParams, DecoderVariant, JointLayerVars, LayerVars,
    MAX_MODES,
};
use crate::encoder::{encode_scene, EncoderError, EncoderParams};
use crate::nn::{Bindings, Ctx, NnError, ParamStore};
use crate::num::{Tape, Tensor};
use crate::scene::{JointPredictionSet, PredictionSet, Scene, SceneError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("checkpoint version {found} not supported (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("parameter {name}: checkpoint shape {found}, model expects {expected}")]
    ShapeMismatch { name: String, expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture and decode-strategy knobs. Unspecified fields fall back to
/// the desk preset, so a config file only has to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Trained mode count K. Decoding may request more (up to `max_modes`)
    /// by drawing on the frozen extrapolation queries.
    pub modes: usize,
    pub max_modes: usize,
    pub t_obs: usize,
    pub t_hat: usize,
    pub ffn_hidden: usize,
    pub variant: DecoderVariant,
    pub rearrange: bool,
    pub causal: bool,
    pub joint: bool,
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small model that trains in seconds on one core.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            dim: 64,
            heads: 4,
            layers: 2,
            modes: 6,
            max_modes: MAX_MODES,
            t_obs: 10,
            t_hat: 30,
            ffn_hidden: 128,
            variant: DecoderVariant::Recurrent,
            rearrange: true,
            causal: true,
            joint: false,
            share_heads: false,
        }
    }

    /// Full-size configuration. Too heavy to train here; kept so configs for
    /// real hardware validate against the same code path.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            dim: 128,
            heads: 8,
            layers: 6,
            ffn_hidden: 256,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Invalid(msg));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".to_string());
        }
        if self.modes == 0 {
            return fail("modes must be >= 1".to_string());
        }
        if self.modes > self.max_modes || self.max_modes > MAX_MODES {
            return fail(format!(
                "need modes <= max_modes <= {MAX_MODES}, got modes {} max_modes {}",
                self.modes, self.max_modes
            ));
        }
        if self.t_obs == 0 || self.t_hat == 0 {
            return fail("t_obs and t_hat must be >= 1".to_string());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be >= 1".to_string());
        }
        Ok(())
    }

    /// Decode options matching the training-time strategy.
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            variant: self.variant,
            modes: self.modes,
            rearrange: self.rearrange,
            causal: self.causal,
        }
    }
}

/// Encoder + decoder + their parameters. Initialization order is fixed, so a
/// given (config, seed) always produces the same parameter names, shapes, and
/// values.
pub struct ModeSeqModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModeSeqModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModeSeqModel, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder =
            EncoderParams::init(&mut store, &mut rng, config.dim, config.heads, config.ffn_hidden)?;
        let decoder = DecoderParams::init(
            &mut store,
            &mut rng,
            config.dim,
            config.heads,
            config.layers,
            config.modes,
            config.max_modes,
            config.t_hat,
            config.ffn_hidden,
            config.share_heads,
            config.joint,
        )?;
        Ok(ModeSeqModel { config: config.clone(), store, encoder, decoder })
    }

    pub fn decode_options(&self) -> DecodeOptions {
        self.config.decode_options()
    }

    /// Encode a (target-frame) scene and decode every refinement layer on the
    /// caller's tape. Gradients flow; this is the training forward pass.
    pub fn forward_marginal(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        scene: &Scene,
        opts: &DecodeOptions,
    ) -> Result<Vec<LayerVars>, ModelError> {
        let mut ctx = Ctx::new(tape, &self.store, binds);
        let emb = encode_scene(&self.encoder, &mut ctx, scene)?;
        Ok(multi_layer_decode(&self.decoder, &mut ctx, &emb, opts)?)
    }

    /// Joint counterpart of [`ModeSeqModel::forward_marginal`]; decodes one
    /// future per target per mode.
    pub fn forward_joint(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        scene: &Scene,
        opts: &DecodeOptions,
    ) -> Result<Vec<JointLayerVars>, ModelError> {
        if !self.decoder.supports_joint() {
            return Err(ModelError::Invalid(
                "model was initialized without joint heads; set joint = true".to_string(),
            ));
        }
        let mut ctx = Ctx::new(tape, &self.store, binds);
        let emb = encode_scene(&self.encoder, &mut ctx, scene)?;
        Ok(joint_multi_layer_decode(&self.decoder, &mut ctx, &emb, &scene.targets, opts)?)
    }

    /// Inference helper: normalize around `target`, decode, and return every
    /// layer's predictions mapped back to the world frame. Scales pass
    /// through untouched (they are per-axis magnitudes, not rotated).
    pub fn predict_layers(
        &self,
        scene: &Scene,
        target: u64,
        opts: &DecodeOptions,
    ) -> Result<Vec<PredictionSet>, ModelError> {
        let (local, frame) = crate::scene::normalize_scene(scene, target)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let layers = self.forward_marginal(&mut tape, &mut binds, &local, opts)?;
        Ok(layers
            .iter()
            .map(|layer| {
                let mut set = prediction_set_from(&tape, layer);
                for m in &mut set.modes {
                    m.trajectory = frame.to_world_trajectory(&m.trajectory);
                }
                set
            })
            .collect())
    }

    /// Final-layer predictions in the world frame.
    pub fn predict(
        &self,
        scene: &Scene,
        target: u64,
        opts: &DecodeOptions,
    ) -> Result<PredictionSet, ModelError> {
        let mut layers = self.predict_layers(scene, target, opts)?;
        Ok(layers.pop().expect("decoder always produces at least one layer"))
    }

    /// Joint inference, normalized around the scene's first target.
    pub fn predict_joint_layers(
        &self,
        scene: &Scene,
        opts: &DecodeOptions,
    ) -> Result<Vec<JointPredictionSet>, ModelError> {
        let anchor = *scene
            .targets
            .first()
            .ok_or_else(|| ModelError::Invalid("scene has no targets".to_string()))?;
        let (local, frame) = crate::scene::normalize_scene(scene, anchor)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let layers = self.forward_joint(&mut tape, &mut binds, &local, opts)?;
        Ok(layers
            .iter()
            .map(|layer| {
                let mut set = joint_prediction_set_from(&tape, layer, &scene.targets);
                for m in &mut set.modes {
                    for t in &mut m.trajectories {
                        *t = frame.to_world_trajectory(t);
                    }
                }
                set
            })
            .collect())
    }

    pub fn predict_joint(
        &self,
        scene: &Scene,
        opts: &DecodeOptions,
    ) -> Result<JointPredictionSet, ModelError> {
        let mut layers = self.predict_joint_layers(scene, opts)?;
        Ok(layers.pop().expect("decoder always produces at least one layer"))
    }
}

/// Adam first/second moments plus the shared step counter, keyed like the
/// parameter store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &ModeSeqModel, optimizer: Option<AdamState>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model.store.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
            optimizer,
        }
    }

    /// Write atomically: serialize next to `path`, then rename into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion {
                found: ckpt.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }

    /// Rebuild the model. Every parameter the architecture expects must be
    /// present with the right shape, and nothing extra may be left over.
    pub fn into_model(mut self) -> Result<(ModeSeqModel, Option<AdamState>), ModelError> {
        let mut model = ModeSeqModel::init(&self.config, 0)?;
        for (name, slot) in model.store.iter_mut() {
            let stored =
                self.params.remove(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if stored.shape != slot.shape {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: format!("{}x{}", slot.shape.rows, slot.shape.cols),
                    found: format!("{}x{}", stored.shape.rows, stored.shape.cols),
                });
            }
            *slot = stored;
        }
        if let Some((name, _)) = self.params.into_iter().next() {
            return Err(ModelError::UnexpectedParam(name));
        }
        Ok((model, self.optimizer))
    }
}
