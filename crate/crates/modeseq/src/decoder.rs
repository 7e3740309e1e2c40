//! Sequence-ordered mode decoding.
//!
//! Modes form an ordered sequence: mode k is produced with access to modes
//! 1..k-1 and to the scene tokens, so later hypotheses can steer away from
//! what is already covered. Two interchangeable layer types implement this:
//!
//! * **recurrent** — modes decoded one by one; each step runs memory
//!   attention over the embeddings produced so far, then context attention,
//!   then a feed-forward update.
//! * **parallel** — all modes in one pass; a lower-triangular mask on
//!   mode-to-mode self-attention keeps the same prefix dependency while
//!   batching the matmuls.
//!
//! Layers stack for iterative refinement, optionally reordering modes by
//! descending confidence between layers so the sequence position tracks the
//! ranking. Joint (multi-agent) decoding keeps one embedding per
//! (mode, agent) pair, adds an interaction block across agents inside each
//! mode, and ranks modes with a pooled scene score.

use crate::encoder::SceneEmbedding;
use crate::nn::{AttnBlockParams, Ctx, FfnParams, LinearParams, MlpParams, NnError, ParamStore};
use crate::num::{Mask, NumError, Tape, Var};
use crate::scene::{JointModePrediction, JointPredictionSet, ModePrediction, Point, PredictionSet, Trajectory};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Trajectory heads work in units of ten meters so freshly initialized
/// weights land in a sensible output range; predictions are scaled back to
/// meters on the way out.
pub const OUTPUT_SCALE: f64 = 10.0;
/// Additive floor on predicted uncertainty scales. Ten centimeters: tight
/// enough not to limit a converged model on meter-scale roads, loose enough
/// that the 1/scale factors in the likelihood gradient stay bounded instead
/// of spiking whenever a mode turns overconfident mid-training.
pub const SCALE_FLOOR: f64 = 0.1;
/// Upper bound on decodable modes; the query bank is allocated at this size.
pub const MAX_MODES: usize = 32;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("confidence for mode {0} is NaN")]
    NanConfidence(usize),
    #[error("requested {requested} modes but the query bank holds {max}")]
    TooManyModes { requested: usize, max: usize },
    #[error("requested 0 modes")]
    NoModes,
    #[error("target agent {0} has no token in the scene embedding")]
    MissingTarget(u64),
    #[error("joint decoding needs at least one target agent")]
    NoTargets,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Recurrent,
    Parallel,
}

impl std::fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderVariant::Recurrent => write!(f, "recurrent"),
            DecoderVariant::Parallel => write!(f, "parallel"),
        }
    }
}

/// Behavioral switches for one decode call. `causal=false` removes the
/// mode-to-mode dependency (set-style baseline): the parallel layer attends
/// without a mask and the recurrent layer skips its memory block.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub variant: DecoderVariant,
    pub modes: usize,
    pub rearrange: bool,
    pub causal: bool,
}

#[derive(Debug, Clone)]
struct LayerParams {
    mode_attn: AttnBlockParams,
    ctx_attn: AttnBlockParams,
    future: Option<AttnBlockParams>,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct HeadParams {
    loc: MlpParams,
    scale: MlpParams,
    confidence: MlpParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    queries: String,
    extra_queries: String,
    layers: Vec<LayerParams>,
    heads: Vec<HeadParams>,
    joint_in: Option<LinearParams>,
    scene_head: Option<MlpParams>,
    pub dim: usize,
    pub k_modes: usize,
    pub max_modes: usize,
    pub t_hat: usize,
    share_heads: bool,
}

impl DecoderParams {
    /// Allocate all decoder parameters. Construction order is fixed so a
    /// given seed always produces the same initialization. Query rows beyond
    /// `k_modes` are initialized but frozen: they only matter when decoding
    /// more modes at inference time than were trained.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        n_layers: usize,
        k_modes: usize,
        max_modes: usize,
        t_hat: usize,
        ffn_hidden: usize,
        share_heads: bool,
        joint: bool,
    ) -> Result<DecoderParams, NnError> {
        store.add_uniform("dec.queries", k_modes, dim, 0.5, true, rng)?;
        store.add_uniform("dec.queries_extra", max_modes.saturating_sub(k_modes), dim, 0.5, false, rng)?;

        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("dec.layer{l}");
            layers.push(LayerParams {
                mode_attn: AttnBlockParams::init(store, rng, &format!("{p}.mode"), dim, heads)?,
                ctx_attn: AttnBlockParams::init(store, rng, &format!("{p}.ctx"), dim, heads)?,
                future: if joint {
                    Some(AttnBlockParams::init(store, rng, &format!("{p}.future"), dim, heads)?)
                } else {
                    None
                },
                ffn: FfnParams::init(store, rng, &format!("{p}.ffn"), dim, ffn_hidden)?,
            });
        }

        // Location and confidence heads keep their random output layers: each
        // query must emit a *different* trajectory from step zero, otherwise
        // the closest-mode assignment crowns a permanent winner and the
        // remaining modes never receive regression gradient. Only the scale
        // head starts at zero so initial uncertainties are uniform and tame.
        let head_count = if share_heads { 1 } else { n_layers };
        let mut head_list = Vec::with_capacity(head_count);
        for h in 0..head_count {
            let p = format!("dec.head{h}");
            head_list.push(HeadParams {
                loc: MlpParams::init(store, rng, &format!("{p}.loc"), dim, dim, 2 * t_hat, false)?,
                scale: MlpParams::init(store, rng, &format!("{p}.scale"), dim, dim, 2 * t_hat, true)?,
                confidence: MlpParams::init(store, rng, &format!("{p}.conf"), dim, dim, 1, false)?,
            });
        }

        let joint_in = if joint {
            Some(LinearParams::init(store, rng, "dec.joint_in", dim, dim)?)
        } else {
            None
        };
        let scene_head = if joint {
            // Random for the same reason as the confidence head: joint modes
            // need distinct scene scores before any gradient arrives.
            Some(MlpParams::init(store, rng, "dec.scene_score", dim, dim, 1, false)?)
        } else {
            None
        };

        Ok(DecoderParams {
            queries: "dec.queries".to_string(),
            extra_queries: "dec.queries_extra".to_string(),
            layers,
            heads: head_list,
            joint_in,
            scene_head,
            dim,
            k_modes,
            max_modes,
            t_hat,
            share_heads,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn supports_joint(&self) -> bool {
        self.joint_in.is_some()
    }

    fn head(&self, layer: usize) -> &HeadParams {
        if self.share_heads {
            &self.heads[0]
        } else {
            &self.heads[layer]
        }
    }

    /// First `modes` rows of the query bank: trained queries, then frozen
    /// extrapolation queries.
    fn query_bank(&self, ctx: &mut Ctx, modes: usize) -> Result<Var, DecoderError> {
        if modes == 0 {
            return Err(DecoderError::NoModes);
        }
        if modes > self.max_modes {
            return Err(DecoderError::TooManyModes { requested: modes, max: self.max_modes });
        }
        let trained = ctx.p(&self.queries)?;
        if modes <= self.k_modes {
            if modes == self.k_modes {
                return Ok(trained);
            }
            let idx: Vec<usize> = (0..modes).collect();
            return Ok(ctx.tape.gather_rows(trained, &idx)?);
        }
        let extra = ctx.p(&self.extra_queries)?;
        let idx: Vec<usize> = (0..modes - self.k_modes).collect();
        let tail = ctx.tape.gather_rows(extra, &idx)?;
        Ok(ctx.tape.concat_rows(&[trained, tail])?)
    }
}

/// One refinement layer's outputs, still on the tape. `permutation` maps
/// this layer's output order to the next layer's input order
/// (`next_input[i] = output[permutation[i]]`); identity when rearrangement
/// is off and always identity for the final layer.
pub struct LayerVars {
    pub embeddings: Var,
    pub locations: Var,
    pub scales: Var,
    pub confidences: Var,
    pub permutation: Vec<usize>,
}

/// Joint counterpart: rows are (mode, agent) pairs in mode-major order and
/// ranking happens through per-mode scene scores.
pub struct JointLayerVars {
    pub embeddings: Var,
    pub locations: Var,
    pub scales: Var,
    pub scene_scores: Var,
    pub permutation: Vec<usize>,
    pub agents: usize,
}

// ---- rearrangement ------------------------------------------------------------

/// Order modes by descending confidence; equal confidences keep their
/// original relative order. Returns the gather indices
/// (`output[i] = input[perm[i]]`).
pub fn rearrangement_permutation(confidences: &[f64]) -> Result<Vec<usize>, DecoderError> {
    for (i, c) in confidences.iter().enumerate() {
        if c.is_nan() {
            return Err(DecoderError::NanConfidence(i));
        }
    }
    let mut perm: Vec<usize> = (0..confidences.len()).collect();
    perm.sort_by(|&a, &b| {
        confidences[b].partial_cmp(&confidences[a]).expect("NaN screened above").then(a.cmp(&b))
    });
    Ok(perm)
}

/// Reorder mode embeddings by descending confidence. Pure permutation: the
/// returned rows are exactly the input rows, gathered.
pub fn mode_rearrangement(
    tape: &mut Tape,
    embeddings: Var,
    confidences: &[f64],
) -> Result<(Var, Vec<usize>), DecoderError> {
    let perm = rearrangement_permutation(confidences)?;
    let out = tape.gather_rows(embeddings, &perm)?;
    Ok((out, perm))
}

fn identity_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

// ---- single-agent layers ------------------------------------------------------

/// Recurrent layer: modes emerge one at a time; step k attends over the
/// k-1 embeddings already produced (step 0 passes through untouched), then
/// grounds itself in the scene tokens. Deliberately recomputes the memory
/// projections every step — no caching — so the latency comparison against
/// the parallel layer reflects the plain formulation.
fn layer_recurrent(
    lp: &LayerParams,
    ctx: &mut Ctx,
    inputs: Var,
    scene_tokens: Var,
    causal: bool,
) -> Result<Var, DecoderError> {
    let k = ctx.tape.shape(inputs).rows;
    let mut produced: Vec<Var> = Vec::with_capacity(k);
    for step in 0..k {
        let q = ctx.tape.row(inputs, step)?;
        let h = if step == 0 || !causal {
            q
        } else {
            let memory = ctx.tape.concat_rows(&produced)?;
            lp.mode_attn.apply(ctx, q, memory, None)?
        };
        let h = lp.ctx_attn.apply(ctx, h, scene_tokens, None)?;
        let h = lp.ffn.apply(ctx, h)?;
        produced.push(h);
    }
    Ok(ctx.tape.concat_rows(&produced)?)
}

/// Parallel layer: one masked self-attention pass gives every mode access to
/// its predecessors (and itself) simultaneously.
fn layer_parallel(
    lp: &LayerParams,
    ctx: &mut Ctx,
    inputs: Var,
    scene_tokens: Var,
    causal: bool,
) -> Result<Var, DecoderError> {
    let k = ctx.tape.shape(inputs).rows;
    let mask = if causal { Some(Mask::causal(k)) } else { None };
    let h = lp.mode_attn.apply_self(ctx, inputs, mask.as_ref())?;
    let h = lp.ctx_attn.apply(ctx, h, scene_tokens, None)?;
    Ok(lp.ffn.apply(ctx, h)?)
}

fn apply_heads(
    head: &HeadParams,
    ctx: &mut Ctx,
    embeddings: Var,
) -> Result<(Var, Var, Var), DecoderError> {
    let loc = head.loc.apply(ctx, embeddings)?;
    let loc = ctx.tape.scale(loc, OUTPUT_SCALE);
    let scale = head.scale.apply(ctx, embeddings)?;
    let scale = ctx.tape.softplus(scale);
    let scale = ctx.tape.add_scalar(scale, SCALE_FLOOR);
    let conf = head.confidence.apply(ctx, embeddings)?;
    let conf = ctx.tape.sigmoid(conf);
    Ok((loc, scale, conf))
}

/// Decode `opts.modes` modes through every refinement layer. Layer 1
/// consumes the query bank; layer l+1 consumes layer l's embeddings,
/// reordered by confidence when rearrangement is on. Each layer emits a full
/// prediction through its own head; the last element is the model's answer.
pub fn multi_layer_decode(
    dp: &DecoderParams,
    ctx: &mut Ctx,
    scene: &SceneEmbedding,
    opts: &DecodeOptions,
) -> Result<Vec<LayerVars>, DecoderError> {
    let mut x = dp.query_bank(ctx, opts.modes)?;
    let n_layers = dp.layers.len();
    let mut out = Vec::with_capacity(n_layers);
    for (l, lp) in dp.layers.iter().enumerate() {
        let h = match opts.variant {
            DecoderVariant::Recurrent => layer_recurrent(lp, ctx, x, scene.tokens, opts.causal)?,
            DecoderVariant::Parallel => layer_parallel(lp, ctx, x, scene.tokens, opts.causal)?,
        };
        let (loc, scale, conf) = apply_heads(dp.head(l), ctx, h)?;
        let last = l + 1 == n_layers;
        let (next, perm) = if opts.rearrange && !last {
            let conf_values = ctx.tape.values(conf).to_vec();
            mode_rearrangement(ctx.tape, h, &conf_values)?
        } else {
            (h, identity_perm(opts.modes))
        };
        out.push(LayerVars {
            embeddings: h,
            locations: loc,
            scales: scale,
            confidences: conf,
            permutation: perm,
        });
        x = next;
    }
    Ok(out)
}

// ---- joint layers -------------------------------------------------------------

/// Row index of (mode k, agent a) in a mode-major joint embedding matrix.
#[inline]
pub fn joint_row(k: usize, a: usize, agents: usize) -> usize {
    k * agents + a
}

/// Self-attention among the agents of each joint mode, modes strictly
/// independent of each other.
pub fn future_interaction(
    block: &AttnBlockParams,
    ctx: &mut Ctx,
    x: Var,
    modes: usize,
    agents: usize,
) -> Result<Var, DecoderError> {
    let mut parts = Vec::with_capacity(modes);
    for k in 0..modes {
        let idx: Vec<usize> = (0..agents).map(|a| joint_row(k, a, agents)).collect();
        let slice = ctx.tape.gather_rows(x, &idx)?;
        parts.push(block.apply_self(ctx, slice, None)?);
    }
    Ok(ctx.tape.concat_rows(&parts)?)
}

/// Scene-level score per joint mode: element-wise max over the mode's agent
/// embeddings, projected through an MLP and squashed to (0,1).
pub fn scene_scores(
    head: &MlpParams,
    ctx: &mut Ctx,
    x: Var,
    modes: usize,
    agents: usize,
) -> Result<Var, DecoderError> {
    let mut pooled = Vec::with_capacity(modes);
    for k in 0..modes {
        let idx: Vec<usize> = (0..agents).map(|a| joint_row(k, a, agents)).collect();
        let slice = ctx.tape.gather_rows(x, &idx)?;
        pooled.push(ctx.tape.max_pool_rows(slice)?);
    }
    let g = ctx.tape.concat_rows(&pooled)?;
    let s = head.apply(ctx, g)?;
    Ok(ctx.tape.sigmoid(s))
}

/// Causal mode-to-mode attention within each agent's own mode sequence,
/// batched over agents (parallel variant).
fn joint_mode_attention_parallel(
    lp: &LayerParams,
    ctx: &mut Ctx,
    x: Var,
    modes: usize,
    agents: usize,
    causal: bool,
) -> Result<Var, DecoderError> {
    let mask = if causal { Some(Mask::causal(modes)) } else { None };
    let mut per_agent = Vec::with_capacity(agents);
    for a in 0..agents {
        let idx: Vec<usize> = (0..modes).map(|k| joint_row(k, a, agents)).collect();
        let slice = ctx.tape.gather_rows(x, &idx)?;
        per_agent.push(lp.mode_attn.apply_self(ctx, slice, mask.as_ref())?);
    }
    // per_agent concat is agent-major; gather back into mode-major order.
    let stacked = ctx.tape.concat_rows(&per_agent)?;
    let mut back = Vec::with_capacity(modes * agents);
    for k in 0..modes {
        for a in 0..agents {
            back.push(a * modes + k);
        }
    }
    Ok(ctx.tape.gather_rows(stacked, &back)?)
}

fn joint_layer_parallel(
    lp: &LayerParams,
    ctx: &mut Ctx,
    x: Var,
    scene_tokens: Var,
    modes: usize,
    agents: usize,
    causal: bool,
) -> Result<Var, DecoderError> {
    let future = lp.future.as_ref().expect("joint decode requires interaction params");
    let h = joint_mode_attention_parallel(lp, ctx, x, modes, agents, causal)?;
    let h = lp.ctx_attn.apply(ctx, h, scene_tokens, None)?;
    let h = future_interaction(future, ctx, h, modes, agents)?;
    Ok(lp.ffn.apply(ctx, h)?)
}

/// Recurrent joint layer: joint modes are produced one at a time; each mode
/// runs per-agent memory attention over that agent's earlier embeddings,
/// context attention, the interaction block, and the feed-forward update
/// before the next mode starts.
fn joint_layer_recurrent(
    lp: &LayerParams,
    ctx: &mut Ctx,
    x: Var,
    scene_tokens: Var,
    modes: usize,
    agents: usize,
    causal: bool,
) -> Result<Var, DecoderError> {
    let future = lp.future.as_ref().expect("joint decode requires interaction params");
    let mut memory: Vec<Vec<Var>> = vec![Vec::with_capacity(modes); agents];
    let mut produced = Vec::with_capacity(modes);
    for k in 0..modes {
        let mut rows = Vec::with_capacity(agents);
        for (a, mem) in memory.iter().enumerate() {
            let q = ctx.tape.row(x, joint_row(k, a, agents))?;
            let h = if k == 0 || !causal {
                q
            } else {
                let m = ctx.tape.concat_rows(mem)?;
                lp.mode_attn.apply(ctx, q, m, None)?
            };
            rows.push(h);
        }
        let mode = ctx.tape.concat_rows(&rows)?;
        let mode = lp.ctx_attn.apply(ctx, mode, scene_tokens, None)?;
        let mode = future.apply_self(ctx, mode, None)?;
        let mode = lp.ffn.apply(ctx, mode)?;
        for (a, mem) in memory.iter_mut().enumerate() {
            mem.push(ctx.tape.row(mode, a)?);
        }
        produced.push(mode);
    }
    Ok(ctx.tape.concat_rows(&produced)?)
}

/// Joint decode: one embedding per (mode, agent), mode-major. Mode k's
/// initial embedding for agent a is the mode query plus a projection of that
/// agent's encoder token, so agents within a mode are distinguishable.
/// Rearrangement between layers reorders whole modes by scene score.
pub fn joint_multi_layer_decode(
    dp: &DecoderParams,
    ctx: &mut Ctx,
    scene: &SceneEmbedding,
    target_ids: &[u64],
    opts: &DecodeOptions,
) -> Result<Vec<JointLayerVars>, DecoderError> {
    if target_ids.is_empty() {
        return Err(DecoderError::NoTargets);
    }
    let joint_in = dp.joint_in.as_ref().expect("joint decode requires joint params");
    let scene_head = dp.scene_head.as_ref().expect("joint decode requires joint params");
    let agents = target_ids.len();
    let modes = opts.modes;

    let mut rows = Vec::with_capacity(agents);
    for id in target_ids {
        let row = *scene.target_rows.get(id).ok_or(DecoderError::MissingTarget(*id))?;
        rows.push(row);
    }
    let agent_tokens = ctx.tape.gather_rows(scene.agent_tokens, &rows)?;
    let agent_embed = joint_in.apply(ctx, agent_tokens)?;

    let queries = dp.query_bank(ctx, modes)?;
    // x[(k, a)] = query_k + agent_embed_a
    let q_idx: Vec<usize> = (0..modes).flat_map(|k| std::iter::repeat(k).take(agents)).collect();
    let a_idx: Vec<usize> = (0..modes).flat_map(|_| 0..agents).collect();
    let q_rows = ctx.tape.gather_rows(queries, &q_idx)?;
    let a_rows = ctx.tape.gather_rows(agent_embed, &a_idx)?;
    let mut x = ctx.tape.add(q_rows, a_rows)?;

    let n_layers = dp.layers.len();
    let mut out = Vec::with_capacity(n_layers);
    for (l, lp) in dp.layers.iter().enumerate() {
        let h = match opts.variant {
            DecoderVariant::Recurrent => {
                joint_layer_recurrent(lp, ctx, x, scene.tokens, modes, agents, opts.causal)?
            }
            DecoderVariant::Parallel => {
                joint_layer_parallel(lp, ctx, x, scene.tokens, modes, agents, opts.causal)?
            }
        };
        let head = dp.head(l);
        let loc = head.loc.apply(ctx, h)?;
        let loc = ctx.tape.scale(loc, OUTPUT_SCALE);
        let scale = head.scale.apply(ctx, h)?;
        let scale = ctx.tape.softplus(scale);
        let scale = ctx.tape.add_scalar(scale, SCALE_FLOOR);
        let scores = scene_scores(scene_head, ctx, h, modes, agents)?;

        let last = l + 1 == n_layers;
        let (next, perm) = if opts.rearrange && !last {
            let score_values = ctx.tape.values(scores).to_vec();
            let perm = rearrangement_permutation(&score_values)?;
            let row_perm: Vec<usize> =
                perm.iter().flat_map(|&k| (0..agents).map(move |a| joint_row(k, a, agents))).collect();
            (ctx.tape.gather_rows(h, &row_perm)?, perm)
        } else {
            (h, identity_perm(modes))
        };
        out.push(JointLayerVars {
            embeddings: h,
            locations: loc,
            scales: scale,
            scene_scores: scores,
            permutation: perm,
            agents,
        });
        x = next;
    }
    Ok(out)
}

// ---- extraction ---------------------------------------------------------------

fn row_to_points(values: &[f64]) -> Vec<Point> {
    values.chunks_exact(2).map(|xy| Point { x: xy[0], y: xy[1] }).collect()
}

/// Materialize a layer's prediction as plain numbers.
pub fn prediction_set_from(tape: &Tape, layer: &LayerVars) -> PredictionSet {
    let shape = tape.shape(layer.locations);
    let cols = shape.cols;
    let loc = tape.values(layer.locations);
    let scale = tape.values(layer.scales);
    let conf = tape.values(layer.confidences);
    let modes = (0..shape.rows)
        .map(|k| ModePrediction {
            trajectory: Trajectory(row_to_points(&loc[k * cols..(k + 1) * cols])),
            scales: row_to_points(&scale[k * cols..(k + 1) * cols]),
            confidence: conf[k],
        })
        .collect();
    PredictionSet { modes }
}

/// Materialize a joint layer's prediction; trajectories follow `target_ids`
/// order within each mode.
pub fn joint_prediction_set_from(
    tape: &Tape,
    layer: &JointLayerVars,
    target_ids: &[u64],
) -> JointPredictionSet {
    let agents = layer.agents;
    let shape = tape.shape(layer.locations);
    let cols = shape.cols;
    let modes = shape.rows / agents;
    let loc = tape.values(layer.locations);
    let scale = tape.values(layer.scales);
    let scores = tape.values(layer.scene_scores);
    let mut out = Vec::with_capacity(modes);
    for k in 0..modes {
        let mut trajectories = Vec::with_capacity(agents);
        let mut scales = Vec::with_capacity(agents);
        for a in 0..agents {
            let r = joint_row(k, a, agents);
            trajectories.push(Trajectory(row_to_points(&loc[r * cols..(r + 1) * cols])));
            scales.push(row_to_points(&scale[r * cols..(r + 1) * cols]));
        }
        out.push(JointModePrediction { trajectories, scales, scene_score: scores[k] });
    }
    JointPredictionSet { target_ids: target_ids.to_vec(), modes: out }
}
