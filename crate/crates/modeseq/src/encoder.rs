//! Scene encoder: turns a normalized scene into the token matrix the
//! decoders cross-attend to.
//!
//! Per agent, each history step is embedded by a shared affine + tanh and the
//! steps are pooled into one token by attention with a learned query. Map
//! polylines are embedded per point and max-pooled per polyline. One block of
//! agent-map cross-attention, agent-agent self-attention, and a feed-forward
//! update then mixes context into the agent tokens. Target agents get a
//! learned marker added to their token before the attention block so the
//! encoder knows who is being predicted.

use crate::nn::{AttnBlockParams, Bindings, Ctx, FfnParams, LayerNormParams, LinearParams, NnError, ParamStore};
use crate::num::{NumError, Shape, Tape, Var};
use crate::scene::{AgentKind, PolylineKind, Scene};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Inputs are metric coordinates; this keeps them inside tanh's useful range.
const POS_SCALE: f64 = 0.1;
const VEL_SCALE: f64 = 0.1;

const AGENT_FEATURES: usize = 9; // x, y, vx, vy, cos, sin + 3 kind bits
const MAP_FEATURES: usize = 7; // x, y, dx, dy + 3 kind bits

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("scene has no agents")]
    EmptyScene,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Encoder output: agent tokens, map tokens, and the combined matrix the
/// decoder attends to. The `Var`s are only valid on the tape that built them.
pub struct SceneEmbedding {
    pub agent_tokens: Var,
    pub map_tokens: Option<Var>,
    /// `[A + M, D]` — agents first, map polylines after.
    pub tokens: Var,
    /// Target agent id → row in `agent_tokens`.
    pub target_rows: BTreeMap<u64, usize>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    agent_in: LinearParams,
    time_query: String,
    time_pool: AttnBlockParams,
    map_in: LinearParams,
    target_marker: String,
    agent_map: AttnBlockParams,
    agent_agent: AttnBlockParams,
    ffn: FfnParams,
    out_ln: LayerNormParams,
    pub dim: usize,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<EncoderParams, NnError> {
        let agent_in = LinearParams::init(store, rng, "enc.agent_in", AGENT_FEATURES, dim)?;
        store.add_uniform("enc.time_query", 1, dim, 0.5, true, rng)?;
        let time_pool = AttnBlockParams::init(store, rng, "enc.time_pool", dim, heads)?;
        let map_in = LinearParams::init(store, rng, "enc.map_in", MAP_FEATURES, dim)?;
        store.add_uniform("enc.target_marker", 1, dim, 0.5, true, rng)?;
        let agent_map = AttnBlockParams::init(store, rng, "enc.agent_map", dim, heads)?;
        let agent_agent = AttnBlockParams::init(store, rng, "enc.agent_agent", dim, heads)?;
        let ffn = FfnParams::init(store, rng, "enc.ffn", dim, ffn_hidden)?;
        let out_ln = LayerNormParams::init(store, "enc.out_ln", dim)?;
        Ok(EncoderParams {
            agent_in,
            time_query: "enc.time_query".to_string(),
            time_pool,
            map_in,
            target_marker: "enc.target_marker".to_string(),
            agent_map,
            agent_agent,
            ffn,
            out_ln,
            dim,
        })
    }
}

fn agent_kind_onehot(kind: AgentKind) -> [f64; 3] {
    match kind {
        AgentKind::Vehicle => [1.0, 0.0, 0.0],
        AgentKind::Pedestrian => [0.0, 1.0, 0.0],
        AgentKind::Cyclist => [0.0, 0.0, 1.0],
    }
}

fn polyline_kind_onehot(kind: PolylineKind) -> [f64; 3] {
    match kind {
        PolylineKind::Lane => [1.0, 0.0, 0.0],
        PolylineKind::Branch => [0.0, 1.0, 0.0],
        PolylineKind::Boundary => [0.0, 0.0, 1.0],
    }
}

/// Encode a target-frame scene. The embedding lives on `ctx`'s tape.
pub fn encode_scene(
    params: &EncoderParams,
    ctx: &mut Ctx,
    scene: &Scene,
) -> Result<SceneEmbedding, EncoderError> {
    if scene.agents.is_empty() {
        return Err(EncoderError::EmptyScene);
    }
    let dim = params.dim;

    let time_query = ctx.p(&params.time_query)?;
    let marker = ctx.p(&params.target_marker)?;

    let mut agent_rows: Vec<Var> = Vec::with_capacity(scene.agents.len());
    let mut target_rows = BTreeMap::new();
    for (row, agent) in scene.agents.iter().enumerate() {
        let onehot = agent_kind_onehot(agent.kind);
        let mut feats = Vec::with_capacity(agent.history.len() * AGENT_FEATURES);
        for s in &agent.history {
            feats.extend_from_slice(&[
                s.x * POS_SCALE,
                s.y * POS_SCALE,
                s.vx * VEL_SCALE,
                s.vy * VEL_SCALE,
                s.heading.cos(),
                s.heading.sin(),
                onehot[0],
                onehot[1],
                onehot[2],
            ]);
        }
        let steps = ctx
            .tape
            .leaf(Shape::new(agent.history.len(), AGENT_FEATURES), feats, false)?;
        let steps = params.agent_in.apply(ctx, steps)?;
        let steps = ctx.tape.tanh(steps);
        // Learned query + residual: the token starts from the query and
        // absorbs the history through attention.
        let mut token = params.time_pool.apply(ctx, time_query, steps, None)?;
        if scene.targets.contains(&agent.id) {
            token = ctx.tape.add(token, marker)?;
            target_rows.insert(agent.id, row);
        }
        agent_rows.push(token);
    }
    let mut agents = ctx.tape.concat_rows(&agent_rows)?;

    let map_tokens = if scene.map.is_empty() {
        None
    } else {
        let mut rows = Vec::with_capacity(scene.map.len());
        for polyline in &scene.map {
            let onehot = polyline_kind_onehot(polyline.kind);
            let pts = &polyline.points;
            let mut feats = Vec::with_capacity(pts.len() * MAP_FEATURES);
            for (i, p) in pts.iter().enumerate() {
                // Direction to the next point; the final point reuses the
                // incoming segment so every row carries a heading.
                let (ax, bx) = if i + 1 < pts.len() { (i, i + 1) } else { (i - 1, i) };
                feats.extend_from_slice(&[
                    p.x * POS_SCALE,
                    p.y * POS_SCALE,
                    pts[bx].x - pts[ax].x,
                    pts[bx].y - pts[ax].y,
                    onehot[0],
                    onehot[1],
                    onehot[2],
                ]);
            }
            let pts_var = ctx.tape.leaf(Shape::new(pts.len(), MAP_FEATURES), feats, false)?;
            let emb = params.map_in.apply(ctx, pts_var)?;
            let emb = ctx.tape.tanh(emb);
            rows.push(ctx.tape.max_pool_rows(emb)?);
        }
        Some(ctx.tape.concat_rows(&rows)?)
    };

    if let Some(map) = map_tokens {
        agents = params.agent_map.apply(ctx, agents, map, None)?;
    }
    agents = params.agent_agent.apply_self(ctx, agents, None)?;
    agents = params.ffn.apply(ctx, agents)?;
    agents = params.out_ln.apply(ctx, agents)?;

    let (map_tokens, tokens) = match map_tokens {
        Some(map) => {
            let map = params.out_ln.apply(ctx, map)?;
            (Some(map), ctx.tape.concat_rows(&[agents, map])?)
        }
        None => (None, agents),
    };

    Ok(SceneEmbedding { agent_tokens: agents, map_tokens, tokens, target_rows, dim })
}

/// Convenience for tests and tools: run the encoder on a fresh tape.
pub fn encode_on_tape<'a>(
    params: &EncoderParams,
    tape: &'a mut Tape,
    store: &ParamStore,
    binds: &'a mut Bindings,
    scene: &Scene,
) -> Result<SceneEmbedding, EncoderError> {
    let mut ctx = Ctx::new(tape, store, binds);
    encode_scene(params, &mut ctx, scene)
}
