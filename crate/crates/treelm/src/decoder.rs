//! The upper model: an N-layer decoder whose first M layers each carry a
//! cross-attention sublayer over the compressed chunk states.
//!
//! Sublayer order within an injection layer is self-attention →
//! cross-attention → MLP, each pre-normed and residual. Cross-attention
//! queries and the concatenated chunk keys are rotated by chunk-level
//! positional indices: every compressed token of chunk `i` carries index
//! `i`, and every running-text token carries index `n`. The cross output
//! projection starts at zero, so an untrained model is exactly the plain
//! decoder.

use crate::compressor::{plain_block_forward, ChunkState};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::profile::{enter_scope, AttnScope};
use crate::numerics::{Tape, Tensor, ValueId};
use crate::params::{ParamStore, RMS_EPS};

/// Chunk-level rotary indices for cross-attention (`p_q` for the running
/// text, `p_k` for the concatenated compressed keys).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIndexPlan {
    pub p_q: Vec<usize>,
    pub p_k: Vec<usize>,
}

/// `p_q = [n]·query_len`, `p_k = concat_i [i]·total_len_i` over chunks in
/// chronological order.
pub fn position_plan(chunk_states: &[ChunkState], query_len: usize) -> PositionIndexPlan {
    let n = chunk_states.len();
    let p_q = vec![n; query_len];
    let p_k = chunk_states
        .iter()
        .flat_map(|s| std::iter::repeat(s.chunk_index).take(s.total_len))
        .collect();
    PositionIndexPlan { p_q, p_k }
}

/// Concatenated, head-split, position-rotated chunk states ready for
/// cross-attention. Built once per request and reused across decode steps.
#[derive(Debug, Clone)]
pub struct CrossContext {
    /// `keys[m][h]`: `[S × d_h]`, rotated by the chunk-level key indices.
    keys: Vec<Vec<Tensor>>,
    /// `values[m][h]`: `[S × d_h]`, unrotated.
    values: Vec<Vec<Tensor>>,
    pub n_chunks: usize,
    pub total_len: usize,
}

/// Assembles the cross-attention inputs from chunk states in chronological
/// order. Returns `None` for an empty context (plain-decoder degradation).
pub fn prepare_cross_context(
    chunk_states: &[ChunkState],
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<Option<CrossContext>> {
    let _ = store;
    if chunk_states.is_empty() {
        return Ok(None);
    }
    let plan = position_plan(chunk_states, 0);
    let dh = config.head_dim();
    let total_len: usize = chunk_states.iter().map(|s| s.total_len).sum();
    let mut keys = Vec::with_capacity(config.shared_layers);
    let mut values = Vec::with_capacity(config.shared_layers);
    for m in 0..config.shared_layers {
        let mut k_parts = Vec::new();
        let mut v_parts = Vec::new();
        for state in chunk_states {
            for part in &state.parts {
                if part.keys.len() != config.shared_layers {
                    return Err(Error::config(format!(
                        "chunk state carries {} layers, model shares {}",
                        part.keys.len(),
                        config.shared_layers
                    )));
                }
                k_parts.push(&part.keys[m]);
                v_parts.push(&part.values[m]);
            }
        }
        let k_all = ops::concat_rows(&k_parts)?;
        let v_all = ops::concat_rows(&v_parts)?;
        let mut k_heads = Vec::with_capacity(config.n_heads);
        let mut v_heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let kh = ops::slice_cols(&k_all, lo, hi)?;
            k_heads.push(ops::rope_apply(&kh, &plan.p_k, config.rope_base)?);
            v_heads.push(ops::slice_cols(&v_all, lo, hi)?);
        }
        keys.push(k_heads);
        values.push(v_heads);
    }
    Ok(Some(CrossContext {
        keys,
        values,
        n_chunks: chunk_states.len(),
        total_len,
    }))
}

/// The cross-attention sublayer of one injection layer, on the tape:
/// `hidden + W_co · attn(rope_n(W_cq · norm(hidden)), K′, V′)`.
pub fn cross_attention_sublayer(
    tape: &mut Tape,
    hidden: ValueId,
    layer: usize,
    cross: &CrossContext,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ValueId> {
    let ids = store.layer_ids(layer, config)?;
    let Some(cross_ids) = ids.cross else {
        return Err(Error::usage(format!(
            "layer {layer} has no cross-attention sublayer"
        )));
    };
    let t = tape.value(hidden).rows();
    let p_q = vec![cross.n_chunks; t];
    let dh = config.head_dim();

    let norm_gain = tape.param(cross_ids.norm, store.get(cross_ids.norm).clone());
    let wcq = tape.param(cross_ids.wq, store.get(cross_ids.wq).clone());
    let wco = tape.param(cross_ids.wo, store.get(cross_ids.wo).clone());

    let normed = tape.rms_norm(hidden, norm_gain, RMS_EPS)?;
    let q = tape.matmul(normed, wcq)?;
    let mut head_outs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let qh = tape.rope(qh, &p_q, config.rope_base)?;
        let kh = tape.constant(cross.keys[layer][h].clone());
        let vh = tape.constant(cross.values[layer][h].clone());
        let _scope = enter_scope(AttnScope::Cross);
        head_outs.push(tape.attention(qh, kh, vh, false)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(concat, wco)?;
    tape.add(hidden, out)
}

/// Full forward pass over the running text: embedding, N layers (causal
/// self-attention, cross-attention on the first M layers, gated MLP), final
/// norm and vocabulary projection. Returns the `[t × vocab]` logits.
pub fn forward(
    tape: &mut Tape,
    x_d: &[u32],
    cross: Option<&CrossContext>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ValueId> {
    if x_d.is_empty() {
        return Err(Error::usage("decoder forward on an empty running text"));
    }
    let t = x_d.len();
    let positions: Vec<usize> = (0..t).collect();
    let dh = config.head_dim();

    let embed = tape.param(store.embed_id(), store.get(store.embed_id()).clone());
    let mut h = tape.embedding(embed, x_d)?;

    for i in 0..config.n_layers {
        let ids = store.layer_ids(i, config)?;
        // Self-attention sublayer.
        let gain = tape.param(ids.attn_norm, store.get(ids.attn_norm).clone());
        let wq = tape.param(ids.wq, store.get(ids.wq).clone());
        let wk = tape.param(ids.wk, store.get(ids.wk).clone());
        let wv = tape.param(ids.wv, store.get(ids.wv).clone());
        let wo = tape.param(ids.wo, store.get(ids.wo).clone());
        let normed = tape.rms_norm(h, gain, RMS_EPS)?;
        let q = tape.matmul(normed, wq)?;
        let k = tape.matmul(normed, wk)?;
        let v = tape.matmul(normed, wv)?;
        let mut head_outs = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let qh = tape.rope(qh, &positions, config.rope_base)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let kh = tape.rope(kh, &positions, config.rope_base)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let _scope = enter_scope(AttnScope::DecoderSelf);
            head_outs.push(tape.attention(qh, kh, vh, true)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let attn = tape.matmul(concat, wo)?;
        h = tape.add(h, attn)?;

        // Cross-attention sublayer on injection layers.
        if let Some(cross) = cross {
            if i < config.shared_layers {
                h = cross_attention_sublayer(tape, h, i, cross, store, config)?;
            }
        }

        // Gated MLP sublayer.
        let mlp_gain = tape.param(ids.mlp_norm, store.get(ids.mlp_norm).clone());
        let wgate = tape.param(ids.wgate, store.get(ids.wgate).clone());
        let wup = tape.param(ids.wup, store.get(ids.wup).clone());
        let wdown = tape.param(ids.wdown, store.get(ids.wdown).clone());
        let normed = tape.rms_norm(h, mlp_gain, RMS_EPS)?;
        let gate_lin = tape.matmul(normed, wgate)?;
        let gate = tape.silu(gate_lin);
        let up = tape.matmul(normed, wup)?;
        let prod = tape.mul(gate, up)?;
        let mlp = tape.matmul(prod, wdown)?;
        h = tape.add(h, mlp)?;
    }

    let final_gain = tape.param(store.final_norm_id(), store.get(store.final_norm_id()).clone());
    let head = tape.param(store.head_id(), store.get(store.head_id()).clone());
    let normed = tape.rms_norm(h, final_gain, RMS_EPS)?;
    tape.matmul(normed, head)
}

/// Convenience wrapper: prepares the cross context from raw chunk states.
pub fn forward_with_states(
    tape: &mut Tape,
    x_d: &[u32],
    chunk_states: &[ChunkState],
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ValueId> {
    let cross = prepare_cross_context(chunk_states, store, config)?;
    forward(tape, x_d, cross.as_ref(), store, config)
}

/// Last-position hidden state after decoder layer 1 (self-attention + MLP;
/// no chunk states exist yet, so the cross sublayer is skipped). This is
/// the query representation for query-aware tree search.
pub fn query_repr(x_d: &[u32], store: &ParamStore, config: &ModelConfig) -> Result<Vec<f64>> {
    if x_d.is_empty() {
        return Err(Error::usage("query_repr on an empty running text"));
    }
    let _scope = enter_scope(AttnScope::Repr);
    let positions: Vec<usize> = (0..x_d.len()).collect();
    let x = ops::embedding_gather(store.get(store.embed_id()), x_d)?;
    let ids = store.layer_ids(0, config)?;
    let x = plain_block_forward(&x, store, &ids, &positions, config, None)?;
    Ok(x.row(x.rows() - 1).to_vec())
}

// ── Incremental decoding ─────────────────────────────────────────────

/// Per-layer self-attention cache: keys stored head-split and rotated at
/// their absolute positions, values head-split and unrotated.
struct LayerCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    rows: usize,
}

struct DecodeState {
    layers: Vec<LayerCache>,
    next_pos: usize,
}

impl DecodeState {
    fn new(config: &ModelConfig) -> Self {
        DecodeState {
            layers: (0..config.n_layers)
                .map(|_| LayerCache {
                    k: vec![Vec::new(); config.n_heads],
                    v: vec![Vec::new(); config.n_heads],
                    rows: 0,
                })
                .collect(),
            next_pos: 0,
        }
    }
}

/// One incremental decoder pass over a block of new tokens.
///
/// The first call (prefill) may pass many tokens and runs causal attention
/// within the block; later calls pass one token attending to the cache.
fn decode_block(
    x: &[u32],
    state: &mut DecodeState,
    cross: Option<&CrossContext>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<Tensor> {
    let t = x.len();
    let dh = config.head_dim();
    let prefill = state.next_pos == 0;
    if !prefill && t != 1 {
        return Err(Error::usage("incremental decode steps take one token"));
    }
    let positions: Vec<usize> = (state.next_pos..state.next_pos + t).collect();
    let mut h = ops::embedding_gather(store.get(store.embed_id()), x)?;

    for i in 0..config.n_layers {
        let ids = store.layer_ids(i, config)?;
        let normed = ops::rms_norm(&h, store.get(ids.attn_norm), RMS_EPS)?;
        let q = ops::matmul(&normed, store.get(ids.wq))?;
        let k = ops::matmul(&normed, store.get(ids.wk))?;
        let v = ops::matmul(&normed, store.get(ids.wv))?;
        let cache = &mut state.layers[i];
        let mut head_outs = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = ops::rope_apply(&ops::slice_cols(&q, lo, hi)?, &positions, config.rope_base)?;
            let kh = ops::rope_apply(&ops::slice_cols(&k, lo, hi)?, &positions, config.rope_base)?;
            let vh = ops::slice_cols(&v, lo, hi)?;
            cache.k[hd].extend_from_slice(kh.data());
            cache.v[hd].extend_from_slice(vh.data());
            let k_all = Tensor::from_vec(vec![cache.rows + t, dh], cache.k[hd].clone())?;
            let v_all = Tensor::from_vec(vec![cache.rows + t, dh], cache.v[hd].clone())?;
            let _scope = enter_scope(AttnScope::DecoderSelf);
            // Prefill attends causally within the block; a single decode
            // step attends to the whole cache (all positions are past).
            head_outs.push(ops::attention(&qh, &k_all, &v_all, prefill)?);
        }
        cache.rows += t;
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let attn = ops::matmul(&ops::concat_cols(&refs)?, store.get(ids.wo))?;
        h = ops::add(&h, &attn)?;

        if let (Some(cross), Some(cross_ids)) = (cross, ids.cross) {
            let p_q = vec![cross.n_chunks; t];
            let normed = ops::rms_norm(&h, store.get(cross_ids.norm), RMS_EPS)?;
            let qc = ops::matmul(&normed, store.get(cross_ids.wq))?;
            let mut outs = Vec::with_capacity(config.n_heads);
            for hd in 0..config.n_heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh =
                    ops::rope_apply(&ops::slice_cols(&qc, lo, hi)?, &p_q, config.rope_base)?;
                let _scope = enter_scope(AttnScope::Cross);
                outs.push(ops::attention(
                    &qh,
                    &cross.keys[i][hd],
                    &cross.values[i][hd],
                    false,
                )?);
            }
            let refs: Vec<&Tensor> = outs.iter().collect();
            let out = ops::matmul(&ops::concat_cols(&refs)?, store.get(cross_ids.wo))?;
            h = ops::add(&h, &out)?;
        }

        let normed = ops::rms_norm(&h, store.get(ids.mlp_norm), RMS_EPS)?;
        let gate = ops::silu(&ops::matmul(&normed, store.get(ids.wgate))?);
        let up = ops::matmul(&normed, store.get(ids.wup))?;
        let mlp = ops::matmul(&ops::mul(&gate, &up)?, store.get(ids.wdown))?;
        h = ops::add(&h, &mlp)?;
    }
    state.next_pos += t;

    let normed = ops::rms_norm(&h, store.get(store.final_norm_id()), RMS_EPS)?;
    ops::matmul(&normed, store.get(store.head_id()))
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding: prefills the prompt once, then emits up to `max_new`
/// tokens, recomputing only the new token's forward each step. The
/// compressed context is fixed throughout.
pub fn generate_greedy(
    prompt: &[u32],
    max_new: usize,
    cross: Option<&CrossContext>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::usage("generation requires a non-empty prompt"));
    }
    if max_new < 1 {
        return Err(Error::usage("max_new must be at least 1"));
    }
    let mut state = DecodeState::new(config);
    let logits = decode_block(prompt, &mut state, cross, store, config)?;
    let mut next = argmax(logits.row(logits.rows() - 1));
    let mut out = vec![next];
    while out.len() < max_new {
        let logits = decode_block(&[next], &mut state, cross, store, config)?;
        next = argmax(logits.row(0));
        out.push(next);
    }
    Ok(out)
}
