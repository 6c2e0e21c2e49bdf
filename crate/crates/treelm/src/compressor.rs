//! The lower model: the first M transformer layers used to encode each
//! preserved tree node independently and emit downsampled per-layer
//! key/value states for every chunk.
//!
//! Keys and values are captured straight after the K/V projections, before
//! any rotary rotation; chunk-level position information is applied only at
//! cross-attention time. Every node is encoded with node-local positions
//! starting at 0.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::context_tree::{
    build_tree_traced, downsample_indices, tree_compressed_length, CompressionSchedule,
    ContextTree, PolicyKind, SplitParams, SplitRecord, TreeNode,
};
use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::profile::{enter_scope, AttnScope};
use crate::numerics::Tensor;
use crate::params::{LayerIds, ParamStore, RMS_EPS};

/// Per-layer key/value states of one encoded node: `keys[m]`, `values[m]`
/// are `[l × d]` for each of the M shared layers (the `(M, l, d)` stack).
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl LayerKv {
    pub fn seq_len(&self) -> usize {
        self.keys.first().map(|k| k.rows()).unwrap_or(0)
    }
}

/// Downsampled key/value states of one preserved node.
#[derive(Debug, Clone)]
pub struct CompressedKv {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub source_node: TreeNode,
}

impl CompressedKv {
    pub fn compressed_len(&self) -> usize {
        self.keys.first().map(|k| k.rows()).unwrap_or(0)
    }
}

/// The compressed state of one chunk: its parts in document order.
#[derive(Debug, Clone)]
pub struct ChunkState {
    pub chunk_index: usize,
    pub parts: Vec<CompressedKv>,
    pub total_len: usize,
}

/// One transformer block in plain (inference) mode. When `capture` is set,
/// the pre-rotation key/value projections are appended to it.
pub(crate) fn plain_block_forward(
    x: &Tensor,
    store: &ParamStore,
    ids: &LayerIds,
    positions: &[usize],
    config: &ModelConfig,
    mut capture: Option<&mut (Vec<Tensor>, Vec<Tensor>)>,
) -> Result<Tensor> {
    let dh = config.head_dim();
    let normed = ops::rms_norm(x, store.get(ids.attn_norm), RMS_EPS)?;
    let q = ops::matmul(&normed, store.get(ids.wq))?;
    let k = ops::matmul(&normed, store.get(ids.wk))?;
    let v = ops::matmul(&normed, store.get(ids.wv))?;
    if let Some((ks, vs)) = capture.as_deref_mut() {
        ks.push(k.clone());
        vs.push(v.clone());
    }
    let mut head_outs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = ops::rope_apply(&ops::slice_cols(&q, lo, hi)?, positions, config.rope_base)?;
        let kh = ops::rope_apply(&ops::slice_cols(&k, lo, hi)?, positions, config.rope_base)?;
        let vh = ops::slice_cols(&v, lo, hi)?;
        head_outs.push(ops::attention(&qh, &kh, &vh, true)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let attn = ops::matmul(&ops::concat_cols(&refs)?, store.get(ids.wo))?;
    let x = ops::add(x, &attn)?;

    let normed = ops::rms_norm(&x, store.get(ids.mlp_norm), RMS_EPS)?;
    let gate = ops::silu(&ops::matmul(&normed, store.get(ids.wgate))?);
    let up = ops::matmul(&normed, store.get(ids.wup))?;
    let mlp = ops::matmul(&ops::mul(&gate, &up)?, store.get(ids.wdown))?;
    ops::add(&x, &mlp)
}

/// Encodes one node with the M shared layers, capturing each layer's
/// pre-rotation key/value projections.
pub fn encode_node(tokens: &[u32], store: &ParamStore, config: &ModelConfig) -> Result<LayerKv> {
    if tokens.is_empty() {
        return Err(Error::usage("encode_node on an empty token list"));
    }
    if tokens.len() > config.max_train_len {
        return Err(Error::usage(format!(
            "node of {} tokens exceeds the maximum forward length {}",
            tokens.len(),
            config.max_train_len
        )));
    }
    let _scope = enter_scope(AttnScope::CompressorSelf);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = ops::embedding_gather(store.get(store.embed_id()), tokens)?;
    let mut captured = (Vec::new(), Vec::new());
    for m in 0..config.shared_layers {
        let ids = store.layer_ids(m, config)?;
        x = plain_block_forward(&x, store, &ids, &positions, config, Some(&mut captured))?;
    }
    Ok(LayerKv {
        keys: captured.0,
        values: captured.1,
    })
}

/// Hidden state at the last position after one shared layer; the node
/// representation used by query-aware branch selection.
pub fn node_repr(tokens: &[u32], store: &ParamStore, config: &ModelConfig) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::usage("node_repr on an empty token list"));
    }
    let _scope = enter_scope(AttnScope::Repr);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let x = ops::embedding_gather(store.get(store.embed_id()), tokens)?;
    let ids = store.layer_ids(0, config)?;
    let x = plain_block_forward(&x, store, &ids, &positions, config, None)?;
    Ok(x.row(x.rows() - 1).to_vec())
}

/// Keeps the rows at `downsample_indices(l, alpha)`, the same indices for
/// every layer and for keys and values.
pub fn compress_node(kv: &LayerKv, alpha: f64, source_node: TreeNode) -> Result<CompressedKv> {
    if alpha < 1.0 {
        return Err(Error::config(format!("keep ratio must be ≥ 1, got {alpha}")));
    }
    let l = kv.seq_len();
    let idx = downsample_indices(l, alpha);
    let keys = kv
        .keys
        .iter()
        .map(|k| ops::gather_rows(k, &idx))
        .collect::<Result<Vec<_>>>()?;
    let values = kv
        .values
        .iter()
        .map(|v| ops::gather_rows(v, &idx))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedKv {
        keys,
        values,
        source_node,
    })
}

/// Encodes and compresses every preserved node of a chunk's tree.
pub fn compress_chunk(
    chunk_tokens: &[u32],
    chunk_index: usize,
    tree: &ContextTree,
    schedule: &CompressionSchedule,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ChunkState> {
    if tree.chunk_len() != chunk_tokens.len() {
        return Err(Error::usage(format!(
            "tree covers {} tokens but the chunk has {}",
            tree.chunk_len(),
            chunk_tokens.len()
        )));
    }
    if tree.depth > schedule.depth {
        return Err(Error::config(format!(
            "tree depth {} exceeds schedule depth {}",
            tree.depth, schedule.depth
        )));
    }
    let mut parts = Vec::with_capacity(tree.preserved.len());
    for node in &tree.preserved {
        let alpha = schedule.alpha_for_level(node.level)?;
        let kv = encode_node(&chunk_tokens[node.start..node.end], store, config)?;
        parts.push(compress_node(&kv, alpha, *node)?);
    }
    let total_len: usize = parts.iter().map(|p| p.compressed_len()).sum();
    debug_assert_eq!(total_len, tree_compressed_length(tree, schedule)?);
    Ok(ChunkState {
        chunk_index,
        parts,
        total_len,
    })
}

/// Everything `compress_context` needs besides the raw tokens.
pub struct CompressOptions<'a> {
    pub chunk_size: usize,
    pub depth: usize,
    pub schedule: &'a CompressionSchedule,
    pub split: SplitParams,
    pub policy: PolicyKind,
    /// Query representation, required under the query-aware policy.
    pub query_repr: Option<Vec<f64>>,
    /// ε = 0 splitting (evaluation); training resamples noise per call.
    pub deterministic: bool,
    pub parallel: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives a per-chunk split seed from the base seed.
pub fn chunk_seed(base: u64, chunk_index: usize) -> u64 {
    splitmix64(base ^ (chunk_index as u64).wrapping_mul(0xA24BAED4963EE407))
}

fn build_and_compress_one(
    chunk_tokens: &[u32],
    chunk_index: usize,
    opts: &CompressOptions<'_>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<(ChunkState, ContextTree, Vec<SplitRecord>)> {
    let split = SplitParams {
        rng_seed: chunk_seed(opts.split.rng_seed, chunk_index),
        ..opts.split
    };
    let mut repr = |start: usize, end: usize| -> Result<Vec<f64>> {
        node_repr(&chunk_tokens[start..end], store, config)
    };
    let (tree, trace) = build_tree_traced(
        chunk_index,
        chunk_tokens.len(),
        opts.depth,
        &split,
        opts.policy,
        if opts.policy == PolicyKind::QueryAware {
            Some(&mut repr)
        } else {
            None
        },
        opts.query_repr.as_deref(),
        opts.deterministic,
    )?;
    let state = compress_chunk(chunk_tokens, chunk_index, &tree, opts.schedule, store, config)?;
    Ok((state, tree, trace))
}

/// Splits the past context into contiguous chunks, builds one tree per
/// chunk, and compresses each. Chunk states come back in chronological
/// order; chunk work is independent and may run in parallel.
pub fn compress_context(
    context_tokens: &[u32],
    opts: &CompressOptions<'_>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<Vec<ChunkState>> {
    Ok(compress_context_traced(context_tokens, opts, store, config)?
        .into_iter()
        .map(|(state, _, _)| state)
        .collect())
}

/// See [`compress_context`]; also returns each chunk's tree and split trace.
pub fn compress_context_traced(
    context_tokens: &[u32],
    opts: &CompressOptions<'_>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<Vec<(ChunkState, ContextTree, Vec<SplitRecord>)>> {
    if opts.chunk_size < 2 * opts.split.min_len {
        return Err(Error::config(format!(
            "chunk size {} below twice the minimum node length {}",
            opts.chunk_size, opts.split.min_len
        )));
    }
    if context_tokens.is_empty() {
        return Ok(Vec::new());
    }
    if opts.policy == PolicyKind::QueryAware && opts.query_repr.is_none() {
        return Err(Error::usage(
            "query-aware compression requires a query representation",
        ));
    }
    let chunks: Vec<&[u32]> = context_tokens.chunks(opts.chunk_size).collect();
    if opts.parallel {
        chunks
            .par_iter()
            .enumerate()
            .map(|(i, chunk)| build_and_compress_one(chunk, i, opts, store, config))
            .collect()
    } else {
        chunks
            .iter()
            .enumerate()
            .map(|(i, chunk)| build_and_compress_one(chunk, i, opts, store, config))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_tree::{build_tree, schedule_for};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            shared_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 32,
            rope_base: 10000.0,
            max_train_len: 256,
            ..Default::default()
        }
    }

    fn toks(n: usize, seed: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 7 + seed) % 32).collect()
    }

    #[test]
    fn encode_node_shapes_are_m_l_d() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let kv = encode_node(&toks(9, 1), &store, &cfg).unwrap();
        assert_eq!(kv.keys.len(), cfg.shared_layers);
        assert_eq!(kv.values.len(), cfg.shared_layers);
        for m in 0..cfg.shared_layers {
            assert_eq!(kv.keys[m].shape(), &[9, cfg.d_model]);
            assert_eq!(kv.values[m].shape(), &[9, cfg.d_model]);
        }
    }

    #[test]
    fn encode_node_is_deterministic() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let a = encode_node(&toks(12, 3), &store, &cfg).unwrap();
        let b = encode_node(&toks(12, 3), &store, &cfg).unwrap();
        for m in 0..cfg.shared_layers {
            assert_eq!(a.keys[m], b.keys[m]);
            assert_eq!(a.values[m], b.values[m]);
        }
    }

    #[test]
    fn encode_single_token_node() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let kv = encode_node(&[5], &store, &cfg).unwrap();
        assert_eq!(kv.keys[0].shape(), &[1, cfg.d_model]);
    }

    #[test]
    fn encode_rejects_empty_input() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        assert!(matches!(
            encode_node(&[], &store, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn compress_node_identity_at_alpha_one() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let node = TreeNode {
            start: 0,
            end: 8,
            level: 1,
            status: crate::context_tree::NodeStatus::Preserved,
        };
        let kv = encode_node(&toks(8, 0), &store, &cfg).unwrap();
        let c = compress_node(&kv, 1.0, node).unwrap();
        for m in 0..cfg.shared_layers {
            assert_eq!(c.keys[m], kv.keys[m]);
            assert_eq!(c.values[m], kv.values[m]);
        }
    }

    #[test]
    fn compress_node_keeps_source_rows() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let node = TreeNode {
            start: 0,
            end: 8,
            level: 1,
            status: crate::context_tree::NodeStatus::Preserved,
        };
        let kv = encode_node(&toks(8, 2), &store, &cfg).unwrap();
        let c = compress_node(&kv, 4.0, node).unwrap();
        // l=8, alpha=4 keeps rows {2, 6} on every layer, bit-equal.
        assert_eq!(c.compressed_len(), 2);
        for m in 0..cfg.shared_layers {
            assert_eq!(c.keys[m].row(0), kv.keys[m].row(2));
            assert_eq!(c.keys[m].row(1), kv.keys[m].row(6));
            assert_eq!(c.values[m].row(0), kv.values[m].row(2));
            assert_eq!(c.values[m].row(1), kv.values[m].row(6));
        }
    }

    #[test]
    fn compress_chunk_total_matches_tree_arithmetic() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let tokens = toks(128, 0);
        let split = SplitParams::new(5.0, 8, 3).unwrap();
        let tree = build_tree(0, 128, 3, &split, PolicyKind::AlwaysRight, None, None, true)
            .unwrap();
        let schedule = schedule_for(3, 2).unwrap();
        let state = compress_chunk(&tokens, 0, &tree, &schedule, &store, &cfg).unwrap();
        assert_eq!(state.total_len, tree_compressed_length(&tree, &schedule).unwrap());
        // 64/8 + 32/4 + 16/2 + 16/2 = 32
        assert_eq!(state.total_len, 32);
    }

    #[test]
    fn node_encoding_independent_of_siblings() {
        // The same node tokens inside different chunks yield identical
        // compressed states: encoding sees node-local positions only.
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let node_tokens = toks(16, 9);
        let a = encode_node(&node_tokens, &store, &cfg).unwrap();
        let b = encode_node(&node_tokens, &store, &cfg).unwrap();
        assert_eq!(a.keys[1], b.keys[1]);
    }

    #[test]
    fn compress_context_chunking() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let schedule = schedule_for(2, 2).unwrap();
        let opts = CompressOptions {
            chunk_size: 64,
            depth: 2,
            schedule: &schedule,
            split: SplitParams::new(5.0, 8, 11).unwrap(),
            policy: PolicyKind::AlwaysRight,
            query_repr: None,
            deterministic: true,
            parallel: false,
        };
        let states = compress_context(&toks(192, 0), &opts, &store, &cfg).unwrap();
        assert_eq!(states.len(), 3);
        for (i, s) in states.iter().enumerate() {
            assert_eq!(s.chunk_index, i);
        }
        // Ragged tail: 200 = 64 + 64 + 64 + 8, the last tree degenerates.
        let states = compress_context(&toks(200, 0), &opts, &store, &cfg).unwrap();
        assert_eq!(states.len(), 4);
        assert_eq!(states[3].parts.len(), 1);
    }

    #[test]
    fn empty_context_compresses_to_nothing() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let schedule = schedule_for(2, 2).unwrap();
        let opts = CompressOptions {
            chunk_size: 64,
            depth: 2,
            schedule: &schedule,
            split: SplitParams::new(5.0, 8, 11).unwrap(),
            policy: PolicyKind::AlwaysRight,
            query_repr: None,
            deterministic: true,
            parallel: false,
        };
        assert!(compress_context(&[], &opts, &store, &cfg).unwrap().is_empty());
    }

    #[test]
    fn parallel_and_sequential_compression_agree_bitwise() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let schedule = schedule_for(2, 2).unwrap();
        let tokens = toks(320, 4);
        let mk = |parallel: bool| CompressOptions {
            chunk_size: 64,
            depth: 2,
            schedule: &schedule,
            split: SplitParams::new(5.0, 8, 23).unwrap(),
            policy: PolicyKind::Random,
            query_repr: None,
            deterministic: false,
            parallel,
        };
        let seq = compress_context(&tokens, &mk(false), &store, &cfg).unwrap();
        let par = compress_context(&tokens, &mk(true), &store, &cfg).unwrap();
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.total_len, b.total_len);
            for (pa, pb) in a.parts.iter().zip(&b.parts) {
                assert_eq!(pa.source_node, pb.source_node);
                for m in 0..cfg.shared_layers {
                    assert_eq!(pa.keys[m], pb.keys[m]);
                    assert_eq!(pa.values[m], pb.values[m]);
                }
            }
        }
    }

    #[test]
    fn node_repr_has_model_dimension_and_is_deterministic() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let a = node_repr(&toks(7, 5), &store, &cfg).unwrap();
        let b = node_repr(&toks(7, 5), &store, &cfg).unwrap();
        assert_eq!(a.len(), cfg.d_model);
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_repr_is_single_step_trace() {
        // For a 1-token input the representation equals the one-layer
        // output of that token's embedding at position 0.
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 0).unwrap();
        let r = node_repr(&[3], &store, &cfg).unwrap();
        let x = ops::embedding_gather(store.get(store.embed_id()), &[3]).unwrap();
        let ids = store.layer_ids(0, &cfg).unwrap();
        let y = plain_block_forward(&x, &store, &ids, &[0], &cfg, None).unwrap();
        assert_eq!(r, y.row(0));
    }
}
