//! Global instrumentation: attention MAC tallies and the live-tensor-bytes
//! high-water mark.
//!
//! MAC accounting counts multiply-accumulates in the attention score
//! (`q·kᵀ`) and value-mixing (`probs·v`) matmuls; every other matmul in the
//! model (projections, MLP, vocabulary head) is tallied separately under
//! `proj_macs`. The attention primitives themselves increment the counters,
//! so a count is only recorded when the corresponding loop actually ran.
//!
//! Peak memory is the high-water mark of live `Tensor` buffer bytes, updated
//! by the tensor allocator, not OS RSS.

use std::sync::atomic::{AtomicU64, Ordering};

/// Which part of the pipeline an attention call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScope {
    /// Causal self-attention inside compressor node encodes (layers 1..M).
    CompressorSelf,
    /// Causal self-attention over the running text in the decoder (all N layers).
    DecoderSelf,
    /// Non-causal cross-attention over compressed chunk states (layers 1..M).
    Cross,
    /// One-layer representation forwards used by query-aware tree search.
    Repr,
    /// Anything not attributed (tests, ad-hoc calls).
    Other,
}

const N_SCOPES: usize = 5;

fn scope_idx(scope: AttnScope) -> usize {
    match scope {
        AttnScope::CompressorSelf => 0,
        AttnScope::DecoderSelf => 1,
        AttnScope::Cross => 2,
        AttnScope::Repr => 3,
        AttnScope::Other => 4,
    }
}

static SCORE_MACS: [AtomicU64; N_SCOPES] = [
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
];
static MIX_MACS: [AtomicU64; N_SCOPES] = [
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
    AtomicU64::new(0),
];
static PROJ_MACS: AtomicU64 = AtomicU64::new(0);

static LIVE_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static CURRENT_SCOPE: std::cell::Cell<AttnScope> = const { std::cell::Cell::new(AttnScope::Other) };
}

/// Sets the attention scope for the current thread; restores on drop.
pub struct ScopeGuard {
    prev: AttnScope,
}

pub fn enter_scope(scope: AttnScope) -> ScopeGuard {
    let prev = CURRENT_SCOPE.with(|s| {
        let prev = s.get();
        s.set(scope);
        prev
    });
    ScopeGuard { prev }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        CURRENT_SCOPE.with(|s| s.set(prev));
    }
}

pub(crate) fn record_score_macs(n: u64) {
    let scope = CURRENT_SCOPE.with(|s| s.get());
    SCORE_MACS[scope_idx(scope)].fetch_add(n, Ordering::Relaxed);
}

pub(crate) fn record_mix_macs(n: u64) {
    let scope = CURRENT_SCOPE.with(|s| s.get());
    MIX_MACS[scope_idx(scope)].fetch_add(n, Ordering::Relaxed);
}

pub(crate) fn record_proj_macs(n: u64) {
    PROJ_MACS.fetch_add(n, Ordering::Relaxed);
}

/// Snapshot of the MAC counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub compressor_score: u64,
    pub decoder_self_score: u64,
    pub cross_score: u64,
    pub repr_score: u64,
    pub other_score: u64,
    pub compressor_mix: u64,
    pub decoder_self_mix: u64,
    pub cross_mix: u64,
    pub repr_mix: u64,
    pub other_mix: u64,
    pub proj: u64,
}

impl MacCounts {
    /// Total attention MACs (score + mix), all scopes.
    pub fn attention_total(&self) -> u64 {
        self.score_total() + self.mix_total()
    }

    pub fn score_total(&self) -> u64 {
        self.compressor_score
            + self.decoder_self_score
            + self.cross_score
            + self.repr_score
            + self.other_score
    }

    pub fn mix_total(&self) -> u64 {
        self.compressor_mix
            + self.decoder_self_mix
            + self.cross_mix
            + self.repr_mix
            + self.other_mix
    }
}

pub fn reset_macs() {
    for c in &SCORE_MACS {
        c.store(0, Ordering::Relaxed);
    }
    for c in &MIX_MACS {
        c.store(0, Ordering::Relaxed);
    }
    PROJ_MACS.store(0, Ordering::Relaxed);
}

pub fn mac_counts() -> MacCounts {
    MacCounts {
        compressor_score: SCORE_MACS[0].load(Ordering::Relaxed),
        decoder_self_score: SCORE_MACS[1].load(Ordering::Relaxed),
        cross_score: SCORE_MACS[2].load(Ordering::Relaxed),
        repr_score: SCORE_MACS[3].load(Ordering::Relaxed),
        other_score: SCORE_MACS[4].load(Ordering::Relaxed),
        compressor_mix: MIX_MACS[0].load(Ordering::Relaxed),
        decoder_self_mix: MIX_MACS[1].load(Ordering::Relaxed),
        cross_mix: MIX_MACS[2].load(Ordering::Relaxed),
        repr_mix: MIX_MACS[3].load(Ordering::Relaxed),
        other_mix: MIX_MACS[4].load(Ordering::Relaxed),
        proj: PROJ_MACS.load(Ordering::Relaxed),
    }
}

pub(crate) fn record_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes as u64, Ordering::Relaxed) + bytes as u64;
    let mut peak = PEAK_BYTES.load(Ordering::Relaxed);
    while live > peak {
        match PEAK_BYTES.compare_exchange_weak(peak, live, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => break,
            Err(p) => peak = p,
        }
    }
}

pub(crate) fn record_dealloc(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes as u64, Ordering::Relaxed);
}

pub fn live_tensor_bytes() -> u64 {
    LIVE_BYTES.load(Ordering::Relaxed)
}

pub fn peak_tensor_bytes() -> u64 {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the current live byte count.
pub fn reset_peak_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}
