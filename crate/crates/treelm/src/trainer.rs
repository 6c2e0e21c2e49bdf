//! Loss masking, the AdamW optimizer with warmup + cosine decay, the
//! training loop, and checkpoint persistence.
//!
//! Freezing policy: the optimizer updates the cross-attention parameters,
//! decoder layers M+1..N, the final norm and the head; embeddings and the
//! shared layers 1..M stay fixed, so compressed key/value states are
//! constants for backpropagation.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress_context, CompressOptions};
use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::context_tree::PolicyKind;
use crate::decoder;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::ParamStore;
use crate::tasks::{gen_passkey_sample, split_context_running, KEY_DIGITS};

pub const GRAD_CLIP_NORM: f64 = 1.0;
const ADAM_EPS: f64 = 1e-8;

// ── Samples and masking ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    LanguageModeling,
    Instruction,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_c: Vec<u32>,
    pub x_d: Vec<u32>,
    pub mode: SampleMode,
    /// Offset into `x_d` where supervised targets begin (instruction only).
    pub response_start: Option<usize>,
}

impl TrainSample {
    pub fn lm(x_c: Vec<u32>, x_d: Vec<u32>) -> Self {
        TrainSample {
            x_c,
            x_d,
            mode: SampleMode::LanguageModeling,
            response_start: None,
        }
    }

    pub fn instruction(x_c: Vec<u32>, x_d: Vec<u32>, response_start: usize) -> Self {
        TrainSample {
            x_c,
            x_d,
            mode: SampleMode::Instruction,
            response_start: Some(response_start),
        }
    }
}

/// Boolean mask over predicted positions 1..|x_d|−1: entry `j` governs the
/// target `x_d[j+1]`. Language modeling supervises everything except the
/// first token; instruction mode supervises only the response.
pub fn target_mask(sample: &TrainSample) -> Result<Vec<bool>> {
    let t = sample.x_d.len();
    if t < 2 {
        return Err(Error::input("running text must have at least two tokens"));
    }
    match sample.mode {
        SampleMode::LanguageModeling => Ok(vec![true; t - 1]),
        SampleMode::Instruction => {
            let rs = sample
                .response_start
                .ok_or_else(|| Error::input("instruction sample without response_start"))?;
            if rs == 0 || rs >= t {
                return Err(Error::input(format!(
                    "response_start {rs} outside 1..{t}"
                )));
            }
            Ok((1..t).map(|target_pos| target_pos >= rs).collect())
        }
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// First/second moment state, aligned with a trainable-parameter id list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, trainable: &[usize]) -> Self {
        AdamState {
            m: trainable.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect(),
            v: trainable.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect(),
        }
    }
}

/// Linear warmup to the base rate, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((config.warmup_ratio * total as f64).ceil() as usize).min(total);
    if warmup > 0 && step <= warmup {
        return config.learning_rate * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// One decoupled-weight-decay Adam update with bias correction. `grads` is
/// aligned with `trainable`; `step` is 1-based.
pub fn adamw_step(
    store: &mut ParamStore,
    trainable: &[usize],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<()> {
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    for (slot, &id) in trainable.iter().enumerate() {
        let g = &grads[slot];
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let old = store.get(id);
        let mut data = old.data().to_vec();
        for e in 0..data.len() {
            m[e] = config.beta1 * m[e] + (1.0 - config.beta1) * g[e];
            v[e] = config.beta2 * v[e] + (1.0 - config.beta2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            data[e] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + config.weight_decay * data[e]);
        }
        let updated = Tensor::from_vec(old.shape().to_vec(), data)?;
        updated.check_finite(store.name(id))?;
        store.set(id, updated)?;
    }
    Ok(())
}

// ── Gradient computation ─────────────────────────────────────────────

/// Accumulated gradients plus summed loss over some samples.
pub struct GradAccum {
    pub grads: Vec<Vec<f64>>,
    pub loss_sum: f64,
    pub n_samples: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore, trainable: &[usize]) -> Self {
        GradAccum {
            grads: trainable.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect(),
            loss_sum: 0.0,
            n_samples: 0,
        }
    }
}

/// Runs compression, forward and backward for one sample, adding its
/// gradients into the accumulator. Compression policy follows the sample
/// mode: always-right for language modeling, query-aware for instruction,
/// with split noise resampled from `noise_seed`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_sample(
    sample: &TrainSample,
    run: &RunConfig,
    store: &ParamStore,
    trainable: &[usize],
    accum: &mut GradAccum,
    noise_seed: u64,
    deterministic_splits: bool,
) -> Result<f64> {
    let schedule = run.schedule.to_schedule(run.tree.depth)?;
    let (policy, query_repr) = match sample.mode {
        SampleMode::LanguageModeling => (PolicyKind::AlwaysRight, None),
        SampleMode::Instruction => {
            let rs = sample.response_start.unwrap_or(sample.x_d.len());
            let prompt = &sample.x_d[..rs.min(sample.x_d.len())];
            (
                PolicyKind::QueryAware,
                Some(decoder::query_repr(prompt, store, &run.model)?),
            )
        }
    };
    let opts = CompressOptions {
        chunk_size: run.chunk_size,
        depth: run.tree.depth,
        schedule: &schedule,
        split: run.tree.split_params(noise_seed)?,
        policy,
        query_repr,
        deterministic: deterministic_splits,
        parallel: false,
    };
    let states = compress_context(&sample.x_c, &opts, store, &run.model)?;
    let cross = decoder::prepare_cross_context(&states, store, &run.model)?;

    let mut tape = Tape::new();
    let logits = decoder::forward(&mut tape, &sample.x_d, cross.as_ref(), store, &run.model)?;
    let targets: Vec<u32> = sample.x_d[1..].to_vec();
    let mask = target_mask(sample)?;
    let loss_id = tape.lm_loss(logits, &targets, &mask)?;
    let loss = tape.value(loss_id).scalar_value()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss_id)?;
    for (slot, &id) in trainable.iter().enumerate() {
        if let Some(g) = grads.get(id) {
            for (a, b) in accum.grads[slot].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    accum.loss_sum += loss;
    accum.n_samples += 1;
    Ok(loss)
}

/// End-to-end gradient verification: analytic gradients of the masked LM
/// loss w.r.t. every trainable parameter against central finite
/// differences. Compression runs once up front — under the freezing policy
/// the compressed states do not depend on any checked parameter.
pub fn pipeline_grad_check(
    run: &RunConfig,
    sample: &TrainSample,
    store: &ParamStore,
    h: f64,
) -> Result<f64> {
    let trainable = store.trainable_ids(&run.model, true);
    let schedule = run.schedule.to_schedule(run.tree.depth)?;
    let (policy, query_repr) = match sample.mode {
        SampleMode::LanguageModeling => (PolicyKind::AlwaysRight, None),
        SampleMode::Instruction => {
            let rs = sample.response_start.unwrap_or(sample.x_d.len());
            (
                PolicyKind::QueryAware,
                Some(decoder::query_repr(&sample.x_d[..rs], store, &run.model)?),
            )
        }
    };
    let opts = CompressOptions {
        chunk_size: run.chunk_size,
        depth: run.tree.depth,
        schedule: &schedule,
        split: run.tree.split_params(run.train.seed)?,
        policy,
        query_repr,
        deterministic: true,
        parallel: false,
    };
    let states = compress_context(&sample.x_c, &opts, store, &run.model)?;
    let cross = decoder::prepare_cross_context(&states, store, &run.model)?;

    let targets: Vec<u32> = sample.x_d[1..].to_vec();
    let mask = target_mask(sample)?;
    let tensors: Vec<Tensor> = trainable.iter().map(|&id| store.get(id).clone()).collect();
    let mut f = |params: &[Tensor], tape: &mut Tape| {
        let mut patched = store.clone();
        for (slot, &id) in trainable.iter().enumerate() {
            patched.set(id, params[slot].clone())?;
        }
        let logits = decoder::forward(tape, &sample.x_d, cross.as_ref(), &patched, &run.model)?;
        tape.lm_loss(logits, &targets, &mask)
    };
    crate::numerics::grad_check_mapped(&mut f, &tensors, &trainable, h)
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Normalizes accumulated gradients to a batch mean, clips the global norm
/// to [`GRAD_CLIP_NORM`], and applies one optimizer step.
pub fn apply_step(
    store: &mut ParamStore,
    trainable: &[usize],
    mut accum: GradAccum,
    state: &mut AdamState,
    config: &TrainConfig,
    step: usize,
    total_steps: usize,
) -> Result<StepMetrics> {
    if accum.n_samples == 0 {
        return Err(Error::usage("optimizer step without accumulated samples"));
    }
    let scale = 1.0 / accum.n_samples as f64;
    let mut sq_norm = 0.0;
    for g in accum.grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
            sq_norm += *v * *v;
        }
    }
    let grad_norm = sq_norm.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if grad_norm > GRAD_CLIP_NORM {
        let clip = GRAD_CLIP_NORM / grad_norm;
        for g in accum.grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= clip;
            }
        }
    }
    let lr = lr_at(step, total_steps, config);
    adamw_step(store, trainable, &accum.grads, state, config, lr, step)?;
    Ok(StepMetrics {
        step,
        loss: accum.loss_sum / accum.n_samples as f64,
        grad_norm,
        lr,
    })
}

// ── Training driver ──────────────────────────────────────────────────

/// Fraction of the corpus reserved for held-out evaluation.
pub const HELD_OUT_FRACTION: f64 = 0.15;

pub fn train_heldout_split(corpus: &[u32]) -> (&[u32], &[u32]) {
    let cut = ((corpus.len() as f64) * (1.0 - HELD_OUT_FRACTION)) as usize;
    corpus.split_at(cut)
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<StepMetrics>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps_done: usize,
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xC2B2AE3D27D4EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Builds one training sample: a corpus window in language-modeling mode,
/// or a generated passkey sample in instruction mode.
fn draw_sample(run: &RunConfig, train_split: &[u32], rng: &mut ChaCha12Rng) -> Result<TrainSample> {
    let seq_len = run.model.max_train_len;
    if run.train.passkey_fraction > 0.0 && rng.gen::<f64>() < run.train.passkey_fraction {
        let position: f64 = rng.gen();
        let sample = gen_passkey_sample(seq_len, KEY_DIGITS, position, rng.gen(), run.running_len)?;
        let split = split_context_running(&sample.full_text, run.running_len)?;
        return Ok(TrainSample::instruction(
            split.x_c,
            split.x_d,
            sample.response_start,
        ));
    }
    if train_split.len() < seq_len {
        return Err(Error::data(format!(
            "training split of {} tokens is shorter than one window ({seq_len})",
            train_split.len()
        )));
    }
    let start = rng.gen_range(0..=train_split.len() - seq_len);
    let window = &train_split[start..start + seq_len];
    let split = split_context_running(window, run.running_len)?;
    Ok(TrainSample::lm(split.x_c, split.x_d))
}

/// Full training run over a corpus. Checkpoints (when a path is given) are
/// written every `checkpoint_every` steps and at the end; a non-finite loss
/// aborts with the last checkpoint intact.
pub fn train_model(
    run: &RunConfig,
    corpus: &[u32],
    checkpoint_path: Option<&Path>,
    resume: Option<(ParamStore, usize)>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let (train_split, _) = train_heldout_split(corpus);
    let (mut store, start_step) = match resume {
        Some((store, step)) => (store, step),
        None => (ParamStore::init(&run.model, run.train.seed)?, 0),
    };
    let trainable = store.trainable_ids(&run.model, run.train.freeze_shared);
    let mut adam = AdamState::new(&store, &trainable);

    let windows_per_epoch = if train_split.len() >= run.model.max_train_len {
        (train_split.len() / run.model.max_train_len).max(1)
    } else if run.train.passkey_fraction >= 1.0 {
        // Pure passkey recipes can train without a corpus.
        256
    } else {
        return Err(Error::data("corpus too small for one training window"));
    };
    let per_step = run.train.batch_size * run.train.grad_accum;
    let mut total_steps = (windows_per_epoch * run.train.epochs) / per_step.max(1);
    if run.train.max_steps > 0 {
        total_steps = total_steps.min(run.train.max_steps);
    }
    if total_steps == 0 {
        return Err(Error::config("training schedule resolves to zero steps"));
    }

    let mut log = Vec::with_capacity(total_steps);
    let mut first_loss = None;
    for step in start_step + 1..=total_steps {
        let mut accum = GradAccum::new(&store, &trainable);
        for micro in 0..run.train.grad_accum {
            for b in 0..run.train.batch_size {
                let sample_idx = (micro * run.train.batch_size + b) as u64;
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    run.train.seed,
                    step as u64,
                    sample_idx,
                ));
                let sample = draw_sample(run, train_split, &mut rng)?;
                let noise_seed = derive_seed(run.train.seed ^ 0xA5A5, step as u64, sample_idx);
                accumulate_sample(
                    &sample, run, &store, &trainable, &mut accum, noise_seed, false,
                )?;
            }
        }
        let metrics = apply_step(
            &mut store,
            &trainable,
            accum,
            &mut adam,
            &run.train,
            step,
            total_steps,
        )?;
        first_loss.get_or_insert(metrics.loss);
        log.push(metrics);
        if let Some(path) = checkpoint_path {
            let at_interval =
                run.train.checkpoint_every > 0 && step % run.train.checkpoint_every == 0;
            if at_interval || step == total_steps {
                save_checkpoint(&store, &run.model, &run.train, step, path)?;
            }
        }
    }
    let final_loss = log.last().map(|m| m.loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        store,
        first_loss: first_loss.unwrap_or(f64::NAN),
        final_loss,
        steps_done: total_steps,
        log,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"TLMCKPT1";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

/// Writes a JSON manifest followed by raw little-endian f32 arrays in
/// manifest order.
pub fn save_checkpoint(
    store: &ParamStore,
    model: &ModelConfig,
    train: &TrainConfig,
    step: usize,
    path: &Path,
) -> Result<CheckpointManifest> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for id in 0..store.len() {
        let t = store.get(id);
        entries.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: t.numel(),
        });
        offset += (t.numel() * 4) as u64;
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        model: model.clone(),
        train: train.clone(),
        seed: train.seed,
        step,
        params: entries,
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::checkpoint(format!("manifest serialization: {e}")))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    for id in 0..store.len() {
        for v in store.get(id).to_f32_vec() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(manifest)
}

/// Reads a checkpoint back; every parameter must match the architecture
/// implied by the stored model config, bit-exactly in f32.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::checkpoint("file too short for header"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::checkpoint("bad magic: not a model checkpoint"));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::checkpoint("truncated header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 * 1024 * 1024 {
        return Err(Error::checkpoint("implausible header size"));
    }
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::checkpoint("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&header)
        .map_err(|e| Error::checkpoint(format!("manifest parse error: {e}")))?;
    manifest.model.validate()?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut store = ParamStore::init(&manifest.model, 0)?;
    if manifest.params.len() != store.len() {
        return Err(Error::checkpoint(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .id(&entry.name)
            .map_err(|_| Error::checkpoint(format!("unknown parameter '{}'", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::checkpoint(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                store.get(id).shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(Error::checkpoint(format!(
                "payload truncated: parameter '{}' needs bytes {start}..{end}, have {}",
                entry.name,
                payload.len()
            )));
        }
        let floats: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_f32_slice(entry.shape.clone(), &floats)?;
        tensor.check_finite(&entry.name)?;
        store.set(id, tensor)?;
    }
    Ok((store, manifest))
}


#[cfg(test)]
mod gradcheck_tests {
    use super::*;
    use crate::config::{ModelConfig, ScheduleSettings, TreeSettings};

    /// The canonical tiny configuration for end-to-end gradient fidelity:
    /// N=2, M=1, d=16, vocab=32, |x_c|=32, |x_d|=16.
    pub(crate) fn gradcheck_run_config() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            n_layers: 2,
            shared_layers: 1,
            d_model: 16,
            n_heads: 2,
            vocab_size: 32,
            rope_base: 10000.0,
            max_train_len: 64,
        };
        run.chunk_size = 32;
        run.running_len = 16;
        run.tree = TreeSettings {
            depth: 2,
            gamma: 5.0,
            min_len: 8,
            policy: PolicyKind::AlwaysRight,
        };
        run.schedule = ScheduleSettings {
            alpha_leaf: 2,
            uniform_alpha: None,
        };
        run
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let run = gradcheck_run_config();
        let store = ParamStore::init(&run.model, 77).unwrap();
        let x_c: Vec<u32> = (0..32u32).map(|i| (i * 11 + 3) % 32).collect();
        let x_d: Vec<u32> = (0..16u32).map(|i| (i * 7 + 1) % 32).collect();
        let sample = TrainSample::lm(x_c, x_d);
        let err = pipeline_grad_check(&run, &sample, &store, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative gradient error {err}");
    }
}
