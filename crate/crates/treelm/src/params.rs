//! Named parameter storage.
//!
//! The compressor is not a separate model: its M layers are the decoder's
//! layers 1..M, read from the same store. The freezing policy trains the
//! cross-attention parameters, the top N−M layers, the final norm and the
//! output head, keeping the embedding and the shared layers fixed so the
//! compressor and decoder stay consistent.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RMS_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameter ids of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub cross: Option<CrossIds>,
    pub mlp_norm: usize,
    pub wgate: usize,
    pub wup: usize,
    pub wdown: usize,
}

/// Cross-attention sublayer parameter ids (layers 1..M only).
#[derive(Debug, Clone, Copy)]
pub struct CrossIds {
    pub norm: usize,
    pub wq: usize,
    pub wo: usize,
}

impl ParamStore {
    /// Random initialization: weights ~ Normal(0, 0.02), norm gains 1,
    /// cross output projections 0, cross query projections copied from the
    /// layer's self-attention query weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let d = config.d_model;
        let ffn = config.ffn_hidden();

        let mut store = ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        let randn = |shape: Vec<usize>, rng: &mut ChaCha12Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(shape, data).expect("shape matches data")
        };
        let ones = |n: usize| Tensor::from_vec(vec![n], vec![1.0; n]).expect("shape matches data");

        store.push("embed", randn(vec![config.vocab_size, d], &mut rng));
        for i in 0..config.n_layers {
            store.push(&format!("layer{i}.attn_norm"), ones(d));
            let wq = randn(vec![d, d], &mut rng);
            store.push(&format!("layer{i}.wq"), wq.clone());
            store.push(&format!("layer{i}.wk"), randn(vec![d, d], &mut rng));
            store.push(&format!("layer{i}.wv"), randn(vec![d, d], &mut rng));
            store.push(&format!("layer{i}.wo"), randn(vec![d, d], &mut rng));
            if i < config.shared_layers {
                store.push(&format!("layer{i}.cross_norm"), ones(d));
                store.push(&format!("layer{i}.cross_wq"), wq);
                store.push(&format!("layer{i}.cross_wo"), Tensor::zeros(vec![d, d]));
            }
            store.push(&format!("layer{i}.mlp_norm"), ones(d));
            store.push(&format!("layer{i}.wgate"), randn(vec![d, ffn], &mut rng));
            store.push(&format!("layer{i}.wup"), randn(vec![d, ffn], &mut rng));
            store.push(&format!("layer{i}.wdown"), randn(vec![ffn, d], &mut rng));
        }
        store.push("final_norm", ones(d));
        store.push("head", randn(vec![d, config.vocab_size], &mut rng));
        Ok(store)
    }

    fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn set(&mut self, id: usize, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id].shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: self.tensors[id].shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.tensors[id] = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn embed_id(&self) -> usize {
        self.id("embed").expect("store always has an embedding")
    }

    pub fn final_norm_id(&self) -> usize {
        self.id("final_norm").expect("store always has a final norm")
    }

    pub fn head_id(&self) -> usize {
        self.id("head").expect("store always has a head")
    }

    pub fn layer_ids(&self, layer: usize, config: &ModelConfig) -> Result<LayerIds> {
        let p = |suffix: &str| self.id(&format!("layer{layer}.{suffix}"));
        let cross = if layer < config.shared_layers {
            Some(CrossIds {
                norm: p("cross_norm")?,
                wq: p("cross_wq")?,
                wo: p("cross_wo")?,
            })
        } else {
            None
        };
        Ok(LayerIds {
            attn_norm: p("attn_norm")?,
            wq: p("wq")?,
            wk: p("wk")?,
            wv: p("wv")?,
            wo: p("wo")?,
            cross,
            mlp_norm: p("mlp_norm")?,
            wgate: p("wgate")?,
            wup: p("wup")?,
            wdown: p("wdown")?,
        })
    }

    /// Parameter ids updated by the optimizer under the freezing policy.
    pub fn trainable_ids(&self, config: &ModelConfig, freeze_shared: bool) -> Vec<usize> {
        let mut out = Vec::new();
        for (id, name) in self.names.iter().enumerate() {
            if !freeze_shared {
                out.push(id);
                continue;
            }
            if name == "embed" {
                continue;
            }
            if let Some(rest) = name.strip_prefix("layer") {
                let (idx, field) = rest.split_once('.').expect("layer params are dotted");
                let layer: usize = idx.parse().expect("layer index is numeric");
                let is_cross = field.starts_with("cross_");
                if layer < config.shared_layers && !is_cross {
                    continue; // frozen shared layer
                }
            }
            out.push(id);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            shared_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            rope_base: 10000.0,
            max_train_len: 64,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = ParamStore::init(&cfg, 9).unwrap();
        let b = ParamStore::init(&cfg, 9).unwrap();
        for id in 0..a.len() {
            assert_eq!(a.get(id), b.get(id));
        }
        let c = ParamStore::init(&cfg, 10).unwrap();
        assert_ne!(a.get_by_name("embed").unwrap(), c.get_by_name("embed").unwrap());
    }

    #[test]
    fn cross_projections_initialized_per_contract() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 1).unwrap();
        for i in 0..cfg.shared_layers {
            let wco = store.get_by_name(&format!("layer{i}.cross_wo")).unwrap();
            assert!(wco.data().iter().all(|&v| v == 0.0));
            let wcq = store.get_by_name(&format!("layer{i}.cross_wq")).unwrap();
            let wq = store.get_by_name(&format!("layer{i}.wq")).unwrap();
            assert_eq!(wcq, wq);
        }
        // No cross parameters above the shared layers.
        assert!(store.get_by_name("layer2.cross_wq").is_err());
    }

    #[test]
    fn freezing_policy_selects_expected_set() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, 1).unwrap();
        let trainable = store.trainable_ids(&cfg, true);
        let names: Vec<&str> = trainable.iter().map(|&id| store.name(id)).collect();
        assert!(!names.contains(&"embed"));
        assert!(!names.contains(&"layer0.wq"));
        assert!(!names.contains(&"layer1.mlp_norm"));
        assert!(names.contains(&"layer0.cross_wq"));
        assert!(names.contains(&"layer1.cross_wo"));
        assert!(names.contains(&"layer2.wq"));
        assert!(names.contains(&"final_norm"));
        assert!(names.contains(&"head"));
        // Unfrozen: everything.
        assert_eq!(store.trainable_ids(&cfg, false).len(), store.len());
    }
}
