// quick diagnostic binary
use treelm::config::*;
use treelm::context_tree::PolicyKind;
use treelm::params::ParamStore;
use treelm::trainer::{pipeline_grad_check, TrainSample};

fn main() {
    let mut run = RunConfig::default();
    run.model = ModelConfig { n_layers: 2, shared_layers: 1, d_model: 16, n_heads: 2, vocab_size: 32, rope_base: 10000.0, max_train_len: 64 };
    run.chunk_size = 32;
    run.running_len = 16;
    run.tree = TreeSettings { depth: 2, gamma: 5.0, min_len: 8, policy: PolicyKind::AlwaysRight };
    run.schedule = ScheduleSettings { alpha_leaf: 2, uniform_alpha: None };
    let store = ParamStore::init(&run.model, 77).unwrap();
    let x_c: Vec<u32> = (0..32u32).map(|i| (i * 11 + 3) % 32).collect();
    let x_d: Vec<u32> = (0..16u32).map(|i| (i * 7 + 1) % 32).collect();
    let sample = TrainSample::lm(x_c, x_d);
    for h in [1e-5, 3e-5, 1e-4] {
        let err = pipeline_grad_check(&run, &sample, &store, h).unwrap();
        println!("h={h:.0e}  max rel err = {err:.3e}");
    }
}
