//! Hand-set weights for a one-layer model that computes parity exactly.
//!
//! Token 1 carries angle π (so each 1 flips the sign of the readout), x is the
//! token bit, decay is 1 and λ = 1. The last-step output is then
//! `Σ_s x_s · cos(π · ones in (s, T]) = parity`.

use std::f64::consts::PI;

use mamba3_core::block::Mamba3BlockConfig;
use mamba3_core::model::Model;
use mamba3_core::rng::Rng;
use mamba3_core::tasks::{evaluate, task_model_config, Task};

const D: usize = 4;

fn set(model: &mut Model, name: &str, idx: &[usize], v: f64) {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let pos = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no param {name}"));
    let t = model.params_mut().swap_remove(pos);
    let mut flat = 0;
    for (i, s) in idx.iter().zip(t.shape()) {
        assert!(i < s, "{name}{idx:?} out of range");
        flat = flat * s + i;
    }
    t.data_mut()[flat] = v;
}

fn parity_model(theta_on_one: bool) -> Model {
    let block = Mamba3BlockConfig::mamba3(D, 2, 1);
    let mut m = Model::new(task_model_config(Task::Parity, block, 1)).unwrap();
    for t in m.params_mut() {
        t.data_mut().fill(0.0);
    }
    for name in ["layers.0.norm", "final_norm", "layers.0.b_norm", "layers.0.c_norm"] {
        let n = m.named_params().iter().find(|(k, _)| k == name).map(|(_, t)| t.numel()).unwrap();
        for i in 0..n {
            set(&mut m, name, &[i], 1.0);
        }
    }
    // rms-normed one-hot embedding is `s · e_k`
    let s = 1.0 / (1.0 / D as f64 + m.config.block.norm_eps).sqrt();
    set(&mut m, "embed", &[0, 0], 1.0);
    set(&mut m, "embed", &[1, 1], 1.0);

    set(&mut m, "layers.0.in_x", &[1, 0], 1.0 / s);
    for tok in 0..2 {
        set(&mut m, "layers.0.in_z", &[tok, 0], 10.0 / s);
        set(&mut m, "layers.0.in_lambda", &[tok, 0], 100.0 / s);
    }
    set(&mut m, "layers.0.dt_bias", &[0], (1.0f64.exp() - 1.0).ln());
    set(&mut m, "layers.0.a_log", &[0], -40.0);
    if theta_on_one {
        set(&mut m, "layers.0.in_theta", &[1, 0], PI / s);
    }
    set(&mut m, "layers.0.b_bias", &[0, 0], 1.0);
    set(&mut m, "layers.0.c_bias", &[0, 0], 1.0);
    set(&mut m, "layers.0.out_proj", &[0, 2], 1.0);

    set(&mut m, "head_w", &[2, 1], 1.0);
    set(&mut m, "head_b", &[1], -1.0);
    m
}

#[test]
fn hand_set_rotation_solves_parity_at_every_length() {
    let m = parity_model(true);
    let mut rng = Rng::new(5);
    for len in [1, 2, 3, 17, 64, 256, 1024] {
        let acc = evaluate(&m, Task::Parity, &mut rng, len, 256).unwrap();
        assert_eq!(acc, 1.0, "len {len}");
    }
}

#[test]
fn same_weights_without_rotation_fail() {
    let m = parity_model(false);
    let mut rng = Rng::new(5);
    let acc = evaluate(&m, Task::Parity, &mut rng, 256, 256).unwrap();
    assert!(acc < 0.2, "{acc}");
}
