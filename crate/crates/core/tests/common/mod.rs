#![allow(dead_code)]

use fedc2i::config::RunConfig;
use fedc2i::model::ModelParams;
use fedc2i::orchestration::Method;

/// A federation small enough to run in milliseconds.
pub fn small_config(method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        clients: 3,
        classes: 3,
        rounds: 3,
        batch_size: 8,
        hidden: vec![8],
        seeds: vec![0],
        ..RunConfig::default()
    };
    cfg.data.latent_dim = 3;
    cfg.data.feature_dim = 6;
    cfg.data.noise = 0.5;
    cfg.data.train_per_class = 10;
    cfg.data.test_per_class = 10;
    cfg.data.groups = vec![vec![0, 1], vec![2]];
    cfg
}

pub fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn bits(p: &ModelParams) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}
