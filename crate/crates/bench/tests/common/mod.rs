#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use lffn_bench::config::RunConfig;
use lffn_core::modelspec::ToyBackboneConfig;

/// Default dataset and anchors with a much narrower network, for tests that
/// train.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.train_images = 6;
    cfg.dataset.test_images = 4;
    cfg.backbone = ToyBackboneConfig { channels: vec![4, 8, 8, 16], ..Default::default() };
    cfg.fusion.output_channels = 16;
    cfg.fusion.p5_channels = 16;
    cfg.fusion.topdown_channel_schedule = vec![8, 4, 2];
    cfg.train.iterations = 8;
    cfg.train.checkpoint_every = 4;
    cfg.train.smoothing_window = 2;
    cfg
}

pub fn lffn(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lffn"));
    cmd.args(args).env_remove("LFFN_OUT_DIR");
    if let Some(d) = env_out {
        cmd.env("LFFN_OUT_DIR", d);
    }
    cmd.output().expect("lffn runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}
