#![allow(dead_code)]

pub mod gradcheck;

use munmt::config::ExperimentConfig;

/// A benchmark and model small enough to run every stage in seconds.
pub const TINY: &str = r#"
seed = 7

[benchmark]
vocab_types = 40
mono_lines = 400
parallel_lines = 150
dev_lines = 12
test_lines = 12

[vocab]
size = 120

[model]
layers = 1
hidden = 16
ffn = 32
heads = 2

[stage1]
steps = 12
batch_size = 4
warmup_steps = 3

[stage2]
steps_a = 10

[synthetic]
english_lines_per_target = 40
decode_batch = 16

[stage3]
sweeps = 1
max_tokens = 200
"#;

pub fn tiny_config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(TINY, &o).expect("tiny config is valid")
}
