//! Runs the full strategy comparison (no augmentation, linear interpolation,
//! and the three swap strategies) over several seeds and prints the table.
//!
//! ```bash
//! cargo run --release -p msmix --example compare_strategies
//! ```

use msmix::harness::{
    compare, render_markdown, DatasetSpec, ExperimentConfig, ModelConfig, OptimizerConfig,
    VariantSpec,
};
use msmix::{MixConfig, MixStrategy};

fn main() {
    let variant = |strategy: MixStrategy| VariantSpec {
        strategy: Some(strategy),
        ..VariantSpec::default()
    };
    let mut cfg = ExperimentConfig {
        model: ModelConfig::default(),
        optimizer: OptimizerConfig { learning_rate: 0.1, epochs: 15, batch_size: 16 },
        mix: MixConfig::default(),
        seeds: vec![1, 2, 3],
        fewshot: None,
        fewshot_seed: 0,
        include_clean: false,
        datasets: vec![DatasetSpec::Synthetic {
            name: Some("synth8".into()),
            classes: 8,
            per_class_train: 20,
            per_class_test: 100,
            noise: 0.15,
            corpus_seed: 7,
        }],
        variants: MixStrategy::ALL.into_iter().map(variant).collect(),
        layer_policy: false,
    };
    cfg.normalize();
    let report = compare(&cfg).expect("comparison");
    print!("{}", render_markdown(&report));
}
