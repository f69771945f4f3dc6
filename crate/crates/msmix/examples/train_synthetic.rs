//! Trains one model on a seeded synthetic corpus with dimension-swap
//! augmentation and prints the loss curve.
//!
//! ```bash
//! cargo run -p msmix --example train_synthetic
//! ```

use msmix::augment::{MixConfig, MixStrategy};
use msmix::harness::{
    prepare_dataset, train, DatasetSpec, ModelConfig, OptimizerConfig, TrainSettings,
};

fn main() {
    let spec = DatasetSpec::Synthetic {
        name: Some("synth-demo".into()),
        classes: 6,
        per_class_train: 20,
        per_class_test: 50,
        noise: 0.15,
        corpus_seed: 7,
    };
    let model = ModelConfig::default();
    let data = prepare_dataset(&spec, None, 0, &model).expect("corpus generation");
    println!(
        "dataset {}: {} train / {} test, {} classes, vocab {}",
        data.name,
        data.train.len(),
        data.test.len(),
        data.train.classes,
        data.vocab.size()
    );

    let settings = TrainSettings {
        model,
        optimizer: OptimizerConfig { learning_rate: 0.1, epochs: 20, batch_size: 16 },
        mix: MixConfig {
            strategy: MixStrategy::Base,
            layer_set: vec![1, 2, 3],
            ..MixConfig::default()
        },
        include_clean: false,
    };
    let result = train(&data, &settings, 1).expect("training");
    for (epoch, loss) in result.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}  train loss {loss:.4}", epoch + 1);
    }
    println!("test accuracy: {:.2}%", result.accuracy * 100.0);
}
