//! Dual-Priv against DP-SGD and non-private SGD on Gaussian blobs.
//!
//!     cargo run --release --example dualpriv_training

use dualpriv::harness::{
    train, DataSource, Method, ModelChoice, PrivacyTarget, RunConfig, TrainSettings,
};
use dualpriv::model::{ModelKind, SyntheticKind, SyntheticSpec};

fn config(method: Method, epsilon: Option<f64>) -> RunConfig {
    RunConfig {
        method,
        privacy: epsilon.map(|epsilon| PrivacyTarget {
            epsilon,
            delta: None,
        }),
        train: TrainSettings {
            learning_rate: 0.3,
            batch_size: 12,
            top_k_percent: 80.0,
            ..TrainSettings::default()
        },
        prune: None,
        model: ModelChoice {
            kind: ModelKind::Mlp { hidden: 16 },
            block_len: Some(8),
        },
        data: DataSource::Synthetic {
            spec: SyntheticSpec {
                kind: SyntheticKind::GaussBlobs {
                    dim: 10,
                    margin: 4.0,
                },
                num_classes: 3,
            },
            train_size: 900,
            test_size: 600,
            seed: 1,
        },
        epochs: 2,
        seed: 1,
        evaluate_mia: false,
    }
}

fn main() -> dualpriv::Result<()> {
    let runs = [
        (Method::SgdNonprivate, None),
        (Method::Dpsgd, Some(8.0)),
        (Method::Dpsgd, Some(1.0)),
        (Method::Dualpriv, Some(8.0)),
        (Method::Dualpriv, Some(1.0)),
    ];
    println!(
        "{:<15} {:>4} {:>8} {:>9} {:>9} {:>12}",
        "method", "ε", "σ", "train", "test", "blocks/step"
    );
    for (method, eps) in runs {
        let r = train(&config(method, eps))?.report;
        let mean_blocks =
            r.blocks_updated.iter().sum::<usize>() as f64 / r.blocks_updated.len() as f64;
        println!(
            "{:<15} {:>4} {:>8.3} {:>9.3} {:>9.3} {:>7.1}/{:<4}",
            method.name(),
            eps.map_or("-".to_string(), |e| e.to_string()),
            r.noise_multiplier,
            r.final_train_acc,
            r.final_test_acc,
            mean_blocks,
            r.blocks_total
        );
    }
    Ok(())
}
