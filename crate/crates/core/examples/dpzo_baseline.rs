//! Zeroth-order DP training next to first-order DP-SGD at the same budget.
//!
//!     cargo run --release --example dpzo_baseline

use dualpriv::harness::{
    train, DataSource, Method, ModelChoice, PrivacyTarget, RunConfig, TrainSettings,
};
use dualpriv::model::{ModelKind, SyntheticKind, SyntheticSpec};

fn main() -> dualpriv::Result<()> {
    let base = RunConfig {
        method: Method::Dpzo,
        privacy: Some(PrivacyTarget {
            epsilon: 3.0,
            delta: None,
        }),
        train: TrainSettings {
            learning_rate: 0.02,
            batch_size: 16,
            perturb: 0.1,
            clip_zo: 1.0,
            ..TrainSettings::default()
        },
        prune: None,
        model: ModelChoice {
            kind: ModelKind::Linear,
            block_len: None,
        },
        data: DataSource::Synthetic {
            spec: SyntheticSpec {
                kind: SyntheticKind::GaussBlobs {
                    dim: 5,
                    margin: 5.0,
                },
                num_classes: 2,
            },
            train_size: 800,
            test_size: 400,
            seed: 3,
        },
        epochs: 5,
        seed: 3,
        evaluate_mia: false,
    };

    for method in [Method::Dpzo, Method::Dpsgd] {
        let mut cfg = base.clone();
        cfg.method = method;
        if method == Method::Dpsgd {
            cfg.train.learning_rate = 0.5;
        }
        let r = train(&cfg)?.report;
        let first = r.loss_trajectory.first().copied().unwrap_or(f64::NAN);
        let last = r.loss_trajectory.last().copied().unwrap_or(f64::NAN);
        println!(
            "{:<6} σ={:.3}  loss {first:.3} -> {last:.3}  test acc {:.3}",
            method.name(),
            r.noise_multiplier,
            r.final_test_acc
        );
    }
    Ok(())
}
