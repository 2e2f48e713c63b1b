//! Loss-threshold membership inference on a model trained to memorize 64
//! points, with and without differential privacy.
//!
//!     cargo run --release --example membership_inference

use dualpriv::harness::{
    mia_evaluate, preprocess, train_on, DataSource, Method, ModelChoice, PrivacyTarget, RunConfig,
    TrainSettings,
};
use dualpriv::model::{ModelKind, SyntheticKind, SyntheticSpec};

fn main() -> dualpriv::Result<()> {
    for (method, eps) in [
        (Method::SgdNonprivate, None),
        (Method::Dpsgd, Some(8.0)),
        (Method::Dualpriv, Some(1.0)),
    ] {
        let mut aucs = Vec::new();
        let mut accs = Vec::new();
        for seed in 1..=5 {
            let cfg = RunConfig {
                method,
                privacy: eps.map(|epsilon| PrivacyTarget {
                    epsilon,
                    delta: None,
                }),
                train: TrainSettings {
                    learning_rate: 0.5,
                    batch_size: 8,
                    ..TrainSettings::default()
                },
                prune: None,
                model: ModelChoice {
                    kind: ModelKind::Linear,
                    block_len: Some(16),
                },
                data: DataSource::Synthetic {
                    spec: SyntheticSpec {
                        kind: SyntheticKind::GaussBlobs {
                            dim: 128,
                            margin: 1.0,
                        },
                        num_classes: 2,
                    },
                    train_size: 64,
                    test_size: 64,
                    seed,
                },
                epochs: 60,
                seed,
                evaluate_mia: false,
            };
            let (members, nonmembers) = cfg.data.load()?;
            let (members, nonmembers) = preprocess(&cfg, &members, &nonmembers)?;
            let outcome = train_on(&cfg, &members, &nonmembers)?;
            let mia = mia_evaluate(&outcome.model, &members, &nonmembers)?;
            aucs.push(mia.auc);
            accs.push(mia.best_accuracy);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:<15} ε={:<4} attack AUC {:.3}  best-threshold accuracy {:.3}",
            method.name(),
            eps.map_or("-".to_string(), |e| e.to_string()),
            mean(&aucs),
            mean(&accs)
        );
    }
    Ok(())
}
