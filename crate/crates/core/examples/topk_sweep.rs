//! Accuracy as a function of the fraction of updated blocks, written as CSV
//! for plotting.
//!
//!     cargo run --release --example topk_sweep > sweep.csv

use dualpriv::harness::{
    sweep_topk, write_csv, DataSource, Method, ModelChoice, PrivacyTarget, RunConfig, TrainSettings,
};
use dualpriv::model::{ModelKind, SyntheticKind, SyntheticSpec};

fn main() -> dualpriv::Result<()> {
    let grid = [10.0, 20.0, 40.0, 60.0, 80.0, 100.0];
    let mut rows = Vec::new();
    for seed in 1..=3 {
        let base = RunConfig {
            method: Method::Dualpriv,
            privacy: Some(PrivacyTarget {
                epsilon: 1.0,
                delta: None,
            }),
            train: TrainSettings {
                learning_rate: 0.3,
                ..TrainSettings::default()
            },
            prune: None,
            model: ModelChoice {
                kind: ModelKind::Mlp { hidden: 12 },
                block_len: Some(6),
            },
            data: DataSource::Synthetic {
                spec: SyntheticSpec {
                    kind: SyntheticKind::GaussBlobs {
                        dim: 12,
                        margin: 4.0,
                    },
                    num_classes: 3,
                },
                train_size: 900,
                test_size: 600,
                seed,
            },
            epochs: 2,
            seed,
            evaluate_mia: false,
        };
        for r in sweep_topk(&base, &grid, 4)? {
            eprintln!(
                "seed {seed} P_K={:>5}: test acc {:.3}",
                r.top_k_percent, r.final_test_acc
            );
            rows.push(r.csv_row());
        }
    }
    write_csv(std::io::stdout().lock(), &rows)
}
