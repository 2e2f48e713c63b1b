//! Prunes one synthetic token set: keep the CLS-attended patches, fuse the
//! rest into a few noisy cluster tokens.
//!
//!     cargo run --example token_pruning

use dualpriv::model::{make_synthetic, Features, SyntheticKind, SyntheticSpec};
use dualpriv::numeric::SeededRng;
use dualpriv::tokens::{
    aggregate_heads, cls_scores, prune_and_fuse, similarity_attention, ClsAxis, PruneConfig,
};

fn main() -> dualpriv::Result<()> {
    let spec = SyntheticSpec {
        kind: SyntheticKind::TokenGrid {
            tokens: 17,
            dim: 8,
            planted: 3,
            signal: 2.0,
            key: 2.0,
        },
        num_classes: 3,
    };
    let data = make_synthetic(&spec, 3, 42)?;
    let Features::Tokens(tokens) = &data.samples[0].features else {
        unreachable!("token-grid samples carry tokens")
    };

    let stack = similarity_attention(tokens, 4)?;
    let scores = cls_scores(&aggregate_heads(&stack), ClsAxis::Row)?;
    println!("CLS scores per patch:");
    for (j, s) in scores.iter().enumerate() {
        // planted patches have a nonzero key coordinate
        let planted = tokens.token(j + 1)[0] != 0.0;
        println!(
            "  patch {:>2}: {s:.4}{}",
            j + 1,
            if planted { "  (planted)" } else { "" }
        );
    }

    let cfg = PruneConfig {
        keep: 4,
        centers: 3,
        sigma_fuse: 0.05,
        cls_axis: ClsAxis::Row,
    };
    let out = prune_and_fuse(tokens, &stack, &cfg, &mut SeededRng::new(7, 0))?;
    println!();
    println!("{} tokens -> {}", tokens.len(), out.tokens.rows());
    println!("dominant: {:?}", out.dominant_indices);
    println!("centers:  {:?}", out.center_indices);
    for (cid, c) in out.center_indices.iter().enumerate() {
        let members: Vec<usize> = out
            .cluster_assignment
            .iter()
            .filter(|(_, &k)| k == cid)
            .map(|(&m, _)| m)
            .collect();
        println!("  cluster {cid} (center {c}): {members:?}");
    }
    Ok(())
}
