//! Scores learned node selections against the planted motif nodes.
//!
//! Adversarial training has two stable outcomes: the selection locks onto
//! the motif, or it parks on environment nodes that message passing has
//! leaked the label into. The two are indistinguishable by plain accuracy
//! but not by the swapped utility loss: only a motif-holding rationale keeps
//! predicting when its environment is replaced. Training a couple of
//! restarts and keeping the one with the lowest validation swapped loss
//! therefore selects the right basin without peeking at the ground truth.
//! The kept model's score ranking is then scored at K close to the planted
//! motif size rather than the looser training K.

use fig::data::{gen_motif_dataset, Dataset, MotifGenConfig};
use fig::eval::{mean_swapped_utility, rationale_recovery};
use fig::trainer::{evaluate, train, TrainConfig};

fn main() -> fig::Result<()> {
    let ds = gen_motif_dataset(&MotifGenConfig {
        num_graphs: 700,
        seed: 1,
        ..MotifGenConfig::default()
    })?;
    let mut graphs = ds.graphs;
    let test = graphs.split_off(600);
    let val = graphs.split_off(500);
    let train_set = Dataset::from_graphs(graphs)?;
    let val_set = Dataset::from_graphs(val)?;
    let test_set = Dataset::from_graphs(test)?;

    let mut kept = None;
    for restart in [2u64, 1002] {
        let config = TrainConfig { max_epochs: 20, seed: restart, ..TrainConfig::default() };
        let outcome = train(&config, &train_set, &val_set)?;
        let swapped = mean_swapped_utility(&outcome.model, &val_set)?;
        println!(
            "restart {restart}: val acc {:.3}, val swapped loss {swapped:.4}",
            outcome.best_val
        );
        if kept.as_ref().map_or(true, |&(_, best)| swapped < best) {
            kept = Some((outcome.model, swapped));
        }
    }
    let (mut model, _) = kept.expect("two restarts ran");
    println!("test accuracy {:.3}", evaluate(&model, &test_set)?);

    // the motif is 5 nodes of 8..20; score the ranking at K = round(0.3 n)
    model.config.k_hat = 0.3;
    let rec = rationale_recovery(&model, &test_set)?;
    println!(
        "precision@K {:.3}  recall {:.3}  jaccard {:.3}  over {} graphs",
        rec.precision_at_k, rec.recall, rec.jaccard, rec.n_graphs
    );
    println!(
        "a random same-size selection would score precision {:.3}; the gap is {:+.3}",
        rec.random_precision,
        rec.precision_at_k - rec.random_precision
    );
    Ok(())
}
