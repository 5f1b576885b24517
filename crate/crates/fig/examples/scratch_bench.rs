use fig::data::{gen_motif_dataset, Dataset, MotifGenConfig};
use fig::eval::reg_effect_experiment;
use fig::trainer::{TrainConfig, Variant};

fn main() {
    let ds = gen_motif_dataset(&MotifGenConfig { num_graphs: 280, env_size_range: (3, 8), seed: 6, ..MotifGenConfig::default() }).unwrap();
    let mut graphs = ds.graphs;
    let test = graphs.split_off(240);
    let val = graphs.split_off(200);
    let train_set = Dataset::from_graphs(graphs).unwrap();
    let val_set = Dataset::from_graphs(val).unwrap();
    let test_set = Dataset::from_graphs(test).unwrap();

    for (r, epochs, lr) in [(4usize, 30usize, 5e-4f64), (3, 30, 5e-4), (4, 60, 1e-3)] {
        let config = TrainConfig {
            variant: Variant::FigVn,
            r,
            k_hat: 0.5,
            d: 32,
            encoder_layers: 2,
            batch_size: 16,
            max_epochs: epochs,
            lr,
            ..TrainConfig::default()
        };
        let table = reg_effect_experiment(&config, &[1, 2, 3], &train_set, &val_set, &test_set).unwrap();
        println!(
            "r {r} epochs {epochs} lr {lr}: off-block {:.4} (b1) vs {:.4} (b0); acc {:.3} vs {:.3}",
            table.mean_off_block_mass(true),
            table.mean_off_block_mass(false),
            table.mean_test_metric(true),
            table.mean_test_metric(false)
        );
    }
}
