use fedavg::data::{make_synthetic_logreg, partition_iid, partition_label_shards, BatchSize};
use fedavg::federation::{
    aggregate, client_seed, client_update, run_federated, run_round, sample_clients, ClientData,
    FederatedState, LocalTraining,
};
use fedavg::nn::{self, ModelSpec};
use fedavg::{Dataset, Execution, Federation, ParamVector, RoundConfig};

fn synthetic() -> (Dataset, Dataset) {
    make_synthetic_logreg(500, 5, 3, 11)
        .unwrap()
        .split_at(400)
        .unwrap()
}

#[test]
fn full_participation_fedsgd_loss_never_increases() {
    let (train, test) = synthetic();
    let spec = ModelSpec::logreg(5, 3);
    let partition = partition_iid(train.len(), 8, 2).unwrap();
    let fed = Federation::new(spec, &train, &partition).unwrap();
    let cfg = RoundConfig {
        max_rounds: 40,
        ..RoundConfig::fedsgd(1.0, 0.01)
    };
    let out = run_federated(&fed, &test, &cfg, nn::init_params(&spec, 3)).unwrap();
    let losses: Vec<f64> = out.train_loss.metrics().collect();
    assert_eq!(losses.len(), 40);
    for pair in losses.windows(2) {
        assert!(pair[1] <= pair[0], "{} then {}", pair[0], pair[1]);
    }
}

/// Two epochs of full-batch descent on one client, written out by hand.
#[test]
fn local_full_batch_epochs_are_sequential_gradient_steps() {
    let (train, _) = synthetic();
    let spec = ModelSpec::mlp_2nn(5, 4, 3, 3);
    let indices: Vec<usize> = (10..70).collect();
    let w0 = nn::init_params(&spec, 5);
    let eta = 0.2;
    let local = LocalTraining {
        epochs: 2,
        batch_size: BatchSize::Full,
        learning_rate: eta,
    };
    let got = client_update(
        &spec,
        ClientData {
            dataset: &train,
            indices: &indices,
        },
        &w0,
        &local,
        99,
    )
    .unwrap();

    let subset = train.subset(&indices).unwrap();
    let mut w = w0.clone();
    for _ in 0..2 {
        let g = nn::gradient(&spec, &w, &subset.as_batch()).unwrap();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= eta * gi;
        }
    }
    for (a, b) in got.iter().zip(w.iter()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn round_matches_weighted_average_of_client_updates() {
    let (train, _) = synthetic();
    let spec = ModelSpec::logreg(5, 3);
    let partition = partition_label_shards(&train, 20, 2, 4).unwrap();
    let fed = Federation::new(spec, &train, &partition).unwrap();
    let cfg = RoundConfig {
        master_seed: 21,
        ..RoundConfig::fedavg(0.3, 2, BatchSize::Size(7), 0.1)
    };
    let w0 = nn::init_params(&spec, 1);
    let state = FederatedState::new(w0.clone(), cfg.learning_rate);
    let (next, report) = run_round(&fed, &state, &cfg).unwrap();

    let selected = sample_clients(10, 0.3, 21, 1);
    assert_eq!(report.selected, selected);
    let local = LocalTraining {
        epochs: 2,
        batch_size: BatchSize::Size(7),
        learning_rate: 0.1,
    };
    let updates: Vec<(usize, ParamVector)> = selected
        .iter()
        .map(|&k| {
            let w = client_update(
                &spec,
                ClientData {
                    dataset: &train,
                    indices: partition.client(k),
                },
                &w0,
                &local,
                client_seed(21, 1, k),
            )
            .unwrap();
            (partition.client(k).len(), w)
        })
        .collect();
    let total: usize = updates.iter().map(|(n, _)| n).sum();
    for j in 0..w0.len() {
        let avg: f64 = updates
            .iter()
            .map(|(n, w)| *n as f64 / total as f64 * w[j])
            .sum();
        assert!((next.params[j] - avg).abs() <= 1e-12 * avg.abs().max(1.0));
    }
    let refs: Vec<(usize, &ParamVector)> = updates.iter().map(|(n, w)| (*n, w)).collect();
    let agg = aggregate(&refs).unwrap();
    assert!(agg
        .iter()
        .zip(next.params.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn serial_and_parallel_runs_are_bit_identical() {
    let (train, test) = synthetic();
    let spec = ModelSpec::mlp_2nn(5, 8, 8, 3);
    let partition = partition_iid(train.len(), 12, 8).unwrap();
    let fed = Federation::new(spec, &train, &partition).unwrap();
    let base = RoundConfig {
        max_rounds: 6,
        lr_decay: 0.95,
        master_seed: 5,
        ..RoundConfig::fedavg(0.5, 3, BatchSize::Size(5), 0.05)
    };
    let run = |execution| {
        let cfg = RoundConfig {
            execution,
            ..base.clone()
        };
        run_federated(&fed, &test, &cfg, nn::init_params(&spec, 0)).unwrap()
    };
    let a = run(Execution::Serial);
    let b = run(Execution::Parallel);
    assert_eq!(a.test_accuracy, b.test_accuracy);
    assert!(a
        .final_params
        .iter()
        .zip(b.final_params.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn learning_rate_decays_geometrically() {
    let (train, test) = synthetic();
    let spec = ModelSpec::logreg(5, 3);
    let partition = partition_iid(train.len(), 4, 1).unwrap();
    let fed = Federation::new(spec, &train, &partition).unwrap();
    let cfg = RoundConfig {
        max_rounds: 3,
        lr_decay: 0.5,
        ..RoundConfig::fedsgd(1.0, 0.4)
    };
    let out = run_federated(&fed, &test, &cfg, nn::init_params(&spec, 0)).unwrap();
    assert_eq!(out.rounds_completed, 3);

    let mut w = nn::init_params(&spec, 0);
    for eta in [0.4, 0.2, 0.1] {
        let g = nn::gradient(&spec, &w, &train.as_batch()).unwrap();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= eta * gi;
        }
    }
    for (a, b) in out.final_params.iter().zip(w.iter()) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn stop_at_accuracy_ends_the_run() {
    let (train, test) = synthetic();
    let spec = ModelSpec::logreg(5, 3);
    let partition = partition_iid(train.len(), 4, 1).unwrap();
    let fed = Federation::new(spec, &train, &partition).unwrap();
    let cfg = RoundConfig {
        max_rounds: 500,
        stop_at_accuracy: Some(0.6),
        ..RoundConfig::fedavg(1.0, 1, BatchSize::Size(10), 0.1)
    };
    let out = run_federated(&fed, &test, &cfg, nn::init_params(&spec, 0)).unwrap();
    let (round, acc) = out.test_accuracy.last().unwrap();
    assert!(acc >= 0.6);
    assert_eq!(round as usize, out.rounds_completed);
    let accs: Vec<f64> = out.test_accuracy.metrics().collect();
    assert!(accs[..accs.len() - 1].iter().all(|&a| a < 0.6));
}
