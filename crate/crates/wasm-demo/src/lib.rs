//! Browser bindings for three small federated experiments on synthetic data.
//!
//! Each export takes a JSON object of settings and returns JSON. The same
//! computations are available as plain Rust functions for native use.

use fedavg::data::{make_synthetic_logreg, partition_iid, partition_label_shards};
use fedavg::federation::run_federated;
use fedavg::harness::{figure1_protocol, interpolation_experiment, Figure1Settings, SeedMode};
use fedavg::nn::{self, ModelSpec};
use fedavg::{BatchSize, Dataset, Execution, Federation, Partition, RoundConfig};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const INPUT_DIM: usize = 20;
const CLASSES: usize = 5;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub num_clients: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub non_iid: bool,
    pub seed: u64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            num_clients: 20,
            client_fraction: 0.2,
            local_epochs: 5,
            batch_size: 10,
            learning_rate: 0.1,
            rounds: 30,
            non_iid: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub rounds: Vec<u32>,
    pub fedavg: Vec<f64>,
    pub fedsgd: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct InterpolationSettings {
    pub hidden: usize,
    pub sample_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for InterpolationSettings {
    fn default() -> Self {
        InterpolationSettings {
            hidden: 32,
            sample_size: 300,
            epochs: 20,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolationCurves {
    pub theta: Vec<f64>,
    pub shared: Vec<f64>,
    pub independent: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct PartitionSettings {
    pub num_clients: usize,
    pub non_iid: bool,
    pub seed: u64,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        PartitionSettings {
            num_clients: 10,
            non_iid: true,
            seed: 0,
        }
    }
}

/// Label counts per client.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

fn dataset(n: usize, seed: u64) -> fedavg::Result<Dataset> {
    make_synthetic_logreg(n, INPUT_DIM, CLASSES, seed)
}

fn partition(
    data: &Dataset,
    clients: usize,
    non_iid: bool,
    seed: u64,
) -> fedavg::Result<Partition> {
    if non_iid {
        partition_label_shards(data, 2 * clients, 2, seed)
    } else {
        partition_iid(data.len(), clients, seed)
    }
}

/// Test accuracy per round of federated averaging and of federated SGD
/// (one full-batch step per client) from the same start.
pub fn simulate(s: &SimulationSettings) -> fedavg::Result<Curves> {
    let all = dataset(2400, s.seed)?;
    let (train, test) = all.split_at(2000)?;
    let spec = ModelSpec::logreg(INPUT_DIM, CLASSES);
    let part = partition(&train, s.num_clients, s.non_iid, s.seed)?;
    let fed = Federation::new(spec, &train, &part)?;
    let init = nn::init_params(&spec, s.seed);
    let base = RoundConfig {
        max_rounds: s.rounds,
        master_seed: s.seed,
        eval_train_loss: false,
        execution: Execution::Serial,
        ..RoundConfig::fedavg(
            s.client_fraction,
            s.local_epochs,
            BatchSize::Size(s.batch_size),
            s.learning_rate,
        )
    };
    let sgd = RoundConfig {
        local_epochs: 1,
        batch_size: BatchSize::Full,
        ..base.clone()
    };
    let avg = run_federated(&fed, &test, &base, init.clone())?;
    let one = run_federated(&fed, &test, &sgd, init)?;
    Ok(Curves {
        rounds: avg.test_accuracy.rounds().collect(),
        fedavg: avg.test_accuracy.metrics().collect(),
        fedsgd: one.test_accuracy.metrics().collect(),
    })
}

/// Loss along the line between two independently trained models, once from
/// a shared start and once from separate starts.
pub fn interpolate_models(s: &InterpolationSettings) -> fedavg::Result<InterpolationCurves> {
    let train = dataset(2 * s.sample_size, s.seed)?;
    let spec = ModelSpec::mlp_2nn(INPUT_DIM, s.hidden, s.hidden, CLASSES);
    let settings = Figure1Settings {
        sample_size: s.sample_size,
        learning_rate: s.learning_rate,
        batch_size: 50,
        epochs: s.epochs,
    };
    let mut curves = vec![];
    for mode in [SeedMode::Shared, SeedMode::Independent] {
        let m = figure1_protocol(&spec, &train, mode, s.seed, &settings)?;
        curves.push(interpolation_experiment(
            &spec,
            &m.w,
            &m.w2,
            &m.combined.as_batch(),
            50,
            -0.2,
            1.2,
        )?);
    }
    Ok(InterpolationCurves {
        theta: curves[0].iter().map(|p| p.0).collect(),
        shared: curves[0].iter().map(|p| p.1).collect(),
        independent: curves[1].iter().map(|p| p.1).collect(),
    })
}

pub fn label_histogram(s: &PartitionSettings) -> fedavg::Result<Histogram> {
    let data = dataset(1000, s.seed)?;
    let part = partition(&data, s.num_clients, s.non_iid, s.seed)?;
    let counts = part
        .clients()
        .iter()
        .map(|idx| {
            let mut c = vec![0; CLASSES];
            for &i in idx {
                c[data.labels()[i] as usize] += 1;
            }
            c
        })
        .collect();
    Ok(Histogram {
        classes: CLASSES,
        counts,
    })
}

fn call<S, T>(json: &str, f: impl Fn(&S) -> fedavg::Result<T>) -> Result<String, JsValue>
where
    S: for<'de> Deserialize<'de>,
    T: Serialize,
{
    let settings: S = serde_json::from_str(json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let out = f(&settings).map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(settings: &str) -> Result<String, JsValue> {
    call(settings, simulate)
}

#[wasm_bindgen(js_name = interpolate)]
pub fn interpolate_js(settings: &str) -> Result<String, JsValue> {
    call(settings, interpolate_models)
}

#[wasm_bindgen(js_name = labelHistogram)]
pub fn label_histogram_js(settings: &str) -> Result<String, JsValue> {
    call(settings, label_histogram)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_returns_one_point_per_round() {
        let s = SimulationSettings {
            rounds: 4,
            ..Default::default()
        };
        let c = simulate(&s).unwrap();
        assert_eq!(c.rounds, vec![1, 2, 3, 4]);
        assert_eq!(c.fedavg.len(), 4);
        assert_eq!(c.fedsgd.len(), 4);
        assert!(c
            .fedavg
            .iter()
            .chain(&c.fedsgd)
            .all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn interpolation_has_fifty_points() {
        let s = InterpolationSettings {
            sample_size: 100,
            epochs: 2,
            ..Default::default()
        };
        let c = interpolate_models(&s).unwrap();
        assert_eq!(c.theta.len(), 50);
        assert_eq!(c.shared.len(), 50);
        assert_eq!(c.independent.len(), 50);
    }

    #[test]
    fn histograms_cover_the_data() {
        for non_iid in [false, true] {
            let h = label_histogram(&PartitionSettings {
                non_iid,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(h.counts.len(), 10);
            let total: usize = h.counts.iter().flatten().sum();
            assert_eq!(total, 1000);
        }
        let shards = label_histogram(&PartitionSettings::default()).unwrap();
        assert!(shards
            .counts
            .iter()
            .all(|c| c.iter().filter(|&&x| x > 0).count() <= 4));
    }
}
