//! Experiment configuration files.
//!
//! A config is a flat list of `key = value` lines (TOML syntax, no tables).
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file. `FEDAVG_DATA_DIR`, when set, overrides
//! `mnist_dir`.
//!
//! ```toml
//! dataset = "mnist"            # or "synthetic"
//! mnist_dir = "data/mnist"
//! model = "2nn"                # or "logreg"
//! partition = "iid"            # or "label_shards", "powerlaw"
//! num_clients = 100
//! client_fraction = 0.1
//! local_epochs = 1
//! batch_size = 10              # or "inf"
//! eta_center = 0.1             # or a fixed `eta = 0.1`
//! eta_exponent = 0.3333333333333333
//! eta_count = 3
//! max_rounds = 250
//! targets = [0.97]
//! output_dir = "out/2nn-iid"
//! ```
//!
//! Defaults: `eta_decay = 1`, `eval_every = 1`, `master_seed = 0`,
//! `eval_train_loss = true`, `parallel = true`, `stop_at_target = false`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BatchSize;
use crate::error::{Error, Result};
use crate::federation::{Execution, RoundConfig};
use crate::harness::{lr_grid, Figure1Settings};
use crate::nn::ModelSpec;

pub const DATA_DIR_ENV: &str = "FEDAVG_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub dataset: Option<String>,
    pub mnist_dir: Option<PathBuf>,
    pub synthetic_train: Option<usize>,
    pub synthetic_test: Option<usize>,
    pub synthetic_input_dim: Option<usize>,
    pub synthetic_classes: Option<usize>,
    pub data_seed: Option<u64>,

    pub model: Option<String>,
    pub hidden: Option<usize>,

    pub partition: Option<String>,
    pub num_clients: Option<usize>,
    pub num_shards: Option<usize>,
    pub shards_per_client: Option<usize>,
    pub powerlaw_alpha: Option<f64>,
    pub powerlaw_min_size: Option<usize>,
    pub partition_seed: Option<u64>,

    pub client_fraction: Option<f64>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<BatchSize>,
    pub eta: Option<f64>,
    pub eta_center: Option<f64>,
    pub eta_exponent: Option<f64>,
    pub eta_count: Option<usize>,
    pub eta_decay: Option<f64>,
    pub master_seed: Option<u64>,
    pub max_rounds: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_train_loss: Option<bool>,
    pub parallel: Option<bool>,

    pub targets: Option<Vec<f64>>,
    pub stop_at_target: Option<bool>,
    pub baseline_summary: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,

    pub figure1_samples: Option<usize>,
    pub figure1_eta: Option<f64>,
    pub figure1_batch: Option<usize>,
    pub figure1_epochs: Option<usize>,
    pub figure1_points: Option<usize>,
    pub figure1_lo: Option<f64>,
    pub figure1_hi: Option<f64>,
    pub figure1_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Mnist {
        dir: PathBuf,
    },
    /// Labels from a random linear model; the first `train` examples train,
    /// the next `test` evaluate.
    Synthetic {
        train: usize,
        test: usize,
        input_dim: usize,
        classes: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionSpec {
    Iid {
        clients: usize,
    },
    LabelShards {
        num_shards: usize,
        shards_per_client: usize,
    },
    Powerlaw {
        clients: usize,
        alpha: f64,
        min_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LearningRates {
    Fixed {
        eta: f64,
    },
    Grid {
        center: f64,
        exponent: f64,
        count: usize,
    },
}

impl LearningRates {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            LearningRates::Fixed { eta } => Ok(vec![eta]),
            LearningRates::Grid {
                center,
                exponent,
                count,
            } => lr_grid(center, exponent, count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Config {
    pub settings: Figure1Settings,
    pub num_points: usize,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub partition_seed: u64,
    /// Round settings; `learning_rate` is overwritten per grid point.
    pub round: RoundConfig,
    pub learning_rates: LearningRates,
    pub targets: Vec<f64>,
    pub stop_at_target: bool,
    pub baseline_summary: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub figure1: Figure1Config,
}

fn required<T>(v: Option<T>, key: &'static str) -> Result<T> {
    v.ok_or(Error::MissingKey(key))
}

fn out_of_range(key: &'static str, reason: impl Into<String>) -> Error {
    Error::OutOfRange {
        key,
        reason: reason.into(),
    }
}

fn positive(v: usize, key: &'static str) -> Result<usize> {
    if v == 0 {
        return Err(out_of_range(key, "must be at least 1"));
    }
    Ok(v)
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Reads, validates and resolves a config file, applying `FEDAVG_DATA_DIR`.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let cfg = parse_config_str(&text, base, data_dir)?;
    cfg.check_files()?;
    Ok(cfg)
}

/// Parses config text without touching the filesystem.
pub fn parse_config_str(
    text: &str,
    base: &Path,
    data_dir_override: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    raw.into_config(base, data_dir_override)
}

impl RawConfig {
    pub fn into_config(
        self,
        base: &Path,
        data_dir_override: Option<PathBuf>,
    ) -> Result<ExperimentConfig> {
        let data = match required(self.dataset, "dataset")?.as_str() {
            "mnist" => {
                let dir = match data_dir_override {
                    Some(d) => d,
                    None => resolve(base, required(self.mnist_dir, "mnist_dir")?),
                };
                DataSource::Mnist { dir }
            }
            "synthetic" => DataSource::Synthetic {
                train: positive(self.synthetic_train.unwrap_or(600), "synthetic_train")?,
                test: positive(self.synthetic_test.unwrap_or(200), "synthetic_test")?,
                input_dim: positive(
                    self.synthetic_input_dim.unwrap_or(10),
                    "synthetic_input_dim",
                )?,
                classes: match self.synthetic_classes.unwrap_or(3) {
                    c if c >= 2 => c,
                    _ => return Err(out_of_range("synthetic_classes", "must be at least 2")),
                },
                seed: self.data_seed.unwrap_or(0),
            },
            other => {
                return Err(out_of_range(
                    "dataset",
                    format!("expected \"mnist\" or \"synthetic\", got {other:?}"),
                ))
            }
        };
        let (input_dim, classes) = match data {
            DataSource::Mnist { .. } => (784, 10),
            DataSource::Synthetic {
                input_dim, classes, ..
            } => (input_dim, classes),
        };

        let model = match required(self.model, "model")?.as_str() {
            "logreg" => ModelSpec::logreg(input_dim, classes),
            "2nn" => {
                let h = positive(self.hidden.unwrap_or(200), "hidden")?;
                ModelSpec::mlp_2nn(input_dim, h, h, classes)
            }
            other => {
                return Err(out_of_range(
                    "model",
                    format!("expected \"logreg\" or \"2nn\", got {other:?}"),
                ))
            }
        };

        let partition = match required(self.partition, "partition")?.as_str() {
            "iid" => PartitionSpec::Iid {
                clients: positive(required(self.num_clients, "num_clients")?, "num_clients")?,
            },
            "label_shards" => PartitionSpec::LabelShards {
                num_shards: positive(required(self.num_shards, "num_shards")?, "num_shards")?,
                shards_per_client: positive(
                    required(self.shards_per_client, "shards_per_client")?,
                    "shards_per_client",
                )?,
            },
            "powerlaw" => PartitionSpec::Powerlaw {
                clients: positive(required(self.num_clients, "num_clients")?, "num_clients")?,
                alpha: match self.powerlaw_alpha.unwrap_or(1.0) {
                    a if a > 0.0 && a.is_finite() => a,
                    a => {
                        return Err(out_of_range(
                            "powerlaw_alpha",
                            format!("must be > 0, got {a}"),
                        ))
                    }
                },
                min_size: positive(self.powerlaw_min_size.unwrap_or(1), "powerlaw_min_size")?,
            },
            other => {
                return Err(out_of_range(
                    "partition",
                    format!("expected \"iid\", \"label_shards\" or \"powerlaw\", got {other:?}"),
                ))
            }
        };

        let client_fraction = required(self.client_fraction, "client_fraction")?;
        if !(0.0..=1.0).contains(&client_fraction) {
            return Err(out_of_range(
                "client_fraction",
                format!("must lie in [0, 1], got {client_fraction}"),
            ));
        }
        let local_epochs = positive(required(self.local_epochs, "local_epochs")?, "local_epochs")?;
        let batch_size = required(self.batch_size, "batch_size")?;

        let learning_rates = match (self.eta, self.eta_center) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either `eta` or an `eta_center` grid, not both".into(),
                ))
            }
            (Some(eta), None) => {
                if !(eta.is_finite() && eta > 0.0) {
                    return Err(out_of_range("eta", format!("must be > 0, got {eta}")));
                }
                LearningRates::Fixed { eta }
            }
            (None, Some(center)) => {
                if !(center.is_finite() && center > 0.0) {
                    return Err(out_of_range(
                        "eta_center",
                        format!("must be > 0, got {center}"),
                    ));
                }
                let count = self.eta_count.unwrap_or(1);
                if count.is_multiple_of(2) {
                    return Err(out_of_range(
                        "eta_count",
                        format!("must be odd, got {count}"),
                    ));
                }
                let exponent = self.eta_exponent.unwrap_or(1.0 / 3.0);
                if !(exponent.is_finite() && exponent > 0.0) {
                    return Err(out_of_range("eta_exponent", "must be > 0"));
                }
                LearningRates::Grid {
                    center,
                    exponent,
                    count,
                }
            }
            (None, None) => return Err(Error::MissingKey("eta")),
        };

        let lr_decay = self.eta_decay.unwrap_or(1.0);
        if !(lr_decay > 0.0 && lr_decay <= 1.0) {
            return Err(out_of_range(
                "eta_decay",
                format!("must lie in (0, 1], got {lr_decay}"),
            ));
        }
        let master_seed = self.master_seed.unwrap_or(0);
        let eval_every = positive(self.eval_every.unwrap_or(1), "eval_every")?;

        let targets = self.targets.unwrap_or_default();
        if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(out_of_range(
                "targets",
                format!("accuracy targets must lie in (0, 1), got {t}"),
            ));
        }
        let stop_at_target = self.stop_at_target.unwrap_or(false);
        if stop_at_target && targets.is_empty() {
            return Err(Error::Config(
                "stop_at_target needs at least one target".into(),
            ));
        }

        let figure1_defaults = Figure1Settings::default();
        let figure1 = Figure1Config {
            settings: Figure1Settings {
                sample_size: positive(
                    self.figure1_samples.unwrap_or(figure1_defaults.sample_size),
                    "figure1_samples",
                )?,
                learning_rate: self.figure1_eta.unwrap_or(figure1_defaults.learning_rate),
                batch_size: positive(
                    self.figure1_batch.unwrap_or(figure1_defaults.batch_size),
                    "figure1_batch",
                )?,
                epochs: positive(
                    self.figure1_epochs.unwrap_or(figure1_defaults.epochs),
                    "figure1_epochs",
                )?,
            },
            num_points: positive(self.figure1_points.unwrap_or(50), "figure1_points")?,
            lo: self.figure1_lo.unwrap_or(-0.2),
            hi: self.figure1_hi.unwrap_or(1.2),
            seed: self.figure1_seed.unwrap_or(master_seed),
        };
        if figure1.lo.is_nan() || figure1.hi.is_nan() || figure1.lo > figure1.hi {
            return Err(out_of_range("figure1_lo", "must not exceed figure1_hi"));
        }
        if !(figure1.settings.learning_rate.is_finite() && figure1.settings.learning_rate > 0.0) {
            return Err(out_of_range("figure1_eta", "must be > 0"));
        }

        let round = RoundConfig {
            client_fraction,
            local_epochs,
            batch_size,
            learning_rate: match learning_rates {
                LearningRates::Fixed { eta } => eta,
                LearningRates::Grid { center, .. } => center,
            },
            lr_decay,
            master_seed,
            max_rounds: required(self.max_rounds, "max_rounds")?,
            eval_every,
            eval_train_loss: self.eval_train_loss.unwrap_or(true),
            stop_at_accuracy: None,
            execution: if self.parallel.unwrap_or(true) {
                Execution::Parallel
            } else {
                Execution::Serial
            },
        };

        Ok(ExperimentConfig {
            data,
            model,
            partition,
            partition_seed: self.partition_seed.unwrap_or(master_seed),
            round,
            learning_rates,
            targets,
            stop_at_target,
            baseline_summary: self.baseline_summary.map(|p| resolve(base, p)),
            output_dir: resolve(base, required(self.output_dir, "output_dir")?),
            figure1,
        })
    }
}

impl ExperimentConfig {
    /// Checks that every input file the config names exists.
    pub fn check_files(&self) -> Result<()> {
        let mut paths: Vec<PathBuf> = Vec::new();
        if let DataSource::Mnist { dir } = &self.data {
            paths.extend(MNIST_FILES.iter().map(|f| dir.join(f)));
        }
        paths.extend(self.baseline_summary.clone());
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        dataset = "synthetic"
        model = "logreg"
        partition = "iid"
        num_clients = 10
        client_fraction = 0.5
        local_epochs = 1
        batch_size = 10
        eta = 0.1
        max_rounds = 3
        output_dir = "out"
    "#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new("/cfg"), None)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.round.lr_decay, 1.0);
        assert_eq!(cfg.round.eval_every, 1);
        assert_eq!(cfg.round.execution, Execution::Parallel);
        assert_eq!(cfg.learning_rates, LearningRates::Fixed { eta: 0.1 });
        assert_eq!(cfg.output_dir, PathBuf::from("/cfg/out"));
        assert_eq!(cfg.model, ModelSpec::logreg(10, 3));
        assert_eq!(cfg.figure1.num_points, 50);
        assert!(cfg.targets.is_empty());
    }

    #[test]
    fn range_error_names_the_field() {
        let text = MINIMAL.replace("client_fraction = 0.5", "client_fraction = 1.5");
        let err = parse(&text).unwrap_err();
        assert!(matches!(
            err,
            Error::OutOfRange {
                key: "client_fraction",
                ..
            }
        ));
        assert!(err.to_string().contains("client_fraction"));
    }

    #[test]
    fn unknown_key_is_listed() {
        let text = format!("{MINIMAL}\nlearnig_rate = 0.1\n");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("learnig_rate"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("max_rounds = 3", "");
        assert!(matches!(parse(&text), Err(Error::MissingKey("max_rounds"))));
        let text = MINIMAL.replace("eta = 0.1", "");
        assert!(matches!(parse(&text), Err(Error::MissingKey("eta"))));
    }

    #[test]
    fn batch_size_and_grid() {
        let text = MINIMAL
            .replace("batch_size = 10", "batch_size = \"inf\"")
            .replace("eta = 0.1", "eta_center = 0.1\neta_count = 3");
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.round.batch_size, BatchSize::Full);
        assert_eq!(cfg.learning_rates.values().unwrap().len(), 3);
        let even = text.replace("eta_count = 3", "eta_count = 4");
        assert!(matches!(
            parse(&even),
            Err(Error::OutOfRange {
                key: "eta_count",
                ..
            })
        ));
    }

    #[test]
    fn targets_must_be_fractions() {
        let text = format!("{MINIMAL}\ntargets = [97.0]\n");
        assert!(matches!(
            parse(&text),
            Err(Error::OutOfRange { key: "targets", .. })
        ));
    }

    #[test]
    fn data_dir_override_and_missing_files() {
        let text = MINIMAL.replace("\"synthetic\"", "\"mnist\"");
        assert!(matches!(parse(&text), Err(Error::MissingKey("mnist_dir"))));
        let cfg = parse_config_str(&text, Path::new("/cfg"), Some("/nowhere".into())).unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Mnist {
                dir: "/nowhere".into()
            }
        );
        assert_eq!(cfg.model, ModelSpec::logreg(784, 10));
        assert!(cfg.check_files().is_err());
    }
}
