//! Config-driven experiment runs and their files on disk.
//!
//! `run_experiment` writes into the configured output directory:
//!
//! * `curves.csv`: `eta,round,test_accuracy,train_loss`, one row per
//!   evaluation of each learning rate (raw, not monotonized).
//! * `summary.csv`: `eta,target,rounds_to_target` for each rate's monotonized
//!   curve and for the envelope over rates (`eta = envelope`). An empty
//!   `rounds_to_target` means the target was never reached.
//! * `speedup.csv` (only with `baseline_summary`):
//!   `target,baseline_rounds,rounds,speedup,speedup_label`.
//! * `meta.json`: the resolved config, seeds, divergences, warnings and wall
//!   time.
//!
//! Numbers use the shortest representation that parses back to the same
//! double. Everything except `wall_time_seconds` is a pure function of the
//! config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, PartitionSpec};
use crate::data::{
    load_mnist_dir, make_synthetic_logreg, partition_iid, partition_label_shards,
    partition_powerlaw, Dataset, Partition,
};
use crate::error::{Error, Result};
use crate::federation::{Divergence, Federation};
use crate::harness::{
    figure1_protocol, format_speedup, interpolation_experiment, monotonize, rounds_to_target,
    run_grid, speedup, GridPolicy, GridResult, LearningCurve, SeedMode, Speedup,
};
use crate::nn::{self, ModelSpec};
use crate::params::{interpolate, ParamVector};

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SPEEDUP_FILE: &str = "speedup.csv";
pub const META_FILE: &str = "meta.json";
pub const FIGURE1_FILE: &str = "figure1.csv";
pub const ENVELOPE: &str = "envelope";

/// Shortest decimal that round-trips to `x`.
pub fn format_f64(x: f64) -> String {
    format!("{x}")
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

/// Training and test data plus the client partition a config describes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
}

pub fn load_data(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match *source {
        DataSource::Mnist { ref dir } => load_mnist_dir(dir),
        DataSource::Synthetic {
            train,
            test,
            input_dim,
            classes,
            seed,
        } => make_synthetic_logreg(train + test, input_dim, classes, seed)?.split_at(train),
    }
}

pub fn build_partition(spec: &PartitionSpec, train: &Dataset, seed: u64) -> Result<Partition> {
    match *spec {
        PartitionSpec::Iid { clients } => partition_iid(train.len(), clients, seed),
        PartitionSpec::LabelShards {
            num_shards,
            shards_per_client,
        } => partition_label_shards(train, num_shards, shards_per_client, seed),
        PartitionSpec::Powerlaw {
            clients,
            alpha,
            min_size,
        } => partition_powerlaw(train.len(), clients, alpha, min_size, seed),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_data(&cfg.data)?;
    let partition = build_partition(&cfg.partition, &train, cfg.partition_seed)?;
    Ok(Prepared {
        train,
        test,
        partition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    /// `None` for the envelope row.
    pub eta: Option<f64>,
    pub target: f64,
    pub rounds_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub target: f64,
    pub baseline_rounds: Option<f64>,
    pub rounds: Option<f64>,
    pub speedup: Option<Speedup>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergedRun {
    pub eta: f64,
    #[serde(flatten)]
    pub at: Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub partition_seed: u64,
    pub init_seed: u64,
    pub learning_rates: Vec<f64>,
    pub rounds_completed: Vec<usize>,
    pub diverged: Vec<DivergedRun>,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub grid: GridResult,
    pub envelope: LearningCurve,
    pub summary: Vec<SummaryRow>,
    pub speedups: Vec<SpeedupRow>,
    pub meta: RunMeta,
}

impl ResultBundle {
    pub fn all_diverged(&self) -> bool {
        !self.grid.runs.is_empty() && self.grid.runs.iter().all(|r| r.output.diverged.is_some())
    }

    pub fn final_params(&self) -> Vec<&ParamVector> {
        self.grid
            .runs
            .iter()
            .map(|r| &r.output.final_params)
            .collect()
    }
}

/// Loads data, runs every learning rate and writes the result files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

/// [`run_experiment`] on data that is already loaded.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ResultBundle> {
    let start = Instant::now();
    let fed = Federation::new(cfg.model, &prepared.train, &prepared.partition)?;
    let init_seed = cfg.round.master_seed;
    let init = nn::init_params(&cfg.model, init_seed);
    let rates = cfg.learning_rates.values()?;
    let policy = match cfg.targets.iter().copied().reduce(f64::max) {
        Some(t) if cfg.stop_at_target => GridPolicy::StopAtTarget(t),
        _ => GridPolicy::Full,
    };
    let grid = run_grid(&fed, &prepared.test, &cfg.round, &rates, &init, policy)?;

    let envelope = grid.accuracy_envelope()?;
    let summary = summarize(
        grid.runs
            .iter()
            .map(|r| (r.learning_rate, &r.output.test_accuracy)),
        &cfg.targets,
    )?;

    let speedups = match &cfg.baseline_summary {
        Some(path) => {
            let baseline = read_envelope_rounds(path)?;
            cfg.targets
                .iter()
                .map(|&t| {
                    let baseline_rounds = *baseline.get(&t.to_bits()).ok_or_else(|| {
                        Error::Config(format!(
                            "baseline {} has no envelope row for target {t}",
                            path.display()
                        ))
                    })?;
                    let rounds = rounds_to_target(&envelope, t)?;
                    Ok(SpeedupRow {
                        target: t,
                        baseline_rounds,
                        rounds,
                        speedup: speedup(baseline_rounds, rounds),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![],
    };

    let mut warnings = vec![];
    for &t in &cfg.targets {
        if grid.best_is_grid_endpoint(t)? {
            warnings.push(format!(
                "best learning rate for target {t} is at the edge of the grid; consider widening it"
            ));
        }
    }
    let diverged: Vec<DivergedRun> = grid
        .runs
        .iter()
        .filter_map(|r| {
            r.output.diverged.map(|at| DivergedRun {
                eta: r.learning_rate,
                at,
            })
        })
        .collect();

    let meta = RunMeta {
        config: cfg.clone(),
        master_seed: cfg.round.master_seed,
        partition_seed: cfg.partition_seed,
        init_seed,
        learning_rates: grid.learning_rates(),
        rounds_completed: grid
            .runs
            .iter()
            .map(|r| r.output.rounds_completed)
            .collect(),
        diverged,
        warnings,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let bundle = ResultBundle {
        grid,
        envelope,
        summary,
        speedups,
        meta,
    };
    write_bundle(&cfg.output_dir, &bundle)?;
    Ok(bundle)
}

/// Rounds-to-target for each curve after monotonizing, followed by the
/// envelope over all curves.
pub fn summarize<'a>(
    curves: impl IntoIterator<Item = (f64, &'a LearningCurve)>,
    targets: &[f64],
) -> Result<Vec<SummaryRow>> {
    let mut rows = vec![];
    let monotone: Vec<(f64, LearningCurve)> = curves
        .into_iter()
        .map(|(eta, c)| (eta, monotonize(c)))
        .collect();
    for (eta, curve) in &monotone {
        for &target in targets {
            rows.push(SummaryRow {
                eta: Some(*eta),
                target,
                rounds_to_target: rounds_to_target(curve, target)?,
            });
        }
    }
    if !monotone.is_empty() {
        let refs: Vec<&LearningCurve> = monotone.iter().map(|(_, c)| c).collect();
        let envelope = monotonize(&crate::harness::best_envelope(
            &refs,
            crate::harness::Better::Higher,
        )?);
        for &target in targets {
            rows.push(SummaryRow {
                eta: None,
                target,
                rounds_to_target: rounds_to_target(&envelope, target)?,
            });
        }
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_bundle(dir: &Path, bundle: &ResultBundle) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let mut w = csv_writer(&dir.join(CURVES_FILE))?;
    w.write_record(["eta", "round", "test_accuracy", "train_loss"])?;
    for run in &bundle.grid.runs {
        let losses: BTreeMap<u32, f64> = run.output.train_loss.points().iter().copied().collect();
        for &(round, acc) in run.output.test_accuracy.points() {
            w.write_record([
                format_f64(run.learning_rate),
                round.to_string(),
                format_f64(acc),
                format_opt(losses.get(&round).copied()),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("writing curves", e))?;

    let mut w = csv_writer(&dir.join(SUMMARY_FILE))?;
    w.write_record(["eta", "target", "rounds_to_target"])?;
    for row in &bundle.summary {
        w.write_record([
            row.eta.map_or_else(|| ENVELOPE.to_string(), format_f64),
            format_f64(row.target),
            format_opt(row.rounds_to_target),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing summary", e))?;

    if !bundle.speedups.is_empty() {
        let mut w = csv_writer(&dir.join(SPEEDUP_FILE))?;
        w.write_record([
            "target",
            "baseline_rounds",
            "rounds",
            "speedup",
            "speedup_label",
        ])?;
        for row in &bundle.speedups {
            w.write_record([
                format_f64(row.target),
                format_opt(row.baseline_rounds),
                format_opt(row.rounds),
                format_opt(row.speedup.map(|s| s.0)),
                format_speedup(row.speedup),
            ])?;
        }
        w.flush().map_err(|e| Error::io("writing speedups", e))?;
    }

    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&bundle.meta)?;
    std::fs::write(&meta_path, json + "\n")
        .map_err(|e| Error::io(format!("writing {}", meta_path.display()), e))
}

/// Envelope rounds-to-target by target (keyed by bit pattern) from a
/// previous run's summary file.
pub fn read_envelope_rounds(path: &Path) -> Result<BTreeMap<u64, Option<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.get(0) != Some(ENVELOPE) {
            continue;
        }
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: "summary row has too few fields".into(),
            })
        };
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("not a number: {s:?}"),
            })
        };
        let target = parse(field(1)?)?;
        let rounds = match field(2)? {
            "" => None,
            s => Some(parse(s)?),
        };
        out.insert(target.to_bits(), rounds);
    }
    Ok(out)
}

/// Reads `curves.csv` back into per-rate test accuracy curves, ascending by rate.
pub fn read_curves(path: &Path) -> Result<Vec<(f64, LearningCurve)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut curves: Vec<(f64, LearningCurve)> = vec![];
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    for record in reader.records() {
        let record = record?;
        let (Some(eta), Some(round), Some(acc)) = (record.get(0), record.get(1), record.get(2))
        else {
            return Err(bad("curve row has too few fields".into()));
        };
        let eta: f64 = eta.parse().map_err(|_| bad(format!("bad eta {eta:?}")))?;
        let round: u32 = round
            .parse()
            .map_err(|_| bad(format!("bad round {round:?}")))?;
        let acc: f64 = acc
            .parse()
            .map_err(|_| bad(format!("bad accuracy {acc:?}")))?;
        match curves.last_mut() {
            Some((e, c)) if e.to_bits() == eta.to_bits() => c.push(round, acc)?,
            _ => {
                let mut c = LearningCurve::new();
                c.push(round, acc)?;
                curves.push((eta, c));
            }
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Row {
    pub theta: f64,
    pub loss_shared: f64,
    pub loss_independent: f64,
}

/// Losses of the two trained parents in one seed mode and of their plain
/// average, on the combined set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParentLosses {
    pub w: f64,
    pub w2: f64,
    pub midpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Table {
    pub rows: Vec<Figure1Row>,
    pub shared_parents: ParentLosses,
    pub independent_parents: ParentLosses,
    pub updates_per_model: usize,
}

impl Figure1Table {
    pub fn output_path(dir: &Path) -> PathBuf {
        dir.join(FIGURE1_FILE)
    }
}

/// Trains the two model pairs (shared and independent initialization), then
/// evaluates mixtures along the line between each pair on their combined
/// training data.
pub fn figure1_table(
    spec: &ModelSpec,
    train: &Dataset,
    fig: &crate::config::Figure1Config,
) -> Result<(Figure1Table, [crate::harness::Figure1Models; 2])> {
    let shared = figure1_protocol(spec, train, SeedMode::Shared, fig.seed, &fig.settings)?;
    let independent =
        figure1_protocol(spec, train, SeedMode::Independent, fig.seed, &fig.settings)?;
    if shared.combined != independent.combined {
        return Err(Error::Misaligned(
            "figure 1 seed modes drew different samples".into(),
        ));
    }
    let data = shared.combined.as_batch();
    let curve = |m: &crate::harness::Figure1Models| {
        interpolation_experiment(spec, &m.w, &m.w2, &data, fig.num_points, fig.lo, fig.hi)
    };
    let a = curve(&shared)?;
    let b = curve(&independent)?;
    let rows = a
        .iter()
        .zip(&b)
        .map(
            |(&(theta, loss_shared), &(_, loss_independent))| Figure1Row {
                theta,
                loss_shared,
                loss_independent,
            },
        )
        .collect();
    let parents = |m: &crate::harness::Figure1Models| -> Result<ParentLosses> {
        Ok(ParentLosses {
            w: nn::loss(spec, &m.w, &data)?,
            w2: nn::loss(spec, &m.w2, &data)?,
            midpoint: nn::loss(spec, &interpolate(&m.w, &m.w2, 0.5)?, &data)?,
        })
    };
    let table = Figure1Table {
        rows,
        shared_parents: parents(&shared)?,
        independent_parents: parents(&independent)?,
        updates_per_model: shared.updates_per_model,
    };
    Ok((table, [shared, independent]))
}

/// Runs the parameter-averaging study on the config's training data and
/// writes `figure1.csv` (`theta,loss_shared,loss_independent`).
pub fn run_figure1(cfg: &ExperimentConfig) -> Result<Figure1Table> {
    let (train, _) = load_data(&cfg.data)?;
    let (table, _) = figure1_table(&cfg.model, &train, &cfg.figure1)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut w = csv_writer(&Figure1Table::output_path(dir))?;
    w.write_record(["theta", "loss_shared", "loss_independent"])?;
    for row in &table.rows {
        w.write_record([
            format_f64(row.theta),
            format_f64(row.loss_shared),
            format_f64(row.loss_independent),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io("writing figure 1 table", e))?;
    Ok(table)
}
