//! Evaluation methodology: learning-rate grids, monotone curves, best-rate
//! envelopes, rounds-to-target and speedups, plus the two-model parameter
//! interpolation study.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSize, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    client_update, run_federated, ClientData, Federation, LocalTraining, RoundConfig, RunOutput,
};
use crate::nn::{self, Batch, ModelSpec};
use crate::params::{interpolate, ParamVector};
use crate::rng::{derive_seed, rng_from, tag};

/// `(round, metric)` points with strictly increasing rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    points: Vec<(u32, f64)>,
}

impl LearningCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(u32, f64)>) -> Result<Self> {
        let mut curve = LearningCurve::new();
        for (r, m) in points {
            curve.push(r, m)?;
        }
        Ok(curve)
    }

    pub fn push(&mut self, round: u32, metric: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if round <= last {
                return Err(Error::invalid(format!(
                    "curve rounds must increase: {round} after {last}"
                )));
            }
        }
        self.points.push((round, metric));
        Ok(())
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn rounds(&self) -> impl Iterator<Item = u32> + '_ {
        self.points.iter().map(|&(r, _)| r)
    }

    pub fn metrics(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|&(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<(u32, f64)> {
        self.points.last().copied()
    }

    pub fn max_metric(&self) -> Option<f64> {
        self.metrics().reduce(f64::max)
    }
}

/// `count` learning rates on a geometric grid centered at `center` with ratio
/// `10^exponent`, ascending.
pub fn lr_grid(center: f64, exponent: f64, count: usize) -> Result<Vec<f64>> {
    if count.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "grid size must be odd, got {count}"
        )));
    }
    if !(center.is_finite() && center > 0.0) || !exponent.is_finite() {
        return Err(Error::invalid(
            "grid center must be positive and exponent finite",
        ));
    }
    let half = (count / 2) as i32;
    let mut grid: Vec<f64> = (-half..=half)
        .map(|i| {
            if i == 0 {
                center
            } else {
                center * 10f64.powf(exponent * i as f64)
            }
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    Ok(grid)
}

/// Running maximum: each point becomes the best value seen so far.
pub fn monotonize(curve: &LearningCurve) -> LearningCurve {
    let mut best = f64::NEG_INFINITY;
    LearningCurve {
        points: curve
            .points
            .iter()
            .map(|&(r, m)| {
                best = best.max(m);
                (r, best)
            })
            .collect(),
    }
}

/// Running minimum, for metrics where lower is better.
pub fn monotonize_decreasing(curve: &LearningCurve) -> LearningCurve {
    let mut best = f64::INFINITY;
    LearningCurve {
        points: curve
            .points
            .iter()
            .map(|&(r, m)| {
                best = best.min(m);
                (r, best)
            })
            .collect(),
    }
}

/// First round at which a non-decreasing curve reaches `target`, linearly
/// interpolated between the bracketing evaluations. `None` if never reached.
pub fn rounds_to_target(curve: &LearningCurve, target: f64) -> Result<Option<f64>> {
    if let Some(w) = curve.points.windows(2).find(|w| w[1].1 < w[0].1) {
        return Err(Error::NotMonotone { round: w[1].0 });
    }
    let Some(i) = curve.points.iter().position(|&(_, m)| m >= target) else {
        return Ok(None);
    };
    let (r1, m1) = curve.points[i];
    if i == 0 || m1 == target {
        return Ok(Some(r1 as f64));
    }
    let (r0, m0) = curve.points[i - 1];
    let frac = (target - m0) / (m1 - m0);
    Ok(Some(r0 as f64 + frac * (r1 - r0) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    Higher,
    Lower,
}

/// Pointwise best across curves. Each curve's rounds must be a prefix of the
/// longest curve's rounds, so runs cut short by divergence or a round budget
/// still line up; later rounds take the best of the curves that reach them.
pub fn best_envelope(curves: &[&LearningCurve], better: Better) -> Result<LearningCurve> {
    let Some(longest) = curves.iter().max_by_key(|c| c.len()) else {
        return Ok(LearningCurve::new());
    };
    for c in curves {
        if c.rounds().zip(longest.rounds()).any(|(a, b)| a != b) {
            return Err(Error::Misaligned(
                "evaluation rounds differ between curves".into(),
            ));
        }
    }
    let points = longest
        .points
        .iter()
        .enumerate()
        .map(|(i, &(round, _))| {
            let values = curves.iter().filter_map(|c| c.points.get(i).map(|p| p.1));
            let best = match better {
                Better::Higher => values.fold(f64::NEG_INFINITY, f64::max),
                Better::Lower => values.fold(f64::INFINITY, f64::min),
            };
            (round, best)
        })
        .collect();
    Ok(LearningCurve { points })
}

/// Ratio of baseline rounds to variant rounds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Speedup(pub f64);

impl fmt::Display for Speedup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}×", self.0)
    }
}

pub fn speedup(baseline_rounds: Option<f64>, variant_rounds: Option<f64>) -> Option<Speedup> {
    match (baseline_rounds, variant_rounds) {
        (Some(b), Some(v)) if v > 0.0 => Some(Speedup(b / v)),
        _ => None,
    }
}

/// Renders a speedup the way result tables do: `3.6×`, or `---` when either
/// side never reached the target.
pub fn format_speedup(s: Option<Speedup>) -> String {
    s.map_or_else(|| "---".to_string(), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub learning_rate: f64,
    pub output: RunOutput,
}

/// One training run per learning rate, ascending by rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub runs: Vec<GridRun>,
}

impl GridResult {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.learning_rate).collect()
    }

    /// Best test accuracy across rates at every evaluation round, made monotone.
    pub fn accuracy_envelope(&self) -> Result<LearningCurve> {
        let monotone: Vec<LearningCurve> = self
            .runs
            .iter()
            .map(|r| monotonize(&r.output.test_accuracy))
            .collect();
        let refs: Vec<&LearningCurve> = monotone.iter().collect();
        Ok(monotonize(&best_envelope(&refs, Better::Higher)?))
    }

    pub fn loss_envelope(&self) -> Result<LearningCurve> {
        let refs: Vec<&LearningCurve> = self.runs.iter().map(|r| &r.output.train_loss).collect();
        best_envelope(&refs, Better::Lower)
    }

    pub fn rounds_to_target(&self, target: f64) -> Result<Option<f64>> {
        rounds_to_target(&self.accuracy_envelope()?, target)
    }

    /// The rate that reaches `target` soonest, or failing that the rate with
    /// the best accuracy.
    pub fn best_run(&self, target: f64) -> Result<Option<&GridRun>> {
        let mut best: Option<(&GridRun, (f64, f64))> = None;
        for run in &self.runs {
            let curve = monotonize(&run.output.test_accuracy);
            let reach = rounds_to_target(&curve, target)?.unwrap_or(f64::INFINITY);
            let key = (reach, -curve.max_metric().unwrap_or(f64::NEG_INFINITY));
            if best.is_none_or(|(_, k)| key < k) {
                best = Some((run, key));
            }
        }
        Ok(best.map(|(r, _)| r))
    }

    /// True when the best rate for `target` sits at either end of the grid,
    /// a hint that the grid should be widened.
    pub fn best_is_grid_endpoint(&self, target: f64) -> Result<bool> {
        if self.runs.len() < 3 {
            return Ok(false);
        }
        let Some(best) = self.best_run(target)? else {
            return Ok(false);
        };
        let first = self.runs.first().map(|r| r.learning_rate);
        let last = self.runs.last().map(|r| r.learning_rate);
        Ok(Some(best.learning_rate) == first || Some(best.learning_rate) == last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridPolicy {
    /// Every rate runs for the full round budget.
    Full,
    /// Each rate stops once its accuracy reaches the target, and later rates
    /// only run up to the earliest round any rate reached it. The envelope's
    /// rounds-to-target is the same as under `Full`; only the tail of the
    /// curves past that round is missing.
    StopAtTarget(f64),
}

/// Runs one federated training per learning rate from the same initial
/// parameters.
pub fn run_grid(
    fed: &Federation<'_>,
    test: &Dataset,
    base: &RoundConfig,
    learning_rates: &[f64],
    init: &ParamVector,
    policy: GridPolicy,
) -> Result<GridResult> {
    let run_one = |lr: f64, cfg: RoundConfig| -> Result<GridRun> {
        let cfg = RoundConfig {
            learning_rate: lr,
            ..cfg
        };
        Ok(GridRun {
            learning_rate: lr,
            output: run_federated(fed, test, &cfg, init.clone())?,
        })
    };

    let mut runs = match policy {
        GridPolicy::Full => run_all(learning_rates, |lr| run_one(lr, base.clone()))?,
        GridPolicy::StopAtTarget(target) => {
            let mut budget = base.max_rounds;
            let mut runs = Vec::with_capacity(learning_rates.len());
            for lr in center_out(learning_rates) {
                let cfg = RoundConfig {
                    max_rounds: budget,
                    stop_at_accuracy: Some(target),
                    ..base.clone()
                };
                let run = run_one(lr, cfg)?;
                if let Some(round) = run
                    .output
                    .test_accuracy
                    .points()
                    .iter()
                    .find(|&&(_, m)| m >= target)
                    .map(|&(r, _)| r as usize)
                {
                    budget = budget.min(round);
                }
                runs.push(run);
            }
            runs
        }
    };
    runs.sort_by(|a, b| a.learning_rate.total_cmp(&b.learning_rate));
    Ok(GridResult { runs })
}

/// Middle of the grid first, then alternating outward.
fn center_out(values: &[f64]) -> Vec<f64> {
    let mid = values.len() / 2;
    let mut order = vec![];
    for d in 0..=mid {
        if let Some(&v) = values.get(mid + d) {
            order.push(v);
        }
        if d > 0 && d <= mid {
            order.push(values[mid - d]);
        }
    }
    order.dedup();
    order
}

#[cfg(feature = "parallel")]
fn run_all<F>(rates: &[f64], f: F) -> Result<Vec<GridRun>>
where
    F: Fn(f64) -> Result<GridRun> + Sync + Send,
{
    use rayon::prelude::*;
    rates.par_iter().map(|&lr| f(lr)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all<F>(rates: &[f64], f: F) -> Result<Vec<GridRun>>
where
    F: Fn(f64) -> Result<GridRun>,
{
    rates.iter().map(|&lr| f(lr)).collect()
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, num_points: usize) -> Vec<f64> {
    match num_points {
        0 => vec![],
        1 => vec![lo],
        n => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// Loss of `theta * w + (1 - theta) * w2` on `data` at `num_points` evenly
/// spaced `theta` in `[lo, hi]`.
pub fn interpolation_experiment(
    spec: &ModelSpec,
    w: &ParamVector,
    w2: &ParamVector,
    data: &Batch<'_>,
    num_points: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<(f64, f64)>> {
    if num_points == 0 || lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::invalid(
            "interpolation needs num_points >= 1 and lo <= hi",
        ));
    }
    linspace(lo, hi, num_points)
        .into_iter()
        .map(|theta| {
            let mixed = interpolate(w, w2, theta)?;
            Ok((theta, nn::loss(spec, &mixed, data)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Both models start from the same parameters.
    Shared,
    /// Each model draws its own initial parameters.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Figure1Settings {
    pub sample_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for Figure1Settings {
    /// 600 examples per model, 20 epochs of batches of 50 at rate 0.1: 240 updates.
    fn default() -> Self {
        Figure1Settings {
            sample_size: 600,
            learning_rate: 0.1,
            batch_size: 50,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure1Models {
    pub init_w: ParamVector,
    pub init_w2: ParamVector,
    pub w: ParamVector,
    pub w2: ParamVector,
    /// Union of the two training samples.
    pub combined: Dataset,
    /// SGD steps each model took.
    pub updates_per_model: usize,
}

/// Draws two disjoint IID samples from `train` and fits one model to each
/// with plain minibatch SGD. The samples do not depend on `mode`.
pub fn figure1_protocol(
    spec: &ModelSpec,
    train: &Dataset,
    mode: SeedMode,
    seed: u64,
    settings: &Figure1Settings,
) -> Result<Figure1Models> {
    use rand::seq::SliceRandom;

    let size = settings.sample_size;
    if size == 0 || 2 * size > train.len() {
        return Err(Error::invalid(format!(
            "cannot draw two disjoint samples of {size} from {} examples",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_from(seed, &[tag::FIGURE1, 0]));
    let (first, second) = (&order[..size], &order[size..2 * size]);

    let init_w = nn::init_params(spec, derive_seed(seed, &[tag::FIGURE1, 1]));
    let init_w2 = match mode {
        SeedMode::Shared => init_w.clone(),
        SeedMode::Independent => nn::init_params(spec, derive_seed(seed, &[tag::FIGURE1, 2])),
    };

    let local = LocalTraining {
        epochs: settings.epochs,
        batch_size: BatchSize::Size(settings.batch_size),
        learning_rate: settings.learning_rate,
    };
    let fit = |indices: &[usize], init: &ParamVector, stream: u64| {
        client_update(
            spec,
            ClientData {
                dataset: train,
                indices,
            },
            init,
            &local,
            derive_seed(seed, &[tag::FIGURE1, 3, stream]),
        )
    };
    let w = fit(first, &init_w, 0)?;
    let w2 = fit(second, &init_w2, 1)?;

    Ok(Figure1Models {
        init_w,
        init_w2,
        w,
        w2,
        combined: train.subset(&order[..2 * size])?,
        updates_per_model: settings.epochs * size.div_ceil(settings.batch_size),
    })
}
