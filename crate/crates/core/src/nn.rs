//! Differentiable models as pure functions over flat parameter vectors.
//!
//! Both model families are stacks of dense layers. Parameters are laid out
//! layer by layer; each layer stores its weight matrix row-major with shape
//! `(fan_in, fan_out)`, followed by its `fan_out` biases. Hidden layers use
//! ReLU; the output layer produces logits scored with softmax cross-entropy.
//!
//! The ReLU derivative at exactly zero is taken as 0.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{rng_from, tag};

/// Rows per chunk when evaluating a large dataset.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// Multinomial logistic regression.
    LogReg {
        input_dim: usize,
        num_classes: usize,
    },
    /// Two hidden ReLU layers.
    Mlp2nn {
        input_dim: usize,
        hidden: [usize; 2],
        num_classes: usize,
    },
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec::LogReg {
            input_dim,
            num_classes,
        }
    }

    pub fn mlp_2nn(input_dim: usize, hidden1: usize, hidden2: usize, num_classes: usize) -> Self {
        ModelSpec::Mlp2nn {
            input_dim,
            hidden: [hidden1, hidden2],
            num_classes,
        }
    }

    /// The 784-200-200-10 MNIST perceptron.
    pub fn mnist_2nn() -> Self {
        Self::mlp_2nn(784, 200, 200, 10)
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::LogReg { input_dim, .. } | ModelSpec::Mlp2nn { input_dim, .. } => input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelSpec::LogReg { num_classes, .. } | ModelSpec::Mlp2nn { num_classes, .. } => {
                num_classes
            }
        }
    }

    /// `(fan_in, fan_out)` of each dense layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        match *self {
            ModelSpec::LogReg {
                input_dim,
                num_classes,
            } => vec![(input_dim, num_classes)],
            ModelSpec::Mlp2nn {
                input_dim,
                hidden: [h1, h2],
                num_classes,
            } => vec![(input_dim, h1), (h1, h2), (h2, num_classes)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::invalid("a model needs at least 2 classes"));
        }
        if self.layers().iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// A borrowed block of examples: row-major features and their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [u32],
    input_dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [u32], input_dim: usize) -> Result<Self> {
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                found: features.len(),
            });
        }
        Ok(Batch {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self) -> &'a [f64] {
        self.features
    }

    pub fn labels(&self) -> &'a [u32] {
        self.labels
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Batch<'a> {
        Batch {
            features: &self.features[start * self.input_dim..end * self.input_dim],
            labels: &self.labels[start..end],
            input_dim: self.input_dim,
        }
    }
}

fn check(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if w.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            found: w.len(),
        });
    }
    if batch.input_dim != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            found: batch.input_dim,
        });
    }
    let num_classes = spec.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng_from(seed, &[tag::INIT]);
    let mut w = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        w.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        w.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::from_vec(w)
}

/// Mean cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    check(spec, w, batch)?;
    let mut total = 0.0;
    for start in (0..batch.len()).step_by(EVAL_CHUNK) {
        let chunk = batch.slice(start, (start + EVAL_CHUNK).min(batch.len()));
        let logits = logits(spec, w, &chunk);
        total += cross_entropy_sum(&logits, chunk.labels, spec.num_classes());
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to `w`.
pub fn gradient(spec: &ModelSpec, w: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector> {
    let mut grad = ParamVector::zeros(w.len());
    loss_and_gradient_into(spec, w, batch, &mut grad)?;
    Ok(grad)
}

/// Computes the mean loss and writes its gradient into `grad`.
pub fn loss_and_gradient_into(
    spec: &ModelSpec,
    w: &[f64],
    batch: &Batch<'_>,
    grad: &mut [f64],
) -> Result<f64> {
    check(spec, w, batch)?;
    if grad.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: grad.len(),
        });
    }
    Ok(backprop(spec, w, batch, grad))
}

/// Fraction of examples whose highest-scoring class equals the label.
/// Ties go to the lowest class index.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, data: &Batch<'_>) -> Result<f64> {
    Ok(evaluate(spec, w, data)?.accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy in one forward pass.
pub fn evaluate(spec: &ModelSpec, w: &[f64], data: &Batch<'_>) -> Result<Evaluation> {
    check(spec, w, data)?;
    let c = spec.num_classes();
    let mut total = 0.0;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let chunk = data.slice(start, (start + EVAL_CHUNK).min(data.len()));
        let logits = logits(spec, w, &chunk);
        total += cross_entropy_sum(&logits, chunk.labels, c);
        correct += logits
            .chunks_exact(c)
            .zip(chunk.labels)
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count();
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: total / n,
        accuracy: correct as f64 / n,
    })
}

/// Predicted class per example.
pub fn predict(spec: &ModelSpec, w: &ParamVector, data: &Batch<'_>) -> Result<Vec<u32>> {
    check(spec, w, data)?;
    let c = spec.num_classes();
    Ok(logits(spec, w, data)
        .chunks_exact(c)
        .map(|row| argmax(row) as u32)
        .collect())
}

/// Softmax class probabilities, row-major `(examples, classes)`.
pub fn predict_proba(spec: &ModelSpec, w: &ParamVector, data: &Batch<'_>) -> Result<Vec<f64>> {
    check(spec, w, data)?;
    let mut out = logits(spec, w, data);
    for row in out.chunks_exact_mut(spec.num_classes()) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn cross_entropy_sum(logits: &[f64], labels: &[u32], c: usize) -> f64 {
    logits
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum()
}

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`, both given
/// by row and column strides so transposes are free. `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above keep every index the kernel touches in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer outputs for a batch: ReLU activations for hidden layers, logits last.
fn forward(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Vec<Vec<f64>> {
    let m = batch.len();
    let layers = spec.layers();
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let weights = &w[offset..offset + fan_in * fan_out];
        let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let mut z: Vec<f64> = bias.iter().copied().cycle().take(m * fan_out).collect();
        let input = if l == 0 {
            batch.features
        } else {
            &outputs[l - 1][..]
        };
        gemm(
            m,
            fan_in,
            fan_out,
            input,
            (fan_in, 1),
            weights,
            (fan_out, 1),
            1.0,
            &mut z,
        );
        if l + 1 < layers.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        outputs.push(z);
    }
    outputs
}

fn logits(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
    forward(spec, w, batch).pop().expect("at least one layer")
}

fn backprop(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>, grad: &mut [f64]) -> f64 {
    let m = batch.len();
    let c = spec.num_classes();
    let layers = spec.layers();
    let mut outputs = forward(spec, w, batch);

    // dL/dlogits = (softmax - onehot) / m
    let mut delta = outputs.pop().expect("at least one layer");
    let loss = cross_entropy_sum(&delta, batch.labels, c) / m as f64;
    let inv_m = 1.0 / m as f64;
    for (row, &y) in delta.chunks_exact_mut(c).zip(batch.labels) {
        softmax_in_place(row);
        row[y as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_m;
        }
    }

    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &layers {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }

    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let off = offsets[l];
        let input: &[f64] = if l == 0 {
            batch.features
        } else {
            &outputs[l - 1]
        };

        let (gw, rest) = grad[off..].split_at_mut(fan_in * fan_out);
        // dW = input^T * delta
        gemm(
            fan_in,
            m,
            fan_out,
            input,
            (1, fan_in),
            &delta,
            (fan_out, 1),
            0.0,
            gw,
        );
        let gb = &mut rest[..fan_out];
        gb.fill(0.0);
        for row in delta.chunks_exact(fan_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }

        if l > 0 {
            // d input = delta * W^T, masked by the ReLU that produced the input.
            let weights = &w[off..off + fan_in * fan_out];
            let mut d_in = vec![0.0; m * fan_in];
            gemm(
                m,
                fan_out,
                fan_in,
                &delta,
                (fan_out, 1),
                weights,
                (1, fan_out),
                0.0,
                &mut d_in,
            );
            for (d, &a) in d_in.iter_mut().zip(input) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = d_in;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_instance(spec: &ModelSpec, n: usize, seed: u64) -> (ParamVector, Vec<f64>, Vec<u32>) {
        let mut rng = rng_from(seed, &[99]);
        let w: Vec<f64> = (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x: Vec<f64> = (0..n * spec.input_dim())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let y: Vec<u32> = (0..n)
            .map(|_| rng.random_range(0..spec.num_classes() as u32))
            .collect();
        (ParamVector::from(w), x, y)
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::mnist_2nn().param_count(), 199_210);
        assert_eq!(ModelSpec::logreg(4, 3).param_count(), 15);
        assert_eq!(init_params(&ModelSpec::mnist_2nn(), 3).len(), 199_210);
        assert_eq!(init_params(&ModelSpec::logreg(4, 3), 3).len(), 15);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::mlp_2nn(6, 4, 4, 3);
        let a = init_params(&spec, 11);
        assert_eq!(a, init_params(&spec, 11));
        assert_ne!(a, init_params(&spec, 12));
        // first layer: 24 weights then 4 zero biases
        assert!(a[24..28].iter().all(|&b| b == 0.0));
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(a[..24].iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_weights_give_log_num_classes() {
        let spec = ModelSpec::logreg(2, 3);
        let x = [0.3, 0.9, 0.1, 0.0];
        let y = [2, 0];
        let batch = Batch::new(&x, &y, 2).unwrap();
        let l = loss(&spec, &ParamVector::zeros(9), &batch).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_per_example_oracle() {
        // Direct per-example softmax cross-entropy, no shared code path.
        for seed in 0..5 {
            let spec = ModelSpec::logreg(5, 3);
            let (w, x, y) = random_instance(&spec, 7, seed);
            let batch = Batch::new(&x, &y, 5).unwrap();
            let mut expected = 0.0;
            for i in 0..7 {
                let scores: Vec<f64> = (0..3)
                    .map(|k| {
                        let mut s = w[15 + k];
                        for j in 0..5 {
                            s += x[i * 5 + j] * w[j * 3 + k];
                        }
                        s
                    })
                    .collect();
                let denom: f64 = scores.iter().map(|s| s.exp()).sum();
                expected += -(scores[y[i] as usize].exp() / denom).ln();
            }
            expected /= 7.0;
            let got = loss(&spec, &w, &batch).unwrap();
            assert!(
                ((got - expected) / expected).abs() < 1e-12,
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn duplication_invariance() {
        let spec = ModelSpec::mlp_2nn(6, 4, 4, 3);
        let (w, x, y) = random_instance(&spec, 5, 3);
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let y2: Vec<u32> = y.iter().chain(&y).copied().collect();
        let b1 = Batch::new(&x, &y, 6).unwrap();
        let b2 = Batch::new(&x2, &y2, 6).unwrap();
        let l1 = loss(&spec, &w, &b1).unwrap();
        let l2 = loss(&spec, &w, &b2).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1.abs());
        let g1 = gradient(&spec, &w, &b1).unwrap();
        let g2 = gradient(&spec, &w, &b2).unwrap();
        assert!(g1.max_relative_diff(&g2, 1e-12) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cases = [
            (ModelSpec::logreg(5, 3), 8),
            (ModelSpec::mlp_2nn(6, 4, 4, 3), 8),
        ];
        for (spec, n) in cases {
            let (w, x, y) = random_instance(&spec, n, 17);
            let batch = Batch::new(&x, &y, spec.input_dim()).unwrap();
            let g = gradient(&spec, &w, &batch).unwrap();
            let h = 1e-5;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let fd = (loss(&spec, &wp, &batch).unwrap() - loss(&spec, &wm, &batch).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-5, "{spec:?} coord {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let spec = ModelSpec::logreg(2, 3);
        let x = [0.5; 8];
        let y = [0, 1, 0, 2];
        let batch = Batch::new(&x, &y, 2).unwrap();
        let acc = accuracy(&spec, &ParamVector::zeros(9), &batch).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn self_labeled_data_is_perfectly_classified() {
        let spec = ModelSpec::mlp_2nn(6, 4, 4, 3);
        let (w, x, y) = random_instance(&spec, 20, 5);
        let batch = Batch::new(&x, &y, 6).unwrap();
        let labels = predict(&spec, &w, &batch).unwrap();
        let relabeled = Batch::new(&x, &labels, 6).unwrap();
        assert_eq!(accuracy(&spec, &w, &relabeled).unwrap(), 1.0);
    }

    #[test]
    fn single_wrong_prediction_scores_zero() {
        let spec = ModelSpec::logreg(1, 2);
        let w = ParamVector::from(vec![0.0, 0.0, 1.0, 0.0]);
        let batch = Batch::new(&[0.4], &[1], 1).unwrap();
        assert_eq!(accuracy(&spec, &w, &batch).unwrap(), 0.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let spec = ModelSpec::mlp_2nn(6, 4, 4, 5);
        let (mut w, x, y) = random_instance(&spec, 9, 8);
        w.scale(40.0);
        let batch = Batch::new(&x, &y, 6).unwrap();
        let p = predict_proba(&spec, &w, &batch).unwrap();
        for row in p.chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn error_paths() {
        let spec = ModelSpec::logreg(2, 3);
        let empty = Batch::new(&[], &[], 2).unwrap();
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(9), &empty),
            Err(Error::EmptyBatch)
        ));
        assert_eq!(
            loss(&spec, &ParamVector::zeros(9), &empty)
                .unwrap_err()
                .to_string(),
            "empty batch"
        );
        let batch = Batch::new(&[0.0, 0.0], &[1], 2).unwrap();
        assert!(matches!(
            gradient(&spec, &ParamVector::zeros(8), &batch),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = Batch::new(&[0.0, 0.0], &[3], 2).unwrap();
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(9), &bad),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(Batch::new(&[0.0; 3], &[0], 2).is_err());
        assert!(accuracy(&spec, &ParamVector::zeros(9), &empty).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let spec = ModelSpec::logreg(1, 2);
        let w = ParamVector::from(vec![1e4, -1e4, 0.0, 0.0]);
        let batch = Batch::new(&[1.0], &[1], 1).unwrap();
        let l = loss(&spec, &w, &batch).unwrap();
        assert!((l - 2e4).abs() < 1e-9);
    }
}
