//! Datasets and client partitions.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{rng_from, tag};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory labeled dataset with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("dataset must hold at least one example"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                found: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            num_classes,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels, self.input_dim).expect("validated at construction")
    }

    /// Copies the rows named by `indices` into the scratch buffers and
    /// returns them as a batch.
    pub fn gather<'b>(
        &self,
        indices: &[usize],
        features: &'b mut Vec<f64>,
        labels: &'b mut Vec<u32>,
    ) -> Batch<'b> {
        features.clear();
        labels.clear();
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.input_dim).expect("rows have input_dim columns")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.input_dim, self.num_classes)
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], magic: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file and its IDX label file. Pixels are scaled by
/// 1/255 and each image is flattened row-major.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    check_magic(images_path, &images, IMAGES_MAGIC)?;
    need(images_path, &images, 16)?;
    let count = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;

    check_magic(labels_path, &labels, LABELS_MAGIC)?;
    need(labels_path, &labels, 8)?;
    let label_count = be_u32(&labels, 4) as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let input_dim = rows * cols;
    need(images_path, &images, 16 + count * input_dim)?;
    need(labels_path, &labels, 8 + count)?;

    let features = images[16..16 + count * input_dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<u32> = labels[8..8 + count].iter().map(|&l| l as u32).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(10);
    Dataset::new(features, labels, input_dim, num_classes)
}

/// Loads the standard train and test splits from a directory holding the
/// four uncompressed IDX files under their usual names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Synthetic multiclass data labeled by a hidden linear model.
pub fn make_synthetic_logreg(
    num_examples: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(synthetic_logreg_with_truth(num_examples, input_dim, num_classes, seed)?.0)
}

/// Like [`make_synthetic_logreg`], also returning the generating logistic
/// regression parameters.
pub fn synthetic_logreg_with_truth(
    num_examples: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Dataset, ParamVector)> {
    if num_classes < 2 || num_examples < num_classes || input_dim == 0 {
        return Err(Error::invalid(format!(
            "synthetic data needs num_examples >= num_classes >= 2 and input_dim >= 1, \
             got ({num_examples}, {input_dim}, {num_classes})"
        )));
    }
    let mut rng = rng_from(seed, &[tag::DATA]);
    let spec = ModelSpec::logreg(input_dim, num_classes);
    let truth: Vec<f64> = (0..spec.param_count())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let truth = ParamVector::from_vec(truth);
    let features: Vec<f64> = (0..num_examples * input_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z.clamp(-3.0, 3.0) + 3.0) / 6.0
        })
        .collect();
    let placeholder = vec![0; num_examples];
    let batch = Batch::new(&features, &placeholder, input_dim)?;
    let labels = nn::predict(&spec, &truth, &batch)?;
    Ok((
        Dataset::new(features, labels, input_dim, num_classes)?,
        truth,
    ))
}

/// Assignment of example indices to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
}

impl Partition {
    /// Checks that the lists are non-empty and exactly cover `0..n`.
    pub fn new(clients: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("a partition needs at least one client"));
        }
        let mut seen = vec![false; n];
        for (k, idx) in clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::invalid(format!("client {k} holds no examples")));
            }
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!(
                        "index {i} at client {k} is out of range or assigned twice"
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {i} is not assigned")));
        }
        Ok(Partition { clients })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.clients[k]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    /// Distinct labels held by each client.
    pub fn distinct_labels(&self, data: &Dataset) -> Vec<usize> {
        self.clients
            .iter()
            .map(|idx| {
                let mut seen = vec![false; data.num_classes()];
                for &i in idx {
                    seen[data.labels()[i] as usize] = true;
                }
                seen.iter().filter(|&&s| s).count()
            })
            .collect()
    }
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[tag::PARTITION, stream]));
    idx
}

fn deal(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let chunk = order[start..start + s].to_vec();
            start += s;
            chunk
        })
        .collect()
}

/// Shuffles `0..n` and cuts it into `k` nearly equal chunks; the first
/// `n % k` clients get one extra example.
pub fn partition_iid(n: usize, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "iid partition needs n >= K >= 1, got n={n}, K={k}"
        )));
    }
    let sizes: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
    Partition::new(deal(&shuffled(n, seed, 0), &sizes), n)
}

/// Sorts examples by label, cuts them into equal shards, shuffles the shards
/// and deals `shards_per_client` consecutive shards to each client.
pub fn partition_label_shards(
    data: &Dataset,
    num_shards: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    let n = data.len();
    if num_shards == 0 || shards_per_client == 0 {
        return Err(Error::invalid("shard counts must be positive"));
    }
    if !n.is_multiple_of(num_shards) {
        return Err(Error::invalid(format!(
            "{n} examples do not divide into {num_shards} shards"
        )));
    }
    if !num_shards.is_multiple_of(shards_per_client) {
        return Err(Error::invalid(format!(
            "{num_shards} shards do not divide into groups of {shards_per_client}"
        )));
    }
    let shard_size = n / num_shards;
    let mut by_label: Vec<usize> = (0..n).collect();
    // stable: ties keep original order
    by_label.sort_by_key(|&i| data.labels()[i]);

    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut rng_from(seed, &[tag::PARTITION, 1]));

    let clients = shard_ids
        .chunks(shards_per_client)
        .map(|group| {
            group
                .iter()
                .flat_map(|&s| {
                    by_label[s * shard_size..(s + 1) * shard_size]
                        .iter()
                        .copied()
                })
                .collect()
        })
        .collect();
    Partition::new(clients, n)
}

/// Client sizes proportional to `rank^-alpha`, floored at `min_size` and
/// adjusted to sum to `n`.
pub fn powerlaw_sizes(n: usize, k: usize, alpha: f64, min_size: usize) -> Result<Vec<usize>> {
    if k == 0 || !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(
            "power-law partition needs K >= 1 and alpha > 0",
        ));
    }
    if min_size == 0 || k.checked_mul(min_size).is_none_or(|m| m > n) {
        return Err(Error::invalid(format!(
            "infeasible min_size {min_size}: {k} clients cannot each get it from {n} examples"
        )));
    }
    let weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-alpha)).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| ((n as f64 * w / total + 1e-9).floor() as usize).max(min_size))
        .collect();

    let assigned: usize = sizes.iter().sum();
    if assigned <= n {
        sizes[0] += n - assigned;
    } else {
        // floors overshot: shave the largest clients down toward min_size
        let mut excess = assigned - n;
        for s in sizes.iter_mut() {
            let take = excess.min(*s - min_size);
            *s -= take;
            excess -= take;
            if excess == 0 {
                break;
            }
        }
    }
    Ok(sizes)
}

/// Unbalanced partition with [`powerlaw_sizes`] client sizes over shuffled indices.
pub fn partition_powerlaw(
    n: usize,
    k: usize,
    alpha: f64,
    min_size: usize,
    seed: u64,
) -> Result<Partition> {
    let sizes = powerlaw_sizes(n, k, alpha, min_size)?;
    Partition::new(deal(&shuffled(n, seed, 2), &sizes), n)
}

/// Local minibatch size. `Full` treats the whole local dataset as one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl BatchSize {
    /// Number of batches for `n` examples.
    pub fn num_batches(&self, n: usize) -> usize {
        match *self {
            BatchSize::Full => usize::from(n > 0),
            BatchSize::Size(b) => n.div_ceil(b),
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("inf"),
            BatchSize::Size(b) => write!(f, "{b}"),
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" | "full" => Ok(BatchSize::Full),
            other => match other.parse::<usize>() {
                Ok(b) if b > 0 => Ok(BatchSize::Size(b)),
                _ => Err(Error::invalid(format!(
                    "batch size must be a positive integer or \"inf\", got {s:?}"
                ))),
            },
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("inf"),
            BatchSize::Size(b) => s.serialize_u64(*b as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(b) if b > 0 => Ok(BatchSize::Size(b as usize)),
            Raw::Int(b) => Err(serde::de::Error::custom(format!(
                "batch size must be positive, got {b}"
            ))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Shuffles `indices` with `epoch_seed` and cuts them into batches of at most
/// `batch` examples. The last batch keeps the remainder.
pub fn make_batches(indices: &[usize], batch: BatchSize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng_from(epoch_seed, &[]));
    match batch {
        BatchSize::Full => vec![order],
        BatchSize::Size(b) => order.chunks(b).map(<[usize]>::to_vec).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn labeled(labels: &[u32], num_classes: usize) -> Dataset {
        Dataset::new(vec![0.0; labels.len()], labels.to_vec(), 1, num_classes).unwrap()
    }

    fn write_idx(
        dir: &Path,
        name: &str,
        magic: u32,
        dims: &[u32],
        payload: &[u8],
    ) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        for d in dims {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(payload).unwrap();
        path
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[784] = 255;
        pixels[785] = 51;
        let img = write_idx(dir.path(), "img", IMAGES_MAGIC, &[2, 28, 28], &pixels);
        let lab = write_idx(dir.path(), "lab", LABELS_MAGIC, &[2], &[7, 3]);
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 784);
        assert_eq!(ds.num_classes(), 10);
        assert!(ds.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(ds.row(1)[0], 1.0);
        assert_eq!(ds.row(1)[1], 0.2);
        assert_eq!(ds.labels(), &[7, 3]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![0u8; 784];
        let wrong = write_idx(dir.path(), "wrong", LABELS_MAGIC, &[1, 28, 28], &pixels);
        let img = write_idx(dir.path(), "img", IMAGES_MAGIC, &[1, 28, 28], &pixels);
        let lab = write_idx(dir.path(), "lab", LABELS_MAGIC, &[1], &[0]);
        let lab2 = write_idx(dir.path(), "lab2", LABELS_MAGIC, &[2], &[0, 1]);
        let short = write_idx(
            dir.path(),
            "short",
            IMAGES_MAGIC,
            &[1, 28, 28],
            &pixels[..100],
        );

        let err = load_mnist_idx(&wrong, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().starts_with("format error"));
        assert!(matches!(
            load_mnist_idx(&img, &lab2),
            Err(Error::CountMismatch {
                images: 1,
                labels: 2
            })
        ));
        let err = load_mnist_idx(&short, &lab).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
        assert!(err.to_string().starts_with("truncated"));
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &lab),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_self_consistent() {
        let (a, truth) = synthetic_logreg_with_truth(90, 5, 3, 1).unwrap();
        assert_eq!(a, make_synthetic_logreg(90, 5, 3, 1).unwrap());
        assert!(a.labels().iter().all(|&l| l < 3));
        assert!(a.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let spec = ModelSpec::logreg(5, 3);
        assert_eq!(nn::accuracy(&spec, &truth, &a.as_batch()).unwrap(), 1.0);
        assert!(make_synthetic_logreg(2, 5, 3, 1).is_err());
        assert!(make_synthetic_logreg(10, 5, 1, 1).is_err());
    }

    #[test]
    fn iid_sizes() {
        assert_eq!(partition_iid(10, 3, 0).unwrap().sizes(), vec![4, 3, 3]);
        assert!(partition_iid(60_000, 100, 0)
            .unwrap()
            .sizes()
            .iter()
            .all(|&s| s == 600));
        assert!(partition_iid(3, 4, 0).is_err());
        assert_eq!(
            partition_iid(50, 5, 9).unwrap(),
            partition_iid(50, 5, 9).unwrap()
        );
    }

    #[test]
    fn shards_sort_then_cut() {
        let ds = labeled(&[1, 0, 1, 0], 2);
        let p = partition_label_shards(&ds, 2, 1, 4).unwrap();
        let mut shards: Vec<Vec<usize>> = p.clients().to_vec();
        shards.sort();
        assert_eq!(shards, vec![vec![0, 2], vec![1, 3]]);
        for c in p.clients() {
            let l: Vec<u32> = c.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(l[0], l[1]);
        }
    }

    #[test]
    fn shard_divisibility_errors() {
        let ds = labeled(&[0; 12], 2);
        assert!(partition_label_shards(&ds, 3, 2, 0).is_err());
        assert!(partition_label_shards(&ds, 5, 1, 0).is_err());
    }

    #[test]
    fn shards_with_aligned_blocks_give_exact_label_counts() {
        let labels: Vec<u32> = (0..10).flat_map(|l| std::iter::repeat_n(l, 30)).collect();
        let ds = labeled(&labels, 10);
        let p = partition_label_shards(&ds, 20, 2, 3).unwrap();
        assert_eq!(p.num_clients(), 10);
        // a client may draw both halves of one label block
        assert!(p.distinct_labels(&ds).iter().all(|&d| (1..=2).contains(&d)));
        let p = partition_label_shards(&ds, 10, 2, 3).unwrap();
        assert!(p.distinct_labels(&ds).iter().all(|&d| d == 2));
    }

    #[test]
    fn powerlaw_examples() {
        assert_eq!(powerlaw_sizes(30, 2, 1.0, 5).unwrap(), vec![20, 10]);
        let near_uniform = powerlaw_sizes(10, 3, 1e-9, 1).unwrap();
        assert_eq!(near_uniform, vec![4, 3, 3]);
        assert!(powerlaw_sizes(10, 3, 1.0, 4).is_err());
        assert!(powerlaw_sizes(10, 3, 0.0, 1).is_err());
        let sizes = powerlaw_sizes(100, 10, 2.5, 5).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert!(sizes.iter().all(|&s| s >= 5));
    }

    #[test]
    fn batches() {
        let idx: Vec<usize> = (0..600).collect();
        let b = make_batches(&idx, BatchSize::Size(10), 1);
        assert_eq!(b.len(), 60);
        assert!(b.iter().all(|c| c.len() == 10));
        let b = make_batches(&idx[..100], BatchSize::Size(64), 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 36]);
        let b = make_batches(&idx, BatchSize::Full, 1);
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort();
        assert_eq!(all, idx);
    }

    #[test]
    fn batch_size_parsing() {
        assert_eq!("inf".parse::<BatchSize>().unwrap(), BatchSize::Full);
        assert_eq!("10".parse::<BatchSize>().unwrap(), BatchSize::Size(10));
        assert!("0".parse::<BatchSize>().is_err());
        assert_eq!(BatchSize::Size(10).num_batches(600), 60);
        assert_eq!(BatchSize::Full.num_batches(600), 1);
    }
}
