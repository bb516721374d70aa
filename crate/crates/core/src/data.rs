//! Datasets, the public probe set, and label-skewed client partitions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{self, Stream};

/// Labeled samples. Labels are in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of the given rows, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("sample index {bad} out of range")));
        }
        Dataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Indices of each class, in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Reads a headerless CSV: `dim` real columns followed by an integer label.
    /// The class count is `max(label) + 1`.
    pub fn from_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {line}: {msg}"),
        };
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 2 {
                return Err(parse_err(n + 1, "need at least one feature and a label".into()));
            }
            let (label, feats) = fields.split_last().unwrap();
            let label: usize = label
                .parse()
                .map_err(|_| parse_err(n + 1, format!("bad label `{label}`")))?;
            let feats = feats
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(n + 1, format!("bad feature `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(feats);
            labels.push(label);
        }
        let features = Matrix::from_rows(&rows).map_err(|e| parse_err(0, e.to_string()))?;
        let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Dataset::new(features, labels, k)
    }

    /// Deterministic train/test split with `test_fraction` of each class held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "test fraction must be in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = seed::stream_rng(seed, Stream::TestData, &[]);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for mut idx in self.class_indices() {
            idx.shuffle(&mut rng);
            let cut = ((idx.len() as f64) * test_fraction).round() as usize;
            test.extend_from_slice(&idx[..cut]);
            train.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        if train.is_empty() || test.is_empty() {
            return Err(Error::invalid("split leaves an empty train or test set"));
        }
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Unlabeled probe samples drawn from a different distribution than the
/// training data.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicDataset {
    features: Matrix,
}

impl PublicDataset {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("public dataset must be non-empty"));
        }
        Ok(PublicDataset { features })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Download size at 4 bytes per feature value.
    pub fn byte_size(&self) -> u64 {
        (self.features.rows() * self.features.cols() * 4) as u64
    }
}

/// Gaussian blob generator: one class mean per label on the unit sphere.
#[derive(Debug, Clone)]
pub struct Blobs {
    means: Vec<Vec<f64>>,
}

impl Blobs {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut rng = seed::stream_rng(seed, Stream::Data, &[0]);
        let means = (0..num_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        Ok(Blobs { means })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `per_class` samples of each class with isotropic noise `spread`,
    /// ordered by class. `stream` separates e.g. train and test draws.
    pub fn sample(&self, per_class: usize, spread: f64, seed: u64, stream: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::invalid("per_class must be >= 1"));
        }
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
        }
        let k = self.means.len();
        let dim = self.means[0].len();
        let mut rng = seed::stream_rng(seed, Stream::Data, &[1, stream]);
        let mut data = Vec::with_capacity(k * per_class * dim);
        let mut labels = Vec::with_capacity(k * per_class);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + spread * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(k * per_class, dim, data)?, labels, k)
    }
}

pub fn synth_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    Blobs::new(num_classes, dim, seed)?.sample(per_class, spread, seed, 0)
}

/// Lower and upper corner of the public-data cube. The blob means sit on the
/// unit sphere, so this cube is mostly off the training distribution.
pub const PUBLIC_RANGE: (f64, f64) = (-1.0, 3.0);

pub fn synth_public(dim: usize, count: usize, seed: u64) -> Result<PublicDataset> {
    if count == 0 || dim == 0 {
        return Err(Error::invalid("public dataset needs count >= 1 and dim >= 1"));
    }
    let mut rng = seed::stream_rng(seed, Stream::Public, &[]);
    let (lo, hi) = PUBLIC_RANGE;
    let data = (0..count * dim).map(|_| rng.random_range(lo..hi)).collect();
    PublicDataset::new(Matrix::from_vec(count, dim, data)?)
}

/// Sample indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness and non-empty clients.
    pub fn new(mut clients: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (c, idx) in clients.iter_mut().enumerate() {
            if idx.is_empty() {
                return Err(Error::Infeasible(format!("client {c} received no samples")));
            }
            idx.sort_unstable();
            for &i in idx.iter() {
                if !seen.insert(i) {
                    return Err(Error::invalid(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(Partition { clients })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.clients[id]
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
    pub fn label_sets(&self, labels: &[usize]) -> Vec<BTreeSet<usize>> {
        self.clients
            .iter()
            .map(|idx| idx.iter().map(|&i| labels[i]).collect())
            .collect()
    }

    /// `{"0": [indices...], "1": [...], ...}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<usize, &Vec<usize>> = self.clients.iter().enumerate().collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<usize, Vec<usize>> = serde_json::from_str(text)?;
        if map.keys().copied().ne(0..map.len()) {
            return Err(Error::invalid("client ids must be 0..n without gaps"));
        }
        Partition::new(map.into_values().collect())
    }
}

/// Integer apportionment of `total` by non-negative `weights`, rounding by
/// largest remainder with ties going to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits `idx` into `parts` contiguous chunks whose sizes differ by at most one.
fn split_even(idx: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&idx[start..start + len]);
        start += len;
    }
    out
}

/// Distribution-based label skew: each class is spread over the clients by
/// proportions drawn from a symmetric Dirichlet(`beta`).
pub fn partition_dirichlet(ds: &Dataset, num_clients: usize, beta: f64, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if num_clients > ds.len() {
        return Err(Error::Infeasible(format!(
            "{num_clients} clients but only {} samples",
            ds.len()
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::stream_rng(seed, Stream::Partition, &[0]);
    let mut clients = vec![Vec::new(); num_clients];
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Infeasible(format!("class {class} has no samples")));
        }
        idx.shuffle(&mut rng);
        let props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let counts = largest_remainder(idx.len(), &props);
        let mut start = 0;
        for (c, &n) in counts.iter().enumerate() {
            clients[c].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    // Empty-client repair: take one sample from the currently largest client.
    for c in 0..num_clients {
        if clients[c].is_empty() {
            let donor = (0..num_clients)
                .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
                .unwrap();
            let moved = clients[donor].pop().unwrap();
            clients[c].push(moved);
        }
    }
    Partition::new(clients)
}

/// Quantity-based label skew: every client holds exactly `labels_per_client`
/// distinct labels, and every label is held by at least one client. A label's
/// samples are split evenly among its holders.
pub fn partition_quantity(ds: &Dataset, num_clients: usize, labels_per_client: usize, seed: u64) -> Result<Partition> {
    let k = ds.num_classes();
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if labels_per_client == 0 || labels_per_client > k {
        return Err(Error::invalid(format!(
            "labels per client must be in [1, {k}], got {labels_per_client}"
        )));
    }
    if num_clients * labels_per_client < k {
        return Err(Error::Infeasible(format!(
            "{num_clients} clients x {labels_per_client} labels cannot cover {k} labels"
        )));
    }
    let mut rng = seed::stream_rng(seed, Stream::Partition, &[1]);

    // Coverage pass: deal a shuffled label list round-robin over shuffled clients.
    let mut label_order: Vec<usize> = (0..k).collect();
    label_order.shuffle(&mut rng);
    let mut client_order: Vec<usize> = (0..num_clients).collect();
    client_order.shuffle(&mut rng);
    let mut held: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_clients];
    for (j, &label) in label_order.iter().enumerate() {
        held[client_order[j % num_clients]].insert(label);
    }
    // Fill pass: top every client up to exactly `labels_per_client`.
    for set in held.iter_mut() {
        let mut missing: Vec<usize> = (0..k).filter(|l| !set.contains(l)).collect();
        missing.shuffle(&mut rng);
        let need = labels_per_client - set.len();
        set.extend(missing.into_iter().take(need));
    }

    let mut clients = vec![Vec::new(); num_clients];
    for (label, mut idx) in ds.class_indices().into_iter().enumerate() {
        let holders: Vec<usize> = (0..num_clients).filter(|&c| held[c].contains(&label)).collect();
        if idx.len() < holders.len() {
            return Err(Error::Infeasible(format!(
                "label {label} has {} samples for {} holders",
                idx.len(),
                holders.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (&c, chunk) in holders.iter().zip(split_even(&idx, holders.len())) {
            clients[c].extend_from_slice(chunk);
        }
    }
    Partition::new(clients)
}

/// One group of a manual split: `clients` clients sharing `labels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualGroup {
    pub clients: usize,
    pub labels: Vec<usize>,
}

impl ManualGroup {
    pub fn new(clients: usize, labels: Vec<usize>) -> Self {
        ManualGroup { clients, labels }
    }
}

/// Manual split: clients are numbered group by group; within a group the
/// listed labels' samples are dealt evenly across its clients (no shuffling).
pub fn partition_manual(ds: &Dataset, groups: &[ManualGroup]) -> Result<Partition> {
    let mut used = BTreeSet::new();
    for (g, group) in groups.iter().enumerate() {
        if group.clients == 0 || group.labels.is_empty() {
            return Err(Error::invalid(format!("group {g} is empty")));
        }
        for &l in &group.labels {
            if l >= ds.num_classes() {
                return Err(Error::invalid(format!("group {g} references unknown label {l}")));
            }
            if !used.insert(l) {
                return Err(Error::invalid(format!("label {l} is listed in more than one group")));
            }
        }
    }
    let by_class = ds.class_indices();
    let mut clients = Vec::new();
    for group in groups {
        let first = clients.len();
        clients.resize(first + group.clients, Vec::new());
        for &l in &group.labels {
            for (c, chunk) in split_even(&by_class[l], group.clients).into_iter().enumerate() {
                clients[first + c].extend_from_slice(chunk);
            }
        }
    }
    Partition::new(clients)
}

/// The ablation layout: ten labels in consecutive pairs over 5+5+5+5+4 clients.
pub fn ablation_groups() -> Vec<ManualGroup> {
    vec![
        ManualGroup::new(5, vec![0, 1]),
        ManualGroup::new(5, vec![2, 3]),
        ManualGroup::new(5, vec![4, 5]),
        ManualGroup::new(5, vec![6, 7]),
        ManualGroup::new(4, vec![8, 9]),
    ]
}
