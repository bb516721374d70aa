//! Evaluation: sample entropy, latent-space cluster statistics, linear CKA,
//! test accuracy, and the communication-cost ledger.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition, PublicDataset};
use crate::error::{Error, Result};
use crate::fl::Algorithm;
use crate::matrix::Matrix;
use crate::nn::{self, ModelParams};
use crate::sampling::{kl_divergence, permuted_assignment, ClusterAssignment, SamplingPlan};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl LabelHistogram {
    pub fn new(num_classes: usize) -> Self {
        LabelHistogram {
            counts: vec![0; num_classes],
            total: 0,
        }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a usize>, num_classes: usize) -> Result<Self> {
        let mut h = LabelHistogram::new(num_classes);
        for &y in labels {
            h.add(y)?;
        }
        Ok(h)
    }

    pub fn add(&mut self, label: usize) -> Result<()> {
        let slot = self
            .counts
            .get_mut(label)
            .ok_or_else(|| Error::invalid(format!("label {label} out of range")))?;
        *slot += 1;
        self.total += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distribution(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// `KL(hist(union of sampled clients) || hist(all labels))`, natural log,
/// with the same flooring as [`kl_divergence`].
pub fn sample_relative_entropy(plan: &SamplingPlan, partition: &Partition, labels: &[usize], num_classes: usize) -> Result<f64> {
    if plan.selected.is_empty() {
        return Err(Error::invalid("empty sampling plan"));
    }
    let mut sampled = LabelHistogram::new(num_classes);
    for &c in &plan.selected {
        if c >= partition.num_clients() {
            return Err(Error::invalid(format!("plan references unknown client {c}")));
        }
        for &i in partition.client(c) {
            sampled.add(labels[i])?;
        }
    }
    if sampled.total() == 0 {
        return Err(Error::invalid("sampled clients hold no data"));
    }
    let global = LabelHistogram::from_labels(labels, num_classes)?;
    kl_divergence(&sampled.distribution(), &global.distribution())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_intra_distance(centers: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            if labels[i] == labels[j] {
                sum += euclid(&centers[i], &centers[j]);
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

pub const RANDOM_CLUSTER_PERMUTATIONS: usize = 20;

/// Mean pairwise distance between same-cluster clients' mean latent vectors,
/// and the same statistic averaged over random size-preserving relabelings.
pub fn latent_cluster_gap(latents: &[Matrix], assign: &ClusterAssignment, seed: u64) -> Result<(f64, f64)> {
    if latents.len() < 2 {
        return Err(Error::invalid("need at least two clients"));
    }
    if latents.len() != assign.n() {
        return Err(Error::DimensionMismatch {
            context: "latent sets vs cluster assignment",
            expected: assign.n(),
            actual: latents.len(),
        });
    }
    let (rows, cols) = (latents[0].rows(), latents[0].cols());
    if latents.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(Error::invalid("latent matrices must share the probe batch and width"));
    }
    let centers: Vec<Vec<f64>> = latents.iter().map(Matrix::column_means).collect();
    let intra = mean_intra_distance(&centers, assign.labels())
        .ok_or_else(|| Error::invalid("every cluster is a singleton; intra-cluster distance undefined"))?;
    let mut rng = seed::stream_rng(seed, Stream::Permutation, &[]);
    let mut random = 0.0;
    for _ in 0..RANDOM_CLUSTER_PERMUTATIONS {
        let perm = permuted_assignment(assign, &mut rng);
        random += mean_intra_distance(&centers, perm.labels()).unwrap_or(0.0);
    }
    Ok((intra, random / RANDOM_CLUSTER_PERMUTATIONS as f64))
}

/// Linear CKA score. `degenerate` marks a zero-variance input, in which case
/// `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cka {
    pub value: f64,
    pub degenerate: bool,
}

fn centered(a: &Matrix) -> Matrix {
    let means = a.column_means();
    let mut out = a.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// Frobenius norm squared of `X^T Y` for row-aligned `X` (m x p) and `Y` (m x q).
fn cross_norm_sq(x: &Matrix, y: &Matrix) -> f64 {
    let (p, q) = (x.cols(), y.cols());
    let mut prod = vec![0.0; p * q];
    for r in 0..x.rows() {
        let (xr, yr) = (x.row(r), y.row(r));
        for (a, xa) in xr.iter().enumerate() {
            if *xa == 0.0 {
                continue;
            }
            let dst = &mut prod[a * q..(a + 1) * q];
            for (d, yb) in dst.iter_mut().zip(yr) {
                *d += xa * yb;
            }
        }
    }
    prod.iter().map(|v| v * v).sum()
}

pub fn linear_cka(a: &Matrix, b: &Matrix) -> Result<Cka> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            context: "CKA activation rows",
            expected: a.rows(),
            actual: b.rows(),
        });
    }
    if a.rows() < 2 {
        return Err(Error::invalid("CKA needs at least two rows"));
    }
    let (ca, cb) = (centered(a), centered(b));
    let degenerate = |raw: &Matrix, c: &Matrix| {
        let raw_ss: f64 = raw.as_slice().iter().map(|v| v * v).sum();
        let ss: f64 = c.as_slice().iter().map(|v| v * v).sum();
        !(ss > 1e-20 * raw_ss) || ss == 0.0
    };
    if degenerate(a, &ca) || degenerate(b, &cb) {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    let ab = cross_norm_sq(&ca, &cb);
    let aa = cross_norm_sq(&ca, &ca).sqrt();
    let bb = cross_norm_sq(&cb, &cb).sqrt();
    Ok(Cka {
        value: ab / (aa * bb),
        degenerate: false,
    })
}

/// CKA between every pair of layers of two models on the same probe batch.
/// Entry `(i, j)` compares layer `i` of `a` with layer `j` of `b`.
pub fn cka_layer_map(a: &ModelParams, b: &ModelParams, probe: &Matrix) -> Result<Matrix> {
    let la = nn::layer_activations(a, probe)?;
    let lb = nn::layer_activations(b, probe)?;
    let mut out = Matrix::zeros(la.len(), lb.len());
    for (i, x) in la.iter().enumerate() {
        for (j, y) in lb.iter().enumerate() {
            out.set(i, j, linear_cka(x, y)?.value);
        }
    }
    Ok(out)
}

/// Argmax accuracy (ties to the lowest class) and mean cross-entropy.
pub fn evaluate_global(params: &ModelParams, test: &Dataset) -> Result<(f64, f64)> {
    let out = nn::forward(params, test.features())?;
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = out.soft.row(*i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    let loss = nn::cross_entropy(params, test.features(), test.labels())?;
    Ok((correct as f64 / test.len() as f64, loss))
}

pub const BYTES_PER_PARAM: u64 = 4;

pub fn model_bytes(num_params: usize) -> u64 {
    num_params as u64 * BYTES_PER_PARAM
}

/// Upload size of one client's soft labels.
pub fn soft_label_bytes(public_count: usize, num_classes: usize) -> u64 {
    (public_count * num_classes) as u64 * BYTES_PER_PARAM
}

/// Public-set download plus soft-label upload for all `n` clients.
pub fn lefl_one_time_bytes(n: usize, public: &PublicDataset, num_classes: usize) -> u64 {
    n as u64 * (public.byte_size() + soft_label_bytes(public.len(), num_classes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub round: usize,
    pub participants: usize,
    pub per_client_down_bytes: u64,
    pub per_client_up_bytes: u64,
    /// `participants * (down + up)`.
    pub round_bytes: u64,
    pub one_time_bytes: u64,
    pub cumulative_bytes: u64,
}

/// Per-client transfer for one round: the model each way, plus a control
/// variate of the same size each way under SCAFFOLD.
pub fn per_client_bytes(model_bytes: u64, algorithm: Algorithm) -> (u64, u64) {
    let factor = if algorithm == Algorithm::Scaffold { 2 } else { 1 };
    (model_bytes * factor, model_bytes * factor)
}

pub fn comm_cost_step(
    round: usize,
    plan: &SamplingPlan,
    model_bytes: u64,
    algorithm: Algorithm,
    one_time_bytes: u64,
    previous_cumulative: u64,
) -> CostRecord {
    let (down, up) = per_client_bytes(model_bytes, algorithm);
    let round_bytes = plan.selected.len() as u64 * (down + up);
    CostRecord {
        round,
        participants: plan.selected.len(),
        per_client_down_bytes: down,
        per_client_up_bytes: up,
        round_bytes,
        one_time_bytes,
        cumulative_bytes: previous_cumulative + round_bytes + one_time_bytes,
    }
}

/// Running communication totals for one simulation.
#[derive(Debug, Clone)]
pub struct CostLedger {
    model_bytes: u64,
    records: Vec<CostRecord>,
}

impl CostLedger {
    pub fn new(num_params: usize) -> Self {
        CostLedger {
            model_bytes: model_bytes(num_params),
            records: Vec::new(),
        }
    }

    pub fn model_bytes(&self) -> u64 {
        self.model_bytes
    }

    pub fn cumulative(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_bytes)
    }

    pub fn one_time_total(&self) -> u64 {
        self.records.iter().map(|r| r.one_time_bytes).sum()
    }

    pub fn records(&self) -> &[CostRecord] {
        &self.records
    }

    pub fn record_round(&mut self, round: usize, participants: usize, algorithm: Algorithm, one_time_bytes: u64) -> CostRecord {
        let (down, up) = per_client_bytes(self.model_bytes, algorithm);
        let round_bytes = participants as u64 * (down + up);
        let rec = CostRecord {
            round,
            participants,
            per_client_down_bytes: down,
            per_client_up_bytes: up,
            round_bytes,
            one_time_bytes,
            cumulative_bytes: self.cumulative() + round_bytes + one_time_bytes,
        };
        self.records.push(rec.clone());
        rec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub sample_relative_entropy: f64,
    pub cumulative_bytes: u64,
    /// Clients whose update was discarded as non-finite. Not written to CSV.
    #[serde(default)]
    pub dropped: usize,
}

/// First round whose accuracy reaches `target`.
pub fn rounds_to_target(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics.iter().find(|m| m.test_accuracy >= target).map(|m| m.round)
}

pub const METRICS_HEADER: &str = "round,accuracy,loss,entropy,cumulative_bytes";

pub fn metrics_to_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.round, m.test_accuracy, m.test_loss, m.sample_relative_entropy, m.cumulative_bytes
        ));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let bad = |line: usize, msg: &str| Error::Parse {
        path: "metrics.csv".into(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n + 1, "expected 5 columns"));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(n + 1, "bad integer"));
        out.push(RoundMetrics {
            round: int(f[0])? as usize,
            test_accuracy: float(f[1])?,
            test_loss: float(f[2])?,
            sample_relative_entropy: float(f[3])?,
            cumulative_bytes: int(f[4])?,
            dropped: 0,
        });
    }
    Ok(out)
}
