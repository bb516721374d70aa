//! Low-entropy client sampling.
//!
//! Clients train briefly on their own data and report soft labels for a
//! shared public probe set. The server turns those into a pairwise KL matrix,
//! clusters the clients by their matrix rows, and then samples each round
//! proportionally from every cluster.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PublicDataset;
use crate::error::{Error, Result};
use crate::fl::{self, Algorithm, ClientState, LocalConfig, ServerState};
use crate::matrix::Matrix;
use crate::metrics::{self, CostRecord};
use crate::nn::{self, ModelParams, SoftLabels, PROB_FLOOR};
use crate::seed::{self, Stream};

/// Floors both vectors at [`PROB_FLOOR`], renormalizes, and returns the
/// natural-log divergence `KL(p || q)`, clamped at zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "KL operands",
            expected: p.len(),
            actual: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::invalid("KL of empty distributions"));
    }
    Ok(kl_floored(p, q))
}

/// Floored, renormalized probabilities and their logs.
fn floored(p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s: f64 = p.iter().map(|v| v.max(PROB_FLOOR)).sum();
    let probs: Vec<f64> = p.iter().map(|v| v.max(PROB_FLOOR) / s).collect();
    let logs = probs.iter().map(|v| v.ln()).collect();
    (probs, logs)
}

fn kl_prepared(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = p.iter().zip(log_p).zip(log_q).map(|((a, la), lb)| a * (la - lb)).sum();
    kl.max(0.0)
}

fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    let (pp, lp) = floored(p);
    let (_, lq) = floored(q);
    kl_prepared(&pp, &lp, &lq)
}

/// Pairwise soft-label divergences: entry `(i, j)` is `KL(p_i || p_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::DimensionMismatch {
                context: "similarity matrix columns",
                expected: values.rows(),
                actual: values.cols(),
            });
        }
        for i in 0..values.rows() {
            if values.get(i, i) != 0.0 {
                return Err(Error::invalid("similarity matrix diagonal must be zero"));
            }
        }
        if values.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("similarity entries must be finite and non-negative"));
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn to_csv(&self) -> String {
        self.values.to_csv()
    }

    /// Mean absolute difference between rows `i` and `j`.
    pub fn row_distance(&self, i: usize, j: usize) -> f64 {
        let n = self.n() as f64;
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// How a client's per-sample soft labels are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelReduction {
    /// Average of per-sample divergences.
    #[default]
    PerSampleMean,
    /// Divergence between the two clients' mean output distributions.
    MeanDistribution,
}

pub fn build_similarity_matrix(soft: &[SoftLabels], reduction: SoftLabelReduction) -> Result<SimilarityMatrix> {
    let n = soft.len();
    if n == 0 {
        return Err(Error::invalid("no soft labels"));
    }
    let (rows, k) = (soft[0].len(), soft[0].num_classes());
    if rows == 0 {
        return Err(Error::invalid("soft labels cover no public samples"));
    }
    for s in soft {
        if s.len() != rows || s.num_classes() != k {
            return Err(Error::invalid(format!(
                "soft-label shape {}x{} differs from {rows}x{k}",
                s.len(),
                s.num_classes()
            )));
        }
    }
    // Each client's distributions as flat (probs, logs) over `count` rows of width k.
    let (prepared, count): (Vec<(Vec<f64>, Vec<f64>)>, usize) = match reduction {
        SoftLabelReduction::PerSampleMean => {
            let flat = soft
                .iter()
                .map(|s| {
                    let (mut probs, mut logs) = (Vec::with_capacity(rows * k), Vec::with_capacity(rows * k));
                    for r in 0..rows {
                        let (p, l) = floored(s.row(r));
                        probs.extend(p);
                        logs.extend(l);
                    }
                    (probs, logs)
                })
                .collect();
            (flat, rows)
        }
        SoftLabelReduction::MeanDistribution => (soft.iter().map(|s| floored(&s.mean_distribution())).collect(), 1),
    };
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let (pi, li) = &prepared[i];
        for j in 0..n {
            if i == j {
                continue;
            }
            let lj = &prepared[j].1;
            let total: f64 = (0..count)
                .map(|r| {
                    let span = r * k..(r + 1) * k;
                    kl_prepared(&pi[span.clone()], &li[span.clone()], &lj[span])
                })
                .sum();
            m.set(i, j, total / count as f64);
        }
    }
    SimilarityMatrix::new(m)
}

/// Cluster id per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || k > labels.len() {
            return Err(Error::invalid(format!("cluster count {k} invalid for {} clients", labels.len())));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("cluster label out of range"));
        }
        Ok(ClusterAssignment { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Member client ids per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// `{"<client_id>": <cluster_id>, ...}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<usize, usize> = self.labels.iter().copied().enumerate().collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<usize, usize> = serde_json::from_str(text)?;
        if map.keys().copied().ne(0..map.len()) {
            return Err(Error::invalid("client ids must be 0..n without gaps"));
        }
        let labels: Vec<usize> = map.into_values().collect();
        let k = labels.iter().max().map_or(0, |m| m + 1);
        ClusterAssignment::new(labels, k)
    }

    /// True when both assignments induce the same grouping.
    pub fn same_partition(&self, other: &ClusterAssignment) -> bool {
        if self.n() != other.n() {
            return false;
        }
        let mut fwd = BTreeMap::new();
        let mut bwd = BTreeMap::new();
        self.labels.iter().zip(&other.labels).all(|(&a, &b)| {
            *fwd.entry(a).or_insert(b) == b && *bwd.entry(b).or_insert(a) == a
        })
    }
}

/// One Lloyd run.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignment: ClusterAssignment,
    pub inertia: f64,
    pub runs: Vec<KMeansRun>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(x, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &[&[f64]], k: usize, rng: &mut seed::Rng, max_iter: usize) -> KMeansRun {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = index::sample(rng, n, k).into_iter().map(|i| points[i].to_vec()).collect();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        // Empty-cluster repair: hand the empty cluster the point farthest from
        // its centroid, taken from a cluster that can spare one.
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two members");
            counts[labels[donor]] -= 1;
            counts[c] = 1;
            labels[donor] = c;
            dists[donor] = 0.0;
            centroids[c] = points[donor].to_vec();
            changed = true;
        }
        trace.push(dists.iter().sum());

        if !changed && trace.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        for (c, s) in sums.into_iter().enumerate() {
            let cnt = counts[c] as f64;
            centroids[c] = s.into_iter().map(|v| v / cnt).collect();
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    KMeansRun { labels, inertia, trace }
}

/// Renumbers clusters in order of first appearance.
fn canonical(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Lloyd's algorithm on the rows of `m`, best of `n_init` seeded restarts.
pub fn kmeans_fit(m: &SimilarityMatrix, k: usize, seed: u64, max_iter: usize, n_init: usize) -> Result<KMeansFit> {
    let n = m.n();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} clients")));
    }
    let points: Vec<&[f64]> = (0..n).map(|i| m.row(i)).collect();
    let mut rng = seed::stream_rng(seed, Stream::Clustering, &[]);
    let runs: Vec<KMeansRun> = (0..n_init.max(1)).map(|_| lloyd(&points, k, &mut rng, max_iter)).collect();
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.inertia.total_cmp(&b.1.inertia).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let assignment = ClusterAssignment::new(canonical(&runs[best].labels, k), k)?;
    Ok(KMeansFit {
        assignment,
        inertia: runs[best].inertia,
        runs,
    })
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_N_INIT: usize = 10;

pub fn kmeans_cluster(m: &SimilarityMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    Ok(kmeans_fit(m, k, seed, KMEANS_MAX_ITER, KMEANS_N_INIT)?.assignment)
}

/// `max(1, round(log2 n))`.
pub fn default_cluster_count(n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    ((n as f64).log2().round() as usize).clamp(1, n)
}

/// Clients selected for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub round: usize,
    /// Sorted, unique client ids.
    pub selected: Vec<usize>,
    pub per_cluster_quota: Option<Vec<usize>>,
}

impl SamplingPlan {
    pub fn all(n: usize, round: usize) -> Self {
        SamplingPlan {
            round,
            selected: (0..n).collect(),
            per_cluster_quota: None,
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

fn round_rng(seed: u64, round: usize) -> seed::Rng {
    seed::stream_rng(seed, Stream::Sampling, &[round as u64])
}

fn check_budget(n: usize, budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::invalid("sampling budget must be >= 1"));
    }
    if budget > n {
        return Err(Error::invalid(format!("budget {budget} exceeds {n} clients")));
    }
    Ok(())
}

/// Seeded uniform choice of `budget` of `n` clients without replacement.
pub fn uniform_sample(n: usize, budget: usize, round: usize, seed: u64) -> Result<SamplingPlan> {
    check_budget(n, budget)?;
    let mut rng = round_rng(seed, round);
    let mut selected = index::sample(&mut rng, n, budget).into_vec();
    selected.sort_unstable();
    Ok(SamplingPlan {
        round,
        selected,
        per_cluster_quota: None,
    })
}

/// Proportional quotas per cluster, rounded by largest remainder with ties
/// to the lower cluster id.
pub fn stratified_quotas(sizes: &[usize], budget: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    // Exact integer arithmetic: quota_c = budget * size_c / n.
    let mut quotas: Vec<usize> = sizes.iter().map(|s| budget * s / n).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| ((budget * sizes[b]) % n).cmp(&((budget * sizes[a]) % n)).then(a.cmp(&b)));
    for &c in order.iter().take(budget - assigned) {
        quotas[c] += 1;
    }
    quotas
}

/// Samples each cluster's quota uniformly without replacement, visiting
/// clusters in id order with one per-round random stream.
pub fn stratified_sample(assign: &ClusterAssignment, budget: usize, round: usize, seed: u64) -> Result<SamplingPlan> {
    check_budget(assign.n(), budget)?;
    let members = assign.members();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = stratified_quotas(&sizes, budget);
    let mut rng = round_rng(seed, round);
    let mut selected = Vec::with_capacity(budget);
    for (group, &q) in members.iter().zip(&quotas) {
        if q == 0 {
            continue;
        }
        selected.extend(index::sample(&mut rng, group.len(), q).into_iter().map(|i| group[i]));
    }
    selected.sort_unstable();
    Ok(SamplingPlan {
        round,
        selected,
        per_cluster_quota: Some(quotas),
    })
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    /// Local training used to produce the soft-label models.
    pub local: LocalConfig,
    /// Explicit cluster count; `None` uses [`default_cluster_count`].
    pub cluster_k: Option<usize>,
    pub reduction: SoftLabelReduction,
    pub workers: usize,
    /// Bytes charged for each client's copy of the initial model. Zero when the
    /// download is already accounted for by a training round.
    pub model_download_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub similarity: SimilarityMatrix,
    pub assignment: ClusterAssignment,
    pub soft_labels: Vec<SoftLabels>,
    pub cost: CostRecord,
}

/// Soft labels of each model on the public set.
pub fn soft_labels_on(models: &[&ModelParams], public: &PublicDataset, workers: usize) -> Result<Vec<SoftLabels>> {
    let run = |m: &&ModelParams| nn::forward(m, public.features()).map(|o| o.soft);
    if workers > 1 {
        models.par_iter().map(run).collect()
    } else {
        models.iter().map(run).collect()
    }
}

/// Server side of preprocessing: similarity matrix and clusters from the
/// clients' uploaded soft labels.
pub fn cluster_soft_labels(
    soft_labels: Vec<SoftLabels>,
    cluster_k: Option<usize>,
    reduction: SoftLabelReduction,
    seed: u64,
) -> Result<(SimilarityMatrix, ClusterAssignment, Vec<SoftLabels>)> {
    let similarity = build_similarity_matrix(&soft_labels, reduction)?;
    let k = cluster_k.unwrap_or_else(|| default_cluster_count(similarity.n()));
    let assignment = kmeans_cluster(&similarity, k, seed)?;
    Ok((similarity, assignment, soft_labels))
}

/// Full preprocessing: every client trains a copy of the current global model
/// on its own data, predicts soft labels for the public set, and the server
/// clusters the resulting similarity matrix.
pub fn preprocess_lefl(
    clients: &[ClientState],
    server: &ServerState,
    public: &PublicDataset,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed> {
    if clients.is_empty() {
        return Err(Error::invalid("no clients to preprocess"));
    }
    let mut local = cfg.local.clone();
    local.algorithm = Algorithm::FedAvg;
    let round = server.round + 1;
    let train = |c: &ClientState| {
        fl::local_train(c, &server.global, &local, None, fl::local_seed(server.seed, round, c.id()))
            .map(|u| u.new_params)
    };
    let models: Vec<ModelParams> = if cfg.workers > 1 {
        clients.par_iter().map(train).collect::<Result<_>>()?
    } else {
        clients.iter().map(train).collect::<Result<_>>()?
    };
    let refs: Vec<&ModelParams> = models.iter().collect();
    let soft = soft_labels_on(&refs, public, cfg.workers)?;
    let (similarity, assignment, soft_labels) = cluster_soft_labels(soft, cfg.cluster_k, cfg.reduction, server.seed)?;
    let k = server.global.spec().num_classes();
    let one_time = metrics::lefl_one_time_bytes(clients.len(), public, k)
        + clients.len() as u64 * cfg.model_download_bytes;
    let cost = CostRecord {
        round: server.round,
        participants: clients.len(),
        per_client_down_bytes: public.byte_size() + cfg.model_download_bytes,
        per_client_up_bytes: metrics::soft_label_bytes(public.len(), k),
        round_bytes: 0,
        one_time_bytes: one_time,
        cumulative_bytes: one_time,
    };
    Ok(Preprocessed {
        similarity,
        assignment,
        soft_labels,
        cost,
    })
}

/// Random cluster labels with the same cluster sizes.
pub fn permuted_assignment(assign: &ClusterAssignment, rng: &mut seed::Rng) -> ClusterAssignment {
    let mut labels = assign.labels.clone();
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    ClusterAssignment { labels, k: assign.k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn soft(rows: &[Vec<f64>]) -> SoftLabels {
        SoftLabels::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    /// Natural-log KL written out term by term, no flooring.
    fn kl_plain(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert!((v - 0.143841).abs() < 1e-6, "{v}");
        assert!((v - kl_plain(&[0.5, 0.5], &[0.25, 0.75])).abs() < 1e-12);
        let z = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(z.is_finite() && z > 0.0);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn similarity_identical_models_is_zero() {
        let s = soft(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let m = build_similarity_matrix(&[s.clone(), s], SoftLabelReduction::PerSampleMean).unwrap();
        assert_eq!(m.matrix().as_slice(), &[0.0; 4]);
        let one = build_similarity_matrix(&[soft(&[vec![0.5, 0.5]])], SoftLabelReduction::PerSampleMean).unwrap();
        assert_eq!(one.n(), 1);
        assert_eq!(one.get(0, 0), 0.0);
    }

    #[test]
    fn similarity_matches_pairwise_hand_values() {
        let ps = [vec![0.5, 0.5], vec![0.25, 0.75], vec![0.9, 0.1]];
        let sets: Vec<_> = ps.iter().map(|p| soft(&[p.clone()])).collect();
        let m = build_similarity_matrix(&sets, SoftLabelReduction::PerSampleMean).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { kl_plain(&ps[i], &ps[j]) };
                assert!((m.get(i, j) - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn similarity_reductions_differ_only_in_averaging() {
        let a = soft(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let b = soft(&[vec![0.1, 0.9], vec![0.9, 0.1]]);
        let per = build_similarity_matrix(&[a.clone(), b.clone()], SoftLabelReduction::PerSampleMean).unwrap();
        let mean = build_similarity_matrix(&[a, b], SoftLabelReduction::MeanDistribution).unwrap();
        assert!(per.get(0, 1) > 1.0);
        assert!(mean.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn similarity_rejects_shape_mismatch() {
        let a = soft(&[vec![0.5, 0.5]]);
        let b = soft(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(build_similarity_matrix(&[a, b], SoftLabelReduction::PerSampleMean).is_err());
    }

    fn matrix_from(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix { values: Matrix::from_rows(rows).unwrap() }
    }

    #[test]
    fn kmeans_trivial_k() {
        let m = matrix_from(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0], vec![2.0, 3.0, 0.0]]);
        assert_eq!(kmeans_cluster(&m, 1, 0).unwrap().labels(), &[0, 0, 0]);
        let fit = kmeans_fit(&m, 3, 0, 300, 10).unwrap();
        assert_eq!(fit.assignment.labels(), &[0, 1, 2]);
        assert_eq!(fit.inertia, 0.0);
        assert!(kmeans_cluster(&m, 4, 0).is_err());
        assert!(kmeans_cluster(&m, 0, 0).is_err());
    }

    /// Exhaustive minimum within-cluster sum of squares over all 2-partitions.
    fn best_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
        let n = points.len();
        let sse = |members: &[&Vec<f64>]| -> f64 {
            let d = members[0].len();
            let mut mean = vec![0.0; d];
            for p in members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v / members.len() as f64;
                }
            }
            members.iter().map(|p| sq_dist(p, &mean)).sum()
        };
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let a: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(p, _)| p).collect();
            let b: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(p, _)| p).collect();
            let cost = sse(&a) + sse(&b);
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_separates_blocks() {
        // clients 0..4 similar to each other, 4..8 similar to each other
        let n = 8;
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    let same = (i < 4) == (j < 4);
                    *v = if same { 0.1 + 0.01 * ((i + j) % 3) as f64 } else { 2.0 + 0.05 * (i % 2) as f64 };
                }
            }
        }
        let m = matrix_from(&rows);
        let got = kmeans_cluster(&m, 2, 3).unwrap();
        let oracle = ClusterAssignment::new(best_two_partition(&rows), 2).unwrap();
        assert!(got.same_partition(&oracle));
        assert_eq!(got.labels(), &[0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn kmeans_handles_duplicate_rows() {
        let m = matrix_from(&vec![vec![0.0; 5]; 5]);
        let a = kmeans_cluster(&m, 3, 1).unwrap();
        assert_eq!(a.sizes().iter().sum::<usize>(), 5);
        assert!(a.sizes().iter().all(|&s| s >= 1));
    }

    #[test]
    fn default_cluster_counts() {
        assert_eq!(default_cluster_count(1), 1);
        assert_eq!(default_cluster_count(2), 1);
        assert_eq!(default_cluster_count(20), 4);
        assert_eq!(default_cluster_count(24), 5);
        assert_eq!(default_cluster_count(100), 7);
    }

    #[test]
    fn quotas_are_proportional() {
        assert_eq!(stratified_quotas(&[10, 20, 30, 40], 10), vec![1, 2, 3, 4]);
        assert_eq!(stratified_quotas(&[5, 5, 5, 5, 4], 5), vec![1, 1, 1, 1, 1]);
        assert_eq!(stratified_quotas(&[1, 1, 1], 1), vec![1, 0, 0]);
    }

    #[test]
    fn stratified_single_cluster_equals_uniform() {
        let a = ClusterAssignment::new(vec![0; 30], 1).unwrap();
        for round in 1..20 {
            let s = stratified_sample(&a, 7, round, 5).unwrap();
            let u = uniform_sample(30, 7, round, 5).unwrap();
            assert_eq!(s.selected, u.selected);
        }
    }

    #[test]
    fn full_budget_selects_everyone() {
        let a = ClusterAssignment::new(vec![0, 1, 1, 2, 0], 3).unwrap();
        assert_eq!(stratified_sample(&a, 5, 1, 0).unwrap().selected, vec![0, 1, 2, 3, 4]);
        assert_eq!(uniform_sample(5, 5, 1, 0).unwrap().selected, vec![0, 1, 2, 3, 4]);
        assert!(uniform_sample(5, 6, 1, 0).is_err());
        assert!(stratified_sample(&a, 6, 1, 0).is_err());
        assert!(uniform_sample(5, 0, 1, 0).is_err());
    }

    #[test]
    fn uniform_is_deterministic_and_fair() {
        assert_eq!(uniform_sample(50, 5, 3, 9).unwrap(), uniform_sample(50, 5, 3, 9).unwrap());
        let mut freq = [0usize; 10];
        for round in 0..10_000 {
            freq[uniform_sample(10, 1, round, 17).unwrap().selected[0]] += 1;
        }
        // binomial(10000, 0.1): sd = 30, so +-150 is 5 sd
        assert!(freq.iter().all(|&f| (850..=1150).contains(&f)), "{freq:?}");
    }

    #[test]
    fn cluster_json_round_trip() {
        let a = ClusterAssignment::new(vec![1, 0, 1], 2).unwrap();
        let json = a.to_json().unwrap();
        assert!(json.contains("\"2\": 1"));
        assert_eq!(ClusterAssignment::from_json(&json).unwrap(), a);
    }

    #[test]
    fn permutation_preserves_sizes() {
        let a = ClusterAssignment::new(vec![0, 0, 0, 1, 1, 2], 3).unwrap();
        let mut rng = seed::rng(3);
        let p = permuted_assignment(&a, &mut rng);
        assert_eq!(p.sizes(), a.sizes());
    }

    proptest! {
        #[test]
        fn kmeans_inertia_never_increases(seed in 0u64..200, n in 2usize..14, k in 1usize..5) {
            prop_assume!(k <= n);
            let mut rng = seed::rng(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.random_range(0.0..3.0) }).collect()).collect();
            let m = matrix_from(&rows);
            let fit = kmeans_fit(&m, k, seed, 300, 4).unwrap();
            for run in &fit.runs {
                for w in run.trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", run.trace);
                }
            }
            prop_assert_eq!(fit.assignment.sizes().iter().filter(|&&s| s > 0).count(), k);
            prop_assert_eq!(kmeans_cluster(&m, k, seed).unwrap(), kmeans_cluster(&m, k, seed).unwrap());
        }

        #[test]
        fn stratified_quotas_sum_to_budget(sizes in proptest::collection::vec(1usize..30, 1..8), frac in 0.0f64..1.0, round in 0usize..50) {
            let n: usize = sizes.iter().sum();
            let budget = ((n as f64 * frac) as usize).clamp(1, n);
            let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
            let a = ClusterAssignment::new(labels, sizes.len()).unwrap();
            let plan = stratified_sample(&a, budget, round, 1).unwrap();
            let quotas = plan.per_cluster_quota.clone().unwrap();
            prop_assert_eq!(quotas.iter().sum::<usize>(), budget);
            prop_assert!(quotas.iter().zip(&sizes).all(|(q, s)| q <= s));
            prop_assert_eq!(plan.selected.len(), budget);
            let mut dedup = plan.selected.clone();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), budget);
        }

        #[test]
        fn similarity_is_nonnegative_with_zero_diagonal(seed in 0u64..300, n in 1usize..6) {
            let mut rng = seed::rng(seed);
            let sets: Vec<SoftLabels> = (0..n).map(|_| {
                let rows: Vec<Vec<f64>> = (0..4).map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                }).collect();
                soft(&rows)
            }).collect();
            let m = build_similarity_matrix(&sets, SoftLabelReduction::PerSampleMean).unwrap();
            for i in 0..n {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert!(m.get(i, j) >= 0.0);
                }
            }
        }
    }
}
