//! Dense feed-forward classifier: ReLU hidden layers, softmax output.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (`fan_out x fan_in`, row-major) followed by its bias vector.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output layers, got {} layer(s)",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidSpec("need at least 2 output classes".into()));
        }
        Ok(ModelSpec {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Width of the last hidden layer (the input width for models without one).
    pub fn latent_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of each layer's weight block in the flat vector.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth());
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            out.push(off);
            off += w[0] * w[1] + w[1];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
    spec: ModelSpec,
}

impl ModelParams {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: spec.num_params(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(ModelParams { values, spec })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        ModelParams {
            values: vec![0.0; spec.num_params()],
            spec,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same spec, new values. Length is checked; finiteness is not, so that
    /// diverged updates can be detected by the caller.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> ModelParams {
        debug_assert_eq!(values.len(), self.values.len());
        ModelParams {
            values,
            spec: self.spec.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Softmax outputs, one probability row per input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    rows: Matrix,
}

impl SoftLabels {
    pub fn new(rows: Matrix) -> Result<Self> {
        for (i, r) in rows.iter_rows().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "soft-label row {i} is not a probability vector"
                )));
            }
        }
        Ok(SoftLabels { rows })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    /// Mean distribution over all rows.
    pub fn mean_distribution(&self) -> Vec<f64> {
        self.rows.column_means()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub soft: SoftLabels,
    /// Post-activation output of the last hidden layer, one row per sample.
    pub latent: Matrix,
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let spec = ModelSpec::new(spec.layer_sizes.clone())?;
    let mut rng = seed::stream_rng(seed, seed::Stream::Init, &[]);
    let mut values = Vec::with_capacity(spec.num_params());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-bound..bound));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ModelParams { values, spec })
}

fn check_batch(params: &ModelParams, batch: &Matrix) -> Result<()> {
    if batch.cols() != params.spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch features",
            expected: params.spec.input_dim(),
            actual: batch.cols(),
        });
    }
    Ok(())
}

/// Affine map `out = W x + b` for one layer.
#[inline]
fn affine(layer: &[f64], fan_in: usize, fan_out: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let (w, b) = layer.split_at(fan_in * fan_out);
    for o in 0..fan_out {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        let mut z = b[o];
        for (wi, xi) in row.iter().zip(x) {
            z += wi * xi;
        }
        out.push(z);
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Runs one sample through the network and returns every layer's
/// post-activation output (the last one is the softmax). `acts[0]` is the input.
/// Returns the log-partition of the output logits; the raw logits are left in `logits`.
fn forward_sample(params: &ModelParams, x: &[f64], acts: &mut Vec<Vec<f64>>, logits: &mut Vec<f64>) -> f64 {
    let sizes = &params.spec.layer_sizes;
    let depth = sizes.len() - 1;
    acts.resize_with(depth + 1, Vec::new);
    acts[0].clear();
    acts[0].extend_from_slice(x);
    let mut off = 0;
    let mut log_norm = 0.0;
    for l in 0..depth {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let len = fan_in * fan_out + fan_out;
        let layer = &params.values[off..off + len];
        off += len;
        let (prev, rest) = acts.split_at_mut(l + 1);
        let out = &mut rest[0];
        affine(layer, fan_in, fan_out, &prev[l], out);
        if l + 1 < depth {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|v| (v - max).exp()).sum();
            log_norm = max + sum.ln();
            logits.clear();
            logits.extend_from_slice(out);
            softmax_in_place(out);
        }
    }
    log_norm
}

pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<ForwardOutput> {
    check_batch(params, batch)?;
    let spec = &params.spec;
    let k = spec.num_classes();
    let h = spec.latent_dim();
    let depth = spec.depth();
    let mut soft = Matrix::zeros(batch.rows(), k);
    let mut latent = Matrix::zeros(batch.rows(), h);
    let mut acts = Vec::new();
    let mut logits = Vec::new();
    for (i, x) in batch.iter_rows().enumerate() {
        forward_sample(params, x, &mut acts, &mut logits);
        soft.row_mut(i).copy_from_slice(&acts[depth]);
        latent.row_mut(i).copy_from_slice(&acts[depth - 1]);
    }
    Ok(ForwardOutput {
        soft: SoftLabels { rows: soft },
        latent,
    })
}

/// Post-activation output of every weight layer, one matrix per layer.
pub fn layer_activations(params: &ModelParams, batch: &Matrix) -> Result<Vec<Matrix>> {
    check_batch(params, batch)?;
    let sizes = &params.spec.layer_sizes;
    let mut out: Vec<Matrix> = sizes[1..]
        .iter()
        .map(|&s| Matrix::zeros(batch.rows(), s))
        .collect();
    let mut acts = Vec::new();
    let mut logits = Vec::new();
    for (i, x) in batch.iter_rows().enumerate() {
        forward_sample(params, x, &mut acts, &mut logits);
        for (l, m) in out.iter_mut().enumerate() {
            m.row_mut(i).copy_from_slice(&acts[l + 1]);
        }
    }
    Ok(out)
}

fn check_labels(params: &ModelParams, batch: &Matrix, labels: &[usize]) -> Result<()> {
    check_batch(params, batch)?;
    if labels.len() != batch.rows() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: batch.rows(),
            actual: labels.len(),
        });
    }
    if batch.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let k = params.spec.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

#[inline]
fn sample_ce(log_norm: f64, logit_y: f64) -> f64 {
    -(logit_y - log_norm).max(PROB_FLOOR.ln())
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy(params: &ModelParams, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(params, batch, labels)?;
    let mut acts = Vec::new();
    let mut logits = Vec::new();
    let mut total = 0.0;
    for (x, &y) in batch.iter_rows().zip(labels) {
        let log_norm = forward_sample(params, x, &mut acts, &mut logits);
        total += sample_ce(log_norm, logits[y]);
    }
    Ok(total / batch.rows() as f64)
}

/// Mean cross-entropy plus `(prox_mu / 2) * ||params - anchor||^2`, and its gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Matrix,
    labels: &[usize],
    prox_mu: f64,
    anchor: Option<&ModelParams>,
) -> Result<(f64, Vec<f64>)> {
    check_labels(params, batch, labels)?;
    if !(prox_mu >= 0.0) || !prox_mu.is_finite() {
        return Err(Error::invalid(format!("prox_mu must be finite and >= 0, got {prox_mu}")));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    if !batch.is_finite() {
        return Err(Error::NonFinite("batch features"));
    }
    let anchor = match (prox_mu > 0.0, anchor) {
        (true, None) => return Err(Error::invalid("prox_mu > 0 requires an anchor")),
        (true, Some(a)) if a.len() != params.len() => {
            return Err(Error::DimensionMismatch {
                context: "proximal anchor",
                expected: params.len(),
                actual: a.len(),
            })
        }
        (true, Some(a)) => Some(a),
        (false, _) => None,
    };

    let sizes = &params.spec.layer_sizes;
    let depth = sizes.len() - 1;
    let offsets = params.spec.offsets();
    let mut grad = vec![0.0; params.len()];
    let mut acts = Vec::new();
    let mut logits = Vec::new();
    let mut delta: Vec<f64> = Vec::new();
    let mut prev_delta: Vec<f64> = Vec::new();
    let mut loss = 0.0;

    for (x, &y) in batch.iter_rows().zip(labels) {
        let log_norm = forward_sample(params, x, &mut acts, &mut logits);
        let probs = &acts[depth];
        loss += sample_ce(log_norm, logits[y]);

        delta.clear();
        delta.extend_from_slice(probs);
        delta[y] -= 1.0;

        for l in (0..depth).rev() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            if l > 0 {
                let w = &params.values[off..off + fan_in * fan_out];
                prev_delta.clear();
                prev_delta.resize(fan_in, 0.0);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (pd, wi) in prev_delta.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pd += d * wi;
                    }
                }
                // ReLU derivative, taken as 0 at the kink.
                for (pd, a) in prev_delta.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *pd = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
    }

    let m = batch.rows() as f64;
    loss /= m;
    grad.iter_mut().for_each(|g| *g /= m);

    if let Some(anchor) = anchor {
        let mut sq = 0.0;
        for ((g, w), a) in grad.iter_mut().zip(&params.values).zip(&anchor.values) {
            let diff = w - a;
            sq += diff * diff;
            *g += prox_mu * diff;
        }
        loss += 0.5 * prox_mu * sq;
    }

    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient"));
    }
    Ok((loss, grad))
}

/// One plain SGD update. `decay` is validated here but applied by the caller's
/// schedule (once per local epoch).
pub fn sgd_step(params: &ModelParams, grad: &[f64], lr: f64, decay: f64) -> Result<ModelParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("decay must be in (0, 1], got {decay}")));
    }
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient",
            expected: params.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let values = params
        .values
        .iter()
        .zip(grad)
        .map(|(w, g)| w - lr * g)
        .collect();
    Ok(params.with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let s = spec(&[4, 3, 2]);
        let a = init_params(&s, 7).unwrap();
        let b = init_params(&s, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.len(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(a.len(), 23);
    }

    #[test]
    fn init_depends_on_seed() {
        let s = spec(&[2, 2]);
        let a = init_params(&s, 1).unwrap();
        let b = init_params(&s, 2).unwrap();
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn init_respects_bounds() {
        let s = spec(&[10, 6, 3]);
        let p = init_params(&s, 11).unwrap();
        let b0 = (6.0f64 / 16.0).sqrt();
        assert!(p.values()[..60].iter().all(|v| v.abs() <= b0));
        assert!(p.values()[60..66].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(ModelSpec::new(vec![]), Err(Error::InvalidSpec(_))));
        assert!(matches!(ModelSpec::new(vec![3]), Err(Error::InvalidSpec(_))));
        assert!(matches!(ModelSpec::new(vec![3, 1]), Err(Error::InvalidSpec(_))));
        assert!(matches!(ModelSpec::new(vec![3, 0, 2]), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let p = ModelParams::zeros(spec(&[3, 4, 5]));
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 9.0]]).unwrap();
        let out = forward(&p, &x).unwrap();
        for i in 0..2 {
            for &v in out.soft.row(i) {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tiny_net_matches_hand_evaluation() {
        // [1, 1, 2]: h = relu(2x - 1); z = [3h + 0.5, -h]
        let s = spec(&[1, 1, 2]);
        let p = ModelParams::new(s, vec![2.0, -1.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.5], vec![0.2]]).unwrap();
        let out = forward(&p, &x).unwrap();

        // x = 1.5: h = 2, z = [6.5, -2]
        let h = 2.0;
        let (z0, z1) = (3.0 * h + 0.5, -h);
        let p0 = 1.0 / (1.0 + (z1 - z0 as f64).exp());
        assert!((out.latent.get(0, 0) - h).abs() < 1e-15);
        assert!((out.soft.row(0)[0] - p0).abs() < 1e-15);
        assert!((out.soft.row(0)[1] - (1.0 - p0)).abs() < 1e-15);

        // x = 0.2: h = relu(-0.6) = 0, z = [0.5, 0]
        let p0 = 1.0 / (1.0 + (-0.5f64).exp());
        assert_eq!(out.latent.get(1, 0), 0.0);
        assert!((out.soft.row(1)[0] - p0).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::zeros(spec(&[3, 2]));
        let x = Matrix::zeros(2, 4);
        assert!(matches!(forward(&p, &x), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn layer_activations_shapes() {
        let s = spec(&[4, 5, 3, 2]);
        let p = init_params(&s, 3).unwrap();
        let x = Matrix::zeros(6, 4);
        let acts = layer_activations(&p, &x).unwrap();
        let shapes: Vec<_> = acts.iter().map(|m| (m.rows(), m.cols())).collect();
        assert_eq!(shapes, vec![(6, 5), (6, 3), (6, 2)]);
    }

    fn random_batch(rng: &mut seed::Rng, m: usize, d: usize, k: usize) -> (Matrix, Vec<usize>) {
        let data = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..m).map(|_| rng.random_range(0..k)).collect();
        (Matrix::from_vec(m, d, data).unwrap(), labels)
    }

    /// Central finite differences, computed independently of backprop.
    fn numeric_grad(p: &ModelParams, x: &Matrix, y: &[usize], mu: f64, anchor: Option<&ModelParams>) -> Vec<f64> {
        let h = 1e-5;
        (0..p.len())
            .map(|i| {
                let mut plus = p.values().to_vec();
                let mut minus = p.values().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss_and_grad(&p.with_values(plus), x, y, mu, anchor).unwrap().0;
                let lm = loss_and_grad(&p.with_values(minus), x, y, mu, anchor).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = spec(&[5, 7, 4, 3]);
        for trial in 0..20u64 {
            let mut rng = seed::rng(100 + trial);
            let p = init_params(&s, trial).unwrap();
            let (x, y) = random_batch(&mut rng, 8, 5, 3);
            let anchor = init_params(&s, 999).unwrap();
            let mu = if trial % 2 == 0 { 0.0 } else { 0.3 };
            let (_, g) = loss_and_grad(&p, &x, &y, mu, Some(&anchor)).unwrap();
            let num = numeric_grad(&p, &x, &y, mu, Some(&anchor));
            for (a, n) in g.iter().zip(&num) {
                let tol = 1e-4 * a.abs().max(n.abs()) + 1e-6;
                assert!((a - n).abs() <= tol, "trial {trial}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn prox_zero_is_plain_objective() {
        let s = spec(&[3, 4, 2]);
        let p = init_params(&s, 5).unwrap();
        let anchor = init_params(&s, 6).unwrap();
        let mut rng = seed::rng(1);
        let (x, y) = random_batch(&mut rng, 5, 3, 2);
        let plain = loss_and_grad(&p, &x, &y, 0.0, None).unwrap();
        let with_anchor = loss_and_grad(&p, &x, &y, 0.0, Some(&anchor)).unwrap();
        assert_eq!(plain, with_anchor);
    }

    #[test]
    fn prox_at_anchor_contributes_nothing() {
        let s = spec(&[3, 4, 2]);
        let p = init_params(&s, 5).unwrap();
        let mut rng = seed::rng(2);
        let (x, y) = random_batch(&mut rng, 5, 3, 2);
        let plain = loss_and_grad(&p, &x, &y, 0.0, None).unwrap();
        let prox = loss_and_grad(&p, &x, &y, 0.7, Some(&p)).unwrap();
        assert_eq!(plain, prox);
    }

    #[test]
    fn prox_requires_anchor() {
        let s = spec(&[2, 2]);
        let p = init_params(&s, 1).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(loss_and_grad(&p, &x, &[0], 0.1, None).is_err());
        assert!(loss_and_grad(&p, &x, &[0], -0.1, None).is_err());
    }

    #[test]
    fn loss_and_grad_rejects_non_finite_batch() {
        let s = spec(&[2, 2]);
        let p = init_params(&s, 1).unwrap();
        let x = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(loss_and_grad(&p, &x, &[0], 0.0, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_agrees_with_loss_and_grad() {
        let s = spec(&[3, 4, 3]);
        let p = init_params(&s, 8).unwrap();
        let mut rng = seed::rng(3);
        let (x, y) = random_batch(&mut rng, 9, 3, 3);
        let a = cross_entropy(&p, &x, &y).unwrap();
        let b = loss_and_grad(&p, &x, &y, 0.0, None).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let s = spec(&[1, 2]);
        let p = ModelParams::new(s, vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        let q = sgd_step(&p, &[2.0, 0.0, 0.0, 0.0], 0.5, 0.99).unwrap();
        assert_eq!(q.values()[0], 0.0);
        let same = sgd_step(&p, &[0.0; 4], 0.5, 0.99).unwrap();
        assert_eq!(same.values(), p.values());
    }

    #[test]
    fn sgd_step_preconditions() {
        let p = ModelParams::zeros(spec(&[1, 2]));
        assert!(sgd_step(&p, &[0.0; 4], 0.0, 0.99).is_err());
        assert!(sgd_step(&p, &[0.0; 4], 0.1, 0.0).is_err());
        assert!(sgd_step(&p, &[0.0; 4], 0.1, 1.5).is_err());
        assert!(sgd_step(&p, &[f64::INFINITY, 0.0, 0.0, 0.0], 0.1, 1.0).is_err());
        assert!(sgd_step(&p, &[0.0; 3], 0.1, 1.0).is_err());
    }

    #[test]
    fn training_steps_are_deterministic() {
        let s = spec(&[4, 6, 3]);
        let mut rng = seed::rng(4);
        let (x, y) = random_batch(&mut rng, 12, 4, 3);
        let run = || {
            let mut p = init_params(&s, 9).unwrap();
            for _ in 0..25 {
                let (_, g) = loss_and_grad(&p, &x, &y, 0.0, None).unwrap();
                p = sgd_step(&p, &g, 0.1, 1.0).unwrap();
            }
            p
        };
        assert_eq!(run().values(), run().values());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let s = spec(&[3, 5, 4]);
            let p = init_params(&s, seed).unwrap();
            let scaled = p.with_values(p.values().iter().map(|v| v * scale).collect());
            let mut rng = seed::rng(seed);
            let (x, _) = random_batch(&mut rng, 6, 3, 4);
            let out = forward(&scaled, &x).unwrap();
            for i in 0..6 {
                let row = out.soft.row(i);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
            prop_assert!(out.latent.is_finite());
        }
    }
}
