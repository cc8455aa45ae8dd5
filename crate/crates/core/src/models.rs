//! Local loss functions with hand-written backpropagation.
//!
//! Parameters are laid out layer by layer: the weight matrix of a layer
//! (`out x in`, row-major) followed by its bias vector. A softmax regression is
//! the degenerate network with no hidden layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2norm, ParamVector, RngStream};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Gradient-norm bound reported for MNIST with the reference CNN. Documentation
/// only: that architecture is not built here.
pub const REFERENCE_MNIST_CNN_D: f64 = 40.0;
/// Smoothness constant reported for MNIST with the reference CNN.
pub const REFERENCE_MNIST_CNN_L: f64 = 39011.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        match self.kind {
            ModelKind::SoftmaxRegression if !self.hidden_dims.is_empty() => Err(Error::invalid(
                "softmax_regression takes no hidden layers",
            )),
            ModelKind::Mlp if self.hidden_dims.is_empty() => {
                Err(Error::invalid("mlp needs at least one hidden layer"))
            }
            _ if self.hidden_dims.contains(&0) => {
                Err(Error::invalid("hidden layer widths must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let widths = self.widths();
        let mut out = Vec::with_capacity(self.param_count());
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            out.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::new(out)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let d = self.param_count();
        if params.len() != d {
            return Err(Error::DimensionMismatch {
                left: params.len(),
                right: d,
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.input_dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                left: batch.input_dim(),
                right: self.input_dim,
            });
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(input_dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("batch must contain at least one example"));
        }
        if features.len() != input_dim * labels.len() {
            return Err(Error::DimensionMismatch {
                left: features.len(),
                right: input_dim * labels.len(),
            });
        }
        Ok(Batch {
            input_dim,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let input_dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != input_dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Batch::new(input_dim, rows.concat(), labels)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the given rows, in the given order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "example index {i} out of range for {} examples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(self.input_dim, features, labels)
    }
}

/// Borrowed view of one layer's weights and biases.
struct Layer<'a> {
    fan_in: usize,
    fan_out: usize,
    weights: &'a [f64],
    bias: &'a [f64],
    offset: usize,
}

fn layers<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<Layer<'a>> {
    let mut offset = 0;
    spec.widths()
        .windows(2)
        .map(|p| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let w_end = offset + fan_in * fan_out;
            let layer = Layer {
                fan_in,
                fan_out,
                weights: &params[offset..w_end],
                bias: &params[w_end..w_end + fan_out],
                offset,
            };
            offset = w_end + fan_out;
            layer
        })
        .collect()
}

/// Activations of one example. `pre[l]` holds layer `l`'s pre-activations;
/// the last entry is the logit vector.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_trace(layers: &[Layer<'_>], x: &[f64]) -> Result<Trace> {
    let last = layers.len() - 1;
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { x } else { &post[l - 1] };
        let mut z = layer.bias.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            *zo += row.iter().zip(input).fold(0.0, |acc, (w, a)| acc + w * a);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("pre-activation of layer {l}")));
        }
        let a = if l == last {
            Vec::new()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Ok(Trace { pre, post })
}

/// Log-probability of `label` under softmax(logits).
fn log_prob(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    logits[label] - max - sum.ln()
}

fn example_loss(log_p: f64) -> f64 {
    if log_p < PROB_FLOOR.ln() {
        -PROB_FLOOR.ln()
    } else {
        -log_p
    }
}

/// Logits of every example, row-major `len x num_classes`.
pub fn logits(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let layers = layers(spec, params.as_slice());
    let mut out = Vec::with_capacity(batch.len() * spec.num_classes);
    for i in 0..batch.len() {
        let trace = forward_trace(&layers, batch.row(i))?;
        out.extend_from_slice(trace.pre.last().expect("at least one layer"));
    }
    Ok(out)
}

/// Mean cross-entropy over the batch.
///
/// Per-example losses are summed in ascending order so the result is exactly
/// invariant under permutations of the batch.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let m = spec.num_classes;
    let z = logits(spec, params, batch)?;
    let mut per_example: Vec<f64> = (0..batch.len())
        .map(|i| example_loss(log_prob(&z[i * m..(i + 1) * m], batch.label(i))))
        .collect();
    if per_example.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("softmax output"));
    }
    per_example.sort_by(f64::total_cmp);
    Ok(per_example.iter().sum::<f64>() / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let layers = layers(spec, params.as_slice());
    let mut grad = vec![0.0; params.len()];
    let n = batch.len() as f64;

    for i in 0..batch.len() {
        let x = batch.row(i);
        let trace = forward_trace(&layers, x)?;
        let z_out = trace.pre.last().expect("at least one layer");
        let label = batch.label(i);

        // d loss / d logits; zero where the probability floor is active
        let lp = log_prob(z_out, label);
        let mut delta: Vec<f64> = if lp < PROB_FLOOR.ln() {
            vec![0.0; z_out.len()]
        } else {
            let max = z_out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z_out.iter().map(|z| (z - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            exps.iter()
                .enumerate()
                .map(|(k, e)| e / s - if k == label { 1.0 } else { 0.0 })
                .collect()
        };

        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
            let w_off = layer.offset;
            let b_off = layer.offset + layer.fan_in * layer.fan_out;
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * layer.fan_in..w_off + (o + 1) * layer.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let prev_pre = &trace.pre[l - 1];
                let mut next = vec![0.0; layer.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (nx, w) in next.iter_mut().zip(row) {
                        *nx += d * w;
                    }
                }
                for (nx, z) in next.iter_mut().zip(prev_pre) {
                    if *z <= 0.0 {
                        *nx = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    for g in &mut grad {
        *g /= n;
    }
    let grad = ParamVector::new(grad);
    grad.ensure_finite(|| "gradient".to_string())?;
    Ok(grad)
}

/// Differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &ParamVector) -> Result<f64>;
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector>;
}

/// Cross-entropy of a model on a fixed batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        loss(self.spec, w, self.batch)
    }

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        gradient(self.spec, w, self.batch)
    }
}

/// Empirical gradient-norm bound `d_hat` and smoothness constant `l_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub d_hat: f64,
    pub l_hat: f64,
    pub trials: usize,
}

/// Probes `objective` around `anchors`, the parameters visited by a run.
///
/// Trial `k` evaluates the anchor `anchors[k % anchors.len()]` and a partner
/// point one `radius` away in a random direction. `d_hat` is the largest
/// gradient norm seen at any probed point, `l_hat` the largest gradient
/// difference quotient over probe pairs. Every trial consumes the same number
/// of draws, so extending `trials` under a fixed seed can only raise both.
pub fn estimate_bounds_with<O: Objective + ?Sized>(
    objective: &O,
    anchors: &[ParamVector],
    trials: usize,
    radius: f64,
    rng: &mut RngStream,
) -> Result<SmoothnessEstimate> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    if anchors.is_empty() {
        return Err(Error::invalid("at least one anchor point is required"));
    }
    let dim = objective.dim();
    let mut d_hat: f64 = 0.0;
    let mut l_hat: f64 = 0.0;
    let mut usable = 0usize;
    for k in 0..trials {
        let w = &anchors[k % anchors.len()];
        let mut w_prime = w.clone();
        w_prime.add_scaled(radius, &rng.unit_vector(dim))?;
        let g = objective.gradient(w)?;
        let g_prime = objective.gradient(&w_prime)?;
        d_hat = d_hat.max(l2norm(&g)).max(l2norm(&g_prime));
        let step = l2norm(&w_prime.sub(w)?);
        if step == 0.0 {
            continue;
        }
        usable += 1;
        l_hat = l_hat.max(l2norm(&g_prime.sub(&g)?) / step);
    }
    if usable == 0 {
        return Err(Error::Estimation("every probe pair was degenerate".into()));
    }
    Ok(SmoothnessEstimate {
        d_hat,
        l_hat,
        trials,
    })
}

pub fn estimate_bounds(
    spec: &ModelSpec,
    dataset: &Batch,
    anchors: &[ParamVector],
    trials: usize,
    radius: f64,
    rng: &mut RngStream,
) -> Result<SmoothnessEstimate> {
    let objective = ModelObjective {
        spec,
        batch: dataset,
    };
    estimate_bounds_with(&objective, anchors, trials, radius, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(rng: &mut RngStream, n: usize, dim: usize, classes: usize) -> Batch {
        let features = (0..n * dim).map(|_| rng.normal()).collect();
        let labels = (0..n).map(|_| rng.index(classes)).collect();
        Batch::new(dim, features, labels).unwrap()
    }

    #[test]
    fn param_count() {
        assert_eq!(ModelSpec::softmax_regression(784, 10).param_count(), 7850);
        assert_eq!(ModelSpec::mlp(784, vec![64], 10).param_count(), 50890);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let mut rng = RngStream::new(0, 0);
        for m in [2usize, 4] {
            let spec = ModelSpec::softmax_regression(3, m);
            let batch = toy_batch(&mut rng, 9, 3, m);
            let l = loss(&spec, &ParamVector::zeros(spec.param_count()), &batch).unwrap();
            assert!((l - (m as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sums_to_one() {
        let mut rng = RngStream::new(4, 0);
        let spec = ModelSpec::mlp(5, vec![7, 3], 4);
        let params = spec.init_params(&mut rng);
        let batch = toy_batch(&mut rng, 6, 5, 4);
        let z = logits(&spec, &params, &batch).unwrap();
        for row in z.chunks(4) {
            let s: f64 = (0..4).map(|k| log_prob(row, k).exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut rng = RngStream::new(5, 0);
        let spec = ModelSpec::mlp(4, vec![6], 3);
        let params = spec.init_params(&mut rng);
        let batch = toy_batch(&mut rng, 8, 4, 3);
        let idx: Vec<usize> = (0..8).chain(0..8).collect();
        let doubled = batch.select(&idx).unwrap();
        let g1 = gradient(&spec, &params, &batch).unwrap();
        let g2 = gradient(&spec, &params, &doubled).unwrap();
        for k in 0..g1.len() {
            assert!((g1[k] - g2[k]).abs() <= 1e-12 * (1.0 + g1[k].abs()));
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = RngStream::new(6, 0);
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let params = spec.init_params(&mut rng);
        let batch = toy_batch(&mut rng, 20, 4, 3);
        let mut perm: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut perm);
        let shuffled = batch.select(&perm).unwrap();
        assert_eq!(
            loss(&spec, &params, &batch).unwrap().to_bits(),
            loss(&spec, &params, &shuffled).unwrap().to_bits()
        );
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::softmax_regression(3, 2);
        let batch = Batch::new(3, vec![0.0; 3], vec![1]).unwrap();
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(5), &batch),
            Err(Error::DimensionMismatch { .. })
        ));
        let wide = Batch::new(4, vec![0.0; 4], vec![0]).unwrap();
        assert!(gradient(&spec, &ParamVector::zeros(8), &wide).is_err());
        assert!(Batch::new(3, vec![], vec![]).is_err());
    }

    #[test]
    fn non_finite_parameters_name_the_layer() {
        let spec = ModelSpec::mlp(2, vec![2], 2);
        let mut p = vec![0.0; spec.param_count()];
        p[0] = f64::INFINITY;
        let batch = Batch::new(2, vec![1.0, 1.0], vec![0]).unwrap();
        let err = loss(&spec, &ParamVector::new(p), &batch).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn confident_mistake_has_finite_loss() {
        let spec = ModelSpec::softmax_regression(1, 2);
        // logits (0, 1e4 * x) with x = 1, label 0
        let params = ParamVector::new(vec![0.0, 1e4, 0.0, 0.0]);
        let batch = Batch::new(1, vec![1.0], vec![0]).unwrap();
        let l = loss(&spec, &params, &batch).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
        let g = gradient(&spec, &params, &batch).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    struct Constant(usize);
    impl Objective for Constant {
        fn dim(&self) -> usize {
            self.0
        }
        fn loss(&self, _: &ParamVector) -> Result<f64> {
            Ok(1.0)
        }
        fn gradient(&self, _: &ParamVector) -> Result<ParamVector> {
            Ok(ParamVector::zeros(self.0))
        }
    }

    struct HalfSquaredNorm(usize);
    impl Objective for HalfSquaredNorm {
        fn dim(&self) -> usize {
            self.0
        }
        fn loss(&self, w: &ParamVector) -> Result<f64> {
            Ok(0.5 * w.squared_norm())
        }
        fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
            Ok(w.clone())
        }
    }

    #[test]
    fn constant_objective_has_zero_bounds() {
        let mut rng = RngStream::new(1, 1);
        let est = estimate_bounds_with(&Constant(4), &[ParamVector::zeros(4)], 10, 0.5, &mut rng)
            .unwrap();
        assert_eq!((est.d_hat, est.l_hat), (0.0, 0.0));
    }

    #[test]
    fn quadratic_objective_has_unit_smoothness() {
        let mut rng = RngStream::new(2, 1);
        let anchors = vec![
            ParamVector::new(vec![1.0, 2.0, -1.0]),
            ParamVector::new(vec![0.5, 0.0, 3.0]),
        ];
        let radius = 0.25;
        let est = estimate_bounds_with(&HalfSquaredNorm(3), &anchors, 12, radius, &mut rng).unwrap();
        assert!((est.l_hat - 1.0).abs() <= 1e-9);

        // oracle: replay the probe points and take the largest norm
        let mut replay = RngStream::new(2, 1);
        let mut max_norm: f64 = 0.0;
        for k in 0..12 {
            let w = &anchors[k % 2];
            let mut w2 = w.clone();
            w2.add_scaled(radius, &replay.unit_vector(3)).unwrap();
            max_norm = max_norm.max(l2norm(w)).max(l2norm(&w2));
        }
        assert!((est.d_hat - max_norm).abs() <= 1e-12);
    }

    #[test]
    fn estimates_grow_with_trials() {
        let mut data_rng = RngStream::new(3, 0);
        let spec = ModelSpec::mlp(3, vec![4], 2);
        let batch = toy_batch(&mut data_rng, 10, 3, 2);
        let anchors = vec![spec.init_params(&mut data_rng), spec.init_params(&mut data_rng)];
        let mut prev = (0.0, 0.0);
        for trials in [1, 2, 5, 9] {
            let mut rng = RngStream::new(8, 8);
            let est = estimate_bounds(&spec, &batch, &anchors, trials, 0.3, &mut rng).unwrap();
            assert!(est.d_hat >= prev.0 && est.l_hat >= prev.1);
            prev = (est.d_hat, est.l_hat);
        }
    }

    #[test]
    fn estimate_rejects_bad_arguments() {
        let mut rng = RngStream::new(0, 0);
        let a = [ParamVector::zeros(2)];
        assert!(estimate_bounds_with(&Constant(2), &a, 0, 1.0, &mut rng).is_err());
        assert!(estimate_bounds_with(&Constant(2), &a, 1, 0.0, &mut rng).is_err());
        assert!(estimate_bounds_with(&Constant(2), &[], 1, 1.0, &mut rng).is_err());
    }
}
