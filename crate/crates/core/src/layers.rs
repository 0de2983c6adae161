//! Competing-unit layers over Gaussian or point-estimate weights.
//!
//! A layer maps `x ∈ R^I` to `R` blocks of `J` linear units. Weight tensors
//! are stored as `[I, R, J]`, which in row-major order is also the
//! `[I, R·J]` matrix used by the batched forward pass.


use crate::autodiff::{Tape, Var, LOG_VAR_FLOOR};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{argmax, softmax_groups, softmax_in_place, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    StochasticLwta,
    DeterministicLwta,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Gaussian,
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Predict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskType {
    Classification,
    Regression,
}

text_enum!(Activation {
    StochasticLwta => "stochastic_lwta",
    DeterministicLwta => "deterministic_lwta",
    Relu => "relu",
});

text_enum!(WeightMode {
    Gaussian => "gaussian",
    Point => "point",
});

text_enum!(TaskType {
    Classification => "classification",
    Regression => "regression",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub activation: Activation,
    pub weights: WeightMode,
    pub bias: bool,
}

impl LayerSpec {
    pub fn out_dim(&self) -> usize {
        self.blocks * self.block_size
    }

    pub fn param_count(&self) -> usize {
        dense_param_count(self.in_dim, self.out_dim(), self.weights, self.bias)
    }
}

fn dense_param_count(in_dim: usize, out_dim: usize, weights: WeightMode, bias: bool) -> usize {
    let per_posterior = in_dim * out_dim + if bias { out_dim } else { 0 };
    match weights {
        WeightMode::Gaussian => 2 * per_posterior,
        WeightMode::Point => per_posterior,
    }
}

/// Shape of a full network: competing-unit layers followed by a dense head
/// (softmax for classification, linear for regression).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub output_dim: usize,
    pub task: TaskType,
    pub head_weights: WeightMode,
    pub head_bias: bool,
}

impl Architecture {
    /// Uniform stack: every hidden layer shares activation, weight mode and block size.
    #[allow(clippy::too_many_arguments)]
    pub fn stack(
        input_dim: usize,
        blocks: &[usize],
        block_size: usize,
        activation: Activation,
        weights: WeightMode,
        bias: bool,
        output_dim: usize,
        task: TaskType,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || block_size == 0 || blocks.contains(&0) {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(blocks.len());
        let mut in_dim = input_dim;
        for &r in blocks {
            let spec = LayerSpec {
                in_dim,
                blocks: r,
                block_size,
                activation,
                weights,
                bias,
            };
            in_dim = spec.out_dim();
            layers.push(spec);
        }
        Ok(Self {
            input_dim,
            layers,
            output_dim,
            task,
            head_weights: weights,
            head_bias: bias,
        })
    }

    pub fn head_in_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim())
    }

    pub fn is_stochastic(&self) -> bool {
        self.head_weights == WeightMode::Gaussian
            || self.layers.iter().any(|l| {
                l.weights == WeightMode::Gaussian || l.activation == Activation::StochasticLwta
            })
    }
}

/// Total trainable scalars: `2·I·R·J` per Gaussian layer, `I·R·J` per point
/// layer, plus the head's weights (doubled when Gaussian). Biases, when
/// enabled, count like one more input row.
pub fn count_parameters(arch: &Architecture) -> usize {
    arch.layers.iter().map(LayerSpec::param_count).sum::<usize>()
        + dense_param_count(arch.head_in_dim(), arch.output_dim, arch.head_weights, arch.head_bias)
}

/// Posterior parameters of one dense map (a hidden layer or the head).
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mu: Tensor<T>,
    pub log_var: Option<Tensor<T>>,
    pub bias_mu: Option<Tensor<T>>,
    pub bias_log_var: Option<Tensor<T>>,
}

/// Initialization knobs. `log_var ~ N(mean + shift, std)`; means are
/// Glorot-uniform, biases start at zero mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub log_var_mean: f64,
    pub log_var_std: f64,
    pub log_var_shift: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            log_var_mean: 0.0005,
            log_var_std: 0.01,
            log_var_shift: 0.0,
        }
    }
}

impl<T: Real> Posterior<T> {
    fn init(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        weights: WeightMode,
        bias: bool,
        init: &InitScheme,
        rng: &mut RngStream,
    ) -> Self {
        let n: usize = shape.iter().product();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mu = Tensor::new(shape, (0..n).map(|_| T::lit(rng.uniform_range(-limit, limit))).collect())
            .expect("shape matches");
        let mut draw_log_var = |len: usize| -> Tensor<T> {
            Tensor::from_vec(
                (0..len)
                    .map(|_| T::lit(init.log_var_mean + init.log_var_shift + init.log_var_std * rng.std_normal()))
                    .collect(),
            )
        };
        let gaussian = weights == WeightMode::Gaussian;
        let log_var = gaussian.then(|| draw_log_var(n).reshape(shape).expect("shape matches"));
        let bias_log_var = (gaussian && bias).then(|| draw_log_var(fan_out));
        let bias_mu = bias.then(|| Tensor::zeros(&[fan_out]));
        Self {
            mu,
            log_var,
            bias_mu,
            bias_log_var,
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.mu)
            .chain(self.log_var.as_ref())
            .chain(self.bias_mu.as_ref())
            .chain(self.bias_log_var.as_ref())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        std::iter::once(&mut self.mu)
            .chain(self.log_var.as_mut())
            .chain(self.bias_mu.as_mut())
            .chain(self.bias_log_var.as_mut())
    }
}

/// One hidden layer: spec plus its posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLwtaLayer<T> {
    pub spec: LayerSpec,
    pub posterior: Posterior<T>,
}

impl<T: Real> VariationalLwtaLayer<T> {
    pub fn init(spec: LayerSpec, init: &InitScheme, rng: &mut RngStream) -> Self {
        let posterior = Posterior::init(
            &[spec.in_dim, spec.blocks, spec.block_size],
            spec.in_dim,
            spec.out_dim(),
            spec.weights,
            spec.bias,
            init,
            rng,
        );
        Self { spec, posterior }
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.posterior.mu
    }

    pub fn log_var(&self) -> Option<&Tensor<T>> {
        self.posterior.log_var.as_ref()
    }

    /// Point-mode weights, or the posterior means of a Gaussian layer.
    pub fn point_weights(&self) -> &Tensor<T> {
        &self.posterior.mu
    }
}

/// `ŵ = μ + exp(0.5 · max(log_var, floor)) ⊙ ε`, `ε ~ N(0, 1)`.
pub fn sample_weights<T: Real>(layer: &VariationalLwtaLayer<T>, rng: &mut RngStream) -> Result<Tensor<T>> {
    let log_var = layer.log_var().ok_or_else(|| {
        Error::Contract("sample_weights on a point-estimate layer; use point_weights".into())
    })?;
    let eps = rng.sample_std_normal::<T>(layer.mu().len());
    Ok(reparam(layer.mu(), log_var, &eps))
}

pub(crate) fn reparam<T: Real>(mu: &Tensor<T>, log_var: &Tensor<T>, eps: &Tensor<T>) -> Tensor<T> {
    let floor = T::lit(LOG_VAR_FLOOR);
    let half = T::lit(0.5);
    let data = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (half * lv.max(floor)).exp() * e)
        .collect();
    Tensor::new(mu.shape(), data).expect("shapes agree")
}

/// `out[r, j] = Σ_i w[i, r, j] · x[i]`.
pub fn block_logits<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 3 || x.len() != w.shape()[0] {
        return Err(Error::dim("block_logits", x.shape(), w.shape()));
    }
    let (blocks, size) = (w.shape()[1], w.shape()[2]);
    let flat = w.clone().reshape(&[w.shape()[0], blocks * size])?;
    crate::tensor::matvec(&flat, &Tensor::from_vec(x.data().to_vec()))?.reshape(&[blocks, size])
}

/// A per-block winner draw.
#[derive(Clone, Debug, PartialEq)]
pub struct WinnerSample<T> {
    /// Concrete-relaxed indicators, `[R, J]`, rows on the simplex.
    pub xi_relaxed: Tensor<T>,
    /// One-hot hard indicators, `[R, J]`.
    pub xi_hard: Tensor<T>,
    /// Pre-softmax block logits, `[R, J]`.
    pub logits: Tensor<T>,
}

impl<T: Real> WinnerSample<T> {
    pub fn block_size(&self) -> usize {
        *self.logits.shape().last().expect("rank ≥ 1")
    }

    /// Winning unit index per block.
    pub fn winners(&self) -> Vec<usize> {
        self.xi_hard.data().chunks(self.block_size()).map(argmax).collect()
    }

    /// Posterior winner probabilities `softmax(logits)` per block.
    pub fn posterior(&self) -> Tensor<T> {
        softmax_groups(&self.logits, self.block_size()).expect("valid logits")
    }
}

fn one_hot_rows<T: Real>(scores: &[T], group: usize) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    for (s, o) in scores.chunks(group).zip(out.chunks_mut(group)) {
        o[argmax(s)] = T::one();
    }
    out
}

/// Concrete relaxation of the per-block winner: `softmax((logits + g) / τ)`
/// with `g = −ln(−ln U)`. The hard winner is the argmax of the same
/// perturbed logits, which is an exact draw from `softmax(logits)`.
pub fn sample_winner_relaxed<T: Real>(logits: &Tensor<T>, tau: T, rng: &mut RngStream) -> Result<WinnerSample<T>> {
    let gumbel = rng.sample_gumbel::<T>(logits.len());
    relax_with_noise(logits, &gumbel, tau)
}

pub fn relax_with_noise<T: Real>(logits: &Tensor<T>, gumbel: &Tensor<T>, tau: T) -> Result<WinnerSample<T>> {
    if tau.is_nan() || tau <= T::zero() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if logits.rank() != 2 || gumbel.len() != logits.len() {
        return Err(Error::dim("sample_winner_relaxed", logits.shape(), gumbel.shape()));
    }
    let group = logits.shape()[1];
    let perturbed: Vec<T> = logits.data().iter().zip(gumbel.data()).map(|(&l, &g)| l + g).collect();
    let mut relaxed: Vec<T> = perturbed.iter().map(|&p| p / tau).collect();
    relaxed.chunks_mut(group).for_each(softmax_in_place);
    Ok(WinnerSample {
        xi_relaxed: Tensor::new(logits.shape(), relaxed)?,
        xi_hard: Tensor::new(logits.shape(), one_hot_rows(&perturbed, group))?,
        logits: logits.clone(),
    })
}

/// Single-input forward through one layer.
///
/// Noise is consumed in a fixed order: weight epsilons, bias epsilons, then
/// one Gumbel draw per unit. The batched tape forward uses the same order.
pub fn lwta_forward<T: Real>(
    x: &Tensor<T>,
    layer: &VariationalLwtaLayer<T>,
    rng: &mut RngStream,
    phase: Phase,
    tau: T,
) -> Result<(Tensor<T>, Option<WinnerSample<T>>)> {
    let spec = &layer.spec;
    let p = &layer.posterior;
    let w = match spec.weights {
        WeightMode::Gaussian => sample_weights(layer, rng)?,
        WeightMode::Point => p.mu.clone(),
    };
    let mut logits = block_logits(x, &w)?;
    if let Some(bias_mu) = &p.bias_mu {
        let b = match (&p.bias_log_var, spec.weights) {
            (Some(lv), WeightMode::Gaussian) => {
                let eps = rng.sample_std_normal::<T>(bias_mu.len());
                reparam(bias_mu, lv, &eps)
            }
            _ => bias_mu.clone(),
        };
        logits = logits.add(&b.reshape(logits.shape())?)?;
    }
    let group = spec.block_size;
    match spec.activation {
        Activation::Relu => Ok((logits.map(|v| v.max(T::zero())).reshape(&[spec.out_dim()])?, None)),
        Activation::DeterministicLwta => {
            let hard = Tensor::new(logits.shape(), one_hot_rows(logits.data(), group))?;
            let y = hard.mul(&logits)?.reshape(&[spec.out_dim()])?;
            Ok((
                y,
                Some(WinnerSample {
                    xi_relaxed: hard.clone(),
                    xi_hard: hard,
                    logits,
                }),
            ))
        }
        Activation::StochasticLwta => {
            let sample = sample_winner_relaxed(&logits, tau, rng)?;
            let mask = match phase {
                Phase::Train => &sample.xi_relaxed,
                Phase::Predict => &sample.xi_hard,
            };
            let y = mask.mul(&logits)?.reshape(&[spec.out_dim()])?;
            Ok((y, Some(sample)))
        }
    }
}

/// Variational network: hidden competing-unit layers plus a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    pub layers: Vec<VariationalLwtaLayer<T>>,
    pub head: Posterior<T>,
}

/// Tape handles produced by one batched forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    /// `[N, C]` class probabilities or `[N, 1]` regression outputs.
    pub output: Var,
    /// Pre-softmax head outputs, `[N, C]`.
    pub head_logits: Var,
    /// `(ŵ, μ, log_var)` for every Gaussian tensor sampled.
    pub weight_samples: Vec<(Var, Var, Var)>,
    /// `(relaxed ξ̂, block logits, J)` for every stochastic layer in train phase.
    pub relaxed_winners: Vec<(Var, Var, usize)>,
    /// Hard winner indices per layer with winner structure, `[N·R]` each.
    pub hard_winners: Vec<Vec<usize>>,
    /// Number of input rows.
    pub rows: usize,
}

impl<T: Real> Network<T> {
    pub fn init(arch: Architecture, init: &InitScheme, rng: &mut RngStream) -> Self {
        let layers = arch
            .layers
            .iter()
            .map(|&spec| VariationalLwtaLayer::init(spec, init, rng))
            .collect();
        let head = Posterior::init(
            &[arch.head_in_dim(), arch.output_dim],
            arch.head_in_dim(),
            arch.output_dim,
            arch.head_weights,
            arch.head_bias,
            init,
            rng,
        );
        Self { arch, layers, head }
    }

    /// Build from an architecture and tensors in canonical order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut dummy = RngStream::new(0, 0);
        let mut net = Self::init(arch, &InitScheme::default(), &mut dummy);
        let expected: Vec<Vec<usize>> = net.tensors().map(|t| t.shape().to_vec()).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (slot, (t, shape)) in net.tensors_mut().zip(tensors.into_iter().zip(&expected)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {:?} does not match architecture shape {:?}",
                    t.shape(),
                    shape
                )));
            }
            *slot = t;
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Every trainable tensor in canonical order: per layer μ, log σ², bias
    /// μ, bias log σ² (those present), then the head in the same order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.posterior.tensors())
            .chain(self.head.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.posterior.tensors_mut())
            .chain(self.head.tensors_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Place every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors().map(|t| tape.param(t.clone())).collect()
    }

    /// Batched forward of `x: [N, input_dim]` using leaves from [`Network::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        rng: &mut RngStream,
        phase: Phase,
        tau: T,
    ) -> Result<ForwardTrace> {
        let xv = tape.value(x);
        if xv.rank() != 2 || xv.shape()[1] != self.arch.input_dim {
            return Err(Error::dim("network input", xv.shape(), &[self.arch.input_dim]));
        }
        let rows = xv.shape()[0];
        let mut cursor = params.iter().copied();
        let mut trace = ForwardTrace {
            output: x,
            head_logits: x,
            weight_samples: Vec::new(),
            relaxed_winners: Vec::new(),
            hard_winners: Vec::new(),
            rows,
        };
        let mut h = x;
        for layer in &self.layers {
            let spec = layer.spec;
            let logits = dense_forward(
                tape,
                &mut cursor,
                &layer.posterior,
                spec.weights,
                h,
                spec.in_dim,
                spec.out_dim(),
                rng,
                &mut trace,
            )?;
            let group = spec.block_size;
            h = match spec.activation {
                Activation::Relu => tape.relu(logits)?,
                Activation::DeterministicLwta => {
                    let mask = one_hot_rows(tape.value(logits).data(), group);
                    trace.hard_winners.push(winner_indices(&mask, group));
                    let mask = tape.constant(Tensor::new(&[rows, spec.out_dim()], mask)?);
                    tape.mul(mask, logits)?
                }
                Activation::StochasticLwta => {
                    let gumbel = rng.sample_gumbel::<T>(rows * spec.out_dim());
                    let perturbed: Vec<T> = tape
                        .value(logits)
                        .data()
                        .iter()
                        .zip(gumbel.data())
                        .map(|(&l, &g)| l + g)
                        .collect();
                    let hard = one_hot_rows(&perturbed, group);
                    trace.hard_winners.push(winner_indices(&hard, group));
                    match phase {
                        Phase::Train => {
                            let relaxed = tape.gumbel_softmax(logits, &gumbel, group, tau)?;
                            trace.relaxed_winners.push((relaxed, logits, group));
                            tape.mul(relaxed, logits)?
                        }
                        Phase::Predict => {
                            let mask = tape.constant(Tensor::new(&[rows, spec.out_dim()], hard)?);
                            tape.mul(mask, logits)?
                        }
                    }
                }
            };
        }
        let head_logits = dense_forward(
            tape,
            &mut cursor,
            &self.head,
            self.arch.head_weights,
            h,
            self.arch.head_in_dim(),
            self.arch.output_dim,
            rng,
            &mut trace,
        )?;
        trace.head_logits = head_logits;
        trace.output = match self.arch.task {
            TaskType::Classification => tape.softmax_groups(head_logits, self.arch.output_dim)?,
            TaskType::Regression => head_logits,
        };
        Ok(trace)
    }

    /// Forward pass without gradients; returns the `[N, C]` output.
    pub fn predict_once(&self, x: &Tensor<T>, rng: &mut RngStream, phase: Phase, tau: T) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let trace = self.forward(&mut tape, &params, xv, rng, phase, tau)?;
        Ok(tape.value(trace.output).clone())
    }
}

fn winner_indices<T: Real>(mask: &[T], group: usize) -> Vec<usize> {
    mask.chunks(group).map(argmax).collect()
}

#[allow(clippy::too_many_arguments)]
fn dense_forward<T: Real>(
    tape: &mut Tape<T>,
    cursor: &mut impl Iterator<Item = Var>,
    posterior: &Posterior<T>,
    weights: WeightMode,
    h: Var,
    in_dim: usize,
    out_dim: usize,
    rng: &mut RngStream,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let mut next = || cursor.next().ok_or_else(|| Error::Graph("parameter list too short".into()));
    let mu = next()?;
    let log_var = if posterior.log_var.is_some() { Some(next()?) } else { None };
    let bias_mu = if posterior.bias_mu.is_some() { Some(next()?) } else { None };
    let bias_log_var = if posterior.bias_log_var.is_some() { Some(next()?) } else { None };

    let w = match (weights, log_var) {
        (WeightMode::Gaussian, Some(lv)) => {
            let eps = rng.sample_std_normal::<T>(posterior.mu.len());
            let w = tape.gaussian_reparam(mu, lv, &eps)?;
            trace.weight_samples.push((w, mu, lv));
            w
        }
        _ => mu,
    };
    let w = tape.reshape(w, &[in_dim, out_dim])?;
    let mut out = tape.matmul(h, w)?;
    if let Some(bmu) = bias_mu {
        let b = match (weights, bias_log_var) {
            (WeightMode::Gaussian, Some(blv)) => {
                let eps = rng.sample_std_normal::<T>(out_dim);
                let b = tape.gaussian_reparam(bmu, blv, &eps)?;
                trace.weight_samples.push((b, bmu, blv));
                b
            }
            _ => bmu,
        };
        out = tape.add_bias(out, b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn layer(act: Activation, weights: WeightMode, i: usize, r: usize, j: usize) -> VariationalLwtaLayer<f64> {
        let spec = LayerSpec {
            in_dim: i,
            blocks: r,
            block_size: j,
            activation: act,
            weights,
            bias: false,
        };
        VariationalLwtaLayer::init(spec, &InitScheme::default(), &mut RngStream::new(9, 9))
    }

    #[test]
    fn zero_noise_sample_is_mean() {
        let mu = t(&[3], &[0.5, -1.0, 2.0]);
        let lv = t(&[3], &[0.3, -2.0, 1.0]);
        let w = reparam(&mu, &lv, &Tensor::zeros(&[3]));
        assert_eq!(w, mu);
    }

    #[test]
    fn reparam_hand_value() {
        // σ = 0.5 → log σ² = 2 ln 0.5
        let lv = (0.25f64).ln();
        let w = reparam(&t(&[1], &[1.0]), &t(&[1], &[lv]), &t(&[1], &[2.0]));
        assert!((w.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn floored_variance_stays_finite() {
        let w = reparam(&t(&[1], &[1.0]), &t(&[1], &[f64::NEG_INFINITY]), &t(&[1], &[3.0]));
        assert!(w.item().is_finite());
        // σ floor is e^-10
        assert!((w.item() - 1.0).abs() < 3.0 * (-10f64).exp() + 1e-12);
    }

    #[test]
    fn sample_weights_needs_gaussian() {
        let l = layer(Activation::StochasticLwta, WeightMode::Point, 2, 1, 2);
        assert!(matches!(
            sample_weights(&l, &mut RngStream::new(0, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn block_logits_examples() {
        // w[:, 0, 0] = [0.5, 0.5], w[:, 0, 1] = [1, 0]
        let w = t(&[2, 1, 2], &[0.5, 1.0, 0.5, 0.0]);
        let x = t(&[2], &[1.0, -1.0]);
        let l = block_logits(&x, &w).unwrap();
        assert_eq!(l.data(), &[0.0, 1.0]);
        let l2 = block_logits(&t(&[2], &[2.0, -2.0]), &w).unwrap();
        assert_eq!(l2.data(), &[0.0, 2.0]);
        let z = block_logits(&x, &Tensor::zeros(&[2, 3, 2])).unwrap();
        let s = WinnerSample {
            xi_relaxed: z.clone(),
            xi_hard: z.clone(),
            logits: z,
        };
        assert!(s.posterior().data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(block_logits(&t(&[3], &[1.0, 1.0, 1.0]), &w).is_err());
    }

    #[test]
    fn relaxed_hand_value() {
        let g = -(-(0.5f64).ln()).ln();
        let s = relax_with_noise(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[g, g]), 0.67).unwrap();
        assert!((s.xi_relaxed.data()[0] - 0.1835).abs() < 1e-3);
        assert!((s.xi_relaxed.data()[1] - 0.8165).abs() < 1e-3);
        assert_eq!(s.winners(), vec![1]);
    }

    #[test]
    fn relaxed_symmetry_and_cold_limit() {
        let s = relax_with_noise(&t(&[1, 4], &[0.3; 4]), &t(&[1, 4], &[0.1; 4]), 0.67).unwrap();
        assert!(s.xi_relaxed.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let mut rng = RngStream::new(5, 0);
        let cold = sample_winner_relaxed(&t(&[3, 2], &[0.1, 0.4, -1.0, 2.0, 0.0, 0.05]), 0.01, &mut rng).unwrap();
        for row in cold.xi_relaxed.data().chunks(2) {
            assert!(row.iter().copied().fold(0.0, f64::max) >= 0.999);
        }
    }

    #[test]
    fn nonpositive_tau_is_config_error() {
        let err = sample_winner_relaxed(&t(&[1, 2], &[0.0, 0.0]), 0.0, &mut RngStream::new(0, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_relu_forward() {
        let mut l = layer(Activation::DeterministicLwta, WeightMode::Point, 2, 1, 2);
        l.posterior.mu = t(&[2, 1, 2], &[0.5, 1.0, 0.5, 0.0]);
        let x = t(&[2], &[1.0, -1.0]);
        let (y, w) = lwta_forward(&x, &l, &mut RngStream::new(0, 0), Phase::Predict, 0.67).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        assert_eq!(w.unwrap().winners(), vec![1]);

        l.spec.activation = Activation::Relu;
        l.posterior.mu = t(&[2, 1, 2], &[-1.0, 2.0, 0.0, 0.0]);
        let (y, w) = lwta_forward(&t(&[2], &[1.0, 0.0]), &l, &mut RngStream::new(0, 0), Phase::Predict, 0.67).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert!(w.is_none());
    }

    #[test]
    fn saturated_stochastic_predict() {
        let logits = t(&[1, 2], &[0.0, 1000.0]);
        let mut rng = RngStream::new(1, 2);
        let hits = (0..10_000)
            .filter(|_| sample_winner_relaxed(&logits, 0.67, &mut rng).unwrap().winners()[0] == 1)
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn parameter_counts() {
        let spec = LayerSpec {
            in_dim: 4,
            blocks: 2,
            block_size: 2,
            activation: Activation::StochasticLwta,
            weights: WeightMode::Gaussian,
            bias: false,
        };
        assert_eq!(spec.param_count(), 32);
        assert_eq!(
            LayerSpec {
                weights: WeightMode::Point,
                ..spec
            }
            .param_count(),
            16
        );
    }

    #[test]
    fn tape_forward_matches_single_input_forward() {
        for act in [Activation::StochasticLwta, Activation::DeterministicLwta, Activation::Relu] {
            for phase in [Phase::Train, Phase::Predict] {
                let arch = Architecture::stack(3, &[2], 2, act, WeightMode::Gaussian, true, 1, TaskType::Regression).unwrap();
                let net: Network<f64> = Network::init(arch, &InitScheme::default(), &mut RngStream::new(2, 2));
                let x = t(&[1, 3], &[0.4, -0.2, 1.3]);
                let mut tape = Tape::new();
                let params = net.bind(&mut tape);
                let xv = tape.constant(x.clone());
                let mut rng = RngStream::new(17, 4);
                let trace = net.forward(&mut tape, &params, xv, &mut rng, phase, 0.67).unwrap();
                // first hidden activation from the tape = input to head matmul
                let mut rng2 = RngStream::new(17, 4);
                let (y, _) = lwta_forward(&t(&[3], x.data()), &net.layers[0], &mut rng2, phase, 0.67).unwrap();
                // recompute the head with the same stream position
                let eps = rng2.sample_std_normal::<f64>(net.head.mu.len());
                let w = reparam(&net.head.mu, net.head.log_var.as_ref().unwrap(), &eps);
                let beps = rng2.sample_std_normal::<f64>(1);
                let b = reparam(net.head.bias_mu.as_ref().unwrap(), net.head.bias_log_var.as_ref().unwrap(), &beps);
                let out = crate::tensor::matvec(&w, &y).unwrap().item() + b.item();
                let tape_out = tape.value(trace.output).item();
                assert!((out - tape_out).abs() < 1e-12, "{act:?} {phase:?}: {out} vs {tape_out}");
            }
        }
    }
}
