//! First-order meta-training and Bayesian-model-averaged prediction.
//!
//! Each outer iteration draws `task_batch` tasks, adapts a copy of the
//! posterior parameters ψ to every task with plain SGD on the negative ELBO,
//! then interpolates ψ toward the mean adapted parameters with an outer step
//! that anneals linearly to zero.
//!
//! Randomness is keyed by `(seed, iteration, task index)`, and task results
//! are reduced in task order, so runs are identical for any thread count.

use web_time::Instant;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::{Architecture, InitScheme, Network, Phase};
use crate::objective::{elbo_on_tape, ElboBreakdown, Targets};
use crate::rng::RngStream;
use crate::tasks::{TaskEpisode, TaskSource};
use crate::tensor::{argmax, Real, Tensor};

/// Leading labels of every random stream, one per purpose.
pub mod streams {
    pub const INIT: u64 = 0x01;
    pub const TASK: u64 = 0x02;
    pub const ADAPT: u64 = 0x03;
    pub const EVAL_TASK: u64 = 0x04;
    pub const EVAL_ADAPT: u64 = 0x05;
    pub const ACTIVE: u64 = 0x07;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_step: f64,
    pub task_batch: usize,
    pub inner_steps: usize,
    pub eval_inner_steps: usize,
    pub total_iters: u64,
    pub tau: f64,
    pub predict_samples: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.003,
            outer_step: 0.25,
            task_batch: 50,
            inner_steps: 1,
            eval_inner_steps: 10,
            total_iters: 1000,
            tau: 0.67,
            predict_samples: 4,
            seed: 0,
            threads: 1,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad("inner_lr must be positive");
        }
        if !(self.outer_step > 0.0 && self.outer_step.is_finite()) {
            return bad("outer_step must be positive");
        }
        if self.task_batch == 0 {
            return bad("task_batch must be at least 1");
        }
        if self.predict_samples == 0 {
            return bad("samples must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }
}

/// Meta-parameters plus schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub network: Network<T>,
    pub iter: u64,
    pub total_iters: u64,
    pub outer_step_init: f64,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(arch: Architecture, init: &InitScheme, config: &MetaConfig) -> Self {
        let mut rng = RngStream::derived(config.seed, &[streams::INIT]);
        Self {
            network: Network::init(arch, init, &mut rng),
            iter: 0,
            total_iters: config.total_iters,
            outer_step_init: config.outer_step,
            seed: config.seed,
        }
    }

    /// `β₀ (1 − iter / total)`, clamped at zero.
    pub fn outer_step(&self) -> f64 {
        if self.iter >= self.total_iters {
            return 0.0;
        }
        (self.outer_step_init * (1.0 - self.iter as f64 / self.total_iters as f64)).max(0.0)
    }
}

/// SGD on the negative ELBO from a copy of `net`; `net` is left untouched.
/// Returns the adapted network and the ELBO of the first step.
///
/// A non-finite loss yields [`Error::Diverged`] with `iter` set to the inner
/// step index; [`meta_train`] rewrites it with the outer iteration and task.
pub fn inner_adapt<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: &Targets<T>,
    inner_lr: f64,
    steps: usize,
    tau: f64,
    rng: &mut RngStream,
) -> Result<(Network<T>, ElboBreakdown)> {
    let mut adapted = net.clone();
    let mut first = None;
    let lr = T::lit(inner_lr);
    for step in 0..steps {
        let mut tape = Tape::new();
        let params = adapted.bind(&mut tape);
        let nodes = elbo_on_tape(&mut tape, &adapted, &params, x, y, rng, T::lit(tau))?;
        let loss = tape.value(nodes.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter: step as u64,
                task: 0,
            });
        }
        first.get_or_insert_with(|| nodes.breakdown(&tape));
        tape.backward(nodes.loss)?;
        for (tensor, &var) in adapted.tensors_mut().zip(&params) {
            let g = tape.grad(var);
            for (p, &gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                *p = *p - lr * gv;
            }
        }
    }
    Ok((adapted, first.unwrap_or_default()))
}

/// `ψ ← (1 − β) ψ + β · mean_i ψ′_i`, the interpolation toward the mean
/// adapted parameters. Advances the iteration counter.
pub fn outer_update<T: Real>(state: &mut TrainState<T>, adapted: &[Network<T>]) -> Result<()> {
    if adapted.is_empty() {
        return Err(Error::Contract("outer update with no adapted tasks".into()));
    }
    let beta = T::lit(state.outer_step());
    let keep = T::one() - beta;
    let inv_m = T::one() / T::from_usize(adapted.len()).expect("count");
    let mut sums: Vec<Vec<T>> = state.network.tensors().map(|t| vec![T::zero(); t.len()]).collect();
    for net in adapted {
        if net.arch() != state.network.arch() {
            return Err(Error::Contract("adapted network has a different architecture".into()));
        }
        for (acc, t) in sums.iter_mut().zip(net.tensors()) {
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a = *a + v;
            }
        }
    }
    for (tensor, acc) in state.network.tensors_mut().zip(&sums) {
        for (p, &s) in tensor.data_mut().iter_mut().zip(acc) {
            *p = keep * *p + beta * (s * inv_m);
        }
    }
    state.iter += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iter: u64,
    pub elbo: ElboBreakdown,
    pub eval_metric: Option<f64>,
    pub wallclock_ms: f64,
}

/// Called after every outer update; may fill `record.eval_metric`.
pub trait TrainObserver<T> {
    fn on_iteration(&mut self, state: &TrainState<T>, record: &mut MetricRecord) -> Result<()>;
}

impl<T, F> TrainObserver<T> for F
where
    F: FnMut(&TrainState<T>, &mut MetricRecord) -> Result<()>,
{
    fn on_iteration(&mut self, state: &TrainState<T>, record: &mut MetricRecord) -> Result<()> {
        self(state, record)
    }
}

/// Observer that does nothing.
pub fn no_observer<T>(_: &TrainState<T>, _: &mut MetricRecord) -> Result<()> {
    Ok(())
}

fn adapt_task<T: Real>(
    state: &TrainState<T>,
    config: &MetaConfig,
    source: &dyn TaskSource<T>,
    task: usize,
) -> Result<(Network<T>, ElboBreakdown)> {
    let mut task_rng = RngStream::derived(state.seed, &[streams::TASK, state.iter, task as u64]);
    let episode = source.sample(&mut task_rng)?;
    let mut rng = RngStream::derived(state.seed, &[streams::ADAPT, state.iter, task as u64]);
    inner_adapt(
        &state.network,
        &episode.support_x,
        &episode.support_y,
        config.inner_lr,
        config.inner_steps,
        config.tau,
        &mut rng,
    )
    .map_err(|e| match e {
        Error::Diverged { .. } => Error::Diverged {
            iter: state.iter,
            task,
        },
        other => other,
    })
}

/// Run outer iterations until `state.iter == state.total_iters`.
///
/// Resuming from a saved state continues the exact sequence an
/// uninterrupted run would produce. On error the state holds the last
/// completed iteration.
pub fn meta_train<T: Real>(
    state: &mut TrainState<T>,
    config: &MetaConfig,
    source: &dyn TaskSource<T>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Vec<MetricRecord>> {
    let total = state.total_iters;
    meta_train_until(state, config, source, observer, total)
}

/// [`meta_train`] that stops early once `state.iter` reaches `stop_iter`.
/// The outer step schedule still follows `state.total_iters`, so chunked
/// calls reproduce one uninterrupted run.
pub fn meta_train_until<T: Real>(
    state: &mut TrainState<T>,
    config: &MetaConfig,
    source: &dyn TaskSource<T>,
    observer: &mut dyn TrainObserver<T>,
    stop_iter: u64,
) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    if source.task_type() != state.network.arch().task {
        return Err(Error::Config(format!(
            "{} tasks for a {} network",
            source.task_type(),
            state.network.arch().task
        )));
    }
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut records = Vec::new();
    while state.iter < state.total_iters.min(stop_iter) {
        let started = Instant::now();
        let snapshot: &TrainState<T> = state;
        let results: Vec<Result<(Network<T>, ElboBreakdown)>> = match &pool {
            Some(pool) => pool.install(|| {
                (0..config.task_batch)
                    .into_par_iter()
                    .map(|task| adapt_task(snapshot, config, source, task))
                    .collect()
            }),
            None => (0..config.task_batch)
                .map(|task| adapt_task(snapshot, config, source, task))
                .collect(),
        };
        let mut adapted = Vec::with_capacity(results.len());
        let mut elbos = Vec::with_capacity(results.len());
        for r in results {
            let (net, elbo) = r?;
            adapted.push(net);
            elbos.push(elbo);
        }
        let iter = state.iter;
        outer_update(state, &adapted)?;
        let mut record = MetricRecord {
            iter,
            elbo: ElboBreakdown::mean(&elbos),
            eval_metric: None,
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        observer.on_iteration(state, &mut record)?;
        records.push(record);
    }
    Ok(records)
}

/// Averaged prediction and the individual posterior draws behind it.
#[derive(Clone, Debug)]
pub struct BmaPrediction<T> {
    /// Mean of the per-draw head logits (raw outputs for regression).
    pub mean: Tensor<T>,
    pub samples: Vec<Tensor<T>>,
}

impl<T: Real> BmaPrediction<T> {
    /// Argmax class per row of the averaged logits.
    pub fn classes(&self) -> Vec<usize> {
        let c = self.mean.shape()[1];
        self.mean.data().chunks(c).map(argmax).collect()
    }

    /// Per-entry variance across the draws (population variance).
    pub fn sample_variance(&self) -> Tensor<T> {
        let b = T::from_usize(self.samples.len()).expect("count");
        let mut var = Tensor::zeros(self.mean.shape());
        for s in &self.samples {
            for ((v, &x), &m) in var.data_mut().iter_mut().zip(s.data()).zip(self.mean.data()) {
                *v = *v + (x - m) * (x - m) / b;
            }
        }
        var
    }
}

/// Draw `samples` networks from the weight and winner posteriors and average
/// their head logits.
pub fn predict_bma<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    samples: usize,
    tau: f64,
    rng: &mut RngStream,
) -> Result<BmaPrediction<T>> {
    if samples == 0 {
        return Err(Error::Config("prediction needs at least one sample".into()));
    }
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut tape = Tape::new();
        let params: Vec<_> = net.tensors().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let trace = net.forward(&mut tape, &params, xv, rng, Phase::Predict, T::lit(tau))?;
        draws.push(tape.value(trace.head_logits).clone());
    }
    let inv = T::one() / T::from_usize(samples).expect("count");
    let mut mean = Tensor::zeros(draws[0].shape());
    for d in &draws {
        for (m, &v) in mean.data_mut().iter_mut().zip(d.data()) {
            *m = *m + v * inv;
        }
    }
    Ok(BmaPrediction { mean, samples: draws })
}

/// Adapt on the support set (if any) with `eval_inner_steps`, then predict
/// the query inputs. `net` is untouched.
pub fn adapt_then_predict<T: Real>(
    net: &Network<T>,
    support: Option<(&Tensor<T>, &Targets<T>)>,
    query_x: &Tensor<T>,
    config: &MetaConfig,
    rng: &mut RngStream,
) -> Result<BmaPrediction<T>> {
    match support {
        Some((x, y)) if config.eval_inner_steps > 0 => {
            let (adapted, _) = inner_adapt(net, x, y, config.inner_lr, config.eval_inner_steps, config.tau, rng)?;
            predict_bma(&adapted, query_x, config.predict_samples, config.tau, rng)
        }
        _ => predict_bma(net, query_x, config.predict_samples, config.tau, rng),
    }
}

/// Accuracy for class targets, MSE for real targets.
pub fn score<T: Real>(pred: &BmaPrediction<T>, targets: &Targets<T>) -> Result<f64> {
    match targets {
        Targets::Classes(c) => {
            let predicted = pred.classes();
            if predicted.len() != c.len() {
                return Err(Error::dim("score", pred.mean.shape(), &[c.len()]));
            }
            let hits = predicted.iter().zip(c).filter(|(a, b)| a == b).count();
            Ok(hits as f64 / c.len() as f64)
        }
        Targets::Values(v) => {
            if v.len() != pred.mean.len() {
                return Err(Error::dim("score", pred.mean.shape(), v.shape()));
            }
            let se: f64 = pred
                .mean
                .data()
                .iter()
                .zip(v.data())
                .map(|(&p, &t)| (p - t).as_f64().powi(2))
                .sum();
            Ok(se / v.len() as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub per_task: Vec<f64>,
    pub mean_predict_ms: f64,
}

impl EvalSummary {
    pub fn from_scores(per_task: Vec<f64>, mean_predict_ms: f64) -> Self {
        let n = per_task.len().max(1) as f64;
        let mean = per_task.iter().sum::<f64>() / n;
        let std = (per_task.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std,
            per_task,
            mean_predict_ms,
        }
    }
}

/// Held-out evaluation task `index` for `seed`; identical across calls.
pub fn eval_episode<T: Real>(source: &dyn TaskSource<T>, seed: u64, index: usize) -> Result<TaskEpisode<T>> {
    source.sample(&mut RngStream::derived(seed, &[streams::EVAL_TASK, index as u64]))
}

/// Adapt-then-predict over `num_tasks` held-out episodes.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    source: &dyn TaskSource<T>,
    config: &MetaConfig,
    num_tasks: usize,
    eval_seed: u64,
) -> Result<EvalSummary> {
    if source.task_type() != net.arch().task {
        return Err(Error::Config(format!(
            "{} tasks for a {} network",
            source.task_type(),
            net.arch().task
        )));
    }
    let mut scores = Vec::with_capacity(num_tasks);
    let mut predict_ms = 0.0;
    for i in 0..num_tasks {
        let ep = eval_episode(source, eval_seed, i)?;
        let mut rng = RngStream::derived(eval_seed, &[streams::EVAL_ADAPT, i as u64]);
        let started = Instant::now();
        let pred = adapt_then_predict(net, Some((&ep.support_x, &ep.support_y)), &ep.query_x, config, &mut rng)?;
        predict_ms += started.elapsed().as_secs_f64() * 1e3;
        scores.push(score(&pred, &ep.query_y)?);
    }
    Ok(EvalSummary::from_scores(scores, predict_ms / num_tasks.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, TaskType, WeightMode};
    use crate::tasks::SinusoidSpec;

    fn tiny_state(seed: u64, iters: u64) -> (TrainState<f64>, MetaConfig) {
        let config = MetaConfig {
            seed,
            total_iters: iters,
            task_batch: 3,
            ..MetaConfig::default()
        };
        let arch = Architecture::stack(
            1,
            &[4, 2],
            2,
            Activation::StochasticLwta,
            WeightMode::Gaussian,
            true,
            1,
            TaskType::Regression,
        )
        .unwrap();
        let init = InitScheme {
            log_var_shift: -6.0,
            ..InitScheme::default()
        };
        (TrainState::new(arch, &init, &config), config)
    }

    #[test]
    fn beta_schedule_hits_zero() {
        let (mut s, _) = tiny_state(0, 4);
        assert_eq!(s.outer_step(), 0.25);
        s.iter = 2;
        assert_eq!(s.outer_step(), 0.125);
        s.iter = 4;
        assert_eq!(s.outer_step(), 0.0);
    }

    #[test]
    fn chunked_training_matches_one_run() {
        let source = SinusoidSpec::default_setting();
        let (mut whole, config) = tiny_state(3, 5);
        let all = meta_train(&mut whole, &config, &source, &mut no_observer).unwrap();
        let (mut chunked, _) = tiny_state(3, 5);
        let mut parts = meta_train_until(&mut chunked, &config, &source, &mut no_observer, 2).unwrap();
        assert_eq!(chunked.iter, 2);
        parts.extend(meta_train_until(&mut chunked, &config, &source, &mut no_observer, 99).unwrap());
        assert_eq!(chunked.iter, 5);
        assert!(chunked.network.tensors().zip(whole.network.tensors()).all(|(a, b)| a.bit_eq(b)));
        assert!(parts.iter().zip(&all).all(|(a, b)| a.elbo == b.elbo));
    }

    #[test]
    fn zero_lr_is_identity() {
        let (s, _) = tiny_state(1, 1);
        let ep: TaskEpisode<f64> = crate::tasks::sample_sinusoid_task(&SinusoidSpec::default_setting(), &mut RngStream::new(0, 0));
        let (a, _) = inner_adapt(&s.network, &ep.support_x, &ep.support_y, 0.0, 3, 0.67, &mut RngStream::new(0, 1)).unwrap();
        assert!(a.tensors().zip(s.network.tensors()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn interpolation_arithmetic() {
        let (mut s, _) = tiny_state(2, 1);
        s.outer_step_init = 0.25;
        for t in s.network.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut a = s.network.clone();
        let mut b = s.network.clone();
        a.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 1.0));
        b.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 3.0));
        outer_update(&mut s, &[a, b]).unwrap();
        assert!(s.network.tensors().all(|t| t.data().iter().all(|&v| v == 0.5)));
        assert_eq!(s.iter, 1);
    }

    #[test]
    fn empty_outer_update_rejected() {
        let (mut s, _) = tiny_state(2, 1);
        assert!(outer_update(&mut s, &[]).is_err());
    }

    #[test]
    fn zero_iterations_is_noop() {
        let (mut s, c) = tiny_state(3, 0);
        let before = s.clone();
        let recs = meta_train(&mut s, &c, &SinusoidSpec::default_setting(), &mut no_observer).unwrap();
        assert!(recs.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn bma_one_sample_equals_one_forward() {
        let (s, _) = tiny_state(4, 1);
        let x = crate::tasks::column::<f64>(&[-1.0, 0.5, 2.0]);
        let p = predict_bma(&s.network, &x, 1, 0.67, &mut RngStream::new(5, 5)).unwrap();
        let mut tape = Tape::new();
        let params: Vec<_> = s.network.tensors().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let trace = s.network.forward(&mut tape, &params, xv, &mut RngStream::new(5, 5), Phase::Predict, 0.67).unwrap();
        assert!(p.mean.bit_eq(tape.value(trace.head_logits)));
    }

    #[test]
    fn score_accuracy_and_mse() {
        let pred: BmaPrediction<f64> = BmaPrediction {
            mean: Tensor::from_f64(&[2, 2], &[0.1, 0.9, 0.8, 0.2]).unwrap(),
            samples: vec![],
        };
        assert_eq!(score(&pred, &Targets::Classes(vec![1, 1])).unwrap(), 0.5);
        let reg = BmaPrediction {
            mean: crate::tasks::column::<f64>(&[1.0, 2.0]),
            samples: vec![],
        };
        let t = Targets::Values(crate::tasks::column::<f64>(&[0.0, 0.0]));
        assert_eq!(score(&reg, &t).unwrap(), 2.5);
    }
}
