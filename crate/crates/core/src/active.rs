//! Active learning on sinusoid tasks by predictive variance.
//!
//! A meta-trained network is adapted to a handful of labeled points, then
//! repeatedly asks for the label of one candidate input. `MaxVariance` picks
//! the candidate where the sampled regressors disagree most; `Random` is the
//! uninformed baseline.

use crate::error::{Error, Result};
use crate::layers::{Network, TaskType};
use crate::meta::{inner_adapt, predict_bma, score, streams, MetaConfig};
use crate::objective::Targets;
use crate::rng::RngStream;
use crate::tasks::{column, SinusoidSpec};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryStrategy {
    MaxVariance,
    Random,
}

text_enum!(QueryStrategy {
    MaxVariance => "max_variance",
    Random => "random",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveLearningSpec {
    pub initial_points: usize,
    pub query_budget: usize,
    /// Candidates are the midpoints of `pool_size` equal cells of the input
    /// range, so they never coincide with the evaluation grid.
    pub pool_size: usize,
}

impl Default for ActiveLearningSpec {
    fn default() -> Self {
        Self {
            initial_points: 5,
            query_budget: 5,
            pool_size: 100,
        }
    }
}

impl ActiveLearningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.initial_points == 0 {
            return Err(Error::Config("active learning needs at least one initial point".into()));
        }
        if self.query_budget > self.pool_size {
            return Err(Error::Config(format!(
                "query budget {} exceeds candidate pool of {}",
                self.query_budget, self.pool_size
            )));
        }
        Ok(())
    }

    pub fn candidates(&self, x_range: (f64, f64)) -> Vec<f64> {
        let (lo, hi) = x_range;
        let width = (hi - lo) / self.pool_size as f64;
        (0..self.pool_size).map(|k| lo + width * (k as f64 + 0.5)).collect()
    }
}

/// Index of the next candidate to label. Already queried candidates are
/// skipped; ties in variance go to the lowest index.
pub fn select_query(
    variances: &[f64],
    queried: &[bool],
    strategy: QueryStrategy,
    rng: &mut RngStream,
) -> Result<usize> {
    if variances.len() != queried.len() {
        return Err(Error::dim("select_query", &[variances.len()], &[queried.len()]));
    }
    let open: Vec<usize> = (0..variances.len()).filter(|&i| !queried[i]).collect();
    if open.is_empty() {
        return Err(Error::Contract("no unqueried candidates left".into()));
    }
    Ok(match strategy {
        QueryStrategy::Random => open[rng.below(open.len())],
        QueryStrategy::MaxVariance => {
            let mut best = open[0];
            for &i in &open[1..] {
                if variances[i] > variances[best] {
                    best = i;
                }
            }
            best
        }
    })
}

/// Held-out MSE after adapting to the initial points and after each query.
///
/// The task, its initial points and its evaluation grid depend only on
/// `(seed, task)`, so both strategies face identical problems.
pub fn active_learning_run<T: Real>(
    net: &Network<T>,
    spec: &SinusoidSpec,
    al: &ActiveLearningSpec,
    strategy: QueryStrategy,
    config: &MetaConfig,
    seed: u64,
    task: usize,
) -> Result<Vec<f64>> {
    al.validate()?;
    if net.arch().task != TaskType::Regression || net.arch().input_dim != 1 || net.arch().output_dim != 1 {
        return Err(Error::Config("active learning needs a scalar regression network".into()));
    }
    let mut task_rng = RngStream::derived(seed, &[streams::ACTIVE, 0, task as u64]);
    let params = spec.sample_params(&mut task_rng);
    let mut xs: Vec<f64> = (0..al.initial_points)
        .map(|_| task_rng.uniform_range(spec.x_range.0, spec.x_range.1))
        .collect();
    let mut ys: Vec<f64> = xs.iter().map(|&x| spec.observe(&params, x, &mut task_rng)).collect();
    let eval_x = spec.grid(spec.query_points);
    let eval_y: Vec<f64> = eval_x.iter().map(|&x| spec.observe(&params, x, &mut task_rng)).collect();
    let eval_targets = Targets::Values(column::<T>(&eval_y));
    let eval_x = column::<T>(&eval_x);

    let pool = al.candidates(spec.x_range);
    let pool_y: Vec<f64> = pool.iter().map(|&x| spec.observe(&params, x, &mut task_rng)).collect();
    let pool_x = column::<T>(&pool);
    let mut queried = vec![false; pool.len()];

    let mut pick_rng = RngStream::derived(seed, &[streams::ACTIVE, 1, task as u64]);
    let mut trace = Vec::with_capacity(al.query_budget + 1);
    for step in 0..=al.query_budget {
        let mut rng = RngStream::derived(seed, &[streams::ACTIVE, 2, task as u64, step as u64]);
        let support_y = Targets::Values(column::<T>(&ys));
        let (adapted, _) = inner_adapt(
            net,
            &column::<T>(&xs),
            &support_y,
            config.inner_lr,
            config.eval_inner_steps,
            config.tau,
            &mut rng,
        )?;
        let pred = predict_bma(&adapted, &eval_x, config.predict_samples, config.tau, &mut rng)?;
        trace.push(score(&pred, &eval_targets)?);
        if step == al.query_budget {
            break;
        }
        let variances: Vec<f64> = match strategy {
            QueryStrategy::MaxVariance => {
                let draws = predict_bma(&adapted, &pool_x, config.predict_samples, config.tau, &mut rng)?;
                draws.sample_variance().data().iter().map(|v| v.as_f64()).collect()
            }
            QueryStrategy::Random => vec![0.0; pool.len()],
        };
        let pick = select_query(&variances, &queried, strategy, &mut pick_rng)?;
        queried[pick] = true;
        xs.push(pool[pick]);
        ys.push(pool_y[pick]);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, Architecture, InitScheme, WeightMode};
    use crate::meta::TrainState;

    #[test]
    fn max_variance_takes_argmax() {
        let mut rng = RngStream::new(0, 0);
        let pick = select_query(&[0.0, 0.0, 0.5, 0.0], &[false; 4], QueryStrategy::MaxVariance, &mut rng).unwrap();
        assert_eq!(pick, 2);
    }

    #[test]
    fn queried_candidates_are_skipped() {
        let mut rng = RngStream::new(0, 0);
        let queried = [false, false, true, false];
        let pick = select_query(&[0.1, 0.3, 0.5, 0.2], &queried, QueryStrategy::MaxVariance, &mut rng).unwrap();
        assert_eq!(pick, 1);
        let all = [true; 4];
        assert!(select_query(&[0.0; 4], &all, QueryStrategy::Random, &mut rng).is_err());
    }

    #[test]
    fn random_is_reproducible() {
        let picks = |seed| {
            let mut rng = RngStream::new(seed, 9);
            let mut queried = vec![false; 20];
            (0..10)
                .map(|_| {
                    let p = select_query(&[0.0; 20], &queried, QueryStrategy::Random, &mut rng).unwrap();
                    queried[p] = true;
                    p
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(picks(3), picks(3));
        let mut distinct = picks(3);
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn strategy_names() {
        assert_eq!("max_variance".parse::<QueryStrategy>().unwrap(), QueryStrategy::MaxVariance);
        assert_eq!(QueryStrategy::Random.to_string(), "random");
        assert!(matches!("entropy".parse::<QueryStrategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn candidates_avoid_evaluation_grid() {
        let spec = SinusoidSpec::default_setting();
        let pool = ActiveLearningSpec::default().candidates(spec.x_range);
        assert_eq!(pool.len(), 100);
        assert!((pool[0] + 4.95).abs() < 1e-12 && (pool[99] - 4.95).abs() < 1e-12);
        let grid = spec.grid(spec.query_points);
        assert!(pool.iter().all(|p| grid.iter().all(|g| (p - g).abs() > 1e-6)));
    }

    #[test]
    fn trace_has_one_entry_per_labeled_set() {
        let arch = Architecture::stack(
            1,
            &[4],
            2,
            Activation::StochasticLwta,
            WeightMode::Gaussian,
            true,
            1,
            TaskType::Regression,
        )
        .unwrap();
        let config = MetaConfig {
            eval_inner_steps: 2,
            ..MetaConfig::default()
        };
        let state: TrainState<f64> = TrainState::new(arch, &InitScheme::default(), &config);
        let spec = SinusoidSpec::challenging();
        let al = ActiveLearningSpec::default();
        for strategy in [QueryStrategy::MaxVariance, QueryStrategy::Random] {
            let a = active_learning_run(&state.network, &spec, &al, strategy, &config, 5, 1).unwrap();
            let b = active_learning_run(&state.network, &spec, &al, strategy, &config, 5, 1).unwrap();
            assert_eq!(a.len(), 6);
            assert_eq!(a, b);
        }
    }
}
