//! Plain-Rust core of the browser bindings; everything here is testable natively.

use lwta_meta::active::{active_learning_run, ActiveLearningSpec, QueryStrategy};
use lwta_meta::config::RunConfig;
use lwta_meta::layers::sample_winner_relaxed;
use lwta_meta::meta::{inner_adapt, meta_train_until, predict_bma, EvalSummary, MetricRecord, TrainState};
use lwta_meta::objective::Targets;
use lwta_meta::tasks::{column, SinusoidParams, SinusoidSpec};
use lwta_meta::tensor::softmax;
use lwta_meta::{Error, Result, RngStream, Tensor};
use serde::Serialize;

const GRID_POINTS: usize = 100;

#[derive(Debug, Serialize)]
pub struct WinnerReport {
    pub softmax: Vec<f64>,
    /// Fraction of draws each unit won.
    pub hard: Vec<f64>,
    /// Average relaxed indicator per unit.
    pub relaxed_mean: Vec<f64>,
}

/// Empirical winner statistics of one block with the given logits.
pub fn winner_frequencies(logits: &[f64], tau: f64, draws: usize, seed: u64) -> Result<WinnerReport> {
    if logits.is_empty() || draws == 0 {
        return Err(Error::Config("need at least one logit and one draw".into()));
    }
    let j = logits.len();
    let l = Tensor::new(&[1, j], logits.to_vec())?;
    let mut rng = RngStream::new(seed, 0);
    let mut hard = vec![0.0; j];
    let mut relaxed_mean = vec![0.0; j];
    for _ in 0..draws {
        let s = sample_winner_relaxed(&l, tau, &mut rng)?;
        hard[s.winners()[0]] += 1.0 / draws as f64;
        for (m, v) in relaxed_mean.iter_mut().zip(s.xi_relaxed.data()) {
            *m += v / draws as f64;
        }
    }
    Ok(WinnerReport {
        softmax: softmax(&Tensor::from_vec(logits.to_vec()))?.into_data(),
        hard,
        relaxed_mean,
    })
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub iter: u64,
    pub total_iters: u64,
    /// Mean negative ELBO parts of the last iteration run.
    pub loss: f64,
    pub likelihood: f64,
    pub kl_xi: f64,
    pub kl_w: f64,
    pub ms_per_iter: f64,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub x: Vec<f64>,
    pub truth: Vec<f64>,
    pub support_x: Vec<f64>,
    pub support_y: Vec<f64>,
    /// Averaged prediction before adaptation.
    pub prior_mean: Vec<f64>,
    /// Averaged prediction after adapting to the support points.
    pub mean: Vec<f64>,
    /// Spread of the posterior draws after adaptation.
    pub std: Vec<f64>,
    pub mse: f64,
}

#[derive(Debug, Serialize)]
pub struct StrategyReport {
    /// Mean held-out MSE after the initial points and after each query.
    pub max_variance: Vec<f64>,
    pub random: Vec<f64>,
}

/// A sinusoid regression network meta-trained a chunk at a time.
pub struct SineLab {
    config: RunConfig,
    spec: SinusoidSpec,
    state: TrainState<f32>,
}

impl SineLab {
    /// `settings` holds `key = value` lines over the sinusoid defaults.
    pub fn new(settings: &str) -> Result<Self> {
        let config = RunConfig::parse(settings)?;
        let spec = config
            .sinusoid_spec()
            .ok_or_else(|| Error::Config(format!("the demo needs a sinusoid task, got {}", config.task)))?;
        let arch = config.architecture(1, 1)?;
        let state = TrainState::new(arch, &config.init_scheme(), &config.meta_config());
        Ok(Self { config, spec, state })
    }

    pub fn iter(&self) -> u64 {
        self.state.iter
    }

    /// Run up to `iters` more outer iterations.
    pub fn train(&mut self, iters: u64) -> Result<TrainReport> {
        let stop = self.state.iter + iters;
        let records = meta_train_until(
            &mut self.state,
            &self.config.meta_config(),
            &self.spec,
            &mut lwta_meta::meta::no_observer,
            stop,
        )?;
        let last = records.last().cloned().unwrap_or(MetricRecord {
            iter: self.state.iter,
            elbo: Default::default(),
            eval_metric: None,
            wallclock_ms: 0.0,
        });
        let ms: f64 = records.iter().map(|r| r.wallclock_ms).sum();
        Ok(TrainReport {
            iter: self.state.iter,
            total_iters: self.state.total_iters,
            loss: -last.elbo.total,
            likelihood: last.elbo.likelihood_term,
            kl_xi: last.elbo.kl_xi,
            kl_w: last.elbo.kl_w,
            ms_per_iter: if records.is_empty() { 0.0 } else { ms / records.len() as f64 },
        })
    }

    /// Adapt to `shots` noisy observations of `A sin(x + phase)` and predict
    /// over the whole input range.
    pub fn fit(&self, amplitude: f64, phase: f64, shots: usize, seed: u64) -> Result<FitReport> {
        if shots == 0 {
            return Err(Error::Config("fit needs at least one support point".into()));
        }
        let params = SinusoidParams {
            amplitude,
            frequency: self.spec.frequency.0,
            phase,
        };
        let mut rng = RngStream::new(seed, 0);
        let support_x: Vec<f64> = (0..shots)
            .map(|_| rng.uniform_range(self.spec.x_range.0, self.spec.x_range.1))
            .collect();
        let support_y: Vec<f64> = support_x.iter().map(|&x| self.spec.observe(&params, x, &mut rng)).collect();
        let x = self.spec.grid(GRID_POINTS);
        let truth: Vec<f64> = x.iter().map(|&v| params.value(v)).collect();
        let grid = column::<f32>(&x);

        let meta = self.config.meta_config();
        let prior = predict_bma(&self.state.network, &grid, meta.predict_samples, meta.tau, &mut rng)?;
        let (adapted, _) = inner_adapt(
            &self.state.network,
            &column(&support_x),
            &Targets::Values(column(&support_y)),
            meta.inner_lr,
            meta.eval_inner_steps,
            meta.tau,
            &mut rng,
        )?;
        let pred = predict_bma(&adapted, &grid, meta.predict_samples, meta.tau, &mut rng)?;
        let mean: Vec<f64> = pred.mean.data().iter().map(|&v| f64::from(v)).collect();
        let mse = mean.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / x.len() as f64;
        Ok(FitReport {
            prior_mean: prior.mean.data().iter().map(|&v| f64::from(v)).collect(),
            std: pred.sample_variance().data().iter().map(|&v| f64::from(v).sqrt()).collect(),
            mean,
            mse,
            x,
            truth,
            support_x,
            support_y,
        })
    }

    /// Active-learning MSE traces of both query strategies on `tasks` shared tasks.
    pub fn compare_strategies(&self, tasks: usize, seed: u64) -> Result<StrategyReport> {
        let al = ActiveLearningSpec::default();
        let meta = self.config.meta_config();
        let trace = |strategy| -> Result<Vec<f64>> {
            let runs = (0..tasks)
                .map(|t| active_learning_run(&self.state.network, &self.spec, &al, strategy, &meta, seed, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..=al.query_budget)
                .map(|step| EvalSummary::from_scores(runs.iter().map(|r| r[step]).collect(), 0.0).mean)
                .collect())
        };
        Ok(StrategyReport {
            max_variance: trace(QueryStrategy::MaxVariance)?,
            random: trace(QueryStrategy::Random)?,
        })
    }
}
