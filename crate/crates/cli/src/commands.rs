use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lwta_meta::active::{active_learning_run, ActiveLearningSpec, QueryStrategy};
use lwta_meta::checkpoint::Checkpoint;
use lwta_meta::config::{parse_pairs, RunConfig};
use lwta_meta::layers::{count_parameters, TaskType};
use lwta_meta::meta::{evaluate, meta_train, EvalSummary, MetricRecord, TrainState};
use lwta_meta::metrics::MetricsWriter;
use lwta_meta::{Error, Result};

/// Stored config (if any), then the config file, then flag overrides.
fn layered(base: Option<&RunConfig>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(base) = base {
        pairs.extend(parse_pairs(&base.dump())?);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(parse_pairs(&text)?);
    }
    pairs.extend(overrides.iter().cloned());
    RunConfig::from_pairs(&pairs)
}

fn metric_name(task: TaskType) -> &'static str {
    match task {
        TaskType::Classification => "accuracy",
        TaskType::Regression => "mse",
    }
}

fn run_eval(config: &RunConfig, state: &TrainState<f32>) -> Result<EvalSummary> {
    let source = config.task_source::<f32>("test")?;
    evaluate(&state.network, source.as_ref(), &config.meta_config(), config.eval_tasks, config.seed)
}

pub fn train(
    file: Option<&Path>,
    overrides: &[(String, String)],
    checkpoint: &Path,
    resume: bool,
    metrics_out: Option<&Path>,
) -> Result<()> {
    let stored = if resume { Some(Checkpoint::<f32>::load(checkpoint)?) } else { None };
    let config = layered(stored.as_ref().map(|c| &c.config), file, overrides)?;
    let source = config.task_source::<f32>("train")?;
    let arch = config.architecture(source.input_dim(), source.output_dim())?;
    let mut state = match stored {
        Some(ck) => {
            ck.require_arch(&arch)?;
            let mut state = ck.state;
            state.total_iters = config.iters;
            state.outer_step_init = config.outer_step;
            state.seed = config.seed;
            state
        }
        None => TrainState::new(arch, &config.init_scheme(), &config.meta_config()),
    };
    let start_iter = state.iter;
    let mut writer = metrics_out.map(MetricsWriter::append).transpose()?;
    let started = Instant::now();

    let mut observer = |s: &TrainState<f32>, r: &mut MetricRecord| -> Result<()> {
        if config.eval_every > 0 && s.iter.is_multiple_of(config.eval_every) {
            r.eval_metric = Some(run_eval(&config, s)?.mean);
        }
        if let Some(w) = writer.as_mut() {
            w.write(r)?;
        }
        if config.checkpoint_every > 0 && s.iter.is_multiple_of(config.checkpoint_every) {
            Checkpoint::new(config.clone(), s.clone()).save(checkpoint)?;
        }
        Ok(())
    };
    let outcome = meta_train(&mut state, &config.meta_config(), source.as_ref(), &mut observer);
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Checkpoint::new(config.clone(), state.clone()).save(checkpoint)?;
    outcome?;

    let done = state.iter - start_iter;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    println!(
        "trained {} iterations ({} total) in {:.1} s, {:.2} ms/iter, {} parameters",
        done,
        state.iter,
        ms / 1e3,
        if done > 0 { ms / done as f64 } else { 0.0 },
        count_parameters(state.network.arch())
    );
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

pub fn eval(file: Option<&Path>, overrides: &[(String, String)], checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let config = layered(Some(&ck.config), file, overrides)?;
    let summary = run_eval(&config, &ck.state)?;
    println!(
        "{} mean {:.6} std {:.6} over {} tasks; {:.3} ms per adapt-and-predict",
        metric_name(ck.state.network.arch().task),
        summary.mean,
        summary.std,
        summary.per_task.len(),
        summary.mean_predict_ms
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn active_learn(
    file: Option<&Path>,
    overrides: &[(String, String)],
    checkpoint: &Path,
    strategy: QueryStrategy,
    tasks: usize,
    initial_points: usize,
    query_budget: usize,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let config = layered(Some(&ck.config), file, overrides)?;
    let spec = config
        .sinusoid_spec()
        .ok_or_else(|| Error::Config(format!("active learning needs a sinusoid task, got {}", config.task)))?;
    let al = ActiveLearningSpec {
        initial_points,
        query_budget,
        ..ActiveLearningSpec::default()
    };
    let meta = config.meta_config();
    let traces = (0..tasks)
        .map(|t| active_learning_run(&ck.state.network, &spec, &al, strategy, &meta, config.seed, t))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("step,mean_mse,std_mse\n");
    for step in 0..=query_budget {
        let summary = EvalSummary::from_scores(traces.iter().map(|t| t[step]).collect(), 0.0);
        csv.push_str(&format!("{step},{},{}\n", summary.mean, summary.std));
    }
    emit(out, &csv)
}

pub fn sweep(
    file: Option<&Path>,
    overrides: &[(String, String)],
    axis: &str,
    values: &str,
    out: Option<&Path>,
) -> Result<()> {
    let base = layered(None, file, overrides)?;
    let mut csv = String::from("axis,value,metric,mean,std,parameters,train_ms_per_iter,predict_ms\n");
    for value in values.split(',').map(str::trim) {
        let mut config = base.clone();
        config.set(axis, value)?;
        config.validate()?;
        let source = config.task_source::<f32>("train")?;
        let arch = config.architecture(source.input_dim(), source.output_dim())?;
        let mut state = TrainState::new(arch, &config.init_scheme(), &config.meta_config());
        let started = Instant::now();
        meta_train(&mut state, &config.meta_config(), source.as_ref(), &mut lwta_meta::meta::no_observer)?;
        let train_ms = started.elapsed().as_secs_f64() * 1e3 / config.iters.max(1) as f64;
        let summary = run_eval(&config, &state)?;
        csv.push_str(&format!(
            "{axis},{value},{},{},{},{},{:.3},{:.3}\n",
            metric_name(config.task.task_type()),
            summary.mean,
            summary.std,
            count_parameters(state.network.arch()),
            train_ms,
            summary.mean_predict_ms
        ));
    }
    emit(out, &csv)
}

pub fn dump_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    print!("{}", layered(None, file, overrides)?.dump());
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => File::create(path)?.write_all(text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
