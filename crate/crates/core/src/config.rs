//! Run configuration as flat `key = value` text.
//!
//! A config starts from the preset named by its `task` key and applies the
//! remaining keys in order, so `task` may appear anywhere. Later assignments
//! win, which is how command-line overrides layer over a file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Activation, Architecture, InitScheme, TaskType, WeightMode};
use crate::meta::MetaConfig;
use crate::tasks::{ImageDataset, ImageTaskSource, SinusoidSpec, SyntheticClassSpec, TaskSource};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskPreset {
    SineDefault,
    SineChallenging,
    SynthClass,
    ImageClass,
}

text_enum!(TaskPreset {
    SineDefault => "sine-default",
    SineChallenging => "sine-challenging",
    SynthClass => "synth-class",
    ImageClass => "image-class",
});

impl TaskPreset {
    pub fn task_type(self) -> TaskType {
        match self {
            TaskPreset::SineDefault | TaskPreset::SineChallenging => TaskType::Regression,
            TaskPreset::SynthClass | TaskPreset::ImageClass => TaskType::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskPreset,
    pub activation: Activation,
    pub weights: WeightMode,
    pub blocks: Vec<usize>,
    pub block_size: usize,
    pub bias: bool,
    pub inner_lr: f64,
    pub outer_step: f64,
    pub iters: u64,
    pub task_batch: usize,
    pub inner_steps: usize,
    pub eval_inner_steps: usize,
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    pub threads: usize,
    pub init_log_var_shift: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub class_std: f64,
    /// Empty when no dataset is configured.
    pub dataset_dir: String,
    pub eval_tasks: usize,
    /// 0 disables periodic evaluation during training.
    pub eval_every: u64,
    /// 0 writes a checkpoint only at exit.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(TaskPreset::SineDefault)
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "activation",
        "weights",
        "blocks",
        "block_size",
        "bias",
        "inner_lr",
        "outer_step",
        "iters",
        "task_batch",
        "inner_steps",
        "eval_inner_steps",
        "tau",
        "samples",
        "seed",
        "threads",
        "init_log_var_shift",
        "n_way",
        "k_shot",
        "query_per_class",
        "dim",
        "class_std",
        "dataset_dir",
        "eval_tasks",
        "eval_every",
        "checkpoint_every",
    ];

    /// Two competing-unit layers of 16 and 8 blocks with two units each.
    /// Sinusoid presets turn biases on: without them a scalar-input network
    /// is positively homogeneous and cannot represent a phase shift.
    pub fn preset(task: TaskPreset) -> Self {
        let meta = MetaConfig::default();
        let class = SyntheticClassSpec::default();
        Self {
            task,
            activation: Activation::StochasticLwta,
            weights: WeightMode::Gaussian,
            blocks: vec![16, 8],
            block_size: 2,
            bias: task.task_type() == TaskType::Regression,
            inner_lr: meta.inner_lr,
            outer_step: meta.outer_step,
            iters: meta.total_iters,
            task_batch: meta.task_batch,
            inner_steps: meta.inner_steps,
            eval_inner_steps: meta.eval_inner_steps,
            tau: meta.tau,
            samples: meta.predict_samples,
            seed: meta.seed,
            threads: meta.threads,
            init_log_var_shift: InitScheme::default().log_var_shift,
            n_way: class.n_way,
            k_shot: class.k_shot,
            query_per_class: class.query_per_class,
            dim: class.dim,
            class_std: class.std,
            dataset_dir: String::new(),
            eval_tasks: 100,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    /// Build from ordered assignments: preset from the last `task`, then
    /// every assignment in order.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let task = match pairs.iter().rev().find(|(k, _)| k.as_ref() == "task") {
            Some((_, v)) => v.as_ref().trim().parse()?,
            None => TaskPreset::SineDefault,
        };
        let mut config = Self::preset(task);
        for (k, v) in pairs {
            config.set(k.as_ref(), v.as_ref())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Config file, if any, then overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "activation" => self.activation = v.parse()?,
            "weights" => self.weights = v.parse()?,
            "blocks" => self.blocks = parse_list(key, v)?,
            "block_size" => self.block_size = parse_num(key, v)?,
            "bias" => self.bias = parse_bool(key, v)?,
            "inner_lr" => self.inner_lr = parse_num(key, v)?,
            "outer_step" => self.outer_step = parse_num(key, v)?,
            "iters" => self.iters = parse_num(key, v)?,
            "task_batch" => self.task_batch = parse_num(key, v)?,
            "inner_steps" => self.inner_steps = parse_num(key, v)?,
            "eval_inner_steps" => self.eval_inner_steps = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "init_log_var_shift" => self.init_log_var_shift = parse_num(key, v)?,
            "n_way" => self.n_way = parse_num(key, v)?,
            "k_shot" => self.k_shot = parse_num(key, v)?,
            "query_per_class" => self.query_per_class = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "class_std" => self.class_std = parse_num(key, v)?,
            "dataset_dir" => self.dataset_dir = v.to_string(),
            "eval_tasks" => self.eval_tasks = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}'; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Value of `key` as it would appear in a config file.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "task" => self.task.to_string(),
            "activation" => self.activation.to_string(),
            "weights" => self.weights.to_string(),
            "blocks" => self.blocks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "block_size" => self.block_size.to_string(),
            "bias" => self.bias.to_string(),
            "inner_lr" => self.inner_lr.to_string(),
            "outer_step" => self.outer_step.to_string(),
            "iters" => self.iters.to_string(),
            "task_batch" => self.task_batch.to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "eval_inner_steps" => self.eval_inner_steps.to_string(),
            "tau" => self.tau.to_string(),
            "samples" => self.samples.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "init_log_var_shift" => self.init_log_var_shift.to_string(),
            "n_way" => self.n_way.to_string(),
            "k_shot" => self.k_shot.to_string(),
            "query_per_class" => self.query_per_class.to_string(),
            "dim" => self.dim.to_string(),
            "class_std" => self.class_std.to_string(),
            "dataset_dir" => self.dataset_dir.clone(),
            "eval_tasks" => self.eval_tasks.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        })
    }

    /// Every key, one `key = value` line each, in [`Self::KEYS`] order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let value = self.get(key).expect("listed key");
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.meta_config().validate()?;
        if self.blocks.is_empty() || self.blocks.contains(&0) || self.block_size == 0 {
            return Err(Error::Config("blocks and block_size must be positive".into()));
        }
        if self.task.task_type() == TaskType::Classification && self.n_way < 2 {
            return Err(Error::Config("classification needs n_way ≥ 2".into()));
        }
        if self.k_shot == 0 || self.query_per_class == 0 || self.dim == 0 {
            return Err(Error::Config("k_shot, query_per_class and dim must be positive".into()));
        }
        if !(self.class_std >= 0.0 && self.class_std.is_finite()) {
            return Err(Error::Config("class_std must be finite and non-negative".into()));
        }
        if !self.init_log_var_shift.is_finite() {
            return Err(Error::Config("init_log_var_shift must be finite".into()));
        }
        Ok(())
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_step: self.outer_step,
            task_batch: self.task_batch,
            inner_steps: self.inner_steps,
            eval_inner_steps: self.eval_inner_steps,
            total_iters: self.iters,
            tau: self.tau,
            predict_samples: self.samples,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn init_scheme(&self) -> InitScheme {
        InitScheme {
            log_var_shift: self.init_log_var_shift,
            ..InitScheme::default()
        }
    }

    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Result<Architecture> {
        Architecture::stack(
            input_dim,
            &self.blocks,
            self.block_size,
            self.activation,
            self.weights,
            self.bias,
            output_dim,
            self.task.task_type(),
        )
    }

    pub fn sinusoid_spec(&self) -> Option<SinusoidSpec> {
        match self.task {
            TaskPreset::SineDefault => Some(SinusoidSpec::default_setting()),
            TaskPreset::SineChallenging => Some(SinusoidSpec::challenging()),
            _ => None,
        }
    }

    /// Task distribution for `split` ("train" or "test"). Synthetic and
    /// sinusoid tasks have no split; held-out episodes come from a
    /// separate seed instead.
    pub fn task_source<T: Real>(&self, split: &str) -> Result<Box<dyn TaskSource<T>>> {
        Ok(match self.task {
            TaskPreset::SineDefault | TaskPreset::SineChallenging => {
                Box::new(self.sinusoid_spec().expect("sinusoid preset"))
            }
            TaskPreset::SynthClass => Box::new(SyntheticClassSpec {
                n_way: self.n_way,
                k_shot: self.k_shot,
                query_per_class: self.query_per_class,
                dim: self.dim,
                std: self.class_std,
            }),
            TaskPreset::ImageClass => {
                if self.dataset_dir.is_empty() {
                    return Err(Error::Config("image-class needs dataset_dir".into()));
                }
                Box::new(ImageTaskSource {
                    dataset: ImageDataset::open(&self.dataset_dir)?,
                    n_way: self.n_way,
                    k_shot: self.k_shot,
                    query_per_class: self.query_per_class,
                    split: split.to_string(),
                })
            }
        })
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_itself() {
        for task in [
            TaskPreset::SineDefault,
            TaskPreset::SineChallenging,
            TaskPreset::SynthClass,
            TaskPreset::ImageClass,
        ] {
            let mut c = RunConfig::preset(task);
            c.inner_lr = 0.1 + 0.2;
            c.blocks = vec![3, 5, 7];
            let back = RunConfig::parse(&c.dump()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.dump(), c.dump());
        }
    }

    #[test]
    fn task_key_selects_preset_regardless_of_position() {
        let c = RunConfig::parse("iters = 7\ntask = synth-class\n").unwrap();
        assert_eq!(c.task, TaskPreset::SynthClass);
        assert!(!c.bias);
        assert_eq!(c.iters, 7);
        assert!(RunConfig::parse("task = sine-challenging").unwrap().bias);
    }

    #[test]
    fn later_assignment_wins() {
        let pairs = [("seed", "1"), ("seed", "9")];
        assert_eq!(RunConfig::from_pairs(&pairs).unwrap().seed, 9);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rate"));
        assert!(err.contains("inner_lr") && err.contains("checkpoint_every"));
    }

    #[test]
    fn malformed_values_are_config_errors() {
        for text in ["tau = warm", "blocks = 16,,8", "bias = maybe", "activation = gelu", "no equals sign"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(RunConfig::parse("tau = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nblocks = 4, 2  # two layers\n").unwrap();
        assert_eq!(c.blocks, vec![4, 2]);
    }

    #[test]
    fn defaults_match_meta_config() {
        let c = RunConfig::default();
        assert_eq!(c.meta_config(), MetaConfig::default());
        assert_eq!(c.blocks, vec![16, 8]);
        assert_eq!(c.block_size, 2);
    }

    #[test]
    fn image_task_without_dataset_is_config_error() {
        let c = RunConfig::preset(TaskPreset::ImageClass);
        assert!(matches!(c.task_source::<f32>("train"), Err(Error::Config(_))));
    }
}
