//! Task distributions: sinusoid regression, Gaussian-blob classification,
//! and episodes drawn from an on-disk dataset of STLW tensors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::TaskType;
use crate::objective::Targets;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// One meta-learning task.
#[derive(Clone, Debug)]
pub struct TaskEpisode<T> {
    pub support_x: Tensor<T>,
    pub support_y: Targets<T>,
    pub query_x: Tensor<T>,
    pub query_y: Targets<T>,
    pub task_type: TaskType,
    /// Classes per episode (1 for regression).
    pub n_way: usize,
    /// Support examples per class (support size for regression).
    pub k_shot: usize,
    pub sinusoid: Option<SinusoidParams>,
    /// Identity of every support example within the task's example pool.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

/// Anything that can hand out episodes.
pub trait TaskSource<T>: Sync {
    fn sample(&self, rng: &mut RngStream) -> Result<TaskEpisode<T>>;
    fn task_type(&self) -> TaskType;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl SinusoidParams {
    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidSpec {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    /// Equal bounds fix the frequency.
    pub frequency: (f64, f64),
    /// Observation noise std as a fraction of the amplitude; 0 disables noise.
    pub noise_fraction: f64,
    pub x_range: (f64, f64),
    pub support_points: usize,
    /// Evenly spaced evaluation grid size.
    pub query_points: usize,
}

impl SinusoidSpec {
    /// Fixed unit frequency, noiseless.
    pub fn default_setting() -> Self {
        Self {
            amplitude: (0.1, 5.0),
            phase: (0.0, 2.0 * PI),
            frequency: (1.0, 1.0),
            noise_fraction: 0.0,
            x_range: (-5.0, 5.0),
            support_points: 10,
            query_points: 100,
        }
    }

    /// Random frequency and amplitude-scaled Gaussian noise.
    pub fn challenging() -> Self {
        Self {
            frequency: (0.5, 2.0),
            noise_fraction: 0.01,
            ..Self::default_setting()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(ordered(self.amplitude) && ordered(self.phase) && ordered(self.frequency) && ordered(self.x_range)) {
            return Err(Error::Config("sinusoid ranges must be finite with lo ≤ hi".into()));
        }
        if self.support_points == 0 || self.query_points == 0 {
            return Err(Error::Config("sinusoid tasks need at least one point".into()));
        }
        if self.noise_fraction < 0.0 {
            return Err(Error::Config("noise fraction must be non-negative".into()));
        }
        Ok(())
    }

    fn draw(range: (f64, f64), rng: &mut RngStream) -> f64 {
        if range.0 == range.1 {
            range.0
        } else {
            rng.uniform_range(range.0, range.1)
        }
    }

    pub fn sample_params(&self, rng: &mut RngStream) -> SinusoidParams {
        SinusoidParams {
            amplitude: Self::draw(self.amplitude, rng),
            frequency: Self::draw(self.frequency, rng),
            phase: Self::draw(self.phase, rng),
        }
    }

    /// `A sin(ωx + b) + ε` with `ε ~ N(0, (noise_fraction · A)²)`.
    pub fn observe(&self, params: &SinusoidParams, x: f64, rng: &mut RngStream) -> f64 {
        let clean = params.value(x);
        if self.noise_fraction > 0.0 {
            clean + self.noise_fraction * params.amplitude * rng.std_normal()
        } else {
            clean
        }
    }

    /// `n` evenly spaced points over the input range, endpoints included.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.x_range;
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    pub fn episode<T: Real>(&self, params: SinusoidParams, rng: &mut RngStream) -> TaskEpisode<T> {
        let support: Vec<f64> = (0..self.support_points)
            .map(|_| Self::draw(self.x_range, rng))
            .collect();
        let support_y: Vec<f64> = support.iter().map(|&x| self.observe(&params, x, rng)).collect();
        let query = self.grid(self.query_points);
        let query_y: Vec<f64> = query.iter().map(|&x| self.observe(&params, x, rng)).collect();
        let k = support.len();
        TaskEpisode {
            support_x: column(&support),
            support_y: Targets::Values(column(&support_y)),
            query_x: column(&query),
            query_y: Targets::Values(column(&query_y)),
            task_type: TaskType::Regression,
            n_way: 1,
            k_shot: k,
            sinusoid: Some(params),
            support_ids: (0..k).collect(),
            query_ids: (k..k + query.len()).collect(),
        }
    }
}

/// `[n, 1]` tensor from a slice.
pub fn column<T: Real>(values: &[f64]) -> Tensor<T> {
    Tensor::from_f64(&[values.len(), 1], values).expect("non-empty column")
}

pub fn sample_sinusoid_task<T: Real>(spec: &SinusoidSpec, rng: &mut RngStream) -> TaskEpisode<T> {
    let params = spec.sample_params(rng);
    spec.episode(params, rng)
}

impl<T: Real> TaskSource<T> for SinusoidSpec {
    fn sample(&self, rng: &mut RngStream) -> Result<TaskEpisode<T>> {
        Ok(sample_sinusoid_task(self, rng))
    }

    fn task_type(&self) -> TaskType {
        TaskType::Regression
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }
}

/// Classes are isotropic Gaussian blobs with prototypes uniform in `[−1, 1]^dim`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticClassSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub dim: usize,
    pub std: f64,
}

impl Default for SyntheticClassSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            query_per_class: 15,
            dim: 16,
            std: 0.25,
        }
    }
}

pub fn sample_synthetic_classification_task<T: Real>(
    spec: &SyntheticClassSpec,
    rng: &mut RngStream,
) -> Result<TaskEpisode<T>> {
    let SyntheticClassSpec {
        n_way,
        k_shot,
        query_per_class,
        dim,
        std,
    } = *spec;
    if n_way < 2 {
        return Err(Error::Config(format!("n_way must be at least 2, got {n_way}")));
    }
    if k_shot == 0 || query_per_class == 0 || dim == 0 {
        return Err(Error::Config("k_shot, query_per_class and dim must be positive".into()));
    }
    let prototypes: Vec<Vec<f64>> = (0..n_way)
        .map(|_| (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .collect();
    let draw = |class: usize, rng: &mut RngStream| -> Vec<f64> {
        prototypes[class].iter().map(|&m| m + std * rng.std_normal()).collect()
    };
    let mut sx = Vec::with_capacity(n_way * k_shot * dim);
    let mut sy = Vec::with_capacity(n_way * k_shot);
    let mut qx = Vec::with_capacity(n_way * query_per_class * dim);
    let mut qy = Vec::with_capacity(n_way * query_per_class);
    for class in 0..n_way {
        for _ in 0..k_shot {
            sx.extend(draw(class, rng));
            sy.push(class);
        }
        for _ in 0..query_per_class {
            qx.extend(draw(class, rng));
            qy.push(class);
        }
    }
    let ns = sy.len();
    let nq = qy.len();
    Ok(TaskEpisode {
        support_x: Tensor::from_f64(&[ns, dim], &sx)?,
        support_y: Targets::Classes(sy),
        query_x: Tensor::from_f64(&[nq, dim], &qx)?,
        query_y: Targets::Classes(qy),
        task_type: TaskType::Classification,
        n_way,
        k_shot,
        sinusoid: None,
        support_ids: (0..ns).collect(),
        query_ids: (ns..ns + nq).collect(),
    })
}

impl<T: Real> TaskSource<T> for SyntheticClassSpec {
    fn sample(&self, rng: &mut RngStream) -> Result<TaskEpisode<T>> {
        sample_synthetic_classification_task(self, rng)
    }

    fn task_type(&self) -> TaskType {
        TaskType::Classification
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.n_way
    }
}

/// `<root>/<class>/<item>.stlw` plus `<root>/manifest.tsv` with
/// `class<TAB>split` lines.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    root: PathBuf,
    /// split name → classes, each with its sorted item files.
    splits: BTreeMap<String, Vec<(String, Vec<PathBuf>)>>,
    input_dim: usize,
}

impl ImageDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.tsv");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Config(format!("cannot read dataset manifest {}: {e}", manifest_path.display()))
        })?;
        let mut splits: BTreeMap<String, Vec<(String, Vec<PathBuf>)>> = BTreeMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (class, split) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("manifest line {}: expected class<TAB>split", lineno + 1))
            })?;
            let dir = root.join(class);
            let mut items: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::Data(format!("class '{class}': cannot list {}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "stlw"))
                .collect();
            items.sort();
            splits
                .entry(split.trim().to_string())
                .or_default()
                .push((class.to_string(), items));
        }
        let first = splits
            .values()
            .flatten()
            .find_map(|(_, items)| items.first())
            .ok_or_else(|| Error::Data("dataset has no items".into()))?;
        let input_dim = Tensor::<f64>::load(first)
            .map_err(|e| Error::Data(format!("{}: {e}", first.display())))?
            .len();
        Ok(Self {
            root,
            splits,
            input_dim,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self, split: &str) -> Vec<&str> {
        self.splits
            .get(split)
            .map(|cs| cs.iter().map(|(c, _)| c.as_str()).collect())
            .unwrap_or_default()
    }

    fn load_item<T: Real>(&self, path: &Path) -> Result<Vec<T>> {
        let t = Tensor::<T>::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if t.len() != self.input_dim {
            return Err(Error::Data(format!(
                "{} has {} values, expected {}",
                path.display(),
                t.len(),
                self.input_dim
            )));
        }
        Ok(t.into_data())
    }
}

/// Episode from `dataset`: `n_way` classes of `split`, `k_shot` support and
/// `query_per_class` query items each, support and query disjoint.
pub fn image_episode_sampler<T: Real>(
    dataset: &ImageDataset,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    split: &str,
    rng: &mut RngStream,
) -> Result<TaskEpisode<T>> {
    let classes = dataset
        .splits
        .get(split)
        .ok_or_else(|| Error::Data(format!("no classes in split '{split}'")))?;
    if n_way > classes.len() {
        return Err(Error::Data(format!(
            "{n_way}-way episode requested but split '{split}' has {} classes",
            classes.len()
        )));
    }
    let per_class = k_shot + query_per_class;
    let chosen = rng.choose_distinct(classes.len(), n_way);
    let mut sx = Vec::new();
    let mut sy = Vec::new();
    let mut qx = Vec::new();
    let mut qy = Vec::new();
    let mut support_ids = Vec::new();
    let mut query_ids = Vec::new();
    for (label, &ci) in chosen.iter().enumerate() {
        let (name, items) = &classes[ci];
        if items.len() < per_class {
            return Err(Error::Data(format!(
                "class '{name}' has {} items, need {per_class}",
                items.len()
            )));
        }
        let picks = rng.choose_distinct(items.len(), per_class);
        for (slot, &item) in picks.iter().enumerate() {
            let values = dataset.load_item::<T>(&items[item])?;
            // example identity: class index in split × stride + item index
            let id = ci * 1_000_000 + item;
            if slot < k_shot {
                sx.extend(values);
                sy.push(label);
                support_ids.push(id);
            } else {
                qx.extend(values);
                qy.push(label);
                query_ids.push(id);
            }
        }
    }
    let dim = dataset.input_dim;
    Ok(TaskEpisode {
        support_x: Tensor::new(&[sy.len(), dim], sx)?,
        support_y: Targets::Classes(sy),
        query_x: Tensor::new(&[qy.len(), dim], qx)?,
        query_y: Targets::Classes(qy),
        task_type: TaskType::Classification,
        n_way,
        k_shot,
        sinusoid: None,
        support_ids,
        query_ids,
    })
}

/// Episodic source over one split of an [`ImageDataset`].
#[derive(Clone, Debug)]
pub struct ImageTaskSource {
    pub dataset: ImageDataset,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub split: String,
}

impl<T: Real> TaskSource<T> for ImageTaskSource {
    fn sample(&self, rng: &mut RngStream) -> Result<TaskEpisode<T>> {
        image_episode_sampler(&self.dataset, self.n_way, self.k_shot, self.query_per_class, &self.split, rng)
    }

    fn task_type(&self) -> TaskType {
        TaskType::Classification
    }

    fn input_dim(&self) -> usize {
        self.dataset.input_dim
    }

    fn output_dim(&self) -> usize {
        self.n_way
    }
}
