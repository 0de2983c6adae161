//! Training checkpoints: a text manifest followed by STLW tensors.
//!
//! ```text
//! STLW-CHECKPOINT 1
//! iter = 120
//! arch.input_dim = 1
//! arch.output_dim = 1
//! arch.task = regression
//! arch.layer = 1,16,2,stochastic_lwta,gaussian,true
//! arch.layer = 32,8,2,stochastic_lwta,gaussian,true
//! arch.head = gaussian,true
//! config.<key> = <value>      (one line per run config key)
//! tensors = 12
//! end
//! <12 STLW tensors in the network's canonical order>
//! ```
//!
//! Randomness is derived from `(seed, iteration, task)`, so the seed and
//! iteration counter are all the generator state a resumed run needs.

use std::fmt::Write as _;
use std::io::{BufRead, Read};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::{Architecture, LayerSpec, Network};
use crate::meta::TrainState;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "STLW-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub state: TrainState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(config: RunConfig, state: TrainState<T>) -> Self {
        Self { config, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.state.network.arch();
        let mut head = String::new();
        let mut line = |s: String| {
            head.push_str(&s);
            head.push('\n');
        };
        line(format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"));
        line(format!("iter = {}", self.state.iter));
        line(format!("arch.input_dim = {}", arch.input_dim));
        line(format!("arch.output_dim = {}", arch.output_dim));
        line(format!("arch.task = {}", arch.task));
        for l in &arch.layers {
            line(format!(
                "arch.layer = {},{},{},{},{},{}",
                l.in_dim, l.blocks, l.block_size, l.activation, l.weights, l.bias
            ));
        }
        line(format!("arch.head = {},{}", arch.head_weights, arch.head_bias));
        for key in RunConfig::KEYS {
            line(format!("config.{key} = {}", self.config.get(key).expect("listed key")));
        }
        let count = self.state.network.tensors().count();
        let _ = write!(head, "tensors = {count}\nend\n");
        let mut bytes = head.into_bytes();
        for t in self.state.network.tensors() {
            bytes.extend_from_slice(&t.to_stlw());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let (magic, version) = first
            .trim_end()
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }

        let mut iter = None;
        let mut input_dim = None;
        let mut output_dim = None;
        let mut task = None;
        let mut layers = Vec::new();
        let mut head = None;
        let mut config_pairs = Vec::new();
        let mut count = None;
        loop {
            let mut raw = String::new();
            if reader.read_line(&mut raw)? == 0 {
                return Err(Error::Checkpoint("manifest ends before 'end'".into()));
            }
            let text = raw.trim_end_matches('\n');
            if text == "end" {
                break;
            }
            let (key, value) = text
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line '{text}'")))?;
            match key {
                "iter" => iter = Some(num(key, value)?),
                "arch.input_dim" => input_dim = Some(num(key, value)?),
                "arch.output_dim" => output_dim = Some(num(key, value)?),
                "arch.task" => task = Some(value.parse().map_err(as_checkpoint)?),
                "arch.layer" => layers.push(parse_layer(value)?),
                "arch.head" => head = Some(parse_head(value)?),
                "tensors" => count = Some(num::<usize>(key, value)?),
                _ => match key.strip_prefix("config.") {
                    Some(k) => config_pairs.push((k.to_string(), value.to_string())),
                    None => return Err(Error::Checkpoint(format!("unknown manifest key '{key}'"))),
                },
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("manifest lacks {what}"));
        let (head_weights, head_bias) = head.ok_or_else(|| missing("arch.head"))?;
        let arch = Architecture {
            input_dim: input_dim.ok_or_else(|| missing("arch.input_dim"))?,
            layers,
            output_dim: output_dim.ok_or_else(|| missing("arch.output_dim"))?,
            task: task.ok_or_else(|| missing("arch.task"))?,
            head_weights,
            head_bias,
        };
        let config = RunConfig::from_pairs(&config_pairs).map_err(as_checkpoint)?;
        let count = count.ok_or_else(|| missing("tensors"))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(Tensor::<T>::read_stlw(&mut reader)?);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensors", rest.len())));
        }
        let state = TrainState {
            network: Network::from_tensors(arch, tensors)?,
            iter: iter.ok_or_else(|| missing("iter"))?,
            total_iters: config.iters,
            outer_step_init: config.outer_step,
            seed: config.seed,
        };
        Ok(Self { config, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `arch` matches the stored network exactly.
    pub fn require_arch(&self, arch: &Architecture) -> Result<()> {
        if self.state.network.arch() != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                self.state.network.arch(),
                arch
            )));
        }
        Ok(())
    }
}

fn as_checkpoint(e: Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(v: &str) -> Result<bool> {
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("expected true or false, got '{v}'")))
}

fn parse_layer(value: &str) -> Result<LayerSpec> {
    let f: Vec<&str> = value.split(',').collect();
    if f.len() != 6 {
        return Err(Error::Checkpoint(format!("malformed layer '{value}'")));
    }
    Ok(LayerSpec {
        in_dim: num("arch.layer", f[0])?,
        blocks: num("arch.layer", f[1])?,
        block_size: num("arch.layer", f[2])?,
        activation: f[3].parse().map_err(as_checkpoint)?,
        weights: f[4].parse().map_err(as_checkpoint)?,
        bias: parse_bool(f[5])?,
    })
}

fn parse_head(value: &str) -> Result<(crate::layers::WeightMode, bool)> {
    let (w, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Checkpoint(format!("malformed head '{value}'")))?;
    Ok((w.parse().map_err(as_checkpoint)?, parse_bool(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskPreset;

    fn sample(task: TaskPreset) -> Checkpoint<f32> {
        let mut config = RunConfig::preset(task);
        config.blocks = vec![3, 2];
        config.iters = 40;
        config.seed = 11;
        let (i, o) = if task == TaskPreset::SynthClass { (16, 5) } else { (1, 1) };
        let arch = config.architecture(i, o).unwrap();
        let mut state = TrainState::new(arch, &config.init_scheme(), &config.meta_config());
        state.iter = 17;
        Checkpoint::new(config, state)
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        for task in [TaskPreset::SineDefault, TaskPreset::SynthClass] {
            let ck = sample(task);
            let bytes = ck.to_bytes();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back.state.iter, 17);
            assert_eq!(back.config, ck.config);
            for (a, b) in back.state.network.tensors().zip(ck.state.network.tensors()) {
                assert!(a.bit_eq(b));
            }
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = sample(TaskPreset::SineDefault).to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("STLW-CHECKPOINT 1", "STLW-CHECKPOINT 2", 1);
        let err = Checkpoint::<f32>::from_bytes(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample(TaskPreset::SineDefault).to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&extra), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"hello\n"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn architecture_mismatch_detected() {
        let ck = sample(TaskPreset::SineDefault);
        let other = ck.config.architecture(1, 2).unwrap();
        assert!(matches!(ck.require_arch(&other), Err(Error::Checkpoint(_))));
        assert!(ck.require_arch(ck.state.network.arch()).is_ok());
    }
}
