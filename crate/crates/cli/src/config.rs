//! Run configuration: flat `key = value` files with command-line overrides.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cdsnas::neck::NeckVariant;
use cdsnas::space::SpaceKind;

use crate::failure::Failure;

pub const SEED_ENV: &str = "CDSNAS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Synthetic,
    Planted,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(Task::Synthetic),
            "planted" => Ok(Task::Planted),
            _ => Err(format!("unknown task `{s}` (synthetic, planted)")),
        }
    }
}

impl Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Synthetic => "synthetic",
            Task::Planted => "planted",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (train, test)")),
        }
    }
}

impl Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Every setting of every command. Commands read the subset they need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub space: SpaceKind,
    pub task: Task,
    pub topk: usize,
    /// Defaults to 40 for search and 30 for training.
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    /// Identities per batch.
    pub identities: usize,
    /// Instances per identity in a batch.
    pub instances: usize,
    pub w_lr: f64,
    pub alpha_lr: f64,
    pub lr: f64,
    pub erasing: f64,
    /// Width multiplier; search and derive use 0.25 when unset, train and
    /// analyze keep the descriptor's own.
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub neck: NeckVariant,
    pub partitions: usize,
    pub synthetic_ids: usize,
    pub synthetic_instances: usize,
    pub split: Split,
    pub dataset: Option<PathBuf>,
    pub arch: Option<PathBuf>,
    pub fixture: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: SpaceKind::Cds,
            task: Task::Synthetic,
            topk: 2,
            epochs: None,
            max_steps: None,
            identities: 4,
            instances: 4,
            w_lr: 0.025,
            alpha_lr: 3e-4,
            lr: 0.05,
            erasing: 0.5,
            beta: None,
            gamma: None,
            neck: NeckVariant::Fbl,
            partitions: 2,
            synthetic_ids: 24,
            synthetic_instances: 8,
            split: Split::Test,
            dataset: None,
            arch: None,
            fixture: None,
            checkpoint: None,
            out_dir: PathBuf::from("cdsnas-out"),
        }
    }
}

/// Recognized keys, in the order they are reported.
pub const KEYS: &[&str] = &[
    "seed",
    "space",
    "task",
    "topk",
    "epochs",
    "max_steps",
    "identities",
    "instances",
    "w_lr",
    "alpha_lr",
    "lr",
    "erasing",
    "beta",
    "gamma",
    "neck",
    "partitions",
    "synthetic_ids",
    "synthetic_instances",
    "split",
    "dataset",
    "arch",
    "fixture",
    "checkpoint",
    "out_dir",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, Failure>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Failure::usage(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn positive(key: &str, value: &str) -> Result<f64, Failure> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Failure::usage(format!("`{key}` must be positive, got {value}")))
    }
}

fn show<V: Display>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "default".to_string(), |v| v.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "space" => self.space = parse(key, value)?,
            "task" => self.task = parse(key, value)?,
            "topk" => self.topk = parse(key, value)?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "identities" => self.identities = parse(key, value)?,
            "instances" => self.instances = parse(key, value)?,
            "w_lr" => self.w_lr = positive(key, value)?,
            "alpha_lr" => self.alpha_lr = parse(key, value)?,
            "lr" => self.lr = positive(key, value)?,
            "erasing" => self.erasing = parse(key, value)?,
            "beta" => self.beta = Some(positive(key, value)?),
            "gamma" => self.gamma = Some(positive(key, value)?),
            "neck" => self.neck = parse(key, value)?,
            "partitions" => self.partitions = parse(key, value)?,
            "synthetic_ids" => self.synthetic_ids = parse(key, value)?,
            "synthetic_instances" => self.synthetic_instances = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            "dataset" => self.dataset = Some(value.into()),
            "arch" => self.arch = Some(value.into()),
            "fixture" => self.fixture = Some(value.to_string()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            _ => return Err(Failure::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Failure> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|f| Failure::usage(format!("config line {}: {}", i + 1, f.message)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "space" => self.space.to_string(),
            "task" => self.task.to_string(),
            "topk" => self.topk.to_string(),
            "epochs" => show(&self.epochs),
            "max_steps" => show(&self.max_steps),
            "identities" => self.identities.to_string(),
            "instances" => self.instances.to_string(),
            "w_lr" => self.w_lr.to_string(),
            "alpha_lr" => self.alpha_lr.to_string(),
            "lr" => self.lr.to_string(),
            "erasing" => self.erasing.to_string(),
            "beta" => show(&self.beta),
            "gamma" => show(&self.gamma),
            "neck" => self.neck.to_string(),
            "partitions" => self.partitions.to_string(),
            "synthetic_ids" => self.synthetic_ids.to_string(),
            "synthetic_instances" => self.synthetic_instances.to_string(),
            "split" => self.split.to_string(),
            "dataset" => show(&self.dataset.as_ref().map(|p| p.display())),
            "arch" => show(&self.arch.as_ref().map(|p| p.display())),
            "fixture" => show(&self.fixture),
            "checkpoint" => show(&self.checkpoint.as_ref().map(|p| p.display())),
            "out_dir" => self.out_dir.display().to_string(),
            _ => String::new(),
        }
    }

    /// `key = value` lines that [`RunConfig::apply_text`] reads back into an
    /// equal config. Unset optional values are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.value_of(key);
            let unset = match *key {
                "epochs" => self.epochs.is_none(),
                "max_steps" => self.max_steps.is_none(),
                "beta" => self.beta.is_none(),
                "gamma" => self.gamma.is_none(),
                "dataset" => self.dataset.is_none(),
                "arch" => self.arch.is_none(),
                "fixture" => self.fixture.is_none(),
                "checkpoint" => self.checkpoint.is_none(),
                _ => false,
            };
            if !unset {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    /// `# key = value` lines for every setting except the output root, so
    /// that runs differing only in where they write stay byte-identical.
    pub fn embedded(&self, command: &str) -> String {
        let mut out = format!("# command = {command}\n");
        for key in KEYS.iter().filter(|&&k| k != "out_dir") {
            out.push_str(&format!("# {key} = {}\n", self.value_of(key)));
        }
        out
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn epochs_or(&self, default: usize) -> usize {
        self.epochs.unwrap_or(default)
    }
}

/// Seed from the environment when neither the file nor the flags set one.
pub fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => parse(SEED_ENV, &v).map(Some),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text("# desk run\nseed = 7\n\ntopk=3\nneck = bnneck\nbeta = 0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.topk, 3);
        assert_eq!(c.neck, NeckVariant::Bn);
        assert_eq!(c.beta, Some(0.5));
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_text("seed = 1\nlearning_rate = 3\n").unwrap_err();
        assert!(e.message.contains("line 2") && e.message.contains("learning_rate"), "{}", e.message);
        assert_eq!(e.code, 2);
        assert!(c.apply_text("topk = two").is_err());
        assert!(c.apply_text("beta = -1").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn every_key_round_trips() {
        let mut c = RunConfig::default();
        for &k in KEYS {
            let v = c.value_of(k);
            if v != "default" {
                c.set(k, &v).unwrap();
            }
        }
        assert_eq!(c, RunConfig::default());
        assert!(!c.embedded("search").contains("out_dir"));
        let mut set = RunConfig::default();
        set.apply_text("epochs = 3\nbeta = 0.5\nfixture = cdnet\nsplit = train\nout_dir = x/y\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&set.to_text()).unwrap();
        assert_eq!(back, set);
        assert_eq!(c.embedded("train").lines().count(), KEYS.len());
    }
}
