//! Command-line front end: search, derive, train, eval, analyze and
//! selftest over the `cdsnas` engine.

pub mod commands;
pub mod config;
pub mod failure;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{env_seed, RunConfig};
use failure::{Failure, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "cdsnas", version, about = "Differentiable architecture search for person re-identification")]
pub struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// One flag per config key. Values are parsed by the config layer so that
/// file and flag errors read the same.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Master seed; falls back to CDSNAS_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Search space: cs or cds.
    #[arg(long, global = true)]
    pub space: Option<String>,
    /// Search task: synthetic or planted.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Branches evaluated per MBlock during search.
    #[arg(long, global = true)]
    pub topk: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<String>,
    #[arg(long = "max-steps", global = true)]
    pub max_steps: Option<String>,
    /// Identities per batch.
    #[arg(long, global = true)]
    pub identities: Option<String>,
    /// Instances per identity in a batch.
    #[arg(long, global = true)]
    pub instances: Option<String>,
    /// Initial weight learning rate during search.
    #[arg(long = "w-lr", global = true)]
    pub w_lr: Option<String>,
    /// Architecture learning rate during search.
    #[arg(long = "alpha-lr", global = true)]
    pub alpha_lr: Option<String>,
    /// Initial learning rate for training.
    #[arg(long, global = true)]
    pub lr: Option<String>,
    /// Random erasing probability.
    #[arg(long, global = true)]
    pub erasing: Option<String>,
    /// Width multiplier.
    #[arg(long, global = true)]
    pub beta: Option<String>,
    /// Resolution multiplier.
    #[arg(long, global = true)]
    pub gamma: Option<String>,
    /// Head: fblneck, blneck or bnneck.
    #[arg(long, global = true)]
    pub neck: Option<String>,
    /// Horizontal stripes of the part branch.
    #[arg(long, global = true)]
    pub partitions: Option<String>,
    /// Identities in a generated dataset.
    #[arg(long = "synthetic-ids", global = true)]
    pub synthetic_ids: Option<String>,
    /// Images per identity in a generated dataset.
    #[arg(long = "synthetic-instances", global = true)]
    pub synthetic_instances: Option<String>,
    /// Identities to evaluate on: train or test.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Dataset cache to use instead of generated identities.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Architecture descriptor file.
    #[arg(long, global = true)]
    pub arch: Option<String>,
    /// Built-in descriptor: cnet, cdnet or cdnet-top1.
    #[arg(long, global = true)]
    pub fixture: Option<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<String>,
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("space", &self.space),
            ("task", &self.task),
            ("topk", &self.topk),
            ("epochs", &self.epochs),
            ("max_steps", &self.max_steps),
            ("identities", &self.identities),
            ("instances", &self.instances),
            ("w_lr", &self.w_lr),
            ("alpha_lr", &self.alpha_lr),
            ("lr", &self.lr),
            ("erasing", &self.erasing),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("neck", &self.neck),
            ("partitions", &self.partitions),
            ("synthetic_ids", &self.synthetic_ids),
            ("synthetic_instances", &self.synthetic_instances),
            ("split", &self.split),
            ("dataset", &self.dataset),
            ("arch", &self.arch),
            ("fixture", &self.fixture),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
        ]
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search the space and write the derived descriptor.
    Search,
    /// Derive a descriptor from a search checkpoint.
    Derive,
    /// Train a descriptor with the configured head.
    Train,
    /// Retrieval metrics of a trained checkpoint.
    Eval,
    /// Parameter, mult-add and receptive-field report of a descriptor.
    Analyze,
    /// Gradient, gating and metric self-checks.
    Selftest {
        /// Random cases per operation family.
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long = "inject-fault", hide = true)]
        inject_fault: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Derive => "derive",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Selftest { .. } => "selftest",
        }
    }
}

/// Defaults, then the config file, then flags. The seed comes from the
/// environment only when neither file nor flags set it.
pub fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let mut seeded = false;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
        seeded = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .any(|(k, _)| k.trim() == "seed" && !k.trim_start().starts_with('#'));
    }
    for (key, value) in cli.overrides.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
            seeded |= key == "seed";
        }
    }
    if !seeded {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Search => commands::cmd_search(&cfg),
        Command::Derive => commands::cmd_derive(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Analyze => commands::cmd_analyze(&cfg),
        Command::Selftest { cases, inject_fault } => {
            if commands::cmd_selftest(&cfg, *cases, inject_fault.as_deref())? {
                Ok(())
            } else {
                Err(Failure {
                    code: 1,
                    kind: "selftest",
                    message: "one or more checks failed".into(),
                })
            }
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cdsnas").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 5\ntopk = 3\nneck = blneck\n").unwrap();
        let cli = parse(&["search", "--config", path.to_str().unwrap(), "--topk", "1"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.topk), (5, 1));
        assert_eq!(cfg.neck.to_string(), "blneck");
    }

    #[test]
    fn every_key_has_a_flag() {
        let keys: Vec<&str> = Overrides::default().pairs().iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, config::KEYS);
    }

    #[test]
    fn bad_flag_value_is_usage_error() {
        let cli = parse(&["train", "--partitions", "many"]);
        assert_eq!(resolve(&cli).unwrap_err().code, EXIT_USAGE);
        assert_eq!(run(["cdsnas", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["cdsnas", "--help"]), 0);
    }
}
