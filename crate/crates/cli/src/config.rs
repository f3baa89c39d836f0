//! Run configuration: a TOML document of sections, each key overridable
//! from the command line as `--section.key value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tes_core::data::SynthSpec;
use tes_core::losses::Hyperparams;
use tes_core::optim::{lambda_t_grid, lr_grid, weight_decay_grid, GridSpec, TrainConfig};
use tes_core::theory::BoundSuiteConfig;
use toml::{Table, Value};

use crate::CliError;

/// Dataset directories hold `features.tesf`, `labels.tesl` and `classes.txt`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Held out from `train` when no `val` directory is given; 0 disables.
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Text proxies, one row per class, in the order of the train classes.
    pub proxies: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    /// Std of the Gaussian classifier init; 0 starts from zeros.
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_dim: 32, init_std: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Defaults to the 7-point log grid.
    pub lrs: Option<Vec<f64>>,
    pub weight_decays: Option<Vec<f64>>,
    /// Search the 7-point decay grid plus "off".
    pub search_weight_decay: bool,
    pub lambda_ts: Option<Vec<f64>>,
    pub search_lambda_t: bool,
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        let weight_decays = match (&self.weight_decays, self.search_weight_decay) {
            (Some(v), _) => v.iter().copied().map(Some).collect(),
            (None, true) => weight_decay_grid(),
            (None, false) => vec![None],
        };
        let lambda_ts = match (&self.lambda_ts, self.search_lambda_t) {
            (Some(v), _) => v.iter().copied().map(Some).collect(),
            (None, true) => lambda_t_grid().into_iter().map(Some).collect(),
            (None, false) => vec![None],
        };
        GridSpec { lrs: self.lrs.clone().unwrap_or_else(lr_grid), weight_decays, lambda_ts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Check a recorded training trace instead of running the suite.
    pub trace: Option<PathBuf>,
    /// Run probe + fine-tune + every bound on `data.train` or a synthetic set.
    pub suite: bool,
    /// Extra sandwich check on this many random `(X, W)` draws.
    pub random_draws: usize,
    pub draw_examples: usize,
    pub draw_dim: usize,
    pub draw_classes: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { trace: None, suite: true, random_draws: 0, draw_examples: 20, draw_dim: 8, draw_classes: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub hyperparams: Hyperparams,
    pub grid: GridSection,
    pub bounds: BoundSuiteConfig,
    pub verify: VerifySection,
    pub synth: SynthSpec,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in parse_overrides(overrides)? {
            set_key(&mut table, &key, value)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self, CliError> {
        if table.get("train").and_then(Value::as_table).is_some_and(|t| t.contains_key("hyperparams")) {
            return Err(CliError::Usage("objective settings belong in [hyperparams], not [train]".into()));
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// `[train]` with `[hyperparams]` folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { hyperparams: self.hyperparams, ..self.train }
    }

    /// The config that reruns `train` as given, in TOML.
    pub fn with_train(&self, train: &TrainConfig) -> Result<String, CliError> {
        let mut cfg = self.clone();
        cfg.train = TrainConfig { hyperparams: Hyperparams::default(), ..*train };
        cfg.hyperparams = train.hyperparams;
        let mut table = Table::try_from(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(Value::Table(t)) = table.get_mut("train") {
            t.remove("hyperparams");
        }
        Ok(toml::to_string(&table).map_err(|e| CliError::Runtime(e.to_string()))?)
    }

    /// Fails unless every configured input path exists.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let mut paths: Vec<&Path> = Vec::new();
        paths.extend(self.data.train.as_deref());
        paths.extend(self.data.val.as_deref());
        paths.extend(self.data.proxies.as_deref());
        paths.extend(self.verify.trace.as_deref());
        paths.extend(self.eval.model.as_deref());
        for p in paths {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Pairs `--a.b value` and `--a.b=value`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("expected --section.key, got {arg:?}")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("{key}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tes_core::losses::LossKind;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::load(
            None,
            &args(&[
                "--train.epochs",
                "7",
                "--train.loss_kind=TES",
                "--hyperparams.lambda_t",
                "0.3",
                "--data.train",
                "d",
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.loss_kind, LossKind::Tes);
        assert_eq!(cfg.train_config().hyperparams.lambda_t, 0.3);
        assert_eq!(cfg.data.train, Some(PathBuf::from("d")));
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 3\nbatch_size = 8\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &args(&["--train.epochs", "5"])).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (5, 8));
    }

    #[test]
    fn unknown_and_invalid_keys_are_usage_errors() {
        for bad in [
            args(&["--train.epochz", "3"]),
            args(&["--nosuch.key", "1"]),
            args(&["--train.epochs", "0"]),
            args(&["--train.hyperparams.lambda_t", "1"]),
            args(&["train.epochs", "1"]),
            args(&["--train.epochs"]),
        ] {
            assert!(matches!(RunConfig::load(None, &bad), Err(CliError::Usage(_))), "{bad:?}");
        }
    }

    #[test]
    fn best_config_round_trips() {
        let cfg = RunConfig::default();
        let mut t = cfg.train_config();
        t.hyperparams.lambda_t = 1.1;
        t.weight_decay = Some(1e-4);
        t.seed = 42;
        let text = cfg.with_train(&t).unwrap();
        let back = RunConfig::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back.train_config(), t);
    }

    #[test]
    fn grid_sizes() {
        let g = GridSection { search_weight_decay: true, ..Default::default() };
        assert_eq!(g.spec().len(), 7 * 8);
        let g = GridSection { lrs: Some(vec![0.1]), search_lambda_t: true, ..Default::default() };
        assert_eq!(g.spec().len(), 8);
    }
}
