use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, TextProxySet};
use crate::metrics::evaluate_model;
use crate::model::ModelState;
use crate::rng::derive_seed;
use crate::Scalar;

use super::{train, OptimError, OptimResult, TrainConfig};

/// `10^(−4 + 0.5k)`, k = 0..6.
pub fn lr_grid() -> Vec<f64> {
    (0..7).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

/// `10^(−6 + 0.5k)`, k = 0..6, plus "off".
pub fn weight_decay_grid() -> Vec<Option<f64>> {
    (0..7).map(|k| Some(10f64.powf(-6.0 + 0.5 * k as f64))).chain([None]).collect()
}

/// 0.1, 0.3, ..., 1.5.
pub fn lambda_t_grid() -> Vec<f64> {
    (0..8).map(|k| (1 + 2 * k) as f64 / 10.0).collect()
}

/// Axes of the search. The learning rate is applied to every parameter
/// group; `None` in `lambda_ts` keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<Option<f64>>,
    pub lambda_ts: Vec<Option<f64>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lrs: lr_grid(), weight_decays: vec![None], lambda_ts: vec![None] }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.lrs.len() * self.weight_decays.len() * self.lambda_ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Config of cell `index` (learning rate outermost, λ_T innermost).
    pub fn cell_config(&self, base: &TrainConfig, index: usize) -> TrainConfig {
        let n_lt = self.lambda_ts.len();
        let n_wd = self.weight_decays.len();
        let lr = self.lrs[index / (n_wd * n_lt)];
        let wd = self.weight_decays[(index / n_lt) % n_wd];
        let lt = self.lambda_ts[index % n_lt];
        let mut cfg = *base;
        cfg.eta0_backbone = lr;
        cfg.eta0_classifier = lr;
        cfg.eta0_head = lr;
        cfg.weight_decay = wd;
        if let Some(v) = lt {
            cfg.hyperparams.lambda_t = v;
        }
        cfg.seed = derive_seed(base.seed, index as u64);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub lr: f64,
    pub weight_decay: Option<f64>,
    pub lambda_t: f64,
    pub seed: u64,
    pub final_train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_index: usize,
    pub best: TrainConfig,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn to_csv(&self) -> OptimResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "lr", "weight_decay", "lambda_t", "seed", "final_train_loss", "val_accuracy"])?;
        for c in &self.cells {
            w.write_record([
                c.index.to_string(),
                c.lr.to_string(),
                c.weight_decay.map_or_else(|| "off".to_string(), |v| v.to_string()),
                c.lambda_t.to_string(),
                c.seed.to_string(),
                c.final_train_loss.to_string(),
                c.val_accuracy.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| OptimError::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Trains every cell (in parallel, each with its own model from
/// `model_factory(cell seed)`) and picks the highest validation accuracy;
/// ties go to the smaller learning rate, then the lower index.
pub fn grid_search<T, F>(
    base: &TrainConfig,
    spec: &GridSpec,
    train_ds: &FeatureDataset<T>,
    val_ds: &FeatureDataset<T>,
    model_factory: F,
    proxies: Option<&TextProxySet<T>>,
) -> OptimResult<GridResult>
where
    T: Scalar,
    F: Fn(u64) -> OptimResult<ModelState<T>> + Sync,
{
    if val_ds.is_empty() {
        return Err(OptimError::Config("grid search needs a non-empty validation set".into()));
    }
    if spec.is_empty() {
        return Err(OptimError::Config("grid has no cells".into()));
    }
    let cells: Vec<GridCell> = (0..spec.len())
        .into_par_iter()
        .map(|index| {
            let cfg = spec.cell_config(base, index);
            let (model, trace) = train(&cfg, train_ds, None, model_factory(cfg.seed)?, proxies)?;
            let acc = evaluate_model(&model, val_ds).map_err(|e| OptimError::Config(e.to_string()))?.top1;
            Ok(GridCell {
                index,
                lr: cfg.eta0_classifier,
                weight_decay: cfg.weight_decay,
                lambda_t: cfg.hyperparams.lambda_t,
                seed: cfg.seed,
                final_train_loss: *trace.epoch_loss.last().expect("at least one epoch"),
                val_accuracy: acc,
            })
        })
        .collect::<OptimResult<_>>()?;
    let best = cells
        .iter()
        .reduce(|a, b| {
            let better = b.val_accuracy > a.val_accuracy || (b.val_accuracy == a.val_accuracy && b.lr < a.lr);
            if better {
                b
            } else {
                a
            }
        })
        .expect("non-empty grid");
    Ok(GridResult { best_index: best.index, best: spec.cell_config(base, best.index), cells })
}
