use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, TextProxySet};
use crate::losses::{objective, TextReference};
use crate::metrics::evaluate_model;
use crate::model::{ModelSnapshot, ModelState, ParamGroup};
use crate::rng::rng_from_seed;
use crate::Scalar;

use super::{cosine_lr, sgd_step, update_direction_norm, OptimError, OptimResult, TrainConfig};

/// Per-step schedule and update-direction norms of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: ParamGroup,
    pub eta0: f64,
    pub weight_decay: f64,
    pub lr: Vec<f64>,
    /// `‖g + wd·p‖_F` at each step.
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub config: TrainConfig,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    pub step_loss: Vec<f64>,
    pub groups: Vec<GroupTrace>,
    pub epoch_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<Option<f64>>,
    pub initial: ModelSnapshot,
    #[serde(rename = "final")]
    pub final_snapshot: ModelSnapshot,
    pub periodic: Vec<ModelSnapshot>,
}

impl TrainingTrace {
    pub fn group(&self, g: ParamGroup) -> &GroupTrace {
        self.groups.iter().find(|t| t.group == g).expect("every group is traced")
    }

    /// `Σₜ ηₜ` for one group.
    pub fn lr_sum(&self, g: ParamGroup) -> f64 {
        self.group(g).lr.iter().sum()
    }

    /// `maxₜ ‖∇‖` for one group.
    pub fn max_grad_norm(&self, g: ParamGroup) -> f64 {
        self.group(g).grad_norm.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> OptimResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| OptimError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> OptimResult<Self> {
        serde_json::from_str(text).map_err(|e| OptimError::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> OptimResult<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| OptimError::Data(crate::data::DataError::io(path, e)))
    }

    pub fn load(path: &Path) -> OptimResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OptimError::Data(crate::data::DataError::io(path, e)))?;
        Self::from_json(&text)
    }
}

fn check_dims<T: Scalar>(model: &ModelState<T>, ds: &FeatureDataset<T>, what: &str) -> OptimResult<()> {
    let dims = model.dims();
    if ds.dim() != dims.raw_dim || ds.num_classes() != dims.classes {
        return Err(OptimError::Dimension(format!(
            "{what} set has d = {}, C = {}; model expects d = {}, C = {}",
            ds.dim(),
            ds.num_classes(),
            dims.raw_dim,
            dims.classes
        )));
    }
    Ok(())
}

/// Trains `model` on `train_ds`. `proxies` is required when the loss uses text.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_ds: &FeatureDataset<T>,
    val_ds: Option<&FeatureDataset<T>>,
    model: ModelState<T>,
    proxies: Option<&TextProxySet<T>>,
) -> OptimResult<(ModelState<T>, TrainingTrace)> {
    let text = match proxies {
        Some(p) if config.loss_kind.needs_text() => {
            let dims = model.dims();
            if p.num_classes() != dims.classes || p.text_dim() != dims.text_dim {
                return Err(OptimError::Dimension(format!(
                    "proxies are {} x {}; model expects text_dim = {}, C = {}",
                    p.text_dim(),
                    p.num_classes(),
                    dims.text_dim,
                    dims.classes
                )));
            }
            Some(TextReference::new(p.z.clone(), T::of(config.hyperparams.tau_text))?)
        }
        _ => None,
    };
    train_with_reference(config, train_ds, val_ds, model, text.as_ref())
}

/// As [`train`], with the text reference already built.
pub fn train_with_reference<T: Scalar>(
    config: &TrainConfig,
    train_ds: &FeatureDataset<T>,
    val_ds: Option<&FeatureDataset<T>>,
    mut model: ModelState<T>,
    text: Option<&TextReference<T>>,
) -> OptimResult<(ModelState<T>, TrainingTrace)> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(OptimError::EmptyDataset);
    }
    check_dims(&model, train_ds, "training")?;
    if let Some(v) = val_ds {
        check_dims(&model, v, "validation")?;
    }
    if config.loss_kind.needs_text() && text.is_none() {
        return Err(crate::losses::LossError::MissingTextReference(config.loss_kind.name()).into());
    }

    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut rng = rng_from_seed(config.seed);
    let mut velocity: Vec<Vec<T>> = ParamGroup::ALL.iter().map(|&g| vec![T::zero(); model.num_params(g)]).collect();
    let mut groups: Vec<GroupTrace> = ParamGroup::ALL
        .iter()
        .map(|&g| GroupTrace {
            group: g,
            eta0: config.eta0(g),
            weight_decay: config.weight_decay_for(g),
            lr: Vec::with_capacity(total),
            grad_norm: Vec::with_capacity(total),
        })
        .collect();
    let initial = model.snapshot("initial");
    let mut step_loss = Vec::with_capacity(total);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_val_accuracy = Vec::with_capacity(config.epochs);
    let mut periodic = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = train_ds.features.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_ds.labels[i]).collect();
            let out = objective(config.loss_kind, &model, &x, &labels, text, &config.hyperparams)?;
            let value = out.value.as_f64();
            if !value.is_finite() {
                return Err(OptimError::NonFiniteLoss { step: t });
            }
            step_loss.push(value);
            loss_sum += value * batch.len() as f64;
            for (gi, &g) in ParamGroup::ALL.iter().enumerate() {
                let frozen = config.freeze_backbone && g == ParamGroup::Adapter;
                let lr = if frozen { 0.0 } else { cosine_lr(t, total, config.eta0(g))? };
                let wd = config.weight_decay_for(g);
                let mut params = model.params(g);
                let grads = out.grads.group(g);
                groups[gi].grad_norm.push(update_direction_norm(&params, grads, wd));
                groups[gi].lr.push(lr);
                if frozen {
                    continue;
                }
                sgd_step(&mut params, grads, &mut velocity[gi], lr, config.momentum, wd)
                    .map_err(|norm| OptimError::NonFiniteGradient { step: t, group: g.name(), norm })?;
                model.set_params(g, &params)?;
            }
            t += 1;
        }
        epoch_loss.push(loss_sum / n as f64);
        let acc = match val_ds {
            Some(v) if !v.is_empty() => {
                Some(evaluate_model(&model, v).map_err(|e| OptimError::Config(e.to_string()))?.top1)
            }
            _ => None,
        };
        epoch_val_accuracy.push(acc);
        log::debug!("epoch {} loss {:.6} val {:?}", epoch + 1, loss_sum / n as f64, acc);
        if config.snapshot_every.is_some_and(|k| (epoch + 1) % k == 0) {
            periodic.push(model.snapshot(&format!("epoch_{}", epoch + 1)));
        }
    }

    let final_snapshot = model.snapshot("final");
    let trace = TrainingTrace {
        config: *config,
        total_steps: total,
        steps_per_epoch,
        step_loss,
        groups,
        epoch_loss,
        epoch_val_accuracy,
        initial,
        final_snapshot,
        periodic,
    };
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{noisy_text_proxies, synth_generate, SynthSpec};
    use crate::losses::{Hyperparams, LossKind};
    use crate::model::{parameter_distance, ClassifierInit, DistanceGroup, ModelDims};

    fn setup(spec: SynthSpec) -> (FeatureDataset<f64>, TextProxySet<f64>, ModelState<f64>) {
        let (ds, p) = synth_generate(&spec).unwrap();
        let z = noisy_text_proxies(&p, 0.3, spec.seed + 1);
        let names = ds.class_names.clone();
        let dims =
            ModelDims { raw_dim: spec.dim, dim: spec.dim, classes: spec.classes, hidden_dim: 16, text_dim: spec.dim };
        let model = ModelState::init(dims, ClassifierInit::Zeros, &mut rng_from_seed(spec.seed)).unwrap();
        (ds, TextProxySet::new(z, names).unwrap(), model)
    }

    #[test]
    fn ce_fits_separable_data() {
        let spec = SynthSpec { seed: 1, classes: 3, dim: 8, n_per_class: 100, margin: 6.0 };
        let (ds, _, model) = setup(spec);
        let cfg = TrainConfig { eta0_classifier: 0.1, ..Default::default() };
        let (model, trace) = train(&cfg, &ds, Some(&ds), model, None).unwrap();
        assert!(evaluate_model(&model, &ds).unwrap().top1 >= 0.99);
        assert_eq!(trace.total_steps, 100 * 2);
        assert_eq!(trace.step_loss.len(), trace.total_steps);
        assert_eq!(trace.epoch_val_accuracy.len(), 100);
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = SynthSpec { seed: 2, classes: 4, dim: 6, n_per_class: 30, margin: 2.0 };
        let (ds, proxies, model) = setup(spec);
        let cfg = TrainConfig { epochs: 5, batch_size: 16, loss_kind: LossKind::Tes, ..Default::default() };
        let (_, a) = train(&cfg, &ds, None, model.clone(), Some(&proxies)).unwrap();
        let (_, b) = train(&cfg, &ds, None, model, Some(&proxies)).unwrap();
        assert_eq!(a.final_snapshot.to_bytes(), b.final_snapshot.to_bytes());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(TrainingTrace::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn tes_without_text_terms_reproduces_ce() {
        let spec = SynthSpec { seed: 3, classes: 3, dim: 5, n_per_class: 20, margin: 1.5 };
        let (ds, proxies, model) = setup(spec);
        let base = TrainConfig { epochs: 4, batch_size: 7, ..Default::default() };
        let hp = Hyperparams { lambda_v: 0.0, lambda_t: 0.0, ..Default::default() };
        let tes = TrainConfig { loss_kind: LossKind::Tes, hyperparams: hp, ..base };
        let (_, a) = train(&base, &ds, None, model.clone(), None).unwrap();
        let (_, b) = train(&tes, &ds, None, model, Some(&proxies)).unwrap();
        for (x, y) in a.step_loss.iter().zip(&b.step_loss) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            for (x, y) in ga.grad_norm.iter().zip(&gb.grad_norm) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let d = parameter_distance(&a.final_snapshot, &b.final_snapshot, DistanceGroup::All).unwrap();
        assert!(d <= 1e-12);
    }

    #[test]
    fn displacement_within_lr_sum_times_max_norm() {
        let spec = SynthSpec { seed: 4, classes: 3, dim: 6, n_per_class: 25, margin: 1.0 };
        let (ds, proxies, _) = setup(spec);
        // normalized classifier columns need a non-zero start
        let dims = ModelDims { raw_dim: 6, dim: 6, classes: 3, hidden_dim: 16, text_dim: 6 };
        let model = ModelState::init(dims, ClassifierInit::Gaussian { std: 0.1 }, &mut rng_from_seed(4)).unwrap();
        for (kind, eta) in [(LossKind::Ce, 1e-1), (LossKind::Tes, 1e-2), (LossKind::TesC, 1e-3)] {
            let cfg = TrainConfig {
                epochs: 6,
                batch_size: 10,
                momentum: 0.0,
                eta0_backbone: eta,
                loss_kind: kind,
                weight_decay: Some(1e-3),
                ..Default::default()
            };
            let (_, trace) = train(&cfg, &ds, None, model.clone(), Some(&proxies)).unwrap();
            let moved = parameter_distance(&trace.initial, &trace.final_snapshot, DistanceGroup::Adapter).unwrap();
            let bound = trace.lr_sum(ParamGroup::Adapter) * trace.max_grad_norm(ParamGroup::Adapter);
            assert!(moved > 0.0 && moved <= bound, "{moved} > {bound}");
        }
    }

    #[test]
    fn schedule_recorded_per_group() {
        let spec = SynthSpec { seed: 5, classes: 2, dim: 3, n_per_class: 5, margin: 1.0 };
        let (ds, _, model) = setup(spec);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, freeze_backbone: true, ..Default::default() };
        let (m, trace) = train(&cfg, &ds, None, model.clone(), None).unwrap();
        assert_eq!(trace.total_steps, 9);
        let clf = trace.group(ParamGroup::Classifier);
        for (t, lr) in clf.lr.iter().enumerate() {
            assert_eq!(*lr, cosine_lr(t, 9, cfg.eta0_classifier).unwrap());
        }
        assert!(trace.group(ParamGroup::Adapter).lr.iter().all(|v| *v == 0.0));
        assert_eq!(m.adapter, model.adapter);
    }

    #[test]
    fn input_errors() {
        let spec = SynthSpec { seed: 6, classes: 2, dim: 3, n_per_class: 5, margin: 1.0 };
        let (ds, _, model) = setup(spec);
        let tes = TrainConfig { loss_kind: LossKind::Tes, epochs: 1, ..Default::default() };
        assert!(matches!(
            train(&tes, &ds, None, model.clone(), None),
            Err(OptimError::Loss(crate::losses::LossError::MissingTextReference(_)))
        ));
        let empty = ds.subset(&[], "train");
        assert!(matches!(
            train(&TrainConfig::default(), &empty, None, model.clone(), None),
            Err(OptimError::EmptyDataset)
        ));
        let mut huge = model.clone();
        huge.classifier.weights = huge.classifier.weights.map(|_| 1e308);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train(&cfg, &ds, None, huge, None),
            Err(OptimError::NonFiniteLoss { .. }
                | OptimError::NonFiniteGradient { .. }
                | OptimError::Nd(_)
                | OptimError::Loss(_))
        ));
    }
}
