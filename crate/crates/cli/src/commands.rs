use std::path::{Path, PathBuf};

use log::info;
use tes_core::data::{
    few_shot_subsample, long_tail_subsample, noisy_text_proxies, split, synth_generate, DataError, DatasetPaths,
    SynthSpec, TextProxySet,
};
use tes_core::losses::gradcheck::{run_gradcheck, GradCheckConfig};
use tes_core::metrics::{confusion_csv, evaluate_model, EvalResult};
use tes_core::model::{ClassifierInit, ModelDims, ModelSnapshot, ModelState};
use tes_core::optim::{grid_search, train, OptimError, TrainingTrace};
use tes_core::rng::rng_from_seed;
use tes_core::theory::{
    reports_to_csv, run_bound_suite, sandwich_random_draws, verify_anchor_sandwich, verify_backbone_displacement,
    BoundReport, TheoryError,
};
use tes_core::Dataset64;

use crate::config::RunConfig;
use crate::CliError;

const PROXY_FILE: &str = "proxies.tesf";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Invalid(_) | DataError::Label { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn optim_err(e: OptimError) -> CliError {
    match e {
        OptimError::Config(_) | OptimError::Dimension(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn load_dataset(dir: &Path, split: &str) -> Result<Dataset64, CliError> {
    Dataset64::load(&DatasetPaths::in_dir(dir), split).map_err(data_err)
}

/// Train split plus the validation split, if any.
fn load_splits(cfg: &RunConfig) -> Result<(Dataset64, Option<Dataset64>), CliError> {
    let dir = cfg.data.train.as_deref().ok_or_else(|| CliError::Usage("data.train is required".into()))?;
    let full = load_dataset(dir, "train")?;
    if let Some(v) = &cfg.data.val {
        let val = load_dataset(v, "val")?;
        if val.class_names != full.class_names {
            return Err(CliError::Usage("train and val class names differ".into()));
        }
        return Ok((full, Some(val)));
    }
    if cfg.data.val_fraction > 0.0 {
        let (tr, val) = split(&full, cfg.data.val_fraction, cfg.data.split_seed).map_err(data_err)?;
        return Ok((tr, Some(val)));
    }
    Ok((full, None))
}

fn load_proxies(cfg: &RunConfig, train_ds: &Dataset64) -> Result<Option<TextProxySet<f64>>, CliError> {
    let Some(path) = &cfg.data.proxies else {
        return Ok(None);
    };
    let dir = cfg.data.train.as_deref().expect("checked by load_splits");
    let p = TextProxySet::load(path, &DatasetPaths::in_dir(dir).class_names).map_err(data_err)?;
    if p.num_classes() != train_ds.num_classes() {
        return Err(CliError::Usage(format!(
            "{} has {} proxies for {} classes",
            path.display(),
            p.num_classes(),
            train_ds.num_classes()
        )));
    }
    Ok(Some(p))
}

fn model_dims(cfg: &RunConfig, ds: &Dataset64, proxies: Option<&TextProxySet<f64>>) -> ModelDims {
    ModelDims {
        raw_dim: ds.dim(),
        dim: ds.dim(),
        classes: ds.num_classes(),
        hidden_dim: cfg.model.hidden_dim,
        text_dim: proxies.map_or(ds.dim(), |p| p.text_dim()),
    }
}

fn init_model(cfg: &RunConfig, dims: ModelDims, seed: u64) -> Result<ModelState<f64>, CliError> {
    let init = if cfg.model.init_std > 0.0 {
        ClassifierInit::Gaussian { std: cfg.model.init_std }
    } else {
        ClassifierInit::Zeros
    };
    ModelState::init(dims, init, &mut rng_from_seed(seed)).map_err(|e| CliError::Usage(e.to_string()))
}

fn text_check(cfg: &RunConfig) -> Result<(), CliError> {
    let kind = cfg.train.loss_kind;
    if kind.needs_text() && cfg.data.proxies.is_none() {
        return Err(CliError::Usage(format!("loss_kind {} needs data.proxies", kind.name())));
    }
    Ok(())
}

fn write_eval(
    dir: &Path,
    split: &str,
    result: &EvalResult,
    names: &[String],
    final_loss: Option<f64>,
) -> Result<(), CliError> {
    write(&dir.join("confusion.csv"), confusion_csv(result, names).map_err(runtime)?)?;
    let loss = final_loss.map_or_else(String::new, |v| v.to_string());
    let metrics = format!(
        "split,n_eval,top1,mean_per_class,final_train_loss\n{split},{},{},{},{loss}\n",
        result.n_eval, result.top1, result.mean_per_class
    );
    write(&dir.join("metrics.csv"), metrics)?;
    println!("{split}: top1 {:.4} mean_per_class {:.4} (n = {})", result.top1, result.mean_per_class, result.n_eval);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check_paths()?;
    text_check(cfg)?;
    let (train_ds, val_ds) = load_splits(cfg)?;
    let proxies = load_proxies(cfg, &train_ds)?;
    let tc = cfg.train_config();
    let model = init_model(cfg, model_dims(cfg, &train_ds, proxies.as_ref()), tc.seed)?;
    info!("training {} on {} examples for {} epochs", tc.loss_kind.name(), train_ds.len(), tc.epochs);
    let (tuned, trace) = train(&tc, &train_ds, val_ds.as_ref(), model, proxies.as_ref()).map_err(optim_err)?;

    let out = &cfg.output.dir;
    create_dir(out)?;
    tuned.snapshot("final").save(out.join("model.tesm")).map_err(runtime)?;
    trace.save(&out.join("trace.json")).map_err(runtime)?;
    let (eval_ds, split) = match &val_ds {
        Some(v) => (v, "val"),
        None => (&train_ds, "train"),
    };
    let result = evaluate_model(&tuned, eval_ds).map_err(runtime)?;
    write_eval(out, split, &result, &eval_ds.class_names, trace.epoch_loss.last().copied())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check_paths()?;
    let path = cfg.eval.model.as_deref().ok_or_else(|| CliError::Usage("eval.model is required".into()))?;
    let snap = ModelSnapshot::load(path).map_err(runtime)?;
    let model = ModelState::<f64>::from_snapshot(&snap).map_err(runtime)?;
    let (dir, split) = match (&cfg.data.val, &cfg.data.train) {
        (Some(v), _) => (v, "val"),
        (None, Some(t)) => (t, "train"),
        (None, None) => return Err(CliError::Usage("eval needs data.val or data.train".into())),
    };
    let ds = load_dataset(dir, split)?;
    if ds.dim() != model.dims().raw_dim || ds.num_classes() != model.dims().classes {
        return Err(CliError::Usage(format!(
            "model expects {} features and {} classes, data has {} and {}",
            model.dims().raw_dim,
            model.dims().classes,
            ds.dim(),
            ds.num_classes()
        )));
    }
    let result = evaluate_model(&model, &ds).map_err(runtime)?;
    create_dir(&cfg.output.dir)?;
    write_eval(&cfg.output.dir, split, &result, &ds.class_names, None)
}

pub fn cmd_grid(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check_paths()?;
    text_check(cfg)?;
    let (train_ds, val_ds) = load_splits(cfg)?;
    let val_ds = val_ds.filter(|v| !v.is_empty()).ok_or_else(|| {
        CliError::Usage("grid search needs a non-empty validation split (data.val or data.val_fraction)".into())
    })?;
    let proxies = load_proxies(cfg, &train_ds)?;
    let spec = cfg.grid.spec();
    let dims = model_dims(cfg, &train_ds, proxies.as_ref());
    info!("grid of {} cells", spec.len());
    let factory = |seed| init_model(cfg, dims, seed).map_err(|e| OptimError::Config(e.to_string()));
    let result =
        grid_search(&cfg.train_config(), &spec, &train_ds, &val_ds, factory, proxies.as_ref()).map_err(optim_err)?;

    create_dir(&cfg.output.dir)?;
    write(&cfg.output.dir.join("grid.csv"), result.to_csv().map_err(runtime)?)?;
    write(&cfg.output.dir.join("best.toml"), cfg.with_train(&result.best)?)?;
    let best = &result.cells[result.best_index];
    println!(
        "best cell {} of {}: lr {} weight_decay {} lambda_t {} val top1 {:.4}",
        best.index,
        result.cells.len(),
        best.lr,
        best.weight_decay.map_or_else(|| "off".into(), |v| v.to_string()),
        best.lambda_t,
        best.val_accuracy
    );
    Ok(())
}

fn trace_reports(cfg: &RunConfig, path: &Path) -> Result<Vec<BoundReport>, CliError> {
    let trace = TrainingTrace::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let displacement = match verify_backbone_displacement(&trace) {
        Ok(r) => r,
        Err(TheoryError::Precondition(why)) => {
            BoundReport::new("backbone_displacement", f64::NAN, f64::NAN).not_applicable(&why)
        }
        Err(e) => return Err(runtime(e)),
    };
    let mut reports = vec![displacement];
    if let Some(dir) = &cfg.data.train {
        let ds = load_dataset(dir, "train")?;
        let model = ModelState::<f64>::from_snapshot(&trace.final_snapshot).map_err(runtime)?;
        let x = model.adapter.forward(&ds.features).map_err(|e| CliError::Usage(e.to_string()))?;
        reports.push(verify_anchor_sandwich(&x, &model.classifier.weights, &ds.labels).map_err(runtime)?);
    }
    Ok(reports)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<bool, CliError> {
    cfg.check_paths()?;
    let v = &cfg.verify;
    let mut reports = Vec::new();
    if let Some(path) = &v.trace {
        reports.extend(trace_reports(cfg, path)?);
    } else if v.suite {
        let ds = match &cfg.data.train {
            Some(dir) => load_dataset(dir, "train")?,
            None => synth_generate(&checked_synth(&cfg.synth)?).map_err(data_err)?.0,
        };
        info!("bound suite on {} examples, {} classes", ds.len(), ds.num_classes());
        let suite = run_bound_suite(&ds, &cfg.bounds).map_err(|e| match e {
            TheoryError::Invalid(m) => CliError::Usage(m),
            other => runtime(other),
        })?;
        reports.extend(suite.reports);
    }
    if v.random_draws > 0 {
        let r = sandwich_random_draws(v.random_draws, v.draw_examples, v.draw_dim, v.draw_classes, cfg.bounds.seed)
            .map_err(runtime)?;
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(CliError::Usage("nothing to verify: set verify.trace, verify.suite or verify.random_draws".into()));
    }
    create_dir(&cfg.output.dir)?;
    write(&cfg.output.dir.join("bounds.csv"), reports_to_csv(&reports).map_err(runtime)?)?;
    for r in &reports {
        let status = match (r.applicable, r.holds) {
            (false, _) => "n/a",
            (true, true) => "holds",
            (true, false) => "VIOLATED",
        };
        println!("{:<28} {status:<8} lhs {:.6e} rhs {:.6e}", r.name, r.lhs, r.rhs);
    }
    Ok(reports.iter().all(|r| !r.violated()))
}

pub struct GradcheckArgs {
    pub points: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub inject_sign_flip: bool,
    pub out: Option<PathBuf>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool, CliError> {
    if args.points == 0 {
        return Err(CliError::Usage("points must be >= 1".into()));
    }
    let cfg = GradCheckConfig {
        points: args.points,
        seed: args.seed,
        tolerance: args.tolerance,
        inject_sign_flip: args.inject_sign_flip,
        ..Default::default()
    };
    let rows = run_gradcheck(&cfg).map_err(runtime)?;
    let mut csv = String::from("kind,point,max_rel_error,max_abs_error,analytic_norm,numeric_norm,passed\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:e},{:e},{},{},{}\n",
            r.kind.name(),
            r.point,
            r.report.max_rel_error,
            r.report.max_abs_error,
            r.report.analytic_norm,
            r.report.numeric_norm,
            r.passed
        ));
    }
    match &args.out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    eprintln!("{} rows, {failed} above tolerance {}", rows.len(), args.tolerance);
    Ok(failed == 0)
}

fn checked_synth(spec: &SynthSpec) -> Result<SynthSpec, CliError> {
    if spec.classes < 2 {
        return Err(CliError::Usage(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.dim < spec.classes {
        return Err(CliError::Usage(format!("dim must be >= classes, got {} < {}", spec.dim, spec.classes)));
    }
    if spec.n_per_class == 0 {
        return Err(CliError::Usage("n_per_class must be >= 1".into()));
    }
    if !(spec.margin >= 0.0) || !spec.margin.is_finite() {
        return Err(CliError::Usage(format!("margin must be >= 0, got {}", spec.margin)));
    }
    Ok(*spec)
}

/// Writes the dataset files and `proxies.tesf`, the class directions
/// perturbed by `proxy_noise` (0 keeps them exact).
pub fn cmd_synth(spec: &SynthSpec, proxy_noise: f64, out: &Path) -> Result<(), CliError> {
    let spec = checked_synth(spec)?;
    if !(proxy_noise >= 0.0) || !proxy_noise.is_finite() {
        return Err(CliError::Usage(format!("proxy noise must be >= 0, got {proxy_noise}")));
    }
    let (ds, directions) = synth_generate(&spec).map_err(data_err)?;
    let z = if proxy_noise > 0.0 { noisy_text_proxies(&directions, proxy_noise, spec.seed) } else { directions };
    create_dir(out)?;
    let paths = DatasetPaths::in_dir(out);
    ds.save(&paths).map_err(runtime)?;
    let proxies = TextProxySet::new(z, ds.class_names.clone()).map_err(data_err)?;
    proxies.save(&out.join(PROXY_FILE), &paths.class_names).map_err(runtime)?;
    println!("{} examples, {} classes, dim {} -> {}", ds.len(), ds.num_classes(), ds.dim(), out.display());
    Ok(())
}

fn save_subset(input: &Path, out: &Path, ds: &Dataset64) -> Result<(), CliError> {
    create_dir(out)?;
    ds.save(&DatasetPaths::in_dir(out)).map_err(runtime)?;
    let proxies = input.join(PROXY_FILE);
    if proxies.exists() {
        std::fs::copy(&proxies, out.join(PROXY_FILE)).map_err(runtime)?;
    }
    println!("class counts {:?} -> {}", ds.class_counts(), out.display());
    Ok(())
}

pub fn cmd_fewshot(input: &Path, out: &Path, fraction: f64, min_per_class: usize, seed: u64) -> Result<(), CliError> {
    let ds = load_dataset(input, "train")?;
    let sub = few_shot_subsample(&ds, fraction, min_per_class, seed).map_err(data_err)?;
    save_subset(input, out, &sub)
}

pub fn cmd_longtail(input: &Path, out: &Path, ratio: f64, seed: u64) -> Result<(), CliError> {
    let ds = load_dataset(input, "train")?;
    let sub = long_tail_subsample(&ds, ratio, seed).map_err(data_err)?;
    save_subset(input, out, &sub)
}
