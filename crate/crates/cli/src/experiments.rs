//! The three experiments (held-out ELBO table, 1-D regression, image
//! completion) and a generic training command.
//!
//! Every random draw is addressed by a seed derived from the configured seed
//! and a fixed stream key, so each run is a pure function of its config.

use std::path::{Path, PathBuf};

use abnn::bnn::{BnnConfig, BnnModel, Likelihood, Posterior, PosteriorKind, PosteriorOptions};
use abnn::data::{
    cubic_gap_task, gp_sample_task, linear_interp_baseline, load_idx, make_image_task, ImageTask, Task,
};
use abnn::noise::{derive_seed, rng_for};
use abnn::np::{np_log_likelihood, Cnp, ConvCnp1d, ConvCnp1dConfig, ConvCnp2d, ConvCnp2dConfig, NpPrediction};
use abnn::objectives::{context_target_split, elbo_objective, npml_objective, objective};
use abnn::{meta_train, EpsSource, MetaModel, ObjectiveKind, ParamStore, Tape, Tensor, TrainingRun};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{EvalTask, Experiment, ExperimentConfig, ModelName};
use crate::digits::{downsample, synthetic_idx};
use crate::error::{write_file, CliError, Result};
use crate::metrics::MetricsRecord;
use crate::svg::{write_panels, write_plot, Band, Panel, Plot, Series};

// stream keys for derive_seed
const TEST_DATA: u64 = 1;
const TRAIN_DATA: u64 = 2;
const REPETITION: u64 = 3;
const INIT: u64 = 4;
const TRAIN: u64 = 5;
const EVAL: u64 = 6;
const EVAL_TASK: u64 = 7;
const IMAGES: u64 = 8;

/// Input space a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Regression,
    Image { height: usize, width: usize },
}

/// Parameters, model structure and the history that produced them.
#[derive(Clone, Debug)]
pub struct Trained {
    pub store: ParamStore<f64>,
    pub model: MetaModel,
    pub run: TrainingRun,
}

/// Identifier stored in checkpoints: the experiment and model names.
pub fn model_id(cfg: &ExperimentConfig) -> String {
    let exp = serde_json::to_value(cfg.experiment).expect("unit enum");
    format!("{}/{}", exp.as_str().expect("string tag"), cfg.model)
}

fn posterior_kind(model: ModelName) -> Result<PosteriorKind> {
    Ok(match model {
        ModelName::Mfvi => PosteriorKind::Mfvi,
        ModelName::Amfvi => PosteriorKind::Amfvi,
        ModelName::Povi => PosteriorKind::Povi,
        ModelName::Apovi => PosteriorKind::Apovi,
        other => return Err(CliError::Config(format!("{other} is not a Bayesian network"))),
    })
}

/// Fresh parameters for the configured model.
pub fn build_model(cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<(ParamStore<f64>, MetaModel)> {
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, &[INIT]);
    let act = cfg.activation.into();
    let model = match (cfg.model, domain) {
        (ModelName::Cnp, Domain::Regression) => {
            let r_dim = cfg.hidden.last().copied().unwrap_or(32);
            MetaModel::Cnp(Cnp::new(&mut store, "cnp", 1, 1, &cfg.hidden, r_dim, act, &mut rng))
        }
        (ModelName::Convcnp, Domain::Regression) => {
            let c = &cfg.convcnp;
            let conv = ConvCnp1dConfig {
                points_per_unit: c.points_per_unit,
                init_lengthscale: c.lengthscale,
                channels: c.channels.clone(),
                kernel: c.kernel,
                embedding: c.embedding,
                ..ConvCnp1dConfig::default()
            };
            MetaModel::ConvCnp1d(ConvCnp1d::new(&mut store, "convcnp", conv, 1, &mut rng)?)
        }
        (ModelName::Convcnp, Domain::Image { height, width }) => {
            let conv = ConvCnp2dConfig {
                channels: cfg.convcnp.grid_channels,
                head_hidden: cfg.convcnp.head_hidden,
                ..ConvCnp2dConfig::default()
            };
            MetaModel::ConvCnp2d { model: ConvCnp2d::new(&mut store, "convcnp", conv, 1, &mut rng)?, height, width }
        }
        (ModelName::Lininterp, _) | (ModelName::Cnp, Domain::Image { .. }) => {
            return Err(CliError::Config(format!("{} has no trainable form for this experiment", cfg.model)))
        }
        (m, domain) => {
            let (input, likelihood) = match domain {
                Domain::Regression => (1, Likelihood::Gaussian { noise_var: cfg.noise_var, trainable: cfg.train_noise }),
                Domain::Image { .. } => (2, Likelihood::Bernoulli),
            };
            let mut widths = vec![input];
            widths.extend(&cfg.hidden);
            widths.push(1);
            let bnn = BnnConfig { widths, activation: act, prior_var: cfg.prior_var, likelihood };
            let opts = PosteriorOptions {
                inference_hidden: cfg.inference_hidden.clone(),
                inference_activation: act,
                num_inducing: cfg.num_inducing,
                ..PosteriorOptions::default()
            };
            MetaModel::Bnn(BnnModel::new(&mut store, posterior_kind(m)?, bnn, &opts, &mut rng)?)
        }
    };
    Ok((store, model))
}

/// What a model is meta-trained on.
#[derive(Clone, Copy, Debug)]
pub enum TrainingSet<'a> {
    /// Regression tasks; NPML/NPVI split each into context and target afresh
    /// every epoch.
    Tasks(&'a [Task<f64>]),
    /// Images masked with `p ~ U[p_range]`: once before training starts, or
    /// afresh every epoch when `resample` is set.
    Images { images: &'a [Tensor<f64>], p_range: [f64; 2], binarise: bool, resample: bool },
}

impl TrainingSet<'_> {
    fn len(&self) -> usize {
        match self {
            Self::Tasks(t) => t.len(),
            Self::Images { images, .. } => images.len(),
        }
    }
}

/// Meta-trains `model` in place. Zero epochs leaves it untouched.
pub fn train_model(
    cfg: &ExperimentConfig,
    store: &mut ParamStore<f64>,
    model: &MetaModel,
    set: TrainingSet<'_>,
    seed: u64,
) -> Result<TrainingRun> {
    if cfg.train_section().max_epochs == 0 {
        return Ok(TrainingRun::default());
    }
    let kind: ObjectiveKind = cfg.objective().into();
    let samples = cfg.mc_samples;
    let masked: Vec<ImageTask<f64>> = match set {
        TrainingSet::Tasks(_) => Vec::new(),
        TrainingSet::Images { resample: true, .. } => Vec::new(),
        TrainingSet::Images { images, p_range, binarise, .. } => images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = rng_for(seed, &[TRAIN_DATA, i as u64]);
                let p = rng.random_range(p_range[0]..=p_range[1]);
                make_image_task(img, p, binarise, &mut rng)
            })
            .collect::<abnn::Result<_>>()?,
    };
    let run = meta_train(store, set.len(), &cfg.train_config(seed), |b, i, s| {
        let mut rng = rng_for(s, &[0]);
        let eps = EpsSource::new(derive_seed(s, &[1]));
        match set {
            TrainingSet::Tasks(tasks) => {
                let task = &tasks[i];
                if kind == ObjectiveKind::Elbo {
                    objective(b, model, kind, samples, task, task, eps)
                } else {
                    let (context, target) = context_target_split(task, &mut rng);
                    objective(b, model, kind, samples, &context, &target, eps)
                }
            }
            TrainingSet::Images { images, p_range, binarise, resample: true } => {
                let p = rng.random_range(p_range[0]..=p_range[1]);
                let task = make_image_task(&images[i], p, binarise, &mut rng)?.task;
                objective(b, model, kind, samples, &task.context(), &task, eps)
            }
            TrainingSet::Images { .. } => {
                let task = &masked[i].task;
                objective(b, model, kind, samples, &task.context(), task, eps)
            }
        }
    })?;
    Ok(run)
}

/// Builds, then trains or restores from the configured checkpoint.
pub fn prepare_model(cfg: &ExperimentConfig, domain: Domain, set: TrainingSet<'_>, seed: u64) -> Result<Trained> {
    let (mut store, model) = build_model(cfg, domain, seed)?;
    let run = match &cfg.checkpoint {
        Some(path) => {
            load_checkpoint(path)?.restore_into(&model_id(cfg), &mut store)?;
            TrainingRun::default()
        }
        None => train_model(cfg, &mut store, &model, set, derive_seed(seed, &[TRAIN]))?,
    };
    Ok(Trained { store, model, run })
}

/// `count` GP-prior tasks drawn from the configured kernel.
pub fn gp_tasks(cfg: &ExperimentConfig, count: usize, seed: u64) -> Result<Vec<Task<f64>>> {
    let spec = cfg.data.kernel.spec()?;
    let [lo, hi] = cfg.data.n_range;
    let interval = (cfg.data.interval[0], cfg.data.interval[1]);
    (0..count)
        .map(|t| Ok(gp_sample_task(&spec, (lo, hi), interval, cfg.data.noise_sd, &mut rng_for(seed, &[t as u64]))?))
        .collect()
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), cfg.to_json().as_bytes())
}

fn write_history(run: &TrainingRun, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        objective: f64,
        smoothed: f64,
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for (epoch, (&objective, &smoothed)) in run.raw.iter().zip(&run.smoothed).enumerate() {
        w.serialize(Row { epoch, objective, smoothed })?;
    }
    w.flush()?;
    Ok(())
}

fn bnn(model: &MetaModel) -> Result<&BnnModel> {
    match model {
        MetaModel::Bnn(m) => Ok(m),
        other => Err(CliError::Config(format!("{} is not a Bayesian network", other.name()))),
    }
}

/// Monte Carlo ELBO of `task` under trained parameters.
pub fn evaluate_elbo(trained: &Trained, task: &Task<f64>, samples: usize, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let b = trained.store.bind_frozen(&tape);
    Ok(elbo_objective(&b, bnn(&trained.model)?, task, samples, EpsSource::new(seed))?.item())
}

/// Held-out ELBO of a POVI or APOVI network.
///
/// POVI, and APOVI with `meta_size = 0`, are trained on each test task
/// separately. Otherwise APOVI is trained once on `meta_size` GP tasks and
/// evaluated one-shot on every test task. Values are total ELBOs per task.
pub fn run_elbo_table(cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    cfg.validate()?;
    if cfg.checkpoint.is_some() {
        return Err(CliError::Config("the ELBO table always trains from scratch".into()));
    }
    prepare_out(cfg)?;
    let test = gp_tasks(cfg, cfg.data.test_tasks, derive_seed(cfg.seed, &[TEST_DATA]))?;
    let group = match cfg.model {
        ModelName::Povi => "povi".to_string(),
        _ => format!("apovi_meta{}", cfg.meta_size),
    };
    let mut rec = MetricsRecord::new("elbo");
    for rep in 0..cfg.repetitions {
        let rs = derive_seed(cfg.seed, &[REPETITION, rep as u64]);
        let ctx = |e: CliError, what: &str| e.in_run(format!("{group} repetition {rep}, {what}"));
        if cfg.model == ModelName::Povi || cfg.meta_size == 0 {
            for (t, task) in test.iter().enumerate() {
                let seed = derive_seed(rs, &[t as u64]);
                let (mut store, model) = build_model(cfg, Domain::Regression, seed).map_err(|e| ctx(e, "build"))?;
                if let MetaModel::Bnn(BnnModel { posterior: Posterior::Povi(p), .. }) = &model {
                    p.init_from_task(&mut store, task)?;
                }
                let run = train_model(cfg, &mut store, &model, TrainingSet::Tasks(std::slice::from_ref(task)), derive_seed(seed, &[TRAIN]))
                    .map_err(|e| ctx(e, &format!("test task {t}")))?;
                let trained = Trained { store, model, run };
                rec.push(&group, rep, t, evaluate_elbo(&trained, task, cfg.eval_samples, derive_seed(rs, &[EVAL, t as u64]))?);
            }
        } else {
            let train = gp_tasks(cfg, cfg.meta_size, derive_seed(rs, &[TRAIN_DATA]))?;
            let trained = prepare_model(cfg, Domain::Regression, TrainingSet::Tasks(&train), rs).map_err(|e| ctx(e, "training"))?;
            for (t, task) in test.iter().enumerate() {
                rec.push(&group, rep, t, evaluate_elbo(&trained, task, cfg.eval_samples, derive_seed(rs, &[EVAL, t as u64]))?);
            }
        }
    }
    rec.write(&cfg.out)?;
    Ok(rec)
}

/// Predictive mean and variance of a 1-D model at `xs`.
pub fn predict_1d(trained: &Trained, context: &Task<f64>, xs: &[f64], samples: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = Tensor::from_f64(vec![xs.len(), 1], xs)?;
    match &trained.model {
        MetaModel::Bnn(m) => {
            let p = m.predict(&trained.store, context, &x, samples, seed)?;
            Ok((p.mean.into_data(), p.var.into_data()))
        }
        MetaModel::Cnp(_) | MetaModel::ConvCnp1d(_) => {
            let tape = Tape::new();
            let b = trained.store.bind_frozen(&tape);
            let pred = match &trained.model {
                MetaModel::Cnp(m) => m.predict(&b, context, &x)?,
                MetaModel::ConvCnp1d(m) => m.predict(&b, context, &x)?,
                _ => unreachable!(),
            };
            match pred {
                NpPrediction::Gaussian { mean, var } => Ok((mean.value().data().to_vec(), var.value().data().to_vec())),
                NpPrediction::Bernoulli { .. } => Err(CliError::Config("regression models predict Gaussians".into())),
            }
        }
        MetaModel::ConvCnp2d { .. } => Err(CliError::Config("the image ConvCNP has no 1-D predictions".into())),
    }
}

/// Average per-target predictive log-likelihood of `target` given `context`.
pub fn target_log_likelihood(
    trained: &Trained,
    context: &Task<f64>,
    target: &Task<f64>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let b = trained.store.bind_frozen(&tape);
    let total = match &trained.model {
        MetaModel::Bnn(m) => npml_objective(&b, m, context, target, samples, EpsSource::new(seed))?,
        MetaModel::Cnp(m) => np_log_likelihood(&m.predict(&b, context, &target.x)?, tape.constant(target.y.clone()))?,
        MetaModel::ConvCnp1d(m) => np_log_likelihood(&m.predict(&b, context, &target.x)?, tape.constant(target.y.clone()))?,
        MetaModel::ConvCnp2d { .. } => return Err(CliError::Config("image model on a regression task".into())),
    };
    Ok(total.item() / target.len() as f64)
}

/// Splits `task` into a random half as context and the rest as target.
pub fn held_out_split<R: Rng + ?Sized>(task: &Task<f64>, rng: &mut R) -> (Task<f64>, Task<f64>) {
    let mut idx: Vec<usize> = (0..task.len()).collect();
    idx.shuffle(rng);
    let half = task.len() / 2;
    (task.subset(&idx[..half]), task.subset(&idx[half..]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressOutput {
    /// Held-out average target log-likelihood per repetition and task.
    pub metrics: MetricsRecord,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub context: Task<f64>,
}

#[derive(Serialize)]
struct PredictionRow {
    x: f64,
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
}

/// Meta-trains on GP tasks and predicts on one unseen task (SE or cubic),
/// writing `predictions.csv`, `regression.svg` and held-out log-likelihood
/// metrics.
pub fn run_regress_1d(cfg: &ExperimentConfig) -> Result<RegressOutput> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let held_out = gp_tasks(cfg, cfg.data.test_tasks, derive_seed(cfg.seed, &[TEST_DATA]))?;
    let splits: Vec<(Task<f64>, Task<f64>)> = held_out
        .iter()
        .enumerate()
        .map(|(t, task)| held_out_split(task, &mut rng_for(cfg.seed, &[TEST_DATA, t as u64])))
        .collect();
    let eval_task = match cfg.data.eval_task {
        EvalTask::Gp => gp_tasks(cfg, 1, derive_seed(cfg.seed, &[EVAL_TASK]))?.remove(0),
        EvalTask::Cubic => cubic_gap_task(&mut rng_for(cfg.seed, &[EVAL_TASK]))?,
    };
    let n = cfg.data.grid_points.max(2);
    let [g0, g1] = cfg.data.grid;
    let grid: Vec<f64> = (0..n).map(|k| g0 + (g1 - g0) * k as f64 / (n - 1) as f64).collect();

    let mut metrics = MetricsRecord::new("target_log_likelihood");
    let group = cfg.model.to_string();
    let mut figure = None;
    for rep in 0..cfg.repetitions {
        let rs = derive_seed(cfg.seed, &[REPETITION, rep as u64]);
        let train = gp_tasks(cfg, cfg.meta_size, derive_seed(rs, &[TRAIN_DATA]))?;
        let trained = prepare_model(cfg, Domain::Regression, TrainingSet::Tasks(&train), rs)
            .map_err(|e| e.in_run(format!("{group} repetition {rep}")))?;
        for (t, (context, target)) in splits.iter().enumerate() {
            let ll = target_log_likelihood(&trained, context, target, cfg.eval_samples, derive_seed(rs, &[EVAL, t as u64]))?;
            metrics.push(&group, rep, t, ll);
        }
        if rep == 0 {
            write_history(&trained.run, &cfg.out.join("history.csv"))?;
            figure = Some(predict_1d(&trained, &eval_task, &grid, cfg.eval_samples, derive_seed(rs, &[EVAL_TASK]))?);
        }
    }
    let (mean, var) = figure.expect("at least one repetition");
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();

    let mut w = csv::Writer::from_path(cfg.out.join("predictions.csv"))?;
    for k in 0..n {
        w.serialize(PredictionRow {
            x: grid[k],
            mean: mean[k],
            sd: sd[k],
            lower: mean[k] - 1.96 * sd[k],
            upper: mean[k] + 1.96 * sd[k],
        })?;
    }
    w.flush()?;
    let plot = Plot {
        title: format!("{} on an unseen {:?} task", cfg.model, cfg.data.eval_task).to_lowercase(),
        series: vec![Series { label: "predictive mean".into(), xs: grid.clone(), ys: mean.clone(), dashed: true }],
        bands: vec![Band {
            xs: grid.clone(),
            lower: mean.iter().zip(&sd).map(|(m, s)| m - 1.96 * s).collect(),
            upper: mean.iter().zip(&sd).map(|(m, s)| m + 1.96 * s).collect(),
        }],
        points: eval_task.x_column(0).into_iter().zip(eval_task.y_column(0)).collect(),
    };
    write_plot(&plot, &cfg.out.join("regression.svg"))?;
    metrics.write(&cfg.out)?;
    Ok(RegressOutput { metrics, grid, mean, sd, context: eval_task })
}

/// Images from the configured IDX file, or synthetic digits rendered into
/// `out/data`, downsampled to the configured size. The first `meta_size`
/// are for training and the last `test_images` for testing.
pub fn load_images(cfg: &ExperimentConfig) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let need = cfg.meta_size + cfg.image.test_images;
    let all = match &cfg.image.source {
        Some(path) => load_idx(path)?,
        None => {
            let path: PathBuf = cfg.out.join("data").join("synthetic-images-idx3-ubyte");
            synthetic_idx(&path, cfg.image.synthetic_count.max(need), &mut rng_for(cfg.seed, &[IMAGES]))?
        }
    };
    if all.len() < need {
        return Err(CliError::Config(format!(
            "{} images available, {} training plus {} test needed",
            all.len(),
            cfg.meta_size,
            cfg.image.test_images
        )));
    }
    let resize = |img: &Tensor<f64>| -> Result<Tensor<f64>> {
        if img.shape() == [cfg.image.size, cfg.image.size] {
            Ok(img.clone())
        } else {
            downsample(img, cfg.image.size)
        }
    };
    let train = all[..cfg.meta_size].iter().map(resize).collect::<Result<Vec<_>>>()?;
    let test = all[all.len() - cfg.image.test_images..].iter().map(resize).collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

/// Fixed test tasks: image `i` masked with `p ~ U[test_p]`.
pub fn image_test_tasks(cfg: &ExperimentConfig, test: &[Tensor<f64>]) -> Result<Vec<ImageTask<f64>>> {
    test.iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = rng_for(cfg.seed, &[TEST_DATA, i as u64]);
            let p = rng.random_range(cfg.image.test_p[0]..=cfg.image.test_p[1]);
            Ok(make_image_task(img, p, cfg.image.binarise, &mut rng)?)
        })
        .collect()
}

/// Predicted mean and standard deviation at every pixel (row-major).
pub fn complete_image(trained: &Trained, task: &ImageTask<f64>, samples: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    match &trained.model {
        MetaModel::Bnn(m) => {
            let p = m.predict(&trained.store, &task.task.context(), &task.task.x, samples, seed)?;
            Ok((p.mean.into_data(), p.var.data().iter().map(|v| v.sqrt()).collect()))
        }
        MetaModel::ConvCnp2d { model, .. } => {
            let tape = Tape::new();
            let b = trained.store.bind_frozen(&tape);
            match model.predict(&b, task)? {
                NpPrediction::Gaussian { mean, var } => {
                    Ok((mean.value().data().to_vec(), var.value().data().iter().map(|v| v.sqrt()).collect()))
                }
                NpPrediction::Bernoulli { logits } => {
                    let p: Vec<f64> = logits.sigmoid().value().data().to_vec();
                    let sd = p.iter().map(|q| (q * (1.0 - q)).sqrt()).collect();
                    Ok((p, sd))
                }
            }
        }
        other => Err(CliError::Config(format!("{} cannot complete images", other.name()))),
    }
}

/// Sum over all pixels of the squared difference to the original image.
pub fn squared_error(task: &ImageTask<f64>, mean: &[f64]) -> f64 {
    task.image.data().iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum()
}

fn write_image_panels(task: &ImageTask<f64>, mean: &[f64], sd: &[f64], path: &Path) -> Result<()> {
    let (h, w) = (task.height(), task.width());
    let panel = |title: &str, pixels: Vec<Option<f64>>| Panel { title: title.into(), height: h, width: w, pixels };
    let original: Vec<f64> = task.image.data().to_vec();
    write_panels(
        &[
            panel("original", original.iter().map(|&v| Some(v)).collect()),
            panel("masked", original.iter().zip(&task.mask).map(|(&v, &m)| m.then_some(v)).collect()),
            panel("mean", mean.iter().map(|&v| Some(v)).collect()),
            panel("sd", sd.iter().map(|&v| Some(v)).collect()),
        ],
        path,
    )
}

/// Completes masked test images with APOVI, the image ConvCNP or the
/// interpolation baseline; records the per-image squared error and writes
/// original/masked/mean/sd panels for the first repetition.
pub fn run_image_complete(cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let (train, test) = load_images(cfg)?;
    let tasks = image_test_tasks(cfg, &test)?;
    let size = cfg.image.size;
    let group = cfg.model.to_string();
    let mut rec = MetricsRecord::new("squared_error");
    for rep in 0..cfg.repetitions {
        let rs = derive_seed(cfg.seed, &[REPETITION, rep as u64]);
        let trained = match cfg.model {
            ModelName::Lininterp => None,
            _ => {
                let set = TrainingSet::Images { images: &train, p_range: cfg.image.train_p, binarise: cfg.image.binarise, resample: cfg.image.resample_masks };
                let t = prepare_model(cfg, Domain::Image { height: size, width: size }, set, rs)
                    .map_err(|e| e.in_run(format!("{group} repetition {rep}")))?;
                if rep == 0 {
                    write_history(&t.run, &cfg.out.join("history.csv"))?;
                }
                Some(t)
            }
        };
        for (i, task) in tasks.iter().enumerate() {
            let (mean, sd) = match &trained {
                None => (linear_interp_baseline(task)?.into_data(), vec![0.0; size * size]),
                Some(t) => complete_image(t, task, cfg.eval_samples, derive_seed(rs, &[EVAL, i as u64]))?,
            };
            rec.push(&group, rep, i, squared_error(task, &mean));
            if rep == 0 {
                write_image_panels(task, &mean, &sd, &cfg.out.join("images").join(format!("test_{i:02}.svg")))?;
            }
        }
    }
    rec.write(&cfg.out)?;
    Ok(rec)
}

/// Trains the configured model on its experiment's meta-dataset and writes
/// `model.ckpt` and `history.csv`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Trained> {
    let mut cfg = cfg.clone();
    cfg.checkpoint = None;
    if cfg.model == ModelName::Lininterp {
        return Err(CliError::Config("the interpolation baseline has nothing to train".into()));
    }
    if cfg.meta_size == 0 {
        return Err(CliError::Config("training needs at least one task".into()));
    }
    cfg.validate()?;
    prepare_out(&cfg)?;
    let rs = derive_seed(cfg.seed, &[REPETITION, 0]);
    let trained = match cfg.experiment {
        Experiment::ImageComplete => {
            let (train, _) = load_images(&cfg)?;
            let set = TrainingSet::Images { images: &train, p_range: cfg.image.train_p, binarise: cfg.image.binarise, resample: cfg.image.resample_masks };
            prepare_model(&cfg, Domain::Image { height: cfg.image.size, width: cfg.image.size }, set, rs)?
        }
        _ => {
            let train = gp_tasks(&cfg, cfg.meta_size, derive_seed(rs, &[TRAIN_DATA]))?;
            prepare_model(&cfg, Domain::Regression, TrainingSet::Tasks(&train), rs)?
        }
    };
    save_checkpoint(&cfg.out.join("model.ckpt"), &model_id(&cfg), &trained.store)?;
    write_history(&trained.run, &cfg.out.join("history.csv"))?;
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(experiment: Experiment, model: ModelName, out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(experiment);
        cfg.model = model;
        cfg.out = out.to_path_buf();
        cfg.hidden = vec![4];
        cfg.inference_hidden = vec![6];
        cfg.repetitions = 2;
        cfg.meta_size = 3;
        cfg.eval_samples = 4;
        cfg.mc_samples = 1;
        cfg.data.test_tasks = 2;
        cfg.data.n_range = [6, 8];
        cfg.data.grid_points = 15;
        cfg.train.max_epochs = 4;
        cfg.train.early_stop_start = 4;
        cfg.train.patience = 2;
        cfg.train.smoothing = 2;
        cfg.povi_train = cfg.train.clone();
        cfg.image.size = 6;
        cfg.image.test_images = 2;
        cfg.image.synthetic_count = 6;
        cfg.convcnp.points_per_unit = 8.0;
        cfg.convcnp.channels = vec![3];
        cfg.convcnp.kernel = 3;
        cfg.convcnp.embedding = 4;
        cfg.convcnp.grid_channels = 3;
        cfg.convcnp.head_hidden = 4;
        cfg
    }

    #[test]
    fn elbo_table_shapes_for_both_protocols() {
        let dir = tempfile::tempdir().unwrap();
        let povi = run_elbo_table(&quick(Experiment::ElboTable, ModelName::Povi, dir.path())).unwrap();
        assert_eq!(povi.rows.len(), 4);
        assert_eq!(povi.groups(), vec!["povi".to_string()]);
        let mut cfg = quick(Experiment::ElboTable, ModelName::Apovi, dir.path());
        cfg.meta_size = 0;
        let zero = run_elbo_table(&cfg).unwrap();
        assert_eq!(zero.groups(), vec!["apovi_meta0".to_string()]);
        assert!(zero.rows.iter().all(|r| r.value.is_finite()));
        assert!(dir.path().join("metrics_aggregate.csv").exists());
    }

    #[test]
    fn regression_writes_one_row_per_grid_point() {
        for model in [ModelName::Apovi, ModelName::Cnp, ModelName::Convcnp] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = quick(Experiment::Regress1d, model, dir.path());
            let out = run_regress_1d(&cfg).unwrap();
            let text = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
            assert_eq!(text.lines().count(), 1 + cfg.data.grid_points, "{model}");
            assert!(text.starts_with("x,mean,sd,lower,upper"));
            for k in 0..out.grid.len() {
                assert!(out.sd[k] > 0.0);
            }
            assert!(dir.path().join("regression.svg").exists());
        }
    }

    #[test]
    fn image_completion_runs_for_every_method() {
        for model in [ModelName::Apovi, ModelName::Convcnp, ModelName::Lininterp] {
            let dir = tempfile::tempdir().unwrap();
            let rec = run_image_complete(&quick(Experiment::ImageComplete, model, dir.path())).unwrap();
            assert_eq!(rec.rows.len(), 4, "{model}");
            assert!(dir.path().join("images/test_01.svg").exists());
        }
    }

    #[test]
    fn perfect_prediction_has_zero_error() {
        let img = Tensor::from_f64(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let task = make_image_task(&img, 0.5, true, &mut rng_for(0, &[])).unwrap();
        assert_eq!(squared_error(&task, img.data()), 0.0);
    }

    #[test]
    fn trained_checkpoint_restores_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(Experiment::Regress1d, ModelName::Apovi, dir.path());
        let trained = run_train(&cfg).unwrap();
        let mut again = cfg.clone();
        again.checkpoint = Some(dir.path().join("model.ckpt"));
        again.train.max_epochs = 0;
        let (store, _) = build_model(&again, Domain::Regression, 1).unwrap();
        assert_ne!(store, trained.store);
        let rs = derive_seed(cfg.seed, &[REPETITION, 0]);
        let restored = prepare_model(&again, Domain::Regression, TrainingSet::Tasks(&[]), rs).unwrap();
        assert_eq!(restored.store, trained.store);
    }
}
