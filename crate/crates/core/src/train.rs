//! Meta-training loop with Adam and smoothed early stopping.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::noise::{derive_seed, rng_for};
use crate::params::{Adam, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Tasks per update.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// First epoch at which early stopping may trigger.
    pub early_stop_start: usize,
    pub patience: usize,
    /// Epochs averaged by the smoother.
    pub smoothing: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.smoothing == 0 {
            return Err(Error::Contract(format!("invalid training configuration {self:?}")));
        }
        if self.early_stop_start > self.max_epochs {
            return Err(Error::Contract("early stopping starts after the last epoch".into()));
        }
        Ok(())
    }
}

/// History of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingRun {
    /// Mean per-task objective of each epoch, recorded before each update.
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Epoch at which early stopping fired, if it did.
    pub stop_epoch: Option<usize>,
    /// Seed each epoch's shuffle and per-task noise were derived from.
    pub epoch_seeds: Vec<u64>,
}

impl TrainingRun {
    pub fn epochs(&self) -> usize {
        self.raw.len()
    }
}

/// Trailing moving average over at most `window` values.
pub fn smooth(history: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (t, &v) in history.iter().enumerate() {
        sum += v;
        if t >= window {
            sum -= history[t - window];
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    out
}

/// Incremental early-stopping rule over a smoothed series.
#[derive(Clone, Debug)]
struct Stopper {
    start: usize,
    patience: usize,
    best: f64,
    last_improvement: usize,
}

impl Stopper {
    fn new(start: usize, patience: usize) -> Self {
        Self {
            start,
            patience,
            best: f64::NEG_INFINITY,
            last_improvement: 0,
        }
    }

    fn observe(&mut self, t: usize, smoothed: f64) -> bool {
        if smoothed > self.best {
            self.best = smoothed;
            self.last_improvement = t;
        }
        t >= self.start && t - self.last_improvement >= self.patience
    }
}

/// First epoch `t ≥ start` whose smoothed value has gone `patience` epochs
/// without beating its running best.
pub fn early_stop(history: &[f64], start: usize, patience: usize, window: usize) -> Option<usize> {
    let mut stopper = Stopper::new(start, patience);
    smooth(history, window)
        .into_iter()
        .enumerate()
        .find_map(|(t, s)| stopper.observe(t, s).then_some(t))
}

/// Maximises the mean of `objective(bound, task, seed)` over minibatches of
/// `n_tasks` tasks with Adam. Tasks are reshuffled every epoch and each
/// (epoch, task) pair gets its own seed.
pub fn meta_train<T, F>(
    store: &mut ParamStore<T>,
    n_tasks: usize,
    cfg: &TrainConfig,
    mut objective: F,
) -> Result<TrainingRun>
where
    T: Scalar,
    F: for<'t> FnMut(&Bound<'t, T>, usize, u64) -> Result<Var<'t, T>>,
{
    cfg.validate()?;
    if n_tasks == 0 {
        return Err(Error::Data("meta-dataset is empty".into()));
    }
    let mut adam = Adam::new(T::lit(cfg.lr));
    let mut run = TrainingRun::default();
    let mut stopper = Stopper::new(cfg.early_stop_start, cfg.patience);
    let batch = cfg.batch_size.min(n_tasks);
    let mut order: Vec<usize> = (0..n_tasks).collect();
    for epoch in 0..cfg.max_epochs {
        let epoch_seed = derive_seed(cfg.seed, &[epoch as u64]);
        run.epoch_seeds.push(epoch_seed);
        order.sort_unstable();
        order.shuffle(&mut rng_for(epoch_seed, &[u64::MAX]));
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let mut sum = tape.scalar(T::zero());
            let mut bad = Vec::new();
            for &task in chunk {
                let v = objective(&b, task, derive_seed(epoch_seed, &[task as u64]))?;
                let x = v.item().as_f64();
                if !x.is_finite() {
                    bad.push(task);
                }
                epoch_total += x;
                sum = sum.add(v)?;
            }
            if !bad.is_empty() {
                return Err(Error::NonFiniteObjective { epoch, tasks: bad });
            }
            let mean = sum.scale(T::lit(1.0 / chunk.len() as f64));
            let grads = tape.backward(mean)?;
            adam.ascend(store, &b.grads(&grads))?;
        }
        run.raw.push(epoch_total / n_tasks as f64);
        let smoothed = *smooth(&run.raw[run.raw.len().saturating_sub(cfg.smoothing)..], cfg.smoothing)
            .last()
            .expect("non-empty");
        run.smoothed.push(smoothed);
        if stopper.observe(epoch, smoothed) {
            run.stop_epoch = Some(epoch);
            break;
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_size: 2,
            max_epochs,
            early_stop_start: max_epochs,
            patience: 10,
            smoothing: 1,
            seed: 7,
        }
    }

    #[test]
    fn increasing_history_never_stops() {
        let h: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(early_stop(&h, 0, 5, 10), None);
    }

    #[test]
    fn plateau_stops_after_patience() {
        let mut h: Vec<f64> = (0..30).map(f64::from).collect();
        h.extend(std::iter::repeat_n(29.0, 50));
        assert_eq!(early_stop(&h, 20, 7, 1), Some(36));
        // fully flat: the best is set at epoch 0
        assert_eq!(early_stop(&[1.0; 40], 5, 3, 4), Some(5));
    }

    #[test]
    fn smoothing_uses_available_prefix() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn parameterless_model_runs() {
        let mut store = ParamStore::<f64>::new();
        let run = meta_train(&mut store, 3, &cfg(5), |b, _, _| Ok(b.tape().scalar(1.5))).unwrap();
        assert_eq!(run.raw, vec![1.5; 5]);
        assert_eq!(run.smoothed, vec![1.5; 5]);
    }

    #[test]
    fn quadratic_converges_and_is_reproducible() {
        let target = [0.3, -1.2, 2.0];
        let train = || {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("theta", Tensor::zeros(&[3]));
            let run = meta_train(&mut store, 4, &cfg(500), |b, _, _| {
                let d = b.get(id).sub(b.tape().constant(Tensor::from_vec(target.to_vec())))?;
                Ok(d.square().sum().neg())
            })
            .unwrap();
            (store.get(id).clone(), run)
        };
        let (theta, run) = train();
        for (a, z) in theta.data().iter().zip(target) {
            assert!((a - z).abs() < 1e-3);
        }
        assert_eq!(train().1, run);
    }

    #[test]
    fn non_finite_objective_aborts() {
        let mut store = ParamStore::<f64>::new();
        let err = meta_train(&mut store, 3, &cfg(5), |b, task, _| {
            Ok(b.tape().scalar(if task == 1 { f64::NAN } else { 0.0 }))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteObjective { epoch: 0, ref tasks } if tasks == &[1]));
    }
}
