//! Monte Carlo checks against closed forms.

use abnn::bnn::{BnnConfig, BnnModel, Likelihood, PosteriorKind, PosteriorOptions};
use abnn::data::{gp_sample_at, kernel_eval, make_image_task, KernelSpec, Task};
use abnn::distributions::{kl_diag, DiagGaussian};
use abnn::linalg::{cholesky_jittered, jitter_schedule};
use abnn::objectives::elbo_objective;
use abnn::{Activation, EpsSource, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn gp_draws_match_kernel_covariance() {
    let spec = KernelSpec::se(0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = [0.1, 0.4];
    let draws: Vec<Vec<f64>> = (0..10_000).map(|_| gp_sample_at(&spec, &xs, 0.0, &mut rng).unwrap()).collect();
    let n = draws.len() as f64;
    let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n;
    let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / n;
    let cov = draws.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum::<f64>() / (n - 1.0);
    let var = draws.iter().map(|d| (d[0] - m0).powi(2)).sum::<f64>() / (n - 1.0);
    let k = kernel_eval(&spec, &[0.1], &[0.4]);
    assert!((cov - k).abs() / k < 0.05, "cov {cov} vs {k}");
    assert!((var - 1.0).abs() < 0.05);
}

#[test]
fn single_point_variance_and_coincident_inputs() {
    let spec = KernelSpec::se(0.5, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ys: Vec<f64> = (0..10_000)
        .map(|_| {
            let x = rng.random_range(-2.0..2.0);
            gp_sample_at(&spec, &[x], 0.0, &mut rng).unwrap()[0]
        })
        .collect();
    let (_, sd) = mean_sd(&ys);
    assert!((sd * sd - 2.0).abs() / 2.0 < 0.05);

    let twin = gp_sample_at(&spec, &[0.7, 0.7], 0.0, &mut rng).unwrap();
    assert!((twin[0] - twin[1]).abs() < 1e-5);
}

#[test]
fn se_gram_needs_at_most_one_jitter_step() {
    let spec = KernelSpec::se(0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(10..=50);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Tensor::<f64>::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] = kernel_eval(&spec, &[xs[i]], &[xs[j]]);
            }
        }
        let (_, jitter) = cholesky_jittered(&g).unwrap();
        assert!(jitter <= jitter_schedule(&g)[0]);
    }
}

#[test]
fn mask_fraction_matches_probability() {
    let img = Tensor::<f64>::zeros(&[28, 28]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let total: usize = (0..10_000)
        .map(|_| make_image_task(&img, 0.5, false, &mut rng).unwrap().context_count())
        .sum();
    let frac = total as f64 / (10_000.0 * 784.0);
    assert!((frac - 0.5).abs() < 0.005);
}

#[test]
fn kl_diag_matches_monte_carlo() {
    let tape = Tape::<f64>::new();
    let v = |x: &[f64]| tape.constant(Tensor::from_vec(x.to_vec()));
    let q = DiagGaussian::new(v(&[0.3, -1.0, 0.5]), v(&[-0.5, 0.2, 0.0])).unwrap();
    let p = DiagGaussian::new(v(&[0.0, 0.0, 1.0]), v(&[0.0, 0.5, -0.3])).unwrap();
    let exact = kl_diag(&q, &p).unwrap().item();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let terms: Vec<f64> = (0..20_000)
        .map(|_| {
            let e: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let w = q.reparam_sample(v(&e)).unwrap();
            q.log_prob(w).unwrap().item() - p.log_prob(w).unwrap().item()
        })
        .collect();
    let (m, sd) = mean_sd(&terms);
    assert!((m - exact).abs() < 3.0 * sd / (terms.len() as f64).sqrt());
}

fn bnn(kind: PosteriorKind, widths: &[usize]) -> (ParamStore<f64>, BnnModel) {
    let cfg = BnnConfig {
        widths: widths.to_vec(),
        activation: Activation::Relu,
        prior_var: 1.0,
        likelihood: Likelihood::Gaussian { noise_var: 0.1, trainable: false },
    };
    let mut store = ParamStore::new();
    let opts = PosteriorOptions { inference_hidden: vec![8], init_log_var: -2.0, ..PosteriorOptions::default() };
    let m = BnnModel::new(&mut store, kind, cfg, &opts, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    (store, m)
}

fn task() -> Task<f64> {
    Task::from_xy(&[-1.5, -0.6, 0.1, 0.9, 1.7], &[0.4, -0.2, 0.3, 0.8, -0.5]).unwrap()
}

#[test]
fn doubling_samples_shrinks_elbo_spread() {
    let (store, m) = bnn(PosteriorKind::Apovi, &[1, 8, 1]);
    let spread = |samples: usize| {
        let vals: Vec<f64> = (0..100)
            .map(|r| {
                let tape = Tape::new();
                let b = store.bind_frozen(&tape);
                elbo_objective(&b, &m, &task(), samples, EpsSource::new(1000 + r)).unwrap().item()
            })
            .collect();
        mean_sd(&vals).1
    };
    let ratio = spread(8) / spread(4);
    let ideal = std::f64::consts::FRAC_1_SQRT_2;
    assert!((ratio - ideal).abs() <= 0.25 * ideal, "ratio {ratio}");
}

#[test]
fn npvi_kl_estimate_matches_conjugate_kl() {
    let (store, m) = bnn(PosteriorKind::Apovi, &[1, 1]);
    let full = task();
    let ctx = full.subset(&[0, 2, 3]);
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let eps = EpsSource::new(2);
    let qf = m.sample(&b, &full, eps, 0).unwrap().layers[0].neuron(0).unwrap();
    let qc = m.sample(&b, &ctx, eps, 0).unwrap().layers[0].neuron(0).unwrap();
    let (mf, cf) = (qf.mean.value(), qf.covariance().unwrap().value());
    let (mc, cc) = (qc.mean.value(), qc.covariance().unwrap().value());
    // 2x2 Gaussian KL written out by hand
    let det = |c: &Tensor<f64>| c[[0, 0]] * c[[1, 1]] - c[[0, 1]] * c[[1, 0]];
    let dc = det(&cc);
    let inv = [[cc[[1, 1]] / dc, -cc[[0, 1]] / dc], [-cc[[1, 0]] / dc, cc[[0, 0]] / dc]];
    let tr: f64 = (0..2).map(|i| (0..2).map(|j| inv[i][j] * cf[[j, i]]).sum::<f64>()).sum();
    let dm = [mc.data()[0] - mf.data()[0], mc.data()[1] - mf.data()[1]];
    let maha: f64 = (0..2).map(|i| (0..2).map(|j| dm[i] * inv[i][j] * dm[j]).sum::<f64>()).sum();
    let exact = 0.5 * (tr + maha - 2.0 + (dc / det(&cf)).ln());

    let terms: Vec<f64> = (0..10_000)
        .map(|s| {
            let tape = Tape::new();
            let b = store.bind_frozen(&tape);
            let ws = m.sample(&b, &full, EpsSource::new(7), s).unwrap();
            ws.log_q.item() - m.log_q_at(&b, &ctx, &ws.weights).unwrap().item()
        })
        .collect();
    let (mean, sd) = mean_sd(&terms);
    assert!((mean - exact).abs() < 3.0 * sd / 100.0, "MC {mean} vs {exact}");
}
