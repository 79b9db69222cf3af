//! Dataset sampling and joint optimization of the networks and gains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::certificates::{loss_and_gradient, sample_point, LossOptions, SamplePoint, WSampling};
use crate::certnets::{
    CertificateCheckpoint, GainParams, HistoryRow, Hyperparams, LieSign, DEFAULT_HIDDEN,
    DEFAULT_INNER_WIDTH,
};
use crate::config::Config;
use crate::error::{invalid, Error, Result};
use crate::numerics::{mix_seed, XI_TRAIN};
use crate::systems::{make_system_with, ControlAffineSystem, QuadDriftConvention, SystemOptions};

/// Consecutive rejected steps after which training is aborted.
pub const MAX_BAD_STEPS: usize = 10;

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_ETAS: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub system: String,
    pub lambda: f64,
    pub w_floor: f64,
    pub hidden: usize,
    pub c: usize,
    pub n_train: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub xi: usize,
    /// Initial gains; drawn from the seed when absent.
    pub alpha_init: Option<f64>,
    pub mu_init: Option<f64>,
    pub sigma: f64,
    pub w_sampling: WSampling,
    pub lie_sign: LieSign,
    pub quad_drift: QuadDriftConvention,
    /// Input weight of the training output `z = [(Qx)ᵀ, (Ru)ᵀ]ᵀ`.
    pub selector_r: f64,
    pub shard_size: usize,
    pub shared_etas: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: "pvtol".into(),
            lambda: 0.5,
            w_floor: 0.1,
            hidden: DEFAULT_HIDDEN,
            c: DEFAULT_INNER_WIDTH,
            n_train: 130_000,
            epochs: 15,
            batch_size: 1024,
            lr: 1e-3,
            seed: 0,
            xi: XI_TRAIN,
            alpha_init: None,
            mu_init: None,
            sigma: 1.0,
            w_sampling: WSampling::BallUniformRadius,
            lie_sign: LieSign::Paper,
            quad_drift: QuadDriftConvention::AsPrinted,
            selector_r: 0.1,
            shard_size: 64,
            shared_etas: false,
        }
    }
}

pub const TRAIN_KEYS: [&str; 21] = [
    "system",
    "lambda",
    "w_floor",
    "hidden",
    "c",
    "n_train",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "xi_train",
    "alpha_init",
    "mu_init",
    "sigma",
    "w_sampling",
    "ccm_lie_sign",
    "quad_drift_convention",
    "selector_r",
    "shard_size",
    "shared_etas",
    "jobs",
];

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.check_known(&TRAIN_KEYS)?;
        let d = Self::default();
        let out = Self {
            system: cfg.get("system").unwrap_or(&d.system).to_string(),
            lambda: cfg.get_or("lambda", d.lambda)?,
            w_floor: cfg.get_or("w_floor", d.w_floor)?,
            hidden: cfg.get_or("hidden", d.hidden)?,
            c: cfg.get_or("c", d.c)?,
            n_train: cfg.get_or("n_train", d.n_train)?,
            epochs: cfg.get_or("epochs", d.epochs)?,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            lr: cfg.get_or("lr", d.lr)?,
            seed: cfg.get_or("seed", d.seed)?,
            xi: cfg.get_or("xi_train", d.xi)?,
            alpha_init: cfg.get_opt("alpha_init")?,
            mu_init: cfg.get_opt("mu_init")?,
            sigma: cfg.get_or("sigma", d.sigma)?,
            w_sampling: cfg.get_or("w_sampling", d.w_sampling)?,
            lie_sign: cfg.get_or("ccm_lie_sign", d.lie_sign)?,
            quad_drift: cfg.get_or("quad_drift_convention", d.quad_drift)?,
            selector_r: cfg.get_or("selector_r", d.selector_r)?,
            shard_size: cfg.get_or("shard_size", d.shard_size)?,
            shared_etas: cfg.get_or("shared_etas", d.shared_etas)?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Every field as config entries, so a snapshot reproduces the run.
    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        c.set("system", &self.system);
        c.set("lambda", self.lambda);
        c.set("w_floor", self.w_floor);
        c.set("hidden", self.hidden);
        c.set("c", self.c);
        c.set("n_train", self.n_train);
        c.set("epochs", self.epochs);
        c.set("batch_size", self.batch_size);
        c.set("lr", self.lr);
        c.set("seed", self.seed);
        c.set("xi_train", self.xi);
        if let Some(a) = self.alpha_init {
            c.set("alpha_init", a);
        }
        if let Some(m) = self.mu_init {
            c.set("mu_init", m);
        }
        c.set("sigma", self.sigma);
        c.set("w_sampling", self.w_sampling);
        c.set("ccm_lie_sign", self.lie_sign);
        c.set("quad_drift_convention", self.quad_drift);
        c.set("selector_r", self.selector_r);
        c.set("shard_size", self.shard_size);
        c.set("shared_etas", self.shared_etas);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("w_floor", self.w_floor),
            ("lr", self.lr),
            ("sigma", self.sigma),
            ("selector_r", self.selector_r),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{k} must be positive and finite")));
            }
        }
        let counts = [
            ("hidden", self.hidden),
            ("c", self.c),
            ("n_train", self.n_train),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("xi_train", self.xi),
            ("shard_size", self.shard_size),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{k} must be at least 1")));
            }
        }
        match (self.alpha_init, self.mu_init) {
            (Some(a), Some(m)) if !(a > m && m > 0.0) => {
                Err(invalid("initial gains need alpha > mu > 0"))
            }
            (Some(a), None) if !(a > 0.0) => Err(invalid("alpha_init must be positive")),
            _ => Ok(()),
        }
    }

    pub fn system(&self) -> Result<ControlAffineSystem> {
        let mut sys = make_system_with(
            &self.system,
            SystemOptions {
                quad_drift: self.quad_drift,
            },
        )?;
        sys.sigma = self.sigma;
        Ok(sys)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lambda: self.lambda,
            w_floor: self.w_floor,
            hidden: self.hidden,
            c: self.c,
            seed: self.seed,
            sigma: self.sigma,
            lie_sign: self.lie_sign,
            quad_drift: self.quad_drift,
        }
    }

    /// Steps per epoch, counting a trailing partial batch.
    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    /// `(α, μ)` at initialization.
    pub fn initial_gains(&self) -> Result<GainParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_INIT));
        rng.set_stream(1);
        let mu = self.mu_init.unwrap_or_else(|| rng.random_range(0.1..1.0));
        let alpha = self
            .alpha_init
            .unwrap_or_else(|| mu + rng.random_range(0.5..5.0));
        if alpha <= mu {
            return Err(invalid(format!("alpha_init {alpha} must exceed mu {mu}")));
        }
        GainParams::from_alpha_mu(alpha, mu)
    }
}

/// `N` i.i.d. samples of `X × X × U × W` with `w` in the ball of radius `sys.sigma`.
pub fn sample_dataset(sys: &ControlAffineSystem, n: usize, seed: u64) -> Vec<SamplePoint> {
    sample_dataset_with(sys, n, seed, WSampling::BallUniformRadius)
}

pub fn sample_dataset_with(
    sys: &ControlAffineSystem,
    n: usize,
    seed: u64,
    mode: WSampling,
) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sample_point(sys, sys.sigma, mode, &mut rng))
        .collect()
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Non-finite gradients leave parameters and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(invalid("adam_step length mismatch"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericOverflow { node: i });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - AdamState::BETA1.powi(t);
    let c2 = 1.0 - AdamState::BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = AdamState::BETA1 * *m + (1.0 - AdamState::BETA1) * g;
        *v = AdamState::BETA2 * *v + (1.0 - AdamState::BETA2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + AdamState::EPS);
    }
    Ok(())
}

/// Result of a training run; `diverged` is set when the run was aborted.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: CertificateCheckpoint,
    pub diverged: Option<Error>,
}

/// Trains to completion, failing on divergence.
pub fn train(cfg: &TrainConfig) -> Result<CertificateCheckpoint> {
    let out = train_with(cfg, |_| {})?;
    match out.diverged {
        Some(e) => Err(e),
        None => Ok(out.checkpoint),
    }
}

/// Trains, reporting each history row to `progress`. On divergence the last good
/// parameters are returned together with the error.
pub fn train_with(
    cfg: &TrainConfig,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let selector = sys.training_selector(cfg.selector_r)?;
    let gains = cfg.initial_gains()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_INIT));
    let mut ck = CertificateCheckpoint::init(
        &cfg.system,
        sys.n(),
        sys.m(),
        &sys.network_inputs(),
        cfg.hyperparams(),
        selector,
        gains,
        &mut init_rng,
    )?;
    let data = sample_dataset_with(
        &sys,
        cfg.n_train,
        mix_seed(cfg.seed, STREAM_DATA),
        cfg.w_sampling,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_SHUFFLE));
    let etas_base = mix_seed(cfg.seed, STREAM_ETAS);

    let mut params = ck.flat_theta();
    params.push(ck.gains.raw_a);
    params.push(ck.gains.raw_b);
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut bad = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let opts = LossOptions {
                xi: cfg.xi,
                etas_seed: mix_seed(etas_base, step as u64),
                shard_size: cfg.shard_size,
                shared_etas: cfg.shared_etas,
            };
            let alpha = ck.gains.alpha();
            let result = loss_and_gradient(&sys, &ck, &ck.selector, &batch, &opts).and_then(|lg| {
                if !lg.breakdown.total.is_finite() {
                    return Err(Error::NumericOverflow { node: 0 });
                }
                let mut grads = lg.theta.clone();
                grads.push(lg.raw_a);
                grads.push(lg.raw_b);
                let mut next = params.clone();
                let mut next_adam = adam.clone();
                adam_step(&mut next, &grads, &mut next_adam, cfg.lr)?;
                Ok((lg.breakdown, next, next_adam))
            });
            let row = match result {
                Ok((b, next, next_adam)) => {
                    bad = 0;
                    params = next;
                    adam = next_adam;
                    let k = params.len();
                    ck.set_flat_theta(&params[..k - 2])?;
                    ck.gains = GainParams {
                        raw_a: params[k - 2],
                        raw_b: params[k - 1],
                    };
                    HistoryRow {
                        step,
                        epoch,
                        loss: b.total,
                        alpha,
                        risk_c1: b.risk_c1,
                        risk_c2: b.risk_c2,
                        risk_c3: b.risk_c3,
                        risk_c4: b.risk_c4,
                    }
                }
                Err(e) => {
                    bad += 1;
                    log::warn!("step {step}: rejected ({e})");
                    let row = HistoryRow {
                        step,
                        epoch,
                        loss: f64::NAN,
                        alpha,
                        risk_c1: f64::NAN,
                        risk_c2: f64::NAN,
                        risk_c3: f64::NAN,
                        risk_c4: f64::NAN,
                    };
                    if bad >= MAX_BAD_STEPS {
                        ck.history.push(row);
                        progress(&row);
                        return Ok(TrainOutcome {
                            checkpoint: ck,
                            diverged: Some(Error::TrainingDiverged {
                                step,
                                consecutive: bad,
                            }),
                        });
                    }
                    row
                }
            };
            ck.history.push(row);
            progress(&row);
            step += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.6}",
            ck.history.last().map_or(f64::NAN, |r| r.loss)
        );
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        diverged: None,
    })
}

/// Centered moving average with window `w` (shrinking at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let h = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dataset_stays_inside_sets() {
        let sys = crate::systems::make_system("pvtol").unwrap();
        let d = sample_dataset(&sys, 500, 3);
        for s in &d {
            assert!(sys.x_set.contains(&s.x) && sys.x_set.contains(&s.x_star));
            assert!(sys.u_set.contains(&s.u_star));
            assert!(s.w.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0);
        }
        assert_eq!(d, sample_dataset(&sys, 500, 3));
        assert_ne!(d, sample_dataset(&sys, 500, 4));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.5, 1e-3], &mut s, 0.01).unwrap();
        for (got, want) in p.iter().zip([-0.01, 0.01, -0.01]) {
            assert!((got - want).abs() < 1e-7, "{got}");
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut p, &[-4.0], &mut s, 0.001).unwrap();
            last = p[0] - before;
        }
        assert!((last - 0.001).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut s, 0.1).is_err());
        assert_eq!((p[0], s.t), (1.0, 0));
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            alpha_init: Some(3.0),
            mu_init: Some(0.7),
            lr: 0.002,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_config(&cfg.to_config()).unwrap(), cfg);
        let bad = Config::parse("epochz = 2").unwrap();
        assert!(TrainConfig::from_config(&bad).is_err());
    }

    #[test]
    fn tiny_run_records_one_row_per_step() {
        let cfg = TrainConfig {
            n_train: 50,
            batch_size: 16,
            epochs: 2,
            hidden: 8,
            c: 3,
            ..Default::default()
        };
        let ck = train(&cfg).unwrap();
        assert_eq!(ck.history.len(), 8);
        for (i, r) in ck.history.iter().enumerate() {
            assert_eq!(r.step, i);
        }
        assert_eq!(train(&cfg).unwrap(), ck);
    }

    #[test]
    fn smoothing_preserves_constants() {
        assert_eq!(smooth(&[2.0; 7], 3), vec![2.0; 7]);
    }

    proptest! {
        #[test]
        fn gains_stay_ordered_after_steps(raw_a in -20.0..20.0f64, raw_b in -20.0..20.0f64, ga in -1e3..1e3f64, gb in -1e3..1e3f64) {
            let mut p = vec![raw_a, raw_b];
            let mut s = AdamState::new(2);
            for _ in 0..5 {
                adam_step(&mut p, &[ga, gb], &mut s, 0.5).unwrap();
                let g = GainParams { raw_a: p[0], raw_b: p[1] };
                prop_assert!(g.mu() > 0.0 && g.alpha() > g.mu());
            }
        }
    }
}
