//! Mini-batch maximum-likelihood training with Adam, global-norm gradient
//! clipping and validation-based early stopping.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, DatasetMatrix, Splits};
use crate::diffcore::{DiffError, ParamSet, Tensor};
use crate::flow::{FlowError, FlowModel};

/// Rows per no-grad evaluation pass.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training fault at step {step}: {message}")]
    Fault { step: u64, message: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_max_steps() -> u64 {
    50_000
}
fn default_clip() -> f64 {
    5.0
}
fn default_patience() -> usize {
    20
}
fn default_eval_every() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Validation checks without improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps: default_max_steps(),
            clip_norm: default_clip(),
            patience: default_patience(),
            eval_every: default_eval_every(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !positive(self.clip_norm) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "batch_size, patience and eval_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Global L2 norm of all gradients, rescaled in place to at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(params: &mut ParamSet, clip_norm: f64, step: u64) -> Result<f64, TrainError> {
    let sq: f64 = params.iter().flat_map(|(_, p)| p.grad.data().iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::Fault {
            step,
            message: "gradient is not finite".into(),
        });
    }
    if norm > clip_norm {
        let k = clip_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    Ok(norm)
}

/// Bias-corrected Adam update; gradients are zeroed afterwards.
pub fn optimizer_step(params: &mut ParamSet, state: &mut OptimizerState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((_, p), (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((w, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
        }
    }
    params.zero_grads();
}

/// One validation checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean training-batch loss since the previous record.
    pub train_nll: f64,
    pub val_nll: f64,
}

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} train_nll={} val_nll={}", self.step, self.train_nll, self.val_nll)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EvalRecord>,
    pub best_step: u64,
    pub best_val_nll: f64,
    pub seconds: f64,
}

/// Mean log-likelihood per row and its standard error (0 for one row).
pub fn evaluate(model: &FlowModel, matrix: &DatasetMatrix) -> Result<(f64, f64), FlowError> {
    let lp = model.log_densities(&matrix.to_tensor(), EVAL_CHUNK)?;
    let n = lp.len() as f64;
    let mean = lp.iter().sum::<f64>() / n;
    if lp.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

fn fault(step: u64, e: FlowError) -> TrainError {
    match e {
        FlowError::Diff(DiffError::NonFinite { op, .. }) => TrainError::Fault {
            step,
            message: format!("non-finite value in {op}"),
        },
        other => TrainError::Flow(other),
    }
}

/// Train `model` in place. `on_eval` sees every validation record as it is
/// produced. On return the model holds the best-validation parameters, also
/// when a training fault aborts the run.
pub fn train(
    model: &mut FlowModel,
    splits: &Splits,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let mut report = TrainReport {
        history: Vec::new(),
        best_step: 0,
        best_val_nll: f64::INFINITY,
        seconds: 0.0,
    };
    if config.max_steps == 0 {
        return Ok(report);
    }
    model.params.zero_grads();
    let mut state = OptimizerState::new(&model.params);
    let mut best = model.params.flat_values();
    let mut stale = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0u64);
    let mut step = 0u64;
    let mut epoch = 0u64;

    let outcome: Result<(), TrainError> = 'run: loop {
        for batch in batches(&splits.train, config.batch_size, config.seed, epoch) {
            step += 1;
            let loss = match model.loss_and_grad(&batch, true) {
                Ok(l) => l,
                Err(e) => break 'run Err(fault(step, e)),
            };
            if let Err(e) = clip_gradients(&mut model.params, config.clip_norm, step) {
                break 'run Err(e);
            }
            optimizer_step(&mut model.params, &mut state, config.learning_rate);
            loss_sum += loss;
            loss_count += 1;

            let last = step == config.max_steps;
            if step.is_multiple_of(config.eval_every) || last {
                let val_nll = match evaluate(model, &splits.val) {
                    Ok((ll, _)) => -ll,
                    Err(e) => break 'run Err(fault(step, e)),
                };
                if !val_nll.is_finite() {
                    break 'run Err(TrainError::Fault {
                        step,
                        message: "validation NLL is not finite".into(),
                    });
                }
                let record = EvalRecord {
                    step,
                    train_nll: loss_sum / loss_count as f64,
                    val_nll,
                };
                (loss_sum, loss_count) = (0.0, 0);
                on_eval(&record);
                report.history.push(record);
                if val_nll < report.best_val_nll {
                    report.best_val_nll = val_nll;
                    report.best_step = step;
                    best = model.params.flat_values();
                    stale = 0;
                } else {
                    stale += 1;
                }
                if last || stale >= config.patience {
                    break 'run Ok(());
                }
            }
        }
        epoch += 1;
    };
    model.params.set_flat_values(&best).map_err(FlowError::from)?;
    model.params.zero_grads();
    report.seconds = start.elapsed().as_secs_f64();
    outcome.map(|()| report)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::conditioner::{head_bias_name, head_weight_name};
    use crate::data::make_splits;
    use crate::flow::{FlowConfig, HeadType};

    fn single(values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(values)).unwrap();
        p
    }

    fn set_grad(p: &mut ParamSet, g: Vec<f64>) {
        p.get_mut("w").unwrap().grad = Tensor::vector(g);
    }

    #[test]
    fn clipping_examples() {
        let mut p = single(vec![0.0, 0.0]);
        set_grad(&mut p, vec![0.6, 0.8]);
        assert!((clip_gradients(&mut p, 5.0, 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(p.get("w").unwrap().grad.data(), &[0.6, 0.8]);

        set_grad(&mut p, vec![3.0, 4.0]);
        assert_eq!(clip_gradients(&mut p, 1.0, 1).unwrap(), 5.0);
        let g = p.get("w").unwrap().grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        set_grad(&mut p, vec![f64::NAN, 1.0]);
        assert!(matches!(clip_gradients(&mut p, 1.0, 17), Err(TrainError::Fault { step: 17, .. })));
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(g in prop::collection::vec(-1e3f64..1e3, 1..20), clip in 1e-3f64..10.0) {
            let mut p = single(vec![0.0; g.len()]);
            set_grad(&mut p, g);
            clip_gradients(&mut p, clip, 0).unwrap();
            let norm = p.flat_grads().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= clip + 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(vec![1.0, -2.0]);
        let mut s = OptimizerState::new(&p);
        optimizer_step(&mut p, &mut s, 0.1);
        assert_eq!(p.value("w").data(), &[1.0, -2.0]);
    }

    fn bowl_step(p: &mut ParamSet, s: &mut OptimizerState, lr: f64) {
        let w = p.value("w").data().to_vec();
        set_grad(p, w.iter().map(|v| 2.0 * v).collect());
        optimizer_step(p, s, lr);
    }

    #[test]
    fn one_step_descends() {
        let mut p = single(vec![100.0]);
        let mut s = OptimizerState::new(&p);
        bowl_step(&mut p, &mut s, 1e-2);
        assert!(p.value("w").data()[0].abs() < 100.0);
        assert!(p.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = single(vec![3.0, -2.0, 0.5]);
        let mut s = OptimizerState::new(&p);
        for _ in 0..2000 {
            bowl_step(&mut p, &mut s, 1e-2);
        }
        assert!(p.value("w").data().iter().all(|v| v.abs() < 1e-3), "{:?}", p.value("w").data());
    }

    fn normal_rows(n: usize, seed: u64) -> DatasetMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DatasetMatrix::new(n, 1, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn small(dim: usize, head: HeadType) -> FlowConfig {
        FlowConfig {
            embed: 8,
            heads: 2,
            layers: 1,
            mlp_hidden: 8,
            cdf_hidden: 8,
            ..FlowConfig::new(dim, head)
        }
    }

    fn identity_affine(dim: usize) -> FlowModel {
        let mut m = FlowModel::init(small(dim, HeadType::Affine), 0).unwrap();
        m.params.get_mut(&head_weight_name(0)).unwrap().value.data_mut().fill(0.0);
        m.params.get_mut(&head_bias_name(0)).unwrap().value.data_mut().fill(0.0);
        m
    }

    #[test]
    fn evaluate_examples() {
        let model = identity_affine(1);
        let data = normal_rows(100_000, 1);
        let (mean, se) = evaluate(&model, &data).unwrap();
        let expected = -0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((mean - expected).abs() < 3.0 * se, "{mean} ± {se}");

        let one = DatasetMatrix::new(1, 1, vec![0.3]).unwrap();
        assert_eq!(evaluate(&model, &one).unwrap().1, 0.0);

        let small = normal_rows(50, 2);
        let doubled = DatasetMatrix::new(100, 1, [small.data(), small.data()].concat()).unwrap();
        let (a, b) = (evaluate(&model, &small).unwrap().0, evaluate(&model, &doubled).unwrap().0);
        assert!((a - b).abs() < 1e-12);
    }

    fn normal_splits() -> Splits {
        make_splits(&normal_rows(10_000, 3), [0.8, 0.1, 0.1], 0).unwrap()
    }

    #[test]
    fn affine_flow_learns_standard_normal() {
        let splits = normal_splits();
        let mut model = FlowModel::init(small(1, HeadType::Affine), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_steps: 3000,
            eval_every: 250,
            patience: 100,
            ..TrainConfig::default()
        };
        train(&mut model, &splits, &cfg, |_| {}).unwrap();
        let mu = model.transform(&[0.0]).unwrap()[0];
        let sigma = model.transform(&[1.0]).unwrap()[0] - mu;
        // Closed-form MLE of the training sample: y = (x − mean)/std.
        let t = &splits.train;
        let n = t.rows() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mu + mean / std).abs() < 0.05, "mu {mu}");
        assert!((sigma - 1.0 / std).abs() < 0.05, "sigma {sigma}");
        assert!(mu.abs() < 0.05 && (sigma - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let splits = normal_splits();
        let mut model = FlowModel::init(small(1, HeadType::Cdf), 2).unwrap();
        let before = model.params.flat_values();
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &splits, &cfg, |_| panic!("no evaluation expected")).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(model.params.flat_values(), before);
    }

    fn short_run(seed: u64) -> (TrainReport, FlowModel) {
        let splits = make_splits(&crate::data::toy_generate(crate::data::Toy::TwoMoons, 600, 1).unwrap(), [0.8, 0.1, 0.1], 0).unwrap();
        let mut model = FlowModel::init(small(2, HeadType::Cdf), 3).unwrap();
        let cfg = TrainConfig {
            max_steps: 60,
            eval_every: 10,
            batch_size: 64,
            learning_rate: 5e-3,
            seed,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &splits, &cfg, |_| {}).unwrap();
        (report, model)
    }

    #[test]
    fn training_is_deterministic() {
        let (a, ma) = short_run(5);
        let (b, mb) = short_run(5);
        assert_eq!(a.history, b.history);
        assert_eq!((a.best_step, a.best_val_nll.to_bits()), (b.best_step, b.best_val_nll.to_bits()));
        assert_eq!(ma.params.flat_values(), mb.params.flat_values());
        let (c, _) = short_run(6);
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn best_snapshot_is_restored() {
        let splits = make_splits(&crate::data::toy_generate(crate::data::Toy::TwoMoons, 600, 1).unwrap(), [0.8, 0.1, 0.1], 0).unwrap();
        let mut model = FlowModel::init(small(2, HeadType::Cdf), 3).unwrap();
        // A large step size makes validation NLL noisy, so the best record is
        // rarely the last one.
        let cfg = TrainConfig {
            max_steps: 80,
            eval_every: 5,
            batch_size: 32,
            learning_rate: 5e-2,
            patience: 3,
            ..TrainConfig::default()
        };
        let mut lines = Vec::new();
        let report = train(&mut model, &splits, &cfg, |r| lines.push(r.to_string())).unwrap();
        let best = report.history.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
        assert_eq!(best, report.best_val_nll);
        let (ll, _) = evaluate(&model, &splits.val).unwrap();
        assert!((-ll - report.best_val_nll).abs() < 1e-12);
        assert_eq!(lines.len(), report.history.len());
        assert!(lines[0].starts_with("step=5 train_nll="));
        assert!(lines[0].contains(" val_nll="));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!((cfg.learning_rate, cfg.batch_size, cfg.max_steps), (1e-3, 256, 50_000));
        assert_eq!((cfg.clip_norm, cfg.patience, cfg.eval_every), (5.0, 20, 500));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        assert!(TrainConfig { patience: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..cfg }.validate().is_err());
    }
}
