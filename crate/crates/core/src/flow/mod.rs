//! A single autoregressive flow: transformer conditioner, one per-dimension
//! transform head, and a base density.
//!
//! `log p(x) = log p_base(y) + Σ_i log |∂y_i/∂x_i|`.

mod heads;
mod sample;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioner::{self, head_bias_name, ConditionerConfig, Projection};
use crate::diffcore::{DiffError, ParamSet, Tape, Tensor, Var};
use crate::transforms::{cdf_psi_dim, identity_raw_derivative, mix_entry_count, spline_psi_dim, TransformError};

pub use sample::{draw_base, invert, sample, sample_with_noise, INVERSION_TOL, MAX_REDRAWS};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("inversion failed for sample {index}: {source}")]
    Inversion { index: usize, source: TransformError },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Affine,
    Cdf,
    SharedCdf,
    Spline,
}

impl HeadType {
    pub const ALL: [HeadType; 4] = [HeadType::Affine, HeadType::Cdf, HeadType::SharedCdf, HeadType::Spline];

    pub fn name(self) -> &'static str {
        match self {
            HeadType::Affine => "affine",
            HeadType::Cdf => "cdf",
            HeadType::SharedCdf => "shared_cdf",
            HeadType::Spline => "spline",
        }
    }

    pub fn base(self) -> BaseDistribution {
        match self {
            HeadType::Cdf | HeadType::SharedCdf => BaseDistribution::UnitUniform,
            HeadType::Affine | HeadType::Spline => BaseDistribution::StandardNormal,
        }
    }
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeadType::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| format!("unknown head type `{s}` (expected affine, cdf, shared_cdf or spline)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseDistribution {
    StandardNormal,
    UnitUniform,
}

impl BaseDistribution {
    /// Log-density of a single point; `None` outside the support.
    pub fn log_density(self, y: &[f64]) -> Option<f64> {
        match self {
            BaseDistribution::StandardNormal => {
                Some(y.iter().map(|v| -0.5 * (v * v + (2.0 * PI).ln())).sum())
            }
            // Closed interval: a sigmoid output may round to exactly 0 or 1.
            BaseDistribution::UnitUniform => y.iter().all(|v| (0.0..=1.0).contains(v)).then_some(0.0),
        }
    }
}

fn default_embed() -> usize {
    32
}
fn default_heads() -> usize {
    8
}
fn default_layers() -> usize {
    3
}
fn default_mlp_hidden() -> usize {
    64
}
fn default_head() -> HeadType {
    HeadType::Cdf
}
fn default_cdf_hidden() -> usize {
    128
}
fn default_bins() -> usize {
    8
}
fn default_bound() -> f64 {
    3.0
}
fn default_blocks() -> usize {
    2
}

/// Architecture of a flow model. Serialized keys follow the run-config
/// layout (`D`, `E`, `H`, `K`, `B`); long names are accepted as aliases.
/// An absent or zero `D` is filled in from the data by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(rename = "D", alias = "dim", default)]
    pub dim: usize,
    #[serde(rename = "E", alias = "embed", default = "default_embed")]
    pub embed: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_head")]
    pub head_type: HeadType,
    #[serde(rename = "H", alias = "cdf_hidden", default = "default_cdf_hidden")]
    pub cdf_hidden: usize,
    #[serde(rename = "K", alias = "spline_bins", default = "default_bins")]
    pub spline_bins: usize,
    #[serde(rename = "B", alias = "spline_bound", default = "default_bound")]
    pub spline_bound: f64,
    #[serde(rename = "blocks", alias = "spline_blocks", default = "default_blocks")]
    pub spline_blocks: usize,
}

impl FlowConfig {
    /// Default architecture for `dim` inputs with the given head.
    pub fn new(dim: usize, head_type: HeadType) -> Self {
        Self {
            dim,
            embed: default_embed(),
            heads: default_heads(),
            layers: default_layers(),
            mlp_hidden: default_mlp_hidden(),
            head_type,
            cdf_hidden: default_cdf_hidden(),
            spline_bins: default_bins(),
            spline_bound: default_bound(),
            spline_blocks: default_blocks(),
        }
    }

    pub fn conditioner(&self) -> ConditionerConfig {
        let projection = match self.head_type {
            HeadType::Affine => Projection::Linear { psi_dim: 2, count: 1 },
            HeadType::Cdf => Projection::Linear {
                psi_dim: cdf_psi_dim(self.cdf_hidden),
                count: 1,
            },
            HeadType::SharedCdf => Projection::Identity,
            HeadType::Spline => Projection::Linear {
                psi_dim: spline_psi_dim(self.spline_bins),
                count: self.spline_blocks,
            },
        };
        ConditionerConfig {
            dim: self.dim,
            embed: self.embed,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            projection,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        self.conditioner().validate().map_err(FlowError::Config)?;
        match self.head_type {
            HeadType::Cdf | HeadType::SharedCdf if self.cdf_hidden == 0 => {
                Err(FlowError::Config("H must be at least 1".into()))
            }
            HeadType::Spline if self.spline_bins < 2 => Err(FlowError::Config("K must be at least 2".into())),
            HeadType::Spline if !(self.spline_bound > 0.0 && self.spline_bound.is_finite()) => {
                Err(FlowError::Config("B must be positive".into()))
            }
            HeadType::Spline if self.spline_blocks == 0 => {
                Err(FlowError::Config("blocks must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form count of learned parameters (pseudo-parameters excluded).
    pub fn param_count(&self) -> usize {
        let extra = match self.head_type {
            HeadType::SharedCdf => {
                let (h, e) = (self.cdf_hidden, self.embed);
                3 * h + 1 + e * h + e
            }
            HeadType::Spline => self.spline_blocks * mix_entry_count(self.dim),
            _ => 0,
        };
        self.conditioner().param_count() + extra
    }

    /// Width of each per-dimension pseudo-parameter vector (all blocks for
    /// a spline stack).
    pub fn psi_dim(&self) -> usize {
        match self.conditioner().projection {
            Projection::Identity => self.embed,
            Projection::Linear { psi_dim, count } => psi_dim * count,
        }
    }
}

pub(crate) fn mix_name(block: usize) -> String {
    format!("mix.{block}")
}

/// Per-point output of [`FlowModel::log_prob`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbResult {
    pub y: Vec<f64>,
    pub logdet: f64,
    pub logp: f64,
}

/// Tape handles for a batched forward pass over `N` rows.
pub struct FlowOutputs {
    /// `[N, D]`
    pub y: Var,
    /// `[N]`
    pub logdet: Var,
    /// `[N]`
    pub logp: Var,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamSet,
}

impl FlowModel {
    /// Freshly initialized model.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond = config.conditioner();
        let mut params = ParamSet::new();
        conditioner::init_params(&cond, &mut rng, &mut params)?;
        match config.head_type {
            HeadType::Affine => {}
            HeadType::Cdf => {
                let h = config.cdf_hidden;
                let bias = params.get_mut(&head_bias_name(0)).expect("head bias").value.data_mut();
                bias[h..2 * h].copy_from_slice(&heads::hidden_bias_spread(h));
                bias[2 * h..3 * h].fill(heads::output_weight_init(h));
            }
            HeadType::SharedCdf => heads::init_shared_phi(&config, &mut rng, &mut params)?,
            HeadType::Spline => {
                let k = config.spline_bins;
                for j in 0..config.spline_blocks {
                    let bias = params.get_mut(&head_bias_name(j)).expect("head bias");
                    bias.value.data_mut()[2 * k..].fill(identity_raw_derivative());
                    if config.dim > 1 {
                        params.insert(mix_name(j), Tensor::zeros(&[mix_entry_count(config.dim)]))?;
                    }
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn head_type(&self) -> HeadType {
        self.config.head_type
    }

    pub fn base(&self) -> BaseDistribution {
        self.config.head_type.base()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize, FlowError> {
        if x.rank() != 2 || x.shape()[1] != self.dim() {
            return Err(DiffError::Shape {
                op: "flow input",
                left: x.shape().to_vec(),
                right: vec![self.dim()],
            }
            .into());
        }
        Ok(x.shape()[0])
    }

    /// Record the full forward pass for a batch `x: [N, D]` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &crate::diffcore::Bound,
        x: &Tensor,
    ) -> Result<FlowOutputs, FlowError> {
        let n = self.check_batch(x)?;
        let d = self.dim();
        let cond = self.config.conditioner();
        let hidden = conditioner::condition(tape, bound, &cond, x)?;
        let xs = tape.constant(x.clone().reshape(&[n * d])?);
        let (y, ld) = heads::transform(tape, bound, &self.config, hidden, xs, n)?;
        let y = tape.reshape(y, &[n, d])?;
        let ld = tape.reshape(ld, &[n, d])?;
        let logdet = tape.sum_last(ld)?;
        let logp = match self.base() {
            BaseDistribution::StandardNormal => {
                let sq = tape.mul(y, y)?;
                let sq = tape.sum_last(sq)?;
                let base = tape.scale(sq, -0.5)?;
                let norm = tape.constant(Tensor::scalar(-0.5 * d as f64 * (2.0 * PI).ln()));
                let base = tape.add(base, norm)?;
                tape.add(base, logdet)?
            }
            BaseDistribution::UnitUniform => {
                if let Some(v) = tape.value(y).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(FlowError::Invariant(format!("uniform base received y = {v} outside [0, 1]")));
                }
                logdet
            }
        };
        Ok(FlowOutputs { y, logdet, logp })
    }

    /// Per-row `(y, logdet, logp)` without recording gradients.
    pub fn log_prob_batch(&self, x: &Tensor) -> Result<Vec<LogProbResult>, FlowError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        let d = self.dim();
        let y = tape.value(out.y).data();
        let ld = tape.value(out.logdet).data();
        let lp = tape.value(out.logp).data();
        Ok((0..ld.len())
            .map(|r| LogProbResult {
                y: y[r * d..(r + 1) * d].to_vec(),
                logdet: ld[r],
                logp: lp[r],
            })
            .collect())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<LogProbResult, FlowError> {
        let batch = Tensor::new(&[1, x.len()], x.to_vec()).map_err(FlowError::from)?;
        Ok(self.log_prob_batch(&batch)?.remove(0))
    }

    /// Per-row log-densities, evaluated in chunks to bound tape size.
    pub fn log_densities(&self, x: &Tensor, chunk: usize) -> Result<Vec<f64>, FlowError> {
        let n = self.check_batch(x)?;
        let d = self.dim();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let part = Tensor::matrix(end - start, d, x.data()[start * d..end * d].to_vec())?;
            out.extend(self.log_prob_batch(&part)?.into_iter().map(|r| r.logp));
        }
        Ok(out)
    }

    /// `−mean_n log p(x_n)` recorded on `tape` against `bound` parameters.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        bound: &crate::diffcore::Bound,
        batch: &Tensor,
    ) -> Result<Var, FlowError> {
        if batch.rank() == 2 && batch.shape()[0] == 0 {
            return Err(FlowError::Invariant("empty batch".into()));
        }
        let out = self.forward(tape, bound, batch)?;
        let mean = tape.mean(out.logp)?;
        Ok(tape.neg(mean)?)
    }

    /// Loss value and per-parameter gradients (accumulated into `params`).
    pub fn loss_and_grad(&mut self, batch: &Tensor, checked: bool) -> Result<f64, FlowError> {
        let mut tape = if checked { Tape::checked() } else { Tape::new() };
        let bound = self.params.bind(&mut tape);
        let loss = self.nll_loss(&mut tape, &bound, batch)?;
        tape.backward(loss)?;
        self.params.accumulate_grads(&tape, &bound);
        Ok(tape.value(loss).item())
    }

    /// Forward map `x → y` for one point.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        Ok(self.log_prob(x)?.y)
    }

    /// Central-difference Jacobian `∂y_i/∂x_j`, row-major `D×D`.
    pub fn numerical_jacobian(&self, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>, FlowError> {
        if step.is_nan() || step <= 0.0 {
            return Err(FlowError::Invariant("jacobian step must be positive".into()));
        }
        let d = self.dim();
        // All 2D perturbed points go through one batched pass.
        let mut rows = Vec::with_capacity(2 * d * d);
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = x.to_vec();
                p[j] += sign * step;
                rows.extend(p);
            }
        }
        let out = self.log_prob_batch(&Tensor::matrix(2 * d, d, rows)?)?;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let (plus, minus) = (&out[2 * j].y, &out[2 * j + 1].y);
            for i in 0..d {
                jac[i][j] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        Ok(jac)
    }
}
